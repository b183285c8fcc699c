import logging
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from apps.corpus.schemas import BOS_ID, EOS_ID, PAD_ID, SPECIAL_TOKENS, UNK_ID, ParallelCorpus
from core.exceptions import ConfigError, MappingError, VocabError

logger = logging.getLogger(__name__)

UNUSED_SLOT = "<unused{}>"


def is_unused_slot(token: str) -> bool:
    return token.startswith("<unused") and token.endswith(">")


class Vocab:
    """Bijective token <-> id table.

    Special tokens take ids 0..3, tag tokens follow, corpus tokens come last.
    """

    def __init__(self, tokens: Sequence[str], n_reserved: int = len(SPECIAL_TOKENS)):
        self.tokens: Tuple[str, ...] = tuple(tokens)
        if tuple(self.tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise VocabError(f"vocabulary must start with {SPECIAL_TOKENS}")
        self.ids: Dict[str, int] = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise VocabError("duplicate tokens in vocabulary")
        self.n_reserved = n_reserved

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens and self.n_reserved == other.n_reserved

    @property
    def reserved(self) -> Tuple[str, ...]:
        return self.tokens[: self.n_reserved]

    def id_of(self, token: str) -> int:
        return self.ids.get(token, UNK_ID)

    def token_of(self, index: int) -> str:
        if not 0 <= index < len(self.tokens):
            raise VocabError(f"id {index} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[index]

    def encode(self, tokens: Iterable[str]) -> List[int]:
        return [self.ids.get(tok, UNK_ID) for tok in tokens]

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> Tuple[str, ...]:
        out = []
        for index in ids:
            index = int(index)
            if strip_special and index in (PAD_ID, BOS_ID):
                continue
            if strip_special and index == EOS_ID:
                break
            out.append(self.token_of(index))
        return tuple(out)

    def remap(self, mapping: np.ndarray, size: int) -> "Vocab":
        """Place child token i at slot mapping[i] of a table of `size` entries.

        Slots no child token lands on are filled with unique placeholders.
        """
        if len(mapping) != len(self):
            raise MappingError(f"mapping covers {len(mapping)} tokens, vocabulary has {len(self)}")
        slots = [UNUSED_SLOT.format(i) for i in range(size)]
        for child_id, parent_id in enumerate(mapping):
            slots[int(parent_id)] = self.tokens[child_id]
        return Vocab(slots, self.n_reserved)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text("".join(f"{tok}\n" for tok in self.tokens), encoding="utf-8")
        (Path(f"{path}.reserved")).write_text(f"{self.n_reserved}\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocab":
        path = Path(path)
        tokens = path.read_text(encoding="utf-8").splitlines()
        reserved_file = Path(f"{path}.reserved")
        n_reserved = int(reserved_file.read_text().strip()) if reserved_file.exists() else len(SPECIAL_TOKENS)
        return cls(tokens, n_reserved)


def build_vocab(corpora: Sequence[ParallelCorpus], cap: int, tags: Sequence[str] = ()) -> Vocab:
    """Reserved tokens, then corpus tokens by descending frequency (ties lexicographic)."""
    reserved = list(SPECIAL_TOKENS) + [t for t in dict.fromkeys(tags) if t not in SPECIAL_TOKENS]
    if cap < len(reserved):
        raise ConfigError(f"vocabulary cap {cap} is below the {len(reserved)} reserved tokens")
    counts: Counter = Counter()
    for corpus in corpora:
        for src, tgt in corpus.pairs:
            counts.update(src)
            counts.update(tgt)
    for tok in reserved:
        counts.pop(tok, None)
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    kept = [tok for tok, _ in ranked[: cap - len(reserved)]]
    if len(ranked) > len(kept):
        logger.info(f"Vocabulary capped at {cap}: {len(ranked) - len(kept)} token types map to UNK")
    return Vocab(reserved + kept, len(reserved))


def random_vocab_map(parent: Vocab, child: Vocab, seed: int) -> np.ndarray:
    """Child id -> parent id table for reusing a parent model's embeddings.

    Reserved tokens and tokens already known to the parent keep the parent's
    id; every other child token gets a distinct, randomly drawn parent slot
    that no child token already occupies.
    """
    mapping = np.full(len(child), -1, dtype=np.int64)
    for child_id, tok in enumerate(child.tokens):
        if tok in parent.ids:
            mapping[child_id] = parent.ids[tok]
        elif child_id < child.n_reserved:
            raise MappingError(f"reserved token '{tok}' is unknown to the parent vocabulary")

    new_ids = np.flatnonzero(mapping < 0)
    taken = set(mapping[mapping >= 0].tolist())
    free = np.array([i for i in range(parent.n_reserved, len(parent)) if i not in taken], dtype=np.int64)
    if len(new_ids) > len(free):
        raise MappingError(
            f"{len(new_ids)} new child tokens but only {len(free)} free parent slots"
        )
    rng = np.random.default_rng(seed)
    mapping[new_ids] = rng.permutation(free)[: len(new_ids)]
    logger.info(f"Mapped {len(new_ids)} new tokens onto parent slots, {len(child) - len(new_ids)} kept")
    return mapping
