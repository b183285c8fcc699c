"""Byte-pair-encoding subword segmentation.

Words end with the END_OF_WORD marker on their last symbol, so a segmented
sentence can be joined back into the original words.
"""
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Collection, Dict, Iterable, List, Sequence, Tuple, Union

from apps.corpus.schemas import END_OF_WORD, ParallelCorpus, Sentence

logger = logging.getLogger(__name__)

Symbols = Tuple[str, ...]
MergeRule = Tuple[str, str]


def _symbols(word: str) -> Symbols:
    return tuple(word[:-1]) + (word[-1] + END_OF_WORD,)


def _merge_word(symbols: Symbols, rule: MergeRule) -> Symbols:
    left, right = rule
    out: List[str] = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


@dataclass
class SubwordModel:
    merges: Tuple[MergeRule, ...] = ()
    _ranks: Dict[MergeRule, int] = field(default_factory=dict, init=False, repr=False, compare=False)
    _cache: Dict[str, Symbols] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.merges = tuple(tuple(rule) for rule in self.merges)
        self._ranks = {rule: rank for rank, rule in enumerate(self.merges)}

    def segment_word(self, word: str) -> Symbols:
        if word in self._cache:
            return self._cache[word]
        symbols = _symbols(word)
        while len(symbols) > 1:
            candidates = [
                (self._ranks[pair], pair)
                for pair in zip(symbols, symbols[1:])
                if pair in self._ranks
            ]
            if not candidates:
                break
            symbols = _merge_word(symbols, min(candidates)[1])
        self._cache[word] = symbols
        return symbols

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text("".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SubwordModel":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(tuple(line.split(" ")) for line in lines if line))


def learn_bpe(corpora: Sequence[ParallelCorpus], n_merges: int, reserved: Collection[str] = ()) -> SubwordModel:
    """Greedy most-frequent-pair merges over source and target words.

    Ties go to the lexicographically smallest pair; learning stops early
    once no adjacent pair is left.
    """
    words: Counter = Counter()
    for corpus in corpora:
        for src, tgt in corpus.pairs:
            words.update(w for w in src if w not in reserved)
            words.update(w for w in tgt if w not in reserved)
    vocab: Dict[Symbols, int] = Counter()
    for word, freq in words.items():
        vocab[_symbols(word)] += freq

    merges: List[MergeRule] = []
    for _ in range(n_merges):
        pairs: Counter = Counter()
        for symbols, freq in vocab.items():
            for pair in zip(symbols, symbols[1:]):
                pairs[pair] += freq
        if not pairs:
            break
        best = min(pairs.items(), key=lambda item: (-item[1], item[0]))[0]
        merges.append(best)
        merged: Dict[Symbols, int] = Counter()
        for symbols, freq in vocab.items():
            merged[_merge_word(symbols, best)] += freq
        vocab = merged
    logger.info(f"Learned {len(merges)} BPE merges from {len(words)} word types")
    return SubwordModel(tuple(merges))


def apply_bpe(model: SubwordModel, sentence: Union[str, Sequence[str]], reserved: Collection[str] = ()) -> Sentence:
    """Segment a sentence; reserved tokens such as tags pass through unsplit."""
    words = sentence.split() if isinstance(sentence, str) else sentence
    out: List[str] = []
    for word in words:
        if word in reserved:
            out.append(word)
        else:
            out.extend(model.segment_word(word))
    return tuple(out)


def detokenize(tokens: Iterable[str], reserved: Collection[str] = ()) -> Sentence:
    """Inverse of apply_bpe: glue subwords back into words."""
    words: List[str] = []
    pending = ""
    for token in tokens:
        if token in reserved:
            if pending:
                words.append(pending)
                pending = ""
            words.append(token)
        elif token.endswith(END_OF_WORD):
            words.append(pending + token[: -len(END_OF_WORD)])
            pending = ""
        else:
            pending += token
    if pending:
        words.append(pending)
    return tuple(words)


def segment_corpus(model: SubwordModel, corpus: ParallelCorpus, reserved: Collection[str] = ()) -> ParallelCorpus:
    pairs = tuple((apply_bpe(model, src, reserved), apply_bpe(model, tgt, reserved)) for src, tgt in corpus.pairs)
    return corpus.replace(pairs=pairs)
