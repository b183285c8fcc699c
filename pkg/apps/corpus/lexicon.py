from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

from apps.corpus.bpe import SubwordModel, apply_bpe, detokenize
from apps.corpus.schemas import SPECIAL_TOKENS, Sentence
from apps.corpus.vocab import Vocab, is_unused_slot


@dataclass
class Lexicon:
    """Word text <-> model ids: subword segmentation plus vocabulary.

    `tags` are the reserved source-prefix tokens; they bypass segmentation
    and are dropped from decoded output.
    """

    subwords: SubwordModel
    vocab: Vocab
    tags: Tuple[str, ...] = ()

    @property
    def reserved(self) -> frozenset:
        return frozenset(SPECIAL_TOKENS) | frozenset(self.tags)

    def segment(self, words: Sequence[str]) -> Sentence:
        return apply_bpe(self.subwords, words, self.reserved)

    def encode(self, words: Sequence[str]) -> List[int]:
        return self.vocab.encode(self.segment(words))

    def decode(self, ids: Iterable[int]) -> Sentence:
        """Ids (EOS-terminated or not) back to words, tags and specials removed."""
        reserved = self.reserved
        subwords = [tok for tok in self.vocab.decode(ids) if tok not in reserved and not is_unused_slot(tok)]
        return detokenize(subwords)
