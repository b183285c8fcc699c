from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from core.exceptions import DataError, GeneratorError, SchemeError

PAD = "<pad>"
BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(4)

END_OF_WORD = "</w>"

Sentence = Tuple[str, ...]
Pair = Tuple[Sentence, Sentence]


class Split(str, Enum):
    TRAIN = "train"
    DEV = "dev"
    TEST = "test"


class ParallelCorpus(BaseModel):
    """Bilingual sentence pairs of one (languages, domain, split) identity.

    `groups` optionally carries one corpus-group id per pair, which is how
    group identity travels with merged data.
    """

    model_config = ConfigDict(frozen=True)

    name: str
    src_lang: str
    tgt_lang: str
    domain: str
    split: Split = Split.TRAIN
    pairs: Tuple[Pair, ...]
    groups: Optional[Tuple[int, ...]] = None

    @model_validator(mode="after")
    def check_pairs(self):
        if self.split is Split.TRAIN and not self.pairs:
            raise DataError(f"training corpus '{self.name}' is empty")
        for i, (src, tgt) in enumerate(self.pairs):
            if not src or not tgt:
                raise DataError(f"corpus '{self.name}' pair {i} has an empty side")
        if self.groups is not None and len(self.groups) != len(self.pairs):
            raise DataError(f"corpus '{self.name}' has {len(self.groups)} group ids for {len(self.pairs)} pairs")
        return self

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def sources(self) -> List[Sentence]:
        return [src for src, _ in self.pairs]

    @property
    def targets(self) -> List[Sentence]:
        return [tgt for _, tgt in self.pairs]

    def replace(self, **updates) -> "ParallelCorpus":
        return ParallelCorpus(**{**dict(self), **updates})


class CorpusBundle(BaseModel):
    """The train/dev/test splits of one corpus."""

    model_config = ConfigDict(frozen=True)

    train: ParallelCorpus
    dev: ParallelCorpus
    test: ParallelCorpus

    @property
    def name(self) -> str:
        return self.train.name

    @property
    def src_lang(self) -> str:
        return self.train.src_lang

    @property
    def tgt_lang(self) -> str:
        return self.train.tgt_lang

    @property
    def domain(self) -> str:
        return self.train.domain


class TagScheme(BaseModel):
    """Artificial source-prefix tokens: "2d<k>" per domain, "2<lang>" per target language."""

    model_config = ConfigDict(frozen=True)

    n_domains: int
    tgt_langs: Tuple[str, ...] = ()
    include_lang_tag: bool = False

    @model_validator(mode="after")
    def check_scheme(self):
        if self.n_domains < 1:
            raise SchemeError("a tag scheme needs at least one domain")
        if self.include_lang_tag and not self.tgt_langs:
            raise SchemeError("language tags requested but no target languages registered")
        return self

    @staticmethod
    def domain_tag(k: int) -> str:
        return f"2d{k}"

    @staticmethod
    def lang_tag(lang: str) -> str:
        return f"2{lang}"

    @property
    def tokens(self) -> Tuple[str, ...]:
        domain_tags = tuple(self.domain_tag(k) for k in range(1, self.n_domains + 1))
        return tuple(self.lang_tag(lang) for lang in self.tgt_langs) + domain_tags

    def prefix(self, domain_index: int, tgt_lang: str) -> Tuple[str, ...]:
        if not 1 <= domain_index <= self.n_domains:
            raise SchemeError(f"unknown domain tag index {domain_index} (scheme has {self.n_domains})")
        prefix: Tuple[str, ...] = ()
        if self.include_lang_tag:
            if tgt_lang not in self.tgt_langs:
                raise SchemeError(f"unknown target-language tag for '{tgt_lang}'")
            prefix = (self.lang_tag(tgt_lang),)
        return prefix + (self.domain_tag(domain_index),)


class ReorderRule(str, Enum):
    IDENTITY = "identity"
    SWAP_PAIRS = "swap_pairs"
    REVERSE_WINDOW = "reverse_window"


class SynthCorpusSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    src_lang: str
    tgt_lang: str = "e"
    domain: str
    reorder: ReorderRule = ReorderRule.IDENTITY
    train: int
    dev: int = 100
    test: int = 100


class SynthSpec(BaseModel):
    """Toy multilingual multi-domain task family.

    Each domain owns a region of `region_size` base tokens; the regions of
    out-of-domain corpora share round(overlap * region_size) tokens with the
    in-domain region. Languages are fixed token substitutions.
    """

    model_config = ConfigDict(extra="forbid")

    corpora: Tuple[SynthCorpusSpec, ...]
    in_domain: str
    region_size: int = 40
    overlap: float = 0.5
    min_len: int = 4
    max_len: int = 10
    window: int = 3

    @model_validator(mode="after")
    def check_spec(self):
        names = [c.name for c in self.corpora]
        if len(set(names)) != len(names):
            raise GeneratorError("corpus names must be unique")
        if self.in_domain not in names:
            raise GeneratorError(f"in-domain corpus '{self.in_domain}' is not among the corpora")
        if not 0.0 <= self.overlap <= 1.0:
            raise GeneratorError("overlap must lie in [0, 1]")
        if self.region_size < 2 or not 1 <= self.min_len <= self.max_len:
            raise GeneratorError("invalid region size or sentence length bounds")
        return self


@dataclass
class Batch:
    """Padded id matrices for one training step.

    `tgt_in` is BOS + y and `tgt_out` is y + EOS; pad masks are True at
    padding positions. `groups` holds one corpus-group id per row.
    """

    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    src_pad: np.ndarray
    tgt_pad: np.ndarray
    groups: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return int(self.src.shape[0])

    @property
    def n_target_tokens(self) -> int:
        """Real target tokens, excluding the appended EOS."""
        return int((~self.tgt_pad).sum()) - self.size

    @property
    def cost(self) -> int:
        return self.size * max(self.src.shape[1], self.tgt_out.shape[1])
