from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from apps.corpus.lexicon import Lexicon
from apps.corpus.schemas import CorpusBundle, Sentence, TagScheme
from apps.decoding.schemas import CheckpointSet
from apps.heads.schemas import HeadKind
from apps.model.schemas import ModelConfig, ModelParams
from core.exceptions import ConfigError, PlanError


class StrategyKind(str, Enum):
    IN_DOMAIN_ONLY = "in_domain_only"
    CONCAT = "concat"
    FINE_TUNING = "fine_tuning"
    MULTI_DOMAIN = "multi_domain"
    MIXED_FINE_TUNING = "mixed_fine_tuning"
    PROPOSED = "proposed"
    PROPOSED_MFT = "proposed_mft"

    @property
    def uses_head(self) -> bool:
        return self in (StrategyKind.PROPOSED, StrategyKind.PROPOSED_MFT)

    @property
    def uses_tags(self) -> bool:
        return self in (StrategyKind.MULTI_DOMAIN, StrategyKind.MIXED_FINE_TUNING)

    @property
    def needs_parents(self) -> bool:
        return self in (StrategyKind.FINE_TUNING, StrategyKind.MIXED_FINE_TUNING, StrategyKind.PROPOSED_MFT)

    @property
    def single_target(self) -> bool:
        return self in (StrategyKind.FINE_TUNING, StrategyKind.PROPOSED, StrategyKind.PROPOSED_MFT)


class Handoff(str, Enum):
    AVERAGED = "averaged"
    LAST = "last"


class TrainingConfig(BaseModel):
    """Optimization, convergence and stage-handoff settings."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    max_tokens: int = 1024
    eval_interval: int = 200
    window: int = 5
    min_delta: float = 0.05
    max_batches: int = 4000
    warmup: int = 400
    lr_scale: float = 1.0
    label_smoothing: float = 0.1
    bpe_merges: int = 300
    vocab_cap: int = 1000
    dev_limit: int = 100
    eval_batch_size: int = 64
    last_k: int = 5
    handoff: Handoff = Handoff.AVERAGED
    reset_moments: bool = True
    continue_schedule: bool = True
    oversample_cap: Optional[float] = None

    @model_validator(mode="after")
    def check_values(self):
        for name in ("max_tokens", "eval_interval", "window", "max_batches", "warmup", "dev_limit", "eval_batch_size", "last_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"training.{name} must be positive")
        if self.bpe_merges < 0:
            raise ConfigError("training.bpe_merges must be non-negative")
        if self.min_delta < 0:
            raise ConfigError("training.min_delta must be non-negative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("training.label_smoothing must lie in [0, 1)")
        if self.lr_scale <= 0:
            raise ConfigError("training.lr_scale must be positive")
        if self.oversample_cap is not None and self.oversample_cap < 1.0:
            raise ConfigError("training.oversample_cap must be at least 1")
        return self


class ExperimentPlan(BaseModel):
    """Corpora, strategy and hyperparameters of one adaptation run.

    Group ids default to 1 for the in-domain child and 2..D for the parents
    in order; a group id doubles as the corpus' domain-tag index.
    """

    model_config = ConfigDict(frozen=True)

    child: CorpusBundle
    parents: Tuple[CorpusBundle, ...] = ()
    strategy: StrategyKind
    head_kind: HeadKind = HeadKind.VANILLA
    model: ModelConfig = ModelConfig()
    training: TrainingConfig = TrainingConfig()
    groups: Optional[Dict[str, int]] = None
    seed: int = 1

    @model_validator(mode="after")
    def check_plan(self):
        names = [c.name for c in self.corpora]
        if len(set(names)) != len(names):
            raise PlanError(f"corpus names must be unique, got {names}")
        if self.strategy.needs_parents and not self.parents:
            raise PlanError(f"strategy '{self.strategy.value}' needs at least one out-of-domain corpus")
        if self.strategy.uses_head and self.head_kind is HeadKind.VANILLA:
            raise PlanError(f"strategy '{self.strategy.value}' needs a non-vanilla head")
        if not self.strategy.uses_head and self.head_kind is not HeadKind.VANILLA:
            raise PlanError(f"head '{self.head_kind.value}' only applies to the proposed strategies")
        if self.strategy.single_target and len(self.target_languages) > 1:
            raise PlanError(
                f"strategy '{self.strategy.value}' supports one target language, "
                f"plan has {list(self.target_languages)}"
            )
        groups = self.group_ids
        if set(groups) != set(names):
            raise PlanError(f"group ids must cover exactly the corpora {names}")
        if sorted(groups.values()) != list(range(1, len(names) + 1)):
            raise PlanError(f"group ids must be 1..{len(names)}, one per corpus, got {groups}")
        self.model_for(self.training.vocab_cap)
        return self

    @property
    def corpora(self) -> Tuple[CorpusBundle, ...]:
        if self.strategy is StrategyKind.IN_DOMAIN_ONLY:
            return (self.child,)
        return (self.child,) + tuple(self.parents)

    @property
    def n_groups(self) -> int:
        return len(self.corpora)

    @property
    def group_ids(self) -> Dict[str, int]:
        if self.groups is not None:
            return {name: g for name, g in self.groups.items() if name in {c.name for c in self.corpora}}
        return {c.name: i for i, c in enumerate(self.corpora, start=1)}

    @property
    def target_languages(self) -> Tuple[str, ...]:
        return tuple(sorted({c.tgt_lang for c in self.corpora}))

    @property
    def tag_scheme(self) -> TagScheme:
        langs = self.target_languages
        return TagScheme(n_domains=self.n_groups, tgt_langs=langs, include_lang_tag=len(langs) > 1)

    @property
    def cross_lingual(self) -> bool:
        """Fine tuning onto a source language no parent was trained on."""
        return (
            self.strategy is StrategyKind.FINE_TUNING
            and self.child.src_lang not in {p.src_lang for p in self.parents}
        )

    def model_for(self, vocab_size: int) -> ModelConfig:
        fields = self.model.model_dump()
        fields.update(vocab_size=vocab_size, head_kind=self.head_kind, n_groups=self.n_groups, seed=self.seed)
        return ModelConfig(**fields)


@dataclass
class TraceRow:
    step: int
    bleu: float
    loss: float


@dataclass
class EvalSet:
    """Encoded sources with word-level references for BLEU."""

    name: str
    sources: List[List[int]]
    references: List[Sentence]
    groups: Optional[List[int]] = None

    def __len__(self) -> int:
        return len(self.sources)


@dataclass
class CorpusContext:
    """How sentences of one corpus are presented to a trained model."""

    name: str
    group: int
    tag_prefix: Tuple[str, ...] = ()


@dataclass
class StageRecord:
    name: str
    corpora: Tuple[str, ...]
    start_params: "OrderedDict[str, np.ndarray]"
    final_params: "OrderedDict[str, np.ndarray]"
    checkpoints: CheckpointSet
    trace: List[TraceRow] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return self.checkpoints.steps[-1] if len(self.checkpoints) else 0


@dataclass
class AdaptationResult:
    strategy: StrategyKind
    head_kind: HeadKind
    config: ModelConfig
    lexicon: Lexicon
    contexts: Dict[str, CorpusContext]
    stages: List[StageRecord] = field(default_factory=list)

    @property
    def final_params(self) -> ModelParams:
        return ModelParams.from_arrays(self.config, self.stages[-1].final_params, requires_grad=False)

    @property
    def checkpoints(self) -> CheckpointSet:
        return self.stages[-1].checkpoints
