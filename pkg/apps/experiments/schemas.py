from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict

from apps.adaptation.schemas import StrategyKind, TrainingConfig
from apps.corpus.schemas import ReorderRule
from apps.decoding.schemas import BeamConfig
from apps.heads.schemas import HeadKind
from apps.model.schemas import Activation


class DataSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dir: str = "data"
    seed: int = 1
    in_domain: str
    region_size: int = 40
    overlap: float = 0.5
    min_len: int = 4
    max_len: int = 10
    window: int = 3


class CorpusSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    src_lang: str
    tgt_lang: str = "e"
    domain: str
    reorder: ReorderRule = ReorderRule.IDENTITY
    train: int
    dev: int = 100
    test: int = 100


class ModelSection(BaseModel):
    """Model dimensions; vocabulary size, head and group count come from the plan."""

    model_config = ConfigDict(extra="forbid")

    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    dropout: float = 0.1
    max_len: int = 64
    activation: Activation = Activation.RELU
    ln_eps: float = 1e-6


class TrainingSection(TrainingConfig):
    seed: int = 1

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(**self.model_dump(exclude={"seed"}))


class StrategySection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: StrategyKind
    head: HeadKind = HeadKind.VANILLA
    # comma-separated corpus names; empty means every out-of-domain corpus
    parents: str = ""

    @property
    def parent_names(self) -> List[str]:
        return [name.strip() for name in self.parents.split(",") if name.strip()]

    @property
    def label(self) -> str:
        if self.kind in (StrategyKind.PROPOSED, StrategyKind.PROPOSED_MFT):
            return f"{self.kind.value}({self.head.value})"
        return self.kind.value


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data: DataSection
    corpora: Dict[str, CorpusSection]
    model: ModelSection = ModelSection()
    training: TrainingSection = TrainingSection()
    strategy: StrategySection
    decoding: BeamConfig = BeamConfig()


class StageEntry(BaseModel):
    name: str
    corpora: Tuple[str, ...]
    steps: List[int]
    trace: str


class ContextEntry(BaseModel):
    group: int
    tag_prefix: Tuple[str, ...] = ()


class RunManifest(BaseModel):
    """Everything needed to reload a trained run for decoding."""

    strategy: StrategyKind
    head: HeadKind
    label: str
    seed: int
    in_domain: str
    config_hash: str
    subwords: str = "prepared/subwords.txt"
    vocab: str
    tags: Tuple[str, ...] = ()
    contexts: Dict[str, ContextEntry]
    stages: List[StageEntry] = []
    final_checkpoint: Optional[str] = None
    decoding: BeamConfig = BeamConfig()


class ReportRow(BaseModel):
    strategy: str
    test_set: str
    in_domain: bool
    bleu: float
    runs: int = 1
