from collections import OrderedDict
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from core.exceptions import CheckpointError, ConfigError


class BeamConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    beam: int = 4
    alpha: float = 0.6
    max_len: int = 64
    last_k: int = 5

    @model_validator(mode="after")
    def check_values(self):
        if self.beam < 1:
            raise ConfigError(f"beam size must be at least 1, got {self.beam}")
        if self.alpha < 0:
            raise ConfigError(f"length penalty alpha must be non-negative, got {self.alpha}")
        if self.max_len < 1 or self.last_k < 1:
            raise ConfigError("max_len and last_k must be positive")
        return self


@dataclass(frozen=True)
class Hypothesis:
    """A (possibly unfinished) output; `tokens` excludes BOS and ends with EOS when finished."""

    tokens: Tuple[int, ...]
    logprob: float
    score: float
    finished: bool

    @property
    def length(self) -> int:
        return len(self.tokens)


@dataclass
class CheckpointSet:
    """Parameter snapshots ordered by training step."""

    steps: List[int] = field(default_factory=list)
    snapshots: List["OrderedDict[str, np.ndarray]"] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    def add(self, step: int, snapshot: "OrderedDict[str, np.ndarray]") -> None:
        if self.steps and step <= self.steps[-1]:
            raise CheckpointError(f"checkpoint step {step} does not follow step {self.steps[-1]}")
        if self.snapshots:
            reference = self.snapshots[0]
            if list(reference) != list(snapshot):
                raise CheckpointError("checkpoint parameter names differ from earlier snapshots")
            for name, array in snapshot.items():
                if array.shape != reference[name].shape:
                    raise CheckpointError(
                        f"parameter '{name}' has shape {array.shape}, earlier snapshots have {reference[name].shape}"
                    )
        self.steps.append(step)
        self.snapshots.append(snapshot)

    def last(self, k: int) -> List["OrderedDict[str, np.ndarray]"]:
        if not 1 <= k <= len(self):
            raise CheckpointError(f"cannot take the last {k} of {len(self)} checkpoints")
        return self.snapshots[-k:]
