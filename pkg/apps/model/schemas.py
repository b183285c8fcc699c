from collections import OrderedDict
from enum import Enum
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from apps.corpus.schemas import SPECIAL_TOKENS
from apps.heads.schemas import HeadKind, HeadParams
from core.exceptions import ConfigError
from core.tensor import Tensor


class Activation(str, Enum):
    RELU = "relu"
    GELU = "gelu"


class ModelConfig(BaseModel):
    """Encoder-decoder dimensions plus the output-head variant.

    `n_groups` is D, the number of corpus groups the head can condition on.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    dropout: float = 0.1
    max_len: int = 64
    vocab_size: int = 1000
    head_kind: HeadKind = HeadKind.VANILLA
    n_groups: int = 1
    seed: int = 1
    activation: Activation = Activation.RELU
    ln_eps: float = 1e-6

    @model_validator(mode="after")
    def check_dimensions(self):
        for name in ("d_model", "n_heads", "d_ff", "max_len", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_enc_layers < 0 or self.n_dec_layers < 0:
            raise ConfigError("layer counts must be non-negative")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_groups < 1:
            raise ConfigError(f"n_groups must be at least 1, got {self.n_groups}")
        if self.head_kind.specializes and self.d_model % (self.n_groups + 1) != 0:
            raise ConfigError(
                f"head '{self.head_kind.value}' needs d_model divisible by D+1: "
                f"{self.d_model} % {self.n_groups + 1} != 0"
            )
        if self.vocab_size < len(SPECIAL_TOKENS):
            raise ConfigError(f"vocab_size must cover the {len(SPECIAL_TOKENS)} special tokens")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        return self

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def slot_width(self) -> int:
        return self.d_model // (self.n_groups + 1)

    def diff(self, other: "ModelConfig") -> Dict[str, Tuple[object, object]]:
        """Fields whose values differ, as name -> (self, other)."""
        mine, theirs = self.model_dump(), other.model_dump()
        return {k: (mine[k], theirs[k]) for k in mine if mine[k] != theirs[k]}


class ModelParams:
    """Named parameter tensors of one model, in a fixed order.

    Names are dotted paths ("enc.0.attn.W_q", "head.W_t", ...). The order is
    the checkpoint order.
    """

    def __init__(self, config: ModelConfig, tensors: "OrderedDict[str, Tensor]"):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def names(self) -> List[str]:
        return list(self.tensors)

    def values(self) -> List[Tensor]:
        return list(self.tensors.values())

    @property
    def head(self) -> HeadParams:
        return HeadParams(
            W_t=self.tensors["head.W_t"],
            W_d=self.tensors.get("head.W_d"),
            bias=self.tensors.get("head.bias"),
        )

    def snapshot(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data.copy()) for name, t in self.tensors.items())

    @classmethod
    def from_arrays(
        cls, config: ModelConfig, arrays: "OrderedDict[str, np.ndarray]", requires_grad: bool = True
    ) -> "ModelParams":
        tensors = OrderedDict(
            (name, Tensor(np.array(a, copy=True), requires_grad=requires_grad, name=name))
            for name, a in arrays.items()
        )
        return cls(config, tensors)

    def clone(self, requires_grad: Optional[bool] = None) -> "ModelParams":
        tensors = OrderedDict()
        for name, t in self.tensors.items():
            flag = t.requires_grad if requires_grad is None else requires_grad
            tensors[name] = Tensor(t.data.copy(), requires_grad=flag, name=name)
        return ModelParams(self.config, tensors)

    def astype(self, dtype) -> "ModelParams":
        tensors = OrderedDict(
            (name, Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=name))
            for name, t in self.tensors.items()
        )
        return ModelParams(self.config, tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None
