"""Adam with the inverse-square-root warmup schedule."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from core.exceptions import MathDomainError, ShapeError
from core.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **hyper,
        )

    def reset_moments(self) -> None:
        self.m = [np.zeros_like(m) for m in self.m]
        self.v = [np.zeros_like(v) for v in self.v]


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    state: AdamState,
    lr: float,
) -> AdamState:
    """One bias-corrected Adam update, applied to `params` in place.

    A missing gradient counts as zero. Parameter arrays are replaced rather
    than mutated so snapshots taken earlier stay valid.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state must have the same length")
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        g = g.astype(p.dtype, copy=False)
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return state


def noam_lr(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    if step < 1:
        raise MathDomainError(f"learning-rate schedule is defined for step >= 1, got {step}")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class Adam:
    """Optimizer bound to a parameter list and the warmup schedule."""

    params: List[Tensor]
    d_model: int
    warmup: int
    lr_scale: float = 1.0
    state: AdamState = field(default=None)

    def __post_init__(self):
        if self.state is None:
            self.state = AdamState.for_params(self.params)

    @property
    def step_count(self) -> int:
        return self.state.t

    def learning_rate(self) -> float:
        return noam_lr(self.state.t + 1, self.d_model, self.warmup, self.lr_scale)

    def step(self) -> float:
        lr = self.learning_rate()
        adam_step(self.params, [p.grad for p in self.params], self.state, lr)
        return lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def rebind(self, params: List[Tensor], reset_moments: bool, continue_schedule: bool) -> "Adam":
        """Optimizer for a resumed stage over `params` (same shapes)."""
        state = AdamState(
            m=[m.copy() for m in self.state.m],
            v=[v.copy() for v in self.state.v],
            t=self.state.t if continue_schedule else 0,
            beta1=self.state.beta1,
            beta2=self.state.beta2,
            eps=self.state.eps,
        )
        if reset_moments:
            state.reset_moments()
        logger.info(
            f"Optimizer resumed: reset_moments={reset_moments}, schedule step={state.t}"
        )
        return Adam(params=params, d_model=self.d_model, warmup=self.warmup, lr_scale=self.lr_scale, state=state)
