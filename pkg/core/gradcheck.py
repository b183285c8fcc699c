"""Central finite-difference check of tape gradients."""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from core.exceptions import NumericError, PrecisionError
from core.tensor import Tape, Tensor, backward


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-3,
    floor: float = 1e-8,
) -> float:
    """Max relative error between analytic and numeric gradients.

    `f` must be deterministic (dropout off) and the parameters 64-bit. The
    error per coordinate is |a - n| / max(|a|, |n|, floor); `floor` keeps
    near-zero gradients from turning rounding noise into large ratios.
    """
    for p in params:
        if p.dtype != np.float64:
            raise PrecisionError("grad_check needs 64-bit parameters")
        p.requires_grad = True
        p.grad = None
        p.data = np.ascontiguousarray(p.data)

    with Tape() as tape:
        loss = f(params)
    _ensure_finite(loss)
    backward(tape, loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        grad_flat = a.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            up = _ensure_finite(f(params))
            flat[i] = original - step
            down = _ensure_finite(f(params))
            flat[i] = original
            numeric = (up - down) / (2.0 * step)
            analytic_i = float(grad_flat[i])
            denom = max(abs(analytic_i), abs(numeric), floor)
            worst = max(worst, abs(analytic_i - numeric) / denom)
    return worst


def _ensure_finite(value: Tensor) -> float:
    scalar = value.item()
    if not math.isfinite(scalar):
        raise NumericError("objective is not finite")
    return scalar
