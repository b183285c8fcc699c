"""Output heads conditioned on the corpus group of a sentence.

Specializing heads down-project the decoder state s to width
d' = d_model / (D + 1) and lay it out as [shared slot, slot 1, ..., slot D]
with only the slot of the sentence's group filled. Extremizing heads add the
group's bias row to the logits. Groups are numbered 1..D.
"""
from typing import Optional, Union

import numpy as np

from apps.heads.schemas import HeadKind, HeadParams
from core import ops
from core.exceptions import ConfigError, GroupError, ShapeError
from core.tensor import Tensor

GroupArg = Union[int, np.ndarray, None]


def slot_width(d_model: int, n_groups: int) -> int:
    if n_groups < 1:
        raise ConfigError(f"need at least one corpus group, got {n_groups}")
    if d_model % (n_groups + 1) != 0:
        raise ConfigError(
            f"d_model={d_model} is not divisible by D+1={n_groups + 1} needed for domain specialization"
        )
    return d_model // (n_groups + 1)


def group_indices(g: GroupArg, n_groups: int) -> np.ndarray:
    """Zero-based group indices; raises GroupError outside 1..D."""
    if g is None:
        raise GroupError("a group id is required by this output head")
    groups = np.asarray(g, dtype=np.int64)
    if groups.size == 0:
        raise GroupError("empty group id array")
    if groups.min() < 1 or groups.max() > n_groups:
        raise GroupError(f"group id out of range 1..{n_groups}: {np.unique(groups).tolist()}")
    return groups - 1


def _broadcast_selector(groups: np.ndarray, k: int, target_ndim: int, dtype) -> Tensor:
    selector = (groups == k).astype(dtype)
    if groups.ndim == 0:
        return Tensor(selector)
    return Tensor(selector.reshape(groups.shape + (1,) * (target_ndim - groups.ndim)))


def specialize_state(s: Tensor, g: GroupArg, W_d: Tensor, n_groups: int) -> Tensor:
    d_model = s.shape[-1]
    d_prime = slot_width(d_model, n_groups)
    if W_d.shape != (d_model, d_prime):
        raise ShapeError(f"W_d must have shape ({d_model}, {d_prime}), got {W_d.shape}")
    groups = group_indices(g, n_groups)

    vector = s.ndim == 1
    state = ops.reshape(s, (1, d_model)) if vector else s
    projected = ops.matmul(state, W_d)
    slots = [projected]
    for k in range(n_groups):
        slots.append(ops.mul(projected, _broadcast_selector(groups, k, projected.ndim, projected.dtype)))
    out = ops.concat(slots, axis=-1)
    return ops.reshape(out, ((n_groups + 1) * d_prime,)) if vector else out


def group_bias(bias: Optional[Tensor], g: GroupArg, n_groups: int, state_ndim: int) -> Tensor:
    """Bias rows for the given groups, shaped to broadcast against logits."""
    if bias is None:
        raise GroupError("this head has no per-group bias vectors")
    groups = group_indices(g, n_groups)
    rows = ops.embedding(bias, groups.reshape(-1))
    if groups.ndim == 0:
        return ops.reshape(rows, (bias.shape[1],))
    return ops.reshape(rows, groups.shape + (1,) * (state_ndim - 1 - groups.ndim) + (bias.shape[1],))


def extremize_logits(s: Tensor, W_t: Tensor, b_g: Optional[Tensor]) -> Tensor:
    if b_g is None:
        raise GroupError("missing bias vector for group")
    if s.shape[-1] != W_t.shape[0] or b_g.shape[-1] != W_t.shape[1]:
        raise ShapeError(f"state {s.shape}, W_t {W_t.shape} and bias {b_g.shape} do not agree")
    return ops.add(_project(s, W_t), b_g)


def _project(s: Tensor, W_t: Tensor) -> Tensor:
    if s.ndim == 1:
        return ops.reshape(ops.matmul(ops.reshape(s, (1, s.shape[0])), W_t), (W_t.shape[1],))
    return ops.matmul(s, W_t)


def infer_groups(head: HeadParams) -> Optional[int]:
    if head.bias is not None:
        return head.bias.shape[0]
    if head.W_d is not None:
        return head.W_t.shape[0] // head.W_d.shape[1] - 1
    return None


def head_logits(head_kind: HeadKind, s: Tensor, g: GroupArg, head: HeadParams, n_groups: Optional[int] = None) -> Tensor:
    head_kind = HeadKind(head_kind)
    if head_kind is HeadKind.VANILLA:
        return _project(s, head.W_t)
    if g is None:
        raise GroupError(f"head '{head_kind.value}' needs a group id")
    n_groups = n_groups or infer_groups(head)
    state = specialize_state(s, g, head.W_d, n_groups) if head_kind.specializes else s
    if head_kind.extremizes:
        return extremize_logits(state, head.W_t, group_bias(head.bias, g, n_groups, state.ndim))
    return _project(state, head.W_t)


def output_distribution(head_kind: HeadKind, s: Tensor, g: GroupArg, head: HeadParams) -> Tensor:
    return ops.softmax(head_logits(head_kind, s, g, head), axis=-1)


def extra_param_count(head_kind: HeadKind, d_model: int, n_groups: int, vocab_size: int) -> int:
    """Parameters a head adds on top of the vanilla W_t."""
    head_kind = HeadKind(head_kind)
    extra = 0
    if head_kind.specializes:
        d_prime = slot_width(d_model, n_groups)
        # W_t keeps its width because (D+1) * d' == d_model
        extra += d_model * d_prime + ((n_groups + 1) * d_prime - d_model) * vocab_size
    if head_kind.extremizes:
        extra += n_groups * vocab_size
    return extra
