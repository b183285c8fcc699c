"""Pre-norm encoder-decoder Transformer over the tape engine."""
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from apps.corpus.schemas import Batch
from apps.heads.schemas import HeadKind
from apps.heads.service import head_logits
from apps.model.schemas import Activation, ModelConfig, ModelParams
from core import ops
from core.exceptions import BatchError, LengthError, ShapeError
from core.tensor import Tensor, default_dtype

logger = logging.getLogger(__name__)

NEG_INF = -1e9


def _uniform(rng: np.random.Generator, shape, limit: float, dtype) -> np.ndarray:
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _glorot(rng, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    return _uniform(rng, (fan_in, fan_out), math.sqrt(6.0 / (fan_in + fan_out)), dtype)


def _attention_block(rng, prefix: str, d: int, dtype, out: "OrderedDict[str, np.ndarray]") -> None:
    for name in ("q", "k", "v", "o"):
        out[f"{prefix}.W_{name}"] = _glorot(rng, d, d, dtype)
        out[f"{prefix}.b_{name}"] = np.zeros(d, dtype=dtype)


def _norm(prefix: str, d: int, dtype, out) -> None:
    out[f"{prefix}.gain"] = np.ones(d, dtype=dtype)
    out[f"{prefix}.offset"] = np.zeros(d, dtype=dtype)


def _ffn(rng, prefix: str, d: int, d_ff: int, dtype, out) -> None:
    out[f"{prefix}.W_1"] = _glorot(rng, d, d_ff, dtype)
    out[f"{prefix}.b_1"] = np.zeros(d_ff, dtype=dtype)
    out[f"{prefix}.W_2"] = _glorot(rng, d_ff, d, dtype)
    out[f"{prefix}.b_2"] = np.zeros(d, dtype=dtype)


def init_params(config: ModelConfig, seed: Optional[int] = None) -> ModelParams:
    """Deterministic initialization: scaled uniform matrices, zero biases, unit gains."""
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    dtype = default_dtype()
    d, V = config.d_model, config.vocab_size
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()

    arrays["embed"] = _uniform(rng, (V, d), math.sqrt(3.0 / d), dtype)
    for i in range(config.n_enc_layers):
        _norm(f"enc.{i}.ln1", d, dtype, arrays)
        _attention_block(rng, f"enc.{i}.attn", d, dtype, arrays)
        _norm(f"enc.{i}.ln2", d, dtype, arrays)
        _ffn(rng, f"enc.{i}.ffn", d, config.d_ff, dtype, arrays)
    _norm("enc.ln", d, dtype, arrays)
    for i in range(config.n_dec_layers):
        _norm(f"dec.{i}.ln1", d, dtype, arrays)
        _attention_block(rng, f"dec.{i}.self_attn", d, dtype, arrays)
        _norm(f"dec.{i}.ln2", d, dtype, arrays)
        _attention_block(rng, f"dec.{i}.cross_attn", d, dtype, arrays)
        _norm(f"dec.{i}.ln3", d, dtype, arrays)
        _ffn(rng, f"dec.{i}.ffn", d, config.d_ff, dtype, arrays)
    _norm("dec.ln", d, dtype, arrays)

    head_kind = config.head_kind
    state_width = (config.n_groups + 1) * config.slot_width if head_kind.specializes else d
    arrays["head.W_t"] = _glorot(rng, state_width, V, dtype)
    if head_kind.specializes:
        arrays["head.W_d"] = _glorot(rng, d, config.slot_width, dtype)
    if head_kind.extremizes:
        arrays["head.bias"] = np.zeros((config.n_groups, V), dtype=dtype)

    params = ModelParams.from_arrays(config, arrays)
    logger.debug(f"Initialized {head_kind.value} model with {count_params(params)} parameters (seed={seed})")
    return params


def parameter_count(config: ModelConfig) -> int:
    """Closed-form count of the vanilla-head model's parameters."""
    d, ff, V = config.d_model, config.d_ff, config.vocab_size
    attention = 4 * d * d + 4 * d
    ffn = 2 * d * ff + ff + d
    enc_layer = attention + ffn + 2 * (2 * d)
    dec_layer = 2 * attention + ffn + 3 * (2 * d)
    return V * d + config.n_enc_layers * enc_layer + config.n_dec_layers * dec_layer + 2 * (2 * d) + d * V


def count_params(params: ModelParams) -> int:
    return sum(t.size for t in params.values())


@lru_cache(maxsize=16)
def _sinusoids(length: int, d: int, dtype_name: str) -> np.ndarray:
    position = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    table = np.zeros((length, d))
    table[:, 0::2] = np.sin(position * rates)
    table[:, 1::2] = np.cos(position * rates[: d // 2])
    return table.astype(dtype_name)


def positional_encoding(length: int, d: int, dtype) -> np.ndarray:
    return _sinusoids(length, d, np.dtype(dtype).name)


@dataclass
class AttentionWeights:
    W_q: Tensor
    b_q: Tensor
    W_k: Tensor
    b_k: Tensor
    W_v: Tensor
    b_v: Tensor
    W_o: Tensor
    b_o: Tensor

    @classmethod
    def from_params(cls, params: ModelParams, prefix: str) -> "AttentionWeights":
        return cls(**{name: params[f"{prefix}.{name}"] for name in cls.__dataclass_fields__})


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, T, d = x.shape
    return ops.transpose(ops.reshape(x, (B, T, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, T, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (B, T, h * dh))


def multi_head_attention(
    weights: AttentionWeights,
    query: Tensor,
    key: Tensor,
    value: Tensor,
    mask: Optional[np.ndarray],
    n_heads: int,
) -> Tensor:
    """Scaled dot-product attention over `n_heads` heads.

    `mask` is True where a query may attend a key, broadcastable to
    [B, 1, Tq, Tk]. Masked keys get weight exactly 0, and a query with no
    visible key yields a zero context vector.
    """
    d = query.shape[-1]
    if d % n_heads != 0:
        raise ShapeError(f"width {d} is not divisible by {n_heads} heads")
    q = _split_heads(ops.add(ops.matmul(query, weights.W_q), weights.b_q), n_heads)
    k = _split_heads(ops.add(ops.matmul(key, weights.W_k), weights.b_k), n_heads)
    v = _split_heads(ops.add(ops.matmul(value, weights.W_v), weights.b_v), n_heads)
    scores = ops.mul(ops.matmul(q, ops.swap_last(k)), 1.0 / math.sqrt(d // n_heads))
    if mask is not None:
        mask = np.broadcast_to(mask, scores.shape)
        scores = ops.where(mask, scores, NEG_INF)
    probs = ops.softmax(scores, axis=-1)
    if mask is not None:
        probs = ops.mul(probs, Tensor(mask.astype(probs.dtype)))
    context = _merge_heads(ops.matmul(probs, v))
    return ops.add(ops.matmul(context, weights.W_o), weights.b_o)


def _layer_norm(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return ops.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.offset"], params.config.ln_eps)


def _feed_forward(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    hidden = ops.add(ops.matmul(x, params[f"{prefix}.W_1"]), params[f"{prefix}.b_1"])
    hidden = ops.gelu(hidden) if params.config.activation is Activation.GELU else ops.relu(hidden)
    return ops.add(ops.matmul(hidden, params[f"{prefix}.W_2"]), params[f"{prefix}.b_2"])


def _embed(params: ModelParams, ids: np.ndarray, rng: Optional[np.random.Generator]) -> Tensor:
    config = params.config
    if ids.ndim != 2:
        raise ShapeError(f"token ids must be a [batch, length] matrix, got shape {ids.shape}")
    if ids.shape[1] > config.max_len:
        raise LengthError(f"sequence length {ids.shape[1]} exceeds max_len={config.max_len}")
    table = params["embed"]
    x = ops.mul(ops.embedding(table, ids), math.sqrt(config.d_model))
    x = ops.add(x, Tensor(positional_encoding(ids.shape[1], config.d_model, table.dtype)))
    return ops.dropout(x, config.dropout, rng)


def encode(
    params: ModelParams,
    src_ids: np.ndarray,
    src_pad: np.ndarray,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Encoder states [B, S, d_model]; padding keys are never attended."""
    src_ids = np.asarray(src_ids)
    src_pad = np.asarray(src_pad, dtype=bool)
    if src_pad.shape != src_ids.shape:
        raise ShapeError(f"source mask {src_pad.shape} does not match ids {src_ids.shape}")
    config = params.config
    x = _embed(params, src_ids, rng)
    mask = (~src_pad)[:, None, None, :]
    for i in range(config.n_enc_layers):
        h = _layer_norm(params, f"enc.{i}.ln1", x)
        attn = multi_head_attention(AttentionWeights.from_params(params, f"enc.{i}.attn"), h, h, h, mask, config.n_heads)
        x = ops.add(x, ops.dropout(attn, config.dropout, rng))
        h = _layer_norm(params, f"enc.{i}.ln2", x)
        x = ops.add(x, ops.dropout(_feed_forward(params, f"enc.{i}.ffn", h), config.dropout, rng))
    return _layer_norm(params, "enc.ln", x)


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def decode_states(
    params: ModelParams,
    enc_states: Tensor,
    src_pad: np.ndarray,
    tgt_ids: np.ndarray,
    tgt_pad: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Decoder states s [B, T, d_model]; s_i sees target positions <= i only."""
    tgt_ids = np.asarray(tgt_ids)
    src_pad = np.asarray(src_pad, dtype=bool)
    tgt_pad = np.zeros(tgt_ids.shape, dtype=bool) if tgt_pad is None else np.asarray(tgt_pad, dtype=bool)
    if tgt_pad.shape != tgt_ids.shape:
        raise ShapeError(f"target mask {tgt_pad.shape} does not match ids {tgt_ids.shape}")
    if src_pad.shape != enc_states.shape[:2]:
        raise ShapeError(f"source mask {src_pad.shape} does not match encoder states {enc_states.shape[:2]}")
    config = params.config
    T = tgt_ids.shape[1]
    self_mask = causal_mask(T)[None, None, :, :] & (~tgt_pad)[:, None, None, :]
    cross_mask = (~src_pad)[:, None, None, :]

    x = _embed(params, tgt_ids, rng)
    for i in range(config.n_dec_layers):
        h = _layer_norm(params, f"dec.{i}.ln1", x)
        attn = multi_head_attention(
            AttentionWeights.from_params(params, f"dec.{i}.self_attn"), h, h, h, self_mask, config.n_heads
        )
        x = ops.add(x, ops.dropout(attn, config.dropout, rng))
        h = _layer_norm(params, f"dec.{i}.ln2", x)
        attn = multi_head_attention(
            AttentionWeights.from_params(params, f"dec.{i}.cross_attn"), h, enc_states, enc_states, cross_mask, config.n_heads
        )
        x = ops.add(x, ops.dropout(attn, config.dropout, rng))
        h = _layer_norm(params, f"dec.{i}.ln3", x)
        x = ops.add(x, ops.dropout(_feed_forward(params, f"dec.{i}.ffn", h), config.dropout, rng))
    return _layer_norm(params, "dec.ln", x)


def _batch_groups(params: ModelParams, groups: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if params.config.head_kind is HeadKind.VANILLA:
        return None
    if groups is None:
        raise BatchError(f"head '{params.config.head_kind.value}' needs a group id for every sentence")
    return np.asarray(groups, dtype=np.int64)


def forward_logits(params: ModelParams, batch: Batch, rng: Optional[np.random.Generator] = None) -> Tensor:
    groups = _batch_groups(params, batch.groups)
    enc = encode(params, batch.src, batch.src_pad, rng)
    states = decode_states(params, enc, batch.src_pad, batch.tgt_in, batch.tgt_pad, rng)
    return head_logits(params.config.head_kind, states, groups, params.head, params.config.n_groups)


def forward_loss(
    params: ModelParams,
    batch: Batch,
    label_smoothing: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Teacher-forced mean token loss; the head is chosen by the model config."""
    logits = forward_logits(params, batch, rng)
    return ops.cross_entropy(logits, batch.tgt_out, label_smoothing, batch.tgt_pad)


def next_token_logprobs(
    params: ModelParams,
    enc_states: Tensor,
    src_pad: np.ndarray,
    prefixes: np.ndarray,
    groups: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Log-probabilities of the next token after each prefix row, [N, V]."""
    groups = _batch_groups(params, groups)
    states = decode_states(params, enc_states, src_pad, prefixes)
    last = ops.getitem(states, (slice(None), -1, slice(None)))
    logits = head_logits(params.config.head_kind, last, groups, params.head, params.config.n_groups)
    return ops.log_softmax(logits, axis=-1).data
