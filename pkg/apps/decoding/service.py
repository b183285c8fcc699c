"""Beam search, greedy decoding and checkpoint averaging."""
import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from apps.corpus.schemas import BOS_ID, EOS_ID, PAD_ID
from apps.decoding.schemas import BeamConfig, CheckpointSet, Hypothesis
from apps.model.schemas import ModelParams
from apps.model.service import encode, next_token_logprobs
from core.exceptions import CheckpointError, ContextError, MathDomainError
from core.tensor import Tensor

logger = logging.getLogger(__name__)

# prefixes (without BOS) -> next-token log-probabilities [n_prefixes, V]
StepFn = Callable[[List[Tuple[int, ...]]], np.ndarray]


def length_penalty(length: int, alpha: float) -> float:
    if length < 1:
        raise MathDomainError(f"length penalty is undefined for length {length}")
    return ((5.0 + length) / 6.0) ** alpha


def _hypothesis(tokens: Tuple[int, ...], logprob: float, alpha: float, eos_id: int) -> Hypothesis:
    return Hypothesis(
        tokens=tokens,
        logprob=logprob,
        score=logprob / length_penalty(max(len(tokens), 1), alpha),
        finished=bool(tokens) and tokens[-1] == eos_id,
    )


def search(step_fn: StepFn, beam: int, alpha: float, max_len: int, eos_id: int = EOS_ID) -> Hypothesis:
    """Length-normalized beam search over an arbitrary next-token scorer.

    Candidates are ranked by cumulative log-probability, ties going to the
    earlier hypothesis and then the lower token id. EOS-terminated candidates
    leave the beam; the result is the best penalized score among them and
    the hypotheses still alive when the search ends.
    """
    alive: List[Tuple[Tuple[int, ...], float]] = [((), 0.0)]
    finished: List[Hypothesis] = []
    bound_penalty = length_penalty(max_len, alpha)
    for _ in range(max_len):
        logprobs = np.asarray(step_fn([tokens for tokens, _ in alive]), dtype=np.float64)
        totals = np.array([lp for _, lp in alive])[:, None] + logprobs
        vocab_size = totals.shape[1]
        order = np.argsort(-totals.ravel(), kind="stable")[:beam]

        survivors = []
        for flat in order:
            row, token = divmod(int(flat), vocab_size)
            tokens = alive[row][0] + (token,)
            logprob = float(totals[row, token])
            if token == eos_id:
                finished.append(_hypothesis(tokens, logprob, alpha, eos_id))
            else:
                survivors.append((tokens, logprob))
        alive = survivors
        if not alive:
            break
        if finished:
            best_finished = max(h.score for h in finished)
            if best_finished >= max(lp for _, lp in alive) / bound_penalty:
                break

    # finished first so they win ties
    pool = finished + [_hypothesis(tokens, logprob, alpha, eos_id) for tokens, logprob in alive]
    return max(pool, key=lambda h: h.score)


def greedy_search(step_fn: StepFn, max_len: int, eos_id: int = EOS_ID) -> Tuple[int, ...]:
    tokens: Tuple[int, ...] = ()
    for _ in range(max_len):
        token = int(np.argmax(step_fn([tokens])[0]))
        tokens += (token,)
        if token == eos_id:
            break
    return tokens


def check_context(params: ModelParams, group: Optional[int]) -> Optional[int]:
    config = params.config
    if not config.head_kind.needs_group:
        return None
    if group is None:
        raise ContextError(f"head '{config.head_kind.value}' needs a group id to decode")
    if not 1 <= group <= config.n_groups:
        raise ContextError(f"unknown group id {group}, model knows 1..{config.n_groups}")
    return group


def model_step_fn(params: ModelParams, src_ids: Sequence[int], group: Optional[int]) -> StepFn:
    """Next-token scorer for one source sentence over frozen params."""
    group = check_context(params, group)
    src = np.asarray([list(src_ids)], dtype=np.int64)
    src_pad = np.zeros(src.shape, dtype=bool)
    enc = encode(params, src, src_pad)

    def step(prefixes: List[Tuple[int, ...]]) -> np.ndarray:
        n = len(prefixes)
        rows = np.asarray([(BOS_ID,) + p for p in prefixes], dtype=np.int64)
        states = Tensor(np.repeat(enc.data, n, axis=0))
        groups = None if group is None else np.full(n, group, dtype=np.int64)
        return next_token_logprobs(params, states, np.repeat(src_pad, n, axis=0), rows, groups)

    return step


def _decode_limit(params: ModelParams, max_len: int) -> int:
    # BOS + generated prefix must fit the positional range
    return min(max_len, params.config.max_len)


def beam_search(params: ModelParams, src_ids: Sequence[int], group: Optional[int], cfg: BeamConfig) -> Hypothesis:
    step = model_step_fn(params, src_ids, group)
    return search(step, cfg.beam, cfg.alpha, _decode_limit(params, cfg.max_len))


def greedy_decode(params: ModelParams, src_ids: Sequence[int], group: Optional[int], max_len: int) -> Tuple[int, ...]:
    step = model_step_fn(params, src_ids, group)
    return greedy_search(step, _decode_limit(params, max_len))


def greedy_decode_batch(
    params: ModelParams,
    sources: Sequence[Sequence[int]],
    groups: Optional[Sequence[int]],
    max_len: int,
) -> List[Tuple[int, ...]]:
    """Greedy decoding of many sentences at once; rows stop at their own EOS."""
    if params.config.head_kind.needs_group and groups is None:
        raise ContextError(f"head '{params.config.head_kind.value}' needs group ids to decode")
    if groups is not None:
        for g in set(groups):
            check_context(params, int(g))
    if not sources:
        return []
    n = len(sources)
    width = max(len(s) for s in sources)
    src = np.full((n, width), PAD_ID, dtype=np.int64)
    for i, row in enumerate(sources):
        src[i, : len(row)] = row
    lengths = np.array([len(s) for s in sources])
    src_pad = np.arange(width)[None, :] >= lengths[:, None]
    group_ids = None if groups is None or not params.config.head_kind.needs_group else np.asarray(groups)
    enc = encode(params, src, src_pad)

    prefixes = np.full((n, 1), BOS_ID, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    for _ in range(_decode_limit(params, max_len)):
        logprobs = next_token_logprobs(params, enc, src_pad, prefixes, group_ids)
        tokens = np.where(done, PAD_ID, np.argmax(logprobs, axis=-1))
        prefixes = np.concatenate([prefixes, tokens[:, None]], axis=1)
        done |= tokens == EOS_ID
        if done.all():
            break

    outputs = []
    for row in prefixes[:, 1:].tolist():
        if EOS_ID in row:
            row = row[: row.index(EOS_ID) + 1]
        outputs.append(tuple(row))
    return outputs


def translate_all(
    params: ModelParams,
    sources: Sequence[Sequence[int]],
    groups: Optional[Sequence[int]],
    cfg: BeamConfig,
    workers: int = 1,
    progress: bool = False,
) -> List[Hypothesis]:
    """Beam-search every sentence; results keep input order."""
    groups = list(groups) if groups is not None else [None] * len(sources)

    def run(i: int) -> Hypothesis:
        return beam_search(params, sources[i], groups[i], cfg)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = pool.map(run, range(len(sources)))
        return list(tqdm(results, total=len(sources), desc="translate", disable=not progress))


def average_checkpoints(checkpoints: CheckpointSet, last_k: int) -> "OrderedDict[str, np.ndarray]":
    """Elementwise mean of the last `last_k` snapshots.

    Computed as base + sum(x - base) / k, so identical snapshots come back
    bit for bit.
    """
    chosen = checkpoints.last(last_k)
    base = chosen[0]
    averaged: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, first in base.items():
        acc = np.zeros_like(first)
        for snapshot in chosen[1:]:
            if snapshot[name].shape != first.shape:
                raise CheckpointError(f"parameter '{name}' changes shape across checkpoints")
            acc += snapshot[name] - first
        averaged[name] = first + acc / len(chosen)
    logger.info(f"Averaged {len(chosen)} checkpoints (steps {checkpoints.steps[-len(chosen):]})")
    return averaged
