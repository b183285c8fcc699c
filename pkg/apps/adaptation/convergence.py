"""Training to a dev-BLEU plateau."""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from apps.adaptation.schemas import EvalSet, TraceRow, TrainingConfig
from apps.corpus.lexicon import Lexicon
from apps.corpus.schemas import Batch
from apps.decoding.bleu import bleu4
from apps.decoding.schemas import CheckpointSet
from apps.decoding.service import greedy_decode_batch
from apps.model.schemas import ModelParams
from apps.model.service import forward_loss
from core.exceptions import DataError, NumericError
from core.optim import Adam
from core.settings import settings
from core.tensor import Tape, backward

logger = logging.getLogger(__name__)


def should_stop(trace: Sequence[float], window: int, min_delta: float) -> bool:
    """True once the best of the last `window` scores beats all earlier ones by less than `min_delta`."""
    if len(trace) <= window:
        return False
    recent = max(trace[-window:])
    earlier = max(trace[:-window])
    return recent - earlier < min_delta


@dataclass(frozen=True)
class ConvergenceMonitor:
    eval_interval: int = 200
    window: int = 5
    min_delta: float = 0.05
    max_batches: int = 4000

    @classmethod
    def from_training(cls, training: TrainingConfig) -> "ConvergenceMonitor":
        return cls(
            eval_interval=training.eval_interval,
            window=training.window,
            min_delta=training.min_delta,
            max_batches=training.max_batches,
        )

    def is_eval_step(self, step: int) -> bool:
        return step % self.eval_interval == 0 or step >= self.max_batches

    def should_stop(self, trace: Sequence[float]) -> bool:
        return should_stop(trace, self.window, self.min_delta)


def dev_bleu(params: ModelParams, dev: EvalSet, lexicon: Lexicon, batch_size: int = 64) -> float:
    """Greedy-decoded corpus BLEU on `dev`."""
    if len(dev) == 0:
        raise DataError(f"dev set '{dev.name}' is empty")
    hypotheses = []
    for start in range(0, len(dev), batch_size):
        chunk = dev.sources[start : start + batch_size]
        groups = None if dev.groups is None else dev.groups[start : start + batch_size]
        outputs = greedy_decode_batch(params, chunk, groups, params.config.max_len)
        hypotheses.extend(lexicon.decode(ids) for ids in outputs)
    return bleu4(hypotheses, dev.references, reserved=lexicon.reserved)


def train_until_converged(
    params: ModelParams,
    batches: Sequence[Batch],
    dev: EvalSet,
    lexicon: Lexicon,
    monitor: ConvergenceMonitor,
    optimizer: Adam,
    training: TrainingConfig,
    seed: int,
    stage: str = "train",
) -> Tuple[CheckpointSet, List[TraceRow]]:
    """Train until the dev-BLEU plateau or the batch cap.

    A checkpoint and a trace row are taken at every evaluation. Parameters
    are updated in place; the loss must stay finite.
    """
    if not batches:
        raise DataError(f"stage '{stage}' has no training batches")
    rng = np.random.default_rng(seed)
    dropout_rng = np.random.default_rng([seed, 1])
    checkpoints = CheckpointSet()
    trace: List[TraceRow] = []
    losses: List[float] = []
    step = 0
    logger.info(f"Stage '{stage}': {len(batches)} batches per epoch, cap {monitor.max_batches}")
    progress = tqdm(total=monitor.max_batches, desc=stage, disable=not settings.progress_bars)

    try:
        while True:
            for index in rng.permutation(len(batches)):
                with Tape() as tape:
                    loss = forward_loss(params, batches[index], training.label_smoothing, dropout_rng)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericError(f"non-finite training loss at step {step + 1} of stage '{stage}'")
                backward(tape, loss)
                optimizer.step()
                optimizer.zero_grad()
                step += 1
                losses.append(value)
                progress.update(1)

                if not monitor.is_eval_step(step):
                    continue
                bleu = dev_bleu(params, dev, lexicon, training.eval_batch_size)
                checkpoints.add(step, params.snapshot())
                trace.append(TraceRow(step=step, bleu=bleu, loss=float(np.mean(losses))))
                losses = []
                logger.debug(f"Stage '{stage}' step {step}: dev BLEU {bleu:.2f}, loss {trace[-1].loss:.4f}")
                if step >= monitor.max_batches:
                    logger.info(f"Stage '{stage}' hit the batch cap at step {step} (dev BLEU {bleu:.2f})")
                    return checkpoints, trace
                if monitor.should_stop([row.bleu for row in trace]):
                    logger.info(f"Stage '{stage}' converged at step {step} (dev BLEU {bleu:.2f})")
                    return checkpoints, trace
    finally:
        progress.close()
