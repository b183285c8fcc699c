"""Corpus-level BLEU-4 over whitespace tokens, lowercased."""
import logging
from typing import Collection, Sequence, Union

from sacrebleu.metrics import BLEU

from core.exceptions import DataError

logger = logging.getLogger(__name__)

ZERO_PRECISION_FLOOR = 1e-9

TokenLine = Union[str, Sequence[str]]

_scorer = BLEU(
    lowercase=True,
    tokenize="none",
    smooth_method="floor",
    smooth_value=ZERO_PRECISION_FLOOR,
    force=True,
)


def _as_text(line: TokenLine) -> str:
    return line if isinstance(line, str) else " ".join(line)


def bleu4(hypotheses: Sequence[TokenLine], references: Sequence[TokenLine], reserved: Collection[str] = ()) -> float:
    """BLEU in [0, 100]; zero n-gram matches get the epsilon floor.

    `reserved` lists tokens (tags, specials) that must never reach scoring.
    """
    if len(hypotheses) != len(references):
        raise DataError(f"{len(hypotheses)} hypotheses for {len(references)} references")
    if not references:
        raise DataError("no references to score against")
    hyps = [_as_text(h) for h in hypotheses]
    refs = [_as_text(r) for r in references]
    for i, ref in enumerate(refs):
        if not ref.strip():
            raise DataError(f"reference {i} is empty")
    if reserved:
        leaked = {tok for line in hyps + refs for tok in line.split() if tok in reserved}
        if leaked:
            raise DataError(f"reserved tokens reached BLEU scoring: {sorted(leaked)}")
    result = _scorer.corpus_score(hyps, [refs])
    logger.debug(f"BLEU {result.score:.2f} (bp={result.bp:.3f}, hyp_len={result.sys_len}, ref_len={result.ref_len})")
    return float(result.score)


def format_bleu(score: float) -> str:
    return f"BLEU = {score:.2f}"
