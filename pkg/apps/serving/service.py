from pathlib import Path
from typing import List, Optional, Union

from apps.decoding.bleu import bleu4, format_bleu
from apps.experiments.runs import LoadedRun, load_run
from core.exceptions import DataError
import logging

logger = logging.getLogger(__name__)


class TranslationService:
    """Holds one trained run loaded at startup; parameters are only read."""

    def __init__(self):
        self._run: Optional[LoadedRun] = None

    @property
    def is_loaded(self) -> bool:
        return self._run is not None

    @property
    def run(self) -> LoadedRun:
        if self._run is None:
            raise RuntimeError("no run is loaded")
        return self._run

    def load(self, run_dir: Union[str, Path]) -> LoadedRun:
        self._run = load_run(run_dir)
        logger.info(f"Serving run {run_dir} ({self._run.manifest.label})")
        return self._run

    def unload(self) -> None:
        self._run = None

    def translate(
        self,
        sentences: List[str],
        corpus: Optional[str] = None,
        beam: Optional[int] = None,
        alpha: Optional[float] = None,
    ) -> List[str]:
        run = self.run
        updates = {k: v for k, v in (("beam", beam), ("alpha", alpha)) if v is not None}
        cfg = run.beam.model_copy(update=updates) if updates else run.beam
        outputs = run.translate([s.split() for s in sentences], corpus, beam=cfg)
        return [" ".join(words) for words in outputs]

    def evaluate(self, hypotheses: List[str], references: List[str]) -> float:
        if len(hypotheses) != len(references):
            raise DataError(f"{len(hypotheses)} hypotheses for {len(references)} references")
        return bleu4([h.split() for h in hypotheses], [r.split() for r in references])

    @staticmethod
    def format(score: float) -> str:
        return format_bleu(score)


translation_service = TranslationService()
