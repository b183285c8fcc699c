from fastapi import APIRouter, HTTPException, status
from apps.serving.schemas import (
    EvaluateRequest,
    EvaluateResponse,
    RunInfoResponse,
    TranslateRequest,
    TranslateResponse,
)
from apps.serving.service import translation_service
from core.exceptions import DomainAdaptError
import logging

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/api/v1", tags=["Translation"])


def _require_run():
    if not translation_service.is_loaded:
        raise HTTPException(
            status_code=status.HTTP_503_SERVICE_UNAVAILABLE,
            detail="No trained run is loaded; set SERVE_RUN_DIR",
        )
    return translation_service.run


@router.get("/run", response_model=RunInfoResponse)
def run_info():
    run = _require_run()
    manifest = run.manifest
    return RunInfoResponse(
        run_dir=str(run.layout.root),
        strategy=manifest.label,
        head=manifest.head.value,
        seed=manifest.seed,
        in_domain=manifest.in_domain,
        corpora={name: entry.group for name, entry in manifest.contexts.items()},
    )


@router.post("/translate", response_model=TranslateResponse)
def translate(request: TranslateRequest):
    run = _require_run()
    try:
        translations = translation_service.translate(request.sentences, request.corpus, request.beam, request.alpha)
    except DomainAdaptError as e:
        logger.error(f"Translation failed: {e.describe()}")
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=e.describe())
    return TranslateResponse(
        translations=translations,
        corpus=request.corpus,
        beam=request.beam or run.beam.beam,
        alpha=run.beam.alpha if request.alpha is None else request.alpha,
    )


@router.post("/evaluate", response_model=EvaluateResponse)
def evaluate(request: EvaluateRequest):
    try:
        score = translation_service.evaluate(request.hypotheses, request.references)
    except DomainAdaptError as e:
        logger.error(f"Evaluation failed: {e.describe()}")
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=e.describe())
    return EvaluateResponse(bleu=round(score, 2), formatted=translation_service.format(score))
