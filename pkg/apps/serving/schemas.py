from pydantic import BaseModel, Field
from typing import Dict, List, Optional


class TranslateRequest(BaseModel):
    sentences: List[str] = Field(..., min_length=1)
    corpus: Optional[str] = None
    beam: Optional[int] = Field(None, ge=1)
    alpha: Optional[float] = Field(None, ge=0.0)


class TranslateResponse(BaseModel):
    translations: List[str]
    corpus: Optional[str] = None
    beam: int
    alpha: float


class EvaluateRequest(BaseModel):
    hypotheses: List[str]
    references: List[str]


class EvaluateResponse(BaseModel):
    bleu: float
    formatted: str


class RunInfoResponse(BaseModel):
    run_dir: str
    strategy: str
    head: str
    seed: int
    in_domain: str
    corpora: Dict[str, int]
