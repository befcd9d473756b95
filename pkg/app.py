# app.py - FastAPI translation and scoring service
from __future__ import annotations
import os
from datetime import datetime
from typing import Any, Dict, List, Optional

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from bpe import decode_bpe
from config import LENGTH_ALPHA
from decoding import Translator
from evaluation import bleu
from executor import STAGE_REGISTRY
from utils import ConfigError, DimensionError, EncodingError, IntegrityError, LabError, MissingInputError

ARTIFACT_ENV = {"checkpoint": "LAB_CHECKPOINT", "merges": "LAB_MERGES", "vocab": "LAB_VOCAB"}
VERSION = "1.0.0"


# ========== Pydantic Models ==========
class TranslateRequest(BaseModel):
    """Request model for one sentence"""
    text: str
    beam_width: Optional[int] = Field(None, ge=1, le=64)
    max_len: Optional[int] = Field(None, ge=1)


class EvaluateRequest(BaseModel):
    hypotheses: List[str] = Field(..., min_length=1)
    references: List[str] = Field(..., min_length=1)
    smooth: str = "none"
    per_sentence: bool = False


# ========== FastAPI App ==========
app = FastAPI(
    title="Low-resource MT Lab API",
    version=VERSION,
    description="Translate with a trained checkpoint and score hypotheses with BLEU / chrF",
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=[
        "http://localhost:5173",
        "http://127.0.0.1:5173",
        "http://localhost:3000",
    ],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


# ========== Artifacts ==========
_cache: Dict[tuple, Translator] = {}


def artifact_paths() -> Dict[str, Optional[str]]:
    return {name: os.environ.get(env) for name, env in ARTIFACT_ENV.items()}


def get_translator() -> Translator:
    """Loads (once per path triple) the checkpoint named by the environment."""
    paths = artifact_paths()
    missing = [ARTIFACT_ENV[k] for k, v in paths.items() if not v]
    if missing:
        raise HTTPException(status_code=503, detail=f"No model loaded; set {', '.join(missing)}")
    key = (paths["checkpoint"], paths["merges"], paths["vocab"])
    if key not in _cache:
        print(f"[App] loading checkpoint {paths['checkpoint']}")
        _cache[key] = Translator.from_paths(*key)
    return _cache[key]


def to_http(exc: LabError) -> HTTPException:
    if isinstance(exc, (ConfigError, MissingInputError, DimensionError, EncodingError)):
        status = 400
    elif isinstance(exc, IntegrityError):
        status = 422
    else:
        status = 500
    return HTTPException(status_code=status, detail={"error": type(exc).__name__, "message": str(exc)})


# ========== Health Check ==========
@app.get("/health")
def health_check():
    """Service health and which artifacts are configured"""
    paths = artifact_paths()
    return {
        "status": "ok",
        "timestamp": datetime.utcnow().isoformat(),
        "artifacts": {name: bool(path) for name, path in paths.items()},
        "model_loaded": any(k == (paths["checkpoint"], paths["merges"], paths["vocab"]) for k in _cache),
    }


# ========== System Info ==========
@app.get("/info")
def system_info() -> Dict[str, Any]:
    info: Dict[str, Any] = {
        "version": VERSION,
        "stages": sorted(STAGE_REGISTRY),
        "decode_defaults": {"beam_width": 1, "length_alpha": LENGTH_ALPHA},
        "model": None,
    }
    if all(artifact_paths().values()):
        try:
            translator = get_translator()
        except LabError as e:
            raise to_http(e)
        info["model"] = {"config": translator.model.config.to_dict(), "vocab_size": len(translator.vocab),
                         "vocab_hash": translator.vocab_hash,
                         "parameters": translator.model.num_parameters()}
    return info


# ========== Translation Endpoint ==========
@app.post("/translate")
def translate_endpoint(req: TranslateRequest):
    """
    Returns:
        {"translation": str, "tokens": [subword, ...], "beam_width": int}
    """
    beam_width = req.beam_width or 1
    try:
        translator = get_translator()
        tokens = translator.translate_tokens(req.text, beam_width, req.max_len)
    except LabError as e:
        print(f"[App ERROR] translate failed: {e}")
        raise to_http(e)
    return {"translation": decode_bpe(tokens), "tokens": tokens, "beam_width": beam_width}


# ========== Evaluation Endpoint ==========
@app.post("/evaluate")
def evaluate_endpoint(req: EvaluateRequest):
    """Corpus BLEU / chrF for aligned hypothesis and reference lists"""
    try:
        report = bleu(req.hypotheses, req.references, req.smooth, per_sentence=req.per_sentence)
    except LabError as e:
        raise to_http(e)
    return report.to_dict()


# ========== Run Server ==========
if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="127.0.0.1", port=8000)
