"""
FastAPI inference service.
Assigns a cluster to raw audio with a trained checkpoint. The model is loaded
once, on first use, from CATVAC_CHECKPOINT and only ever read afterwards.
"""

import logging
import os
from typing import List, Optional, Tuple

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from ..errors import UserError
from ..services.features import AudioClip, prepare_features
from ..services.model import CategoricalVAE
from ..services.trainer import Checkpoint, predict_probs

# Configure logging
logging.basicConfig(level=os.environ.get("CATVAC_LOG_LEVEL", "INFO").upper())
logger = logging.getLogger(__name__)

_loaded: Optional[Tuple[Checkpoint, CategoricalVAE]] = None


class ModelUnavailableError(UserError):
    pass


def get_model() -> Tuple[Checkpoint, CategoricalVAE]:
    """
    Get or load the served checkpoint and its network.

    Raises:
        ModelUnavailableError: If CATVAC_CHECKPOINT is unset or unusable
    """
    global _loaded

    if _loaded is not None:
        return _loaded

    path = os.environ.get("CATVAC_CHECKPOINT")
    if not path:
        error_msg = "No checkpoint configured. Set the CATVAC_CHECKPOINT environment variable."
        logger.error(error_msg)
        raise ModelUnavailableError(error_msg)

    try:
        checkpoint = Checkpoint.load(path)
    except UserError as e:
        logger.error(f"Failed to load checkpoint {path}: {str(e)}")
        raise ModelUnavailableError(str(e)) from e

    if checkpoint.norm_stats is None or checkpoint.feature_config is None:
        raise ModelUnavailableError(f"{path} carries no feature settings; it cannot score raw audio")

    _loaded = (checkpoint, checkpoint.build_model("cpu"))
    logger.info(f"Loaded checkpoint {path} (K={checkpoint.model_config.K}, epoch {checkpoint.epoch})")
    return _loaded


def reset_model() -> None:
    """Forget the loaded model so the next request reloads CATVAC_CHECKPOINT."""
    global _loaded
    _loaded = None


app = FastAPI(title="catvac assignment API")

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_methods=["*"],
    allow_headers=["*"],
)


class AssignRequest(BaseModel):
    """Mono audio samples at any rate; they are resampled to the checkpoint's rate."""
    samples: List[float] = Field(..., min_length=1)
    sample_rate: int = Field(..., gt=0)


class AssignResponse(BaseModel):
    cluster: int
    probabilities: List[float]


@app.get("/")
async def health_check():
    return {"status": "ok", "service": "catvac", "model_loaded": _loaded is not None}


@app.post("/api/assign", response_model=AssignResponse)
def assign(request: AssignRequest) -> AssignResponse:
    """Cluster id (argmax of the encoder probabilities) plus the probabilities themselves."""
    try:
        checkpoint, model = get_model()
    except ModelUnavailableError as e:
        raise HTTPException(status_code=503, detail=str(e))

    clip = AudioClip(samples=np.asarray(request.samples), sample_rate=request.sample_rate, source_path="request")
    try:
        tensors, _ = prepare_features([clip], checkpoint.feature_config, checkpoint.norm_stats)
    except UserError as e:
        logger.warning(f"Rejected audio: {str(e)}")
        raise HTTPException(status_code=400, detail=str(e))

    probs = predict_probs(tensors, checkpoint, model=model)[0]
    return AssignResponse(cluster=int(np.argmax(probs)), probabilities=[float(p) for p in probs])
