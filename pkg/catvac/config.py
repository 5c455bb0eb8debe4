"""
Run configuration and environment settings.

Environment variables (a .env file in the working directory is loaded first):
    CATVAC_SEED        overrides train.seed
    CATVAC_DEVICE      torch device, default "cpu"
    CATVAC_LOG_LEVEL   logging level, default INFO
    CATVAC_CHECKPOINT  checkpoint served by the API
"""

import logging
import os
from pathlib import Path
from typing import Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError, model_validator

from .errors import UserError
from .services.features import FeatureConfig
from .services.model import ModelConfig
from .services.trainer import TrainConfig

logger = logging.getLogger(__name__)


class ConfigError(UserError):
    pass


class Settings(BaseModel):
    seed: Optional[int] = None
    device: str = "cpu"
    log_level: str = "INFO"
    checkpoint: Optional[str] = None


def get_settings() -> Settings:
    """Read CATVAC_* variables, after loading a .env file if one exists."""
    load_dotenv()
    seed = os.environ.get("CATVAC_SEED")
    try:
        return Settings(
            seed=int(seed) if seed not in (None, "") else None,
            device=os.environ.get("CATVAC_DEVICE") or "cpu",
            log_level=(os.environ.get("CATVAC_LOG_LEVEL") or "INFO").upper(),
            checkpoint=os.environ.get("CATVAC_CHECKPOINT") or None,
        )
    except ValueError as e:
        raise ConfigError(f"CATVAC_SEED must be an integer, got {seed!r}") from e


class RunConfig(BaseModel):
    """
    Everything `catvac train` needs: where the prepared features live and the
    feature, model and optimization sections.

    The model section is derived from the other two when omitted.
    """
    features_dir: str
    features: FeatureConfig = FeatureConfig()
    model: Optional[ModelConfig] = None
    train: TrainConfig = TrainConfig()
    output: Optional[str] = None

    @model_validator(mode="after")
    def _consistent(self) -> "RunConfig":
        if self.model is None:
            self.model = ModelConfig(
                K=self.train.K,
                d_z=self.train.d_z,
                input_frames=self.features.target_frames,
                input_freq_bins=self.features.n_bins,
            )
        if (self.model.K, self.model.d_z) != (self.train.K, self.train.d_z):
            raise ValueError("K and d_z must agree between the model and train sections")
        if (self.model.input_frames, self.model.input_freq_bins) != (self.features.target_frames, self.features.n_bins):
            raise ValueError(
                f"model input {self.model.input_frames} x {self.model.input_freq_bins} does not match "
                f"features {self.features.target_frames} x {self.features.n_bins}"
            )
        return self


def load_run_config(path: Union[str, Path], settings: Optional[Settings] = None) -> RunConfig:
    """
    Parse a RunConfig JSON file, resolve features_dir against the file's
    directory and apply CATVAC_SEED.

    Raises:
        ConfigError: If the file is unreadable, invalid or names a missing features_dir
    """
    path = Path(path)
    try:
        config = RunConfig.model_validate_json(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}: {e}") from e

    features_dir = Path(config.features_dir)
    if not features_dir.is_absolute():
        features_dir = path.parent / features_dir
    if not features_dir.is_dir():
        raise ConfigError(f"features_dir {features_dir} does not exist")
    config.features_dir = str(features_dir)

    settings = settings or get_settings()
    if settings.seed is not None:
        logger.info(f"CATVAC_SEED overrides seed {config.train.seed} -> {settings.seed}")
        config.train = config.train.model_copy(update={"seed": settings.seed})
    return config
