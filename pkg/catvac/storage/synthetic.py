"""
Synthetic labelled audio: each class is noise confined to its own frequency band.
Used for toy manifests, tests and the end-to-end experiment.
"""

import logging
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import soundfile as sf
from scipy import signal

from ..errors import UserError
from ..services.features import AudioClip
from .manifest import ManifestRecord, write_manifest

logger = logging.getLogger(__name__)

# Disjoint bands in Hz, well apart on the mel scale
DEFAULT_BANDS: Tuple[Tuple[float, float], ...] = ((300.0, 700.0), (1500.0, 2300.0), (4000.0, 5600.0))

PEAK_AMPLITUDE = 0.5


def band_limited_noise(
    rng: np.random.Generator,
    n_samples: int,
    band: Tuple[float, float],
    sample_rate: int,
    order: int = 8,
) -> np.ndarray:
    """White noise through a zero-phase Butterworth band-pass, peak-normalized."""
    low, high = band
    if not 0 < low < high < sample_rate / 2:
        raise UserError(f"band {band} must lie inside (0, {sample_rate / 2}) Hz")
    sos = signal.butter(order, [low, high], btype="bandpass", fs=sample_rate, output="sos")
    filtered = signal.sosfiltfilt(sos, rng.standard_normal(n_samples))
    return PEAK_AMPLITUDE * filtered / np.max(np.abs(filtered))


def synthetic_clips(
    n_per_class: int,
    bands: Sequence[Tuple[float, float]] = DEFAULT_BANDS,
    seed: int = 0,
    sample_rate: int = 16000,
    duration: float = 1.0,
) -> List[AudioClip]:
    """
    n_per_class clips for each band, interleaved by class (0, 1, ..., K-1, 0, 1, ...).
    The label of a clip is the index of its band.
    """
    if n_per_class < 1:
        raise UserError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    n_samples = int(round(duration * sample_rate))
    clips = []
    for i in range(n_per_class):
        for label, band in enumerate(bands):
            clips.append(AudioClip(
                samples=band_limited_noise(rng, n_samples, band, sample_rate),
                sample_rate=sample_rate,
                source_path=f"synthetic/{label}_{i:04d}.wav",
                label=label,
            ))
    return clips


def write_synthetic_dataset(
    out_dir: Union[str, Path],
    n_per_class: int,
    bands: Sequence[Tuple[float, float]] = DEFAULT_BANDS,
    seed: int = 0,
    val_fraction: float = 0.1,
    test_fraction: float = 0.1,
) -> Path:
    """
    Write 16-bit PCM WAV files and a manifest.jsonl with per-class train/val/test splits.

    Returns:
        Path of the manifest
    """
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)

    n_test = int(round(test_fraction * n_per_class))
    n_val = int(round(val_fraction * n_per_class))
    records = []
    for clip in synthetic_clips(n_per_class, bands, seed):
        name = Path(clip.source_path).name
        sf.write(audio_dir / name, clip.samples, clip.sample_rate, subtype="PCM_16")

        index = int(Path(name).stem.split("_")[1])
        split = "test" if index < n_test else "val" if index < n_test + n_val else "train"
        records.append(ManifestRecord(path=f"audio/{name}", label=clip.label, split=split))

    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, records)
    logger.info(f"Wrote {len(records)} synthetic clips ({len(bands)} classes) to {out_dir}")
    return manifest
