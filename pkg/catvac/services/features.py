"""
Audio feature pipeline.
Turns audio files into the normalized time-frequency tensors the model consumes:
resampling, STFT magnitude, mel (or trimmed linear) projection, normalization and
fixed-length windowing with a validity mask.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from math import gcd
from typing import List, Literal, Optional, Sequence, Tuple, Union

import librosa
import numpy as np
import soundfile as sf
from pydantic import BaseModel, field_validator, model_validator
from scipy import signal

from ..errors import ShapeError, UserError

logger = logging.getLogger(__name__)

# Frame counts must survive four stride-2 encoder stages and four x2 decoder stages
FRAME_MULTIPLE = 16

VARIANCE_FLOOR = 1e-8
VAD_RELATIVE_THRESHOLD = 1e-6

# Windowed-sinc resampling filter
RESAMPLE_TAPS_PER_PHASE = 64
RESAMPLE_KAISER_BETA = 8.6


class AudioError(UserError):
    """Unusable audio: empty, too short or undecodable."""
    pass


@dataclass
class AudioClip:
    """Mono audio samples with their rate and provenance."""
    samples: np.ndarray
    sample_rate: int
    source_path: str = ""
    label: Optional[int] = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise AudioError(f"invalid sample rate {self.sample_rate}")
        if self.label is not None and self.label < 0:
            raise AudioError(f"negative label {self.label} for {self.source_path or 'clip'}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    """Log-compressed T x F grid before normalization, with per-frame energies."""
    values: np.ndarray
    frame_energy: np.ndarray
    frame_hop: int
    label: Optional[int] = None
    source_path: str = ""


@dataclass
class FeatureTensor:
    """
    The model input x: a T x F grid of values in [0, 1] plus a T-length mask
    (1 = valid frame).

    frame_energy holds pre-normalization frame energies until the tensor has
    been windowed; it is what the activity mask is computed from.
    """
    values: np.ndarray
    mask: np.ndarray
    frame_hop: int
    label: Optional[int] = None
    frame_energy: Optional[np.ndarray] = None

    @property
    def n_frames(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_bins(self) -> int:
        return int(self.values.shape[1])


class NormStats(BaseModel):
    """Training-set statistics: per-bin mean/variance and the global min-max range."""
    mean: List[float]
    variance: List[float]
    min: float
    max: float

    @field_validator("variance")
    @classmethod
    def _positive_variance(cls, value: List[float]) -> List[float]:
        if any(v <= 0 for v in value):
            raise ValueError("variance entries must be > 0")
        return value

    @model_validator(mode="after")
    def _check_range(self) -> "NormStats":
        if len(self.mean) != len(self.variance):
            raise ValueError("mean and variance lengths differ")
        if not self.max > self.min:
            raise ValueError("max must exceed min")
        return self


class FeatureConfig(BaseModel):
    """Front-end settings. Defaults follow the urban-scene pipeline (4 s windows)."""
    sample_rate: int = 16000
    window_len: int = 960
    hop: int = 480
    frontend: Literal["mel", "linear"] = "mel"
    n_mels: int = 128
    linear_bins: int = 64
    target_frames: int = 128
    workers: int = 1

    @field_validator("window_len")
    @classmethod
    def _even_window(cls, value: int) -> int:
        if value <= 0 or value % 2:
            raise ValueError("window_len must be a positive even number")
        return value

    @field_validator("sample_rate", "hop", "workers")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value <= 0:
            raise ValueError("must be positive")
        return value

    @field_validator("target_frames", "n_mels", "linear_bins")
    @classmethod
    def _multiple_of_16(cls, value: int) -> int:
        if value <= 0 or value % FRAME_MULTIPLE:
            raise ValueError(f"must be a positive multiple of {FRAME_MULTIPLE}")
        return value

    @property
    def n_bins(self) -> int:
        return self.n_mels if self.frontend == "mel" else self.linear_bins

    @classmethod
    def audiomnist(cls) -> "FeatureConfig":
        """1 s spoken digits: lowest 64 linear bins, 32 frames."""
        return cls(frontend="linear", linear_bins=64, target_frames=32)

    @classmethod
    def urbansound8k(cls) -> "FeatureConfig":
        """4 s excerpts: 128 mel bins, 128 frames."""
        return cls(frontend="mel", n_mels=128, target_frames=128)

    @classmethod
    def tau2019(cls) -> "FeatureConfig":
        """10 s scene recordings: 128 mel bins, 320 frames."""
        return cls(frontend="mel", n_mels=128, target_frames=320)

    @classmethod
    def synthetic(cls) -> "FeatureConfig":
        """1 s band-limited noise clips: 64 mel bins spanning the full band, 32 frames."""
        return cls(frontend="mel", n_mels=64, target_frames=32)


def load_audio(path: str, label: Optional[int] = None) -> AudioClip:
    """
    Decode a WAV file (PCM 16/24/32-bit or 32-bit float) to mono.

    Args:
        path: Audio file path
        label: Optional class id carried along with the clip

    Returns:
        AudioClip with stereo channels averaged

    Raises:
        AudioError: If the file cannot be decoded or holds no samples
    """
    try:
        data, sample_rate = sf.read(path, dtype="float64", always_2d=True)
    except (RuntimeError, OSError, ValueError) as e:
        logger.error(f"Failed to decode audio file {path}: {str(e)}")
        raise AudioError(f"cannot decode {path}: {e}") from e

    if data.size == 0:
        raise AudioError(f"empty clip: {path}")

    return AudioClip(samples=data.mean(axis=1), sample_rate=int(sample_rate), source_path=str(path), label=label)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """
    Band-limited rate conversion with a polyphase Kaiser-windowed sinc filter
    (64 taps per phase).

    Raises:
        AudioError: "empty clip" for clips without samples
    """
    if clip.samples.size == 0:
        raise AudioError("empty clip")
    if target_rate <= 0:
        raise AudioError(f"invalid target rate {target_rate}")
    if clip.sample_rate == target_rate:
        return replace(clip, samples=clip.samples.copy())

    divisor = gcd(int(clip.sample_rate), int(target_rate))
    up = int(target_rate) // divisor
    down = int(clip.sample_rate) // divisor
    max_rate = max(up, down)
    half_len = (RESAMPLE_TAPS_PER_PHASE // 2) * max_rate
    taps = signal.firwin(2 * half_len + 1, 1.0 / max_rate, window=("kaiser", RESAMPLE_KAISER_BETA))

    samples = signal.resample_poly(clip.samples, up, down, window=taps)
    return replace(clip, samples=samples, sample_rate=int(target_rate))


def stft_magnitude(clip: AudioClip, window_len: int, hop: int) -> np.ndarray:
    """
    Hann-windowed STFT magnitude without centering; frames that would read past
    the end of the clip are dropped.

    Returns:
        T x (window_len/2 + 1) array of magnitudes

    Raises:
        AudioError: "clip too short" when fewer than window_len samples exist
    """
    if window_len <= 0 or window_len % 2:
        raise AudioError(f"window length must be even, got {window_len}")
    if hop <= 0:
        raise AudioError(f"hop must be positive, got {hop}")
    if clip.samples.size < window_len:
        raise AudioError("clip too short")

    spectrum = librosa.stft(
        clip.samples,
        n_fft=window_len,
        hop_length=hop,
        win_length=window_len,
        window="hann",
        center=False,
    )
    return np.abs(spectrum).T


@lru_cache(maxsize=16)
def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular HTK-mel filters from 0 Hz to Nyquist, each peak-normalized to 1."""
    weights = librosa.filters.mel(
        sr=sample_rate,
        n_fft=n_fft,
        n_mels=n_mels,
        fmin=0.0,
        fmax=sample_rate / 2.0,
        htk=True,
        norm=None,
    ).astype(np.float64)
    peaks = weights.max(axis=1, keepdims=True)
    if np.any(peaks <= 0):
        raise AudioError("filterbank overdetermined")
    weights = weights / peaks
    weights.setflags(write=False)
    return weights


def mel_project(spec: np.ndarray, n_mels: int, sample_rate: int, log_compress: bool = True) -> np.ndarray:
    """
    Project a T x F_lin magnitude grid onto n_mels triangular filters, then
    apply log(1 + value).

    Raises:
        AudioError: "filterbank overdetermined" when n_mels exceeds F_lin
    """
    if n_mels < 1:
        raise AudioError(f"n_mels must be >= 1, got {n_mels}")
    n_linear = spec.shape[1]
    if n_mels > n_linear:
        raise AudioError("filterbank overdetermined")

    weights = mel_filterbank(n_mels, 2 * (n_linear - 1), sample_rate)
    projected = spec @ weights.T
    return np.log1p(projected) if log_compress else projected


def extract(clip: AudioClip, config: FeatureConfig) -> Spectrogram:
    """Resample, STFT, project and log-compress one clip."""
    clip = resample(clip, config.sample_rate)
    magnitude = stft_magnitude(clip, config.window_len, config.hop)
    energy = np.square(magnitude).sum(axis=1)

    if config.frontend == "mel":
        values = mel_project(magnitude, config.n_mels, config.sample_rate)
    else:
        if config.linear_bins > magnitude.shape[1]:
            raise AudioError(f"cannot keep {config.linear_bins} of {magnitude.shape[1]} linear bins")
        values = np.log1p(magnitude[:, : config.linear_bins])

    return Spectrogram(values=values, frame_energy=energy, frame_hop=config.hop, label=clip.label, source_path=clip.source_path)


def _apply_stats(grid: np.ndarray, stats: NormStats) -> np.ndarray:
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.sqrt(np.asarray(stats.variance, dtype=np.float64))
    standardized = (grid - mean) / std
    scaled = (standardized - stats.min) / (stats.max - stats.min)
    return np.clip(scaled, 0.0, 1.0).astype(np.float32)


def normalize(
    feats: Sequence[Union[Spectrogram, np.ndarray]],
    stats: Optional[NormStats] = None,
) -> Tuple[List[FeatureTensor], NormStats]:
    """
    Per-bin standardization followed by a global min-max scaling to [0, 1].

    Args:
        feats: T x F grids (or Spectrograms); the training set when stats is None
        stats: Statistics fitted on the training set, reused for val/test

    Returns:
        (normalized FeatureTensors with all-ones masks, the statistics used)
    """
    if not feats:
        raise UserError("no feature grids to normalize")

    # Collect grids with their frame energies, hops and labels
    grids = []
    energies = []
    hops = []
    labels = []
    for item in feats:
        if isinstance(item, Spectrogram):
            grid = np.asarray(item.values, dtype=np.float64)
            energies.append(np.asarray(item.frame_energy, dtype=np.float64))
            hops.append(item.frame_hop)
            labels.append(item.label)
        else:
            grid = np.asarray(item, dtype=np.float64)
            energies.append(np.square(grid).sum(axis=1))
            hops.append(0)
            labels.append(None)
        if grid.ndim != 2:
            raise ShapeError(f"expected a T x F grid, got shape {grid.shape}")
        grids.append(grid)

    n_bins = grids[0].shape[1]
    if any(g.shape[1] != n_bins for g in grids):
        raise ShapeError("feature grids disagree on the number of frequency bins")

    # Fit per-bin mean and variance plus the global range on the training grids
    if stats is None:
        stacked = np.concatenate(grids, axis=0)
        mean = stacked.mean(axis=0)
        variance = stacked.var(axis=0)
        flat = variance < VARIANCE_FLOOR
        if flat.any():
            logger.warning(f"{int(flat.sum())} frequency bin(s) have zero variance, flooring at {VARIANCE_FLOOR}")
            variance = np.maximum(variance, VARIANCE_FLOOR)

        std = np.sqrt(variance)
        low = min(float(((g - mean) / std).min()) for g in grids)
        high = max(float(((g - mean) / std).max()) for g in grids)
        if not high > low:
            logger.warning("Standardized training features are constant; using a unit min-max range")
            high = low + 1.0
        stats = NormStats(mean=mean.tolist(), variance=variance.tolist(), min=low, max=high)
        logger.info(f"Fitted normalization statistics on {len(grids)} grid(s), {stacked.shape[0]} frames")
    elif len(stats.mean) != n_bins:
        raise ShapeError(f"statistics cover {len(stats.mean)} bins, features have {n_bins}")

    # Standardize, min-max scale and attach all-ones masks
    tensors = [
        FeatureTensor(
            values=_apply_stats(grid, stats),
            mask=np.ones(grid.shape[0], dtype=np.uint8),
            frame_hop=hop,
            label=label,
            frame_energy=energy,
        )
        for grid, energy, hop, label in zip(grids, energies, hops, labels)
    ]
    return tensors, stats


def window_and_mask(feats: FeatureTensor, target_frames: int) -> FeatureTensor:
    """
    Fit a tensor to target_frames: right zero-padding (mask 0) for short inputs,
    center crop for long ones. Original frames are valid when their
    pre-normalization energy exceeds 1e-6 x the clip's peak frame energy.
    """
    if target_frames <= 0 or target_frames % FRAME_MULTIPLE:
        raise ShapeError(f"target_frames must be a positive multiple of {FRAME_MULTIPLE}, got {target_frames}")

    values = np.asarray(feats.values, dtype=np.float32)
    n_frames = values.shape[0]
    energy = feats.frame_energy if feats.frame_energy is not None else np.square(values.astype(np.float64)).sum(axis=1)
    peak = float(np.max(energy)) if n_frames else 0.0
    active = np.asarray(energy > VAD_RELATIVE_THRESHOLD * peak) if peak > 0 else np.zeros(n_frames, dtype=bool)

    if n_frames >= target_frames:
        start = (n_frames - target_frames) // 2
        values = values[start:start + target_frames]
        active = active[start:start + target_frames]
    else:
        values = np.concatenate([values, np.zeros((target_frames - n_frames, values.shape[1]), dtype=np.float32)])
        active = np.concatenate([active, np.zeros(target_frames - n_frames, dtype=bool)])

    if not active.any():
        logger.warning("No frame above the activity threshold; marking all original frames valid")
        active[: min(n_frames, target_frames)] = True

    return FeatureTensor(
        values=np.ascontiguousarray(values),
        mask=active.astype(np.uint8),
        frame_hop=feats.frame_hop,
        label=feats.label,
    )


def _extract_job(job: Tuple[AudioClip, FeatureConfig]) -> Spectrogram:
    clip, config = job
    return extract(clip, config)


def extract_many(clips: Sequence[AudioClip], config: FeatureConfig) -> List[Spectrogram]:
    """Extract every clip, in a process pool when config.workers > 1. Order is preserved."""
    jobs = [(clip, config) for clip in clips]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            return list(pool.map(_extract_job, jobs))
    return [_extract_job(job) for job in jobs]


def prepare_features(
    clips: Sequence[AudioClip],
    config: FeatureConfig,
    stats: Optional[NormStats] = None,
) -> Tuple[List[FeatureTensor], NormStats]:
    """
    Full pipeline: extract → normalize → window_and_mask.
    Fits NormStats when none are given (training split).
    """
    spectrograms = extract_many(clips, config)
    normalized, stats = normalize(spectrograms, stats)
    return [window_and_mask(tensor, config.target_frames) for tensor in normalized], stats
