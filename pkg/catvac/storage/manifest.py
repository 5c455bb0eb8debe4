"""
Dataset manifests and prepared feature indexes.

A manifest is newline-delimited JSON, one record per clip:
    {"path": "digits/3_01.wav", "label": 3, "split": "train"}
A prepared index has the same records plus a "cache" entry pointing at the
clip's CVAC file. Relative paths resolve against the file's own directory.
"""

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, Field, ValidationError

from ..errors import UserError
from ..services.features import (
    AudioError,
    FeatureConfig,
    FeatureTensor,
    NormStats,
    Spectrogram,
    extract,
    load_audio,
    normalize,
    prepare_features,
    window_and_mask,
)
from .container import CheckpointError, read_feature_cache, write_feature_cache

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

INDEX_FILE = "index.jsonl"
STATS_FILE = "norm_stats.json"
FEATURE_CONFIG_FILE = "feature_config.json"
CACHE_DIR = "cache"


class ManifestError(UserError):
    """A manifest or index cannot be parsed."""
    pass


class ManifestRecord(BaseModel):
    path: str
    label: Optional[int] = Field(default=None, ge=0)
    split: Literal["train", "val", "test"]
    cache: Optional[str] = None


class PrepareSummary(BaseModel):
    """What `prepare` produced."""
    counts: Dict[str, int]
    skipped: List[Tuple[str, str]]
    shape: Tuple[int, int]
    index_path: str
    stats_path: str

    @property
    def total(self) -> int:
        return sum(self.counts.values()) + len(self.skipped)

    @property
    def skipped_fraction(self) -> float:
        return len(self.skipped) / self.total if self.total else 0.0


def _resolve(base: Path, value: str) -> str:
    path = Path(value)
    return str(path if path.is_absolute() else base / path)


def read_manifest(path: Union[str, Path]) -> List[ManifestRecord]:
    """
    Parse a manifest or prepared index.

    Raises:
        ManifestError: "no records" for an empty file; malformed lines name their line number
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e

    base = path.parent
    records = []
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = ManifestRecord.model_validate_json(line)
        except ValidationError as e:
            raise ManifestError(f"{path}:{number}: malformed record: {e.errors()[0]['msg']}") from e
        record.path = _resolve(base, record.path)
        if record.cache is not None:
            record.cache = _resolve(base, record.cache)
        records.append(record)

    if not records:
        raise ManifestError("no records")
    logger.info(f"Read {len(records)} records from {path}")
    return records


def write_manifest(path: Union[str, Path], records: Sequence[ManifestRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(record.model_dump_json(exclude_none=True) + "\n")


def cache_name(record: ManifestRecord) -> str:
    """Stable cache file name: the audio stem plus a short hash of its full path."""
    digest = hashlib.sha1(record.path.encode("utf-8")).hexdigest()[:10]
    return f"{Path(record.path).stem}-{digest}.cvac"


def _extract_record(job: Tuple[ManifestRecord, FeatureConfig]) -> Union[Spectrogram, str]:
    record, config = job
    try:
        return extract(load_audio(record.path, record.label), config)
    except AudioError as e:
        return str(e)


def prepare_dataset(
    manifest_path: Union[str, Path],
    config: FeatureConfig,
    out_dir: Union[str, Path],
) -> PrepareSummary:
    """
    Extract every manifest entry, fit NormStats on the train split only and
    write one CVAC cache per clip plus the index, stats and feature config.

    Unreadable files are skipped and listed in the summary.

    Raises:
        ManifestError: If the manifest is empty or has no usable train records
    """
    records = read_manifest(manifest_path)
    out_dir = Path(out_dir)

    # Extract features, in worker processes when configured
    jobs = [(record, config) for record in records]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_extract_record, jobs))
    else:
        results = [_extract_record(job) for job in jobs]

    # Sort results by split and collect the failures
    by_split: Dict[str, List[Tuple[ManifestRecord, Spectrogram]]] = {split: [] for split in SPLITS}
    skipped: List[Tuple[str, str]] = []
    for record, result in zip(records, results):
        if isinstance(result, str):
            logger.warning(f"Skipping {record.path}: {result}")
            skipped.append((record.path, result))
        else:
            by_split[record.split].append((record, result))

    if not by_split["train"]:
        raise ManifestError(f"{manifest_path} has no readable train records")

    # Statistics come from the train split only
    _, stats = normalize([spec for _, spec in by_split["train"]])

    # Normalize every split with the train statistics, then window and cache each clip
    index: List[ManifestRecord] = []
    shape = (config.target_frames, config.n_bins)
    for split in SPLITS:
        if not by_split[split]:
            continue
        tensors, _ = normalize([spec for _, spec in by_split[split]], stats)
        for (record, _), tensor in zip(by_split[split], tensors):
            windowed = window_and_mask(tensor, config.target_frames)
            relative = Path(CACHE_DIR) / split / cache_name(record)
            write_feature_cache(out_dir / relative, windowed)
            index.append(record.model_copy(update={"cache": str(relative)}))

    # Index, statistics and feature settings sit next to the cache
    index_path = out_dir / INDEX_FILE
    stats_path = out_dir / STATS_FILE
    write_manifest(index_path, index)
    stats_path.write_text(stats.model_dump_json(indent=2))
    (out_dir / FEATURE_CONFIG_FILE).write_text(config.model_dump_json(indent=2))

    counts = {split: len(by_split[split]) for split in SPLITS}
    logger.info(f"Prepared {sum(counts.values())} clips {counts}, shape {shape}, skipped {len(skipped)}")
    return PrepareSummary(
        counts=counts,
        skipped=skipped,
        shape=shape,
        index_path=str(index_path),
        stats_path=str(stats_path),
    )


def load_prepared_settings(features_dir: Union[str, Path]) -> Tuple[NormStats, FeatureConfig]:
    """NormStats and FeatureConfig written by prepare_dataset."""
    features_dir = Path(features_dir)
    try:
        stats = NormStats.model_validate_json((features_dir / STATS_FILE).read_text())
        config = FeatureConfig.model_validate_json((features_dir / FEATURE_CONFIG_FILE).read_text())
    except OSError as e:
        raise CheckpointError(f"{features_dir} is not a prepared feature directory: {e}") from e
    except ValidationError as e:
        raise CheckpointError(f"corrupt settings in {features_dir}: {e}") from e
    return stats, config


def load_split(
    path: Union[str, Path],
    split: str,
    stats: Optional[NormStats] = None,
    config: Optional[FeatureConfig] = None,
) -> Tuple[List[FeatureTensor], List[Optional[int]]]:
    """
    Load the FeatureTensors of one split.

    Args:
        path: A prepared index (records with "cache") or a raw manifest
        split: "train", "val" or "test"
        stats: Required for raw manifests; features are extracted on the fly
        config: Feature settings for raw manifests

    Returns:
        (tensors, labels) in manifest order

    Raises:
        CheckpointError: Naming the first missing cache file
        ManifestError: If the split has no records
    """
    if split not in SPLITS:
        raise ManifestError(f"unknown split {split!r}")
    records = [record for record in read_manifest(path) if record.split == split]
    if not records:
        raise ManifestError(f"no {split} records in {path}")
    labels = [record.label for record in records]

    if all(record.cache is not None for record in records):
        for record in records:
            if not Path(record.cache).is_file():
                raise CheckpointError(f"missing feature cache {record.cache}")
        hop = config.hop if config is not None else 0
        return [read_feature_cache(record.cache, frame_hop=hop, label=record.label) for record in records], labels

    if stats is None or config is None:
        raise UserError(f"{path} is a raw manifest; normalization statistics and a feature config are required")
    clips = [load_audio(record.path, record.label) for record in records]
    tensors, _ = prepare_features(clips, config, stats)
    return tensors, labels
