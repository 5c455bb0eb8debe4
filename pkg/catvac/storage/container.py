"""
Binary on-disk formats.

"CVAC" feature cache (one file per clip):
    <4s magic "CVAC"> <u32 version> <u32 T> <u32 F>
    T*F little-endian float32 values, row-major
    T bytes of mask

"CVCK" tensor container (checkpoints, K-means centroids):
    <4s magic "CVCK"> <u32 version> <u32 metadata length>
    UTF-8 JSON metadata {"tensors": [{name, dtype, shape, offset, nbytes}], "meta": {...}}
    raw little-endian tensor bytes
"""

import json
import logging
import os
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from ..errors import UserError
from ..services.features import FeatureTensor

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"CVAC"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIII")

CONTAINER_MAGIC = b"CVCK"
CONTAINER_VERSION = 1
_CONTAINER_HEADER = struct.Struct("<4sII")

_SUPPORTED_DTYPES = {"<f4", "<f8", "<i8", "<i4", "|u1", "|b1"}


class CheckpointError(UserError):
    """A cache or container file is missing, corrupt or of an unknown version."""
    pass


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as handle:
        handle.write(payload)
    os.replace(tmp, path)


def write_feature_cache(path: Union[str, Path], tensor: FeatureTensor) -> None:
    """Write one FeatureTensor in the CVAC format."""
    values = np.ascontiguousarray(tensor.values, dtype="<f4")
    mask = np.ascontiguousarray(tensor.mask, dtype=np.uint8)
    frames, bins = values.shape
    if mask.shape != (frames,):
        raise CheckpointError(f"mask length {mask.shape} does not match {frames} frames")
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, frames, bins)
    _atomic_write(Path(path), header + values.tobytes() + mask.tobytes())


def read_feature_cache(path: Union[str, Path], frame_hop: int = 0, label: Optional[int] = None) -> FeatureTensor:
    """
    Read a CVAC file.

    Raises:
        CheckpointError: On a missing file, bad magic, unknown version or truncation
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read feature cache {path}: {e}") from e

    if len(raw) < _FEATURE_HEADER.size:
        raise CheckpointError(f"truncated feature cache {path}")
    magic, version, frames, bins = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise CheckpointError(f"{path} is not a CVAC feature cache")
    if version != FEATURE_VERSION:
        raise CheckpointError(f"{path} has unsupported feature cache version {version}")

    n_values = frames * bins
    expected = _FEATURE_HEADER.size + 4 * n_values + frames
    if len(raw) != expected:
        raise CheckpointError(f"feature cache {path} has {len(raw)} bytes, expected {expected}")

    values = np.frombuffer(raw, dtype="<f4", count=n_values, offset=_FEATURE_HEADER.size).reshape(frames, bins)
    mask = np.frombuffer(raw, dtype=np.uint8, count=frames, offset=_FEATURE_HEADER.size + 4 * n_values)
    return FeatureTensor(values=values.astype(np.float32), mask=mask.copy(), frame_hop=frame_hop, label=label)


def write_container(path: Union[str, Path], tensors: Dict[str, np.ndarray], meta: Dict[str, Any]) -> None:
    """
    Write named arrays plus JSON metadata in the CVCK format.

    Args:
        path: Destination file (written atomically)
        tensors: name -> array (float32/64, int32/64, uint8, bool)
        meta: JSON-serializable metadata
    """
    index = []
    chunks = []
    offset = 0
    for name, array in tensors.items():
        array = np.asarray(array)
        little = np.ascontiguousarray(array.astype(array.dtype.newbyteorder("<"), copy=False))
        dtype = little.dtype.str
        if dtype not in _SUPPORTED_DTYPES:
            raise CheckpointError(f"tensor {name} has unsupported dtype {dtype}")
        blob = little.tobytes()
        index.append({"name": name, "dtype": dtype, "shape": list(little.shape), "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)

    header_json = json.dumps({"tensors": index, "meta": meta}, sort_keys=True).encode("utf-8")
    header = _CONTAINER_HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION, len(header_json))
    _atomic_write(Path(path), header + header_json + b"".join(chunks))
    logger.info(f"Wrote container {path} ({len(index)} tensors, {offset} bytes)")


def read_container(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """
    Read a CVCK file.

    Returns:
        (name -> array, metadata)

    Raises:
        CheckpointError: On a missing file, bad magic, unknown version or truncation
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    if len(raw) < _CONTAINER_HEADER.size:
        raise CheckpointError(f"truncated checkpoint {path}")
    magic, version, meta_len = _CONTAINER_HEADER.unpack_from(raw)
    if magic != CONTAINER_MAGIC:
        raise CheckpointError(f"{path} is not a CVCK container")
    if version != CONTAINER_VERSION:
        raise CheckpointError(f"{path} has unsupported container version {version}")

    start = _CONTAINER_HEADER.size
    try:
        header = json.loads(raw[start:start + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt metadata in {path}: {e}") from e

    payload = raw[start + meta_len:]
    tensors = {}
    for entry in header["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"tensor {entry['name']} is truncated in {path}")
        dtype = np.dtype(entry["dtype"])
        count = entry["nbytes"] // dtype.itemsize
        array = np.frombuffer(payload, dtype=dtype, count=count, offset=entry["offset"])
        tensors[entry["name"]] = array.reshape(entry["shape"]).astype(dtype.newbyteorder("="))
    return tensors, header.get("meta", {})
