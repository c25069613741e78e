"""File formats: IQSN snapshot streams, amplitude CSV input, atomic result writers.

IQSN layout (all little-endian):

    offset  size        field
    0       4           magic b"IQSN"
    4       4 (u32)     version (1)
    8       4 (u32)     M, number of array elements
    12      8 (u64)     snapshot count
    20      count*M*8   float32 (re, im) pairs, snapshot-major
"""

import json
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Callable, Iterable, Union

import numpy as np
import pandas as pd

from src.idlewatch.errors import SnapshotFormatError

logger = logging.getLogger(__name__)

IQSN_MAGIC = b"IQSN"
IQSN_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
_SAMPLE_DTYPE = np.dtype("<c8")

PathLike = Union[str, os.PathLike]


def _write_atomic(path: PathLike, writer: Callable[[Any], None], mode: str = "wb") -> Path:
    """Write through a temporary file in the target directory, then rename."""
    target = Path(path)
    directory = target.parent if str(target.parent) else Path(".")
    directory.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=directory)
    try:
        with os.fdopen(fd, mode) as handle:
            writer(handle)
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return target


def write_iqsn(path: PathLike, snapshots: np.ndarray) -> Path:
    matrix = np.asarray(snapshots)
    if matrix.ndim != 2:
        raise SnapshotFormatError(f"expected an (N, M) snapshot array, got shape {matrix.shape}")
    count, num_elements = matrix.shape
    payload = np.ascontiguousarray(matrix, dtype=_SAMPLE_DTYPE)

    def _write(handle):
        handle.write(_HEADER.pack(IQSN_MAGIC, IQSN_VERSION, num_elements, count))
        handle.write(payload.tobytes())

    logger.debug("writing %d snapshots (M=%d) to %s", count, num_elements, path)
    return _write_atomic(path, _write)


def read_iqsn(path: PathLike) -> np.ndarray:
    """Read an IQSN file into a complex128 (N, M) array."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise SnapshotFormatError(f"cannot read {path}: {e}") from e
    if len(raw) < _HEADER.size:
        raise SnapshotFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, num_elements, count = _HEADER.unpack_from(raw)
    if magic != IQSN_MAGIC:
        raise SnapshotFormatError(f"{path}: bad magic {magic!r}")
    if version != IQSN_VERSION:
        raise SnapshotFormatError(f"{path}: unsupported version {version}")
    if num_elements < 1:
        raise SnapshotFormatError(f"{path}: invalid element count {num_elements}")
    expected = count * num_elements * _SAMPLE_DTYPE.itemsize
    body = raw[_HEADER.size:]
    if len(body) != expected:
        raise SnapshotFormatError(
            f"{path}: payload is {len(body)} bytes, header promises {expected}"
        )
    samples = np.frombuffer(body, dtype=_SAMPLE_DTYPE).reshape(count, num_elements)
    return samples.astype(np.complex128)


def read_amplitudes_csv(path: PathLike) -> np.ndarray:
    """Amplitude stream from a CSV: column ``r`` if present, else the first column."""
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise SnapshotFormatError(f"cannot read amplitudes from {path}: {e}") from e
    column = "r" if "r" in frame.columns else frame.columns[0]
    values = pd.to_numeric(frame[column], errors="coerce").to_numpy(dtype=float)
    if np.isnan(values).any() or (values < 0).any():
        raise SnapshotFormatError(f"{path}: column {column!r} must hold nonnegative numbers")
    return values


def write_csv(path: PathLike, frame: pd.DataFrame) -> Path:
    return _write_atomic(path, lambda handle: frame.to_csv(handle, index=False), mode="w")


def write_json(path: PathLike, payload: Any) -> Path:
    return _write_atomic(path, lambda handle: json.dump(payload, handle, indent=2), mode="w")


def write_jsonl(path: PathLike, lines: Iterable[str]) -> Path:
    """One JSON document per line, replacing the file atomically."""
    return _write_atomic(path, lambda handle: handle.writelines(f"{line}\n" for line in lines), mode="w")
