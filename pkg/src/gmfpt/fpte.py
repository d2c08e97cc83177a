"""FPTE little-endian binary tensor files and their JSON sidecars.

Layout: magic ``b"FPTE"``, u32 format version (1), u32 dtype code
(1 = binary32), u64 rows, u64 dim, then ``rows * dim`` binary32 values in
row-major order.
"""

import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, MagicError, NonFiniteError, TruncatedError

MAGIC = b"FPTE"
VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sIIQQ")
HEADER_SIZE = _HEADER.size


def encode(matrix):
    """Serialize a 2-D array to FPTE bytes."""
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise FormatError(f"FPTE stores 2-D tensors, got shape {m.shape}")
    return _HEADER.pack(MAGIC, VERSION, DTYPE_F32, m.shape[0], m.shape[1]) + m.tobytes()


def decode(buf, allow_nonfinite=False):
    """Parse FPTE bytes into a float32 ``(rows, dim)`` array."""
    if len(buf) < HEADER_SIZE:
        if buf[:4] != MAGIC[: len(buf[:4])]:
            raise MagicError("not an FPTE file (bad magic)")
        raise TruncatedError(f"header truncated: {len(buf)} < {HEADER_SIZE} bytes")
    magic, version, dtype, rows, dim = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise MagicError(f"not an FPTE file (magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"unsupported FPTE version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported FPTE dtype code {dtype}")
    expected = rows * dim * 4
    payload = memoryview(buf)[HEADER_SIZE:]
    if len(payload) < expected:
        raise TruncatedError(
            f"payload truncated: {len(payload)} bytes, expected {expected} "
            f"for {rows}x{dim}"
        )
    if len(payload) > expected:
        raise FormatError(f"{len(payload) - expected} trailing bytes after payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(rows, dim).astype(np.float32)
    if not allow_nonfinite and not np.isfinite(arr).all():
        raise NonFiniteError("payload contains NaN or Inf")
    return arr


def payload_sha256(matrix):
    m = np.ascontiguousarray(matrix, dtype="<f4")
    return hashlib.sha256(m.tobytes()).hexdigest()


def write(path, matrix):
    """Write ``matrix`` to ``path``; returns the payload sha256."""
    data = encode(matrix)
    Path(path).write_bytes(data)
    return hashlib.sha256(data[HEADER_SIZE:]).hexdigest()


def read(path, allow_nonfinite=False):
    return decode(Path(path).read_bytes(), allow_nonfinite=allow_nonfinite)


def sidecar_path(path):
    return Path(str(path) + ".json")


def _round9(obj):
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return obj
        return float(f"{obj:.9g}")
    if isinstance(obj, dict):
        return {k: _round9(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round9(v) for v in obj]
    if isinstance(obj, np.generic):
        return _round9(obj.item())
    if isinstance(obj, np.ndarray):
        return _round9(obj.tolist())
    return obj


def dumps(obj):
    """JSON with every float rounded to 9 significant digits, sorted keys."""
    return json.dumps(_round9(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps(obj))


def read_json(path):
    return json.loads(Path(path).read_text())


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
