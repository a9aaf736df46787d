"""Binary tensor container used by every on-disk artifact.

Layout (little-endian throughout):

    magic     5 bytes ASCII   one of AVOL1 / ASLB1 / AATT1 / AFTR1
    dtype     u8              code from DTYPE_CODES
    ndim      u8              number of dimensions (3 for volumes)
    dims      ndim * u32      shape, C order
    spacing   3 * f32         per-axis spacing in mm (zeros when not spatial)
    data      raw voxels, C order

Volumes (AVOL1) are always 3-D, so their header carries the shape triple
and spacing triple directly. Feature tensors (AFTR1) use ndim=4. A JSON
sidecar next to each volume holds the human-readable metadata.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC_VOLUME = b"AVOL1"
MAGIC_SLABS = b"ASLB1"
MAGIC_ATTENTION = b"AATT1"
MAGIC_FEATURES = b"AFTR1"

KNOWN_MAGICS = (MAGIC_VOLUME, MAGIC_SLABS, MAGIC_ATTENTION, MAGIC_FEATURES)

DTYPE_CODES = {
    0: np.dtype("<f4"),
    1: np.dtype("<i2"),
    2: np.dtype("u1"),
    3: np.dtype("<f8"),
}
_CODE_FOR_DTYPE = {v: k for k, v in DTYPE_CODES.items()}


def write_tensor(path: str | Path, magic: bytes, array: np.ndarray,
                 spacing: tuple[float, float, float] = (0.0, 0.0, 0.0)) -> None:
    """Write ``array`` to ``path`` under the given magic."""
    if magic not in KNOWN_MAGICS:
        raise ValueError(f"unknown container magic {magic!r}")
    arr = np.ascontiguousarray(array)
    dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    dtype = np.dtype(dtype)
    if dtype not in _CODE_FOR_DTYPE:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("too many dimensions")
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(magic)
            fh.write(struct.pack("<BB", _CODE_FOR_DTYPE[dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(struct.pack("<3f", *spacing))
            fh.write(arr.astype(dtype, copy=False).tobytes(order="C"))
    except OSError as exc:
        raise DataError(f"failed to write {path}: {exc}") from exc


def read_tensor(path: str | Path, expect_magic: bytes | None = None
                ) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a container; returns (array, spacing). Raises DataError on mismatch."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"failed to read {path}: {exc}") from exc
    if len(raw) < 7:
        raise DataError(f"{path}: truncated container header")
    magic = raw[:5]
    if magic not in KNOWN_MAGICS:
        raise DataError(f"{path}: unknown magic {magic!r}")
    if expect_magic is not None and magic != expect_magic:
        raise DataError(f"{path}: expected magic {expect_magic!r}, found {magic!r}")
    code, ndim = struct.unpack_from("<BB", raw, 5)
    if code not in DTYPE_CODES:
        raise DataError(f"{path}: unknown dtype code {code}")
    header_end = 7 + 4 * ndim + 12
    if len(raw) < header_end:
        raise DataError(f"{path}: truncated container header")
    shape = struct.unpack_from(f"<{ndim}I", raw, 7)
    spacing = struct.unpack_from("<3f", raw, 7 + 4 * ndim)
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(shape)) * dtype.itemsize
    body = raw[header_end:]
    if len(body) != expected:
        raise DataError(
            f"{path}: payload size {len(body)} does not match shape {shape}")
    arr = np.frombuffer(body, dtype=dtype).reshape(shape).copy()
    return arr, spacing


def peek_magic(path: str | Path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read(5)
