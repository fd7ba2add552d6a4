"""Binary array files and 16-bit image export.

Array file layout (little-endian)::

    offset 0   4 bytes  magic b"FPMA"
    offset 4   u16      version (1)
    offset 6   u8       dtype code: 1 float64, 2 complex128, 3 uint16
    offset 7   u8       ndim
    offset 8   ndim*u64 dims
    then       row-major payload
"""

import os
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np
import tifffile
from loguru import logger

from progress.errors import DomainError, FormatError

MAGIC = b"FPMA"
VERSION = 1
SUFFIX = ".fpma"
_HEADER = struct.Struct("<4sHBB")

DTYPE_CODES = {
    1: np.dtype("<f8"),
    2: np.dtype("<c16"),
    3: np.dtype("<u2"),
}
_CODE_FOR_KIND = {np.dtype("float64"): 1, np.dtype("complex128"): 2, np.dtype("uint16"): 3}

PathLike = Union[str, os.PathLike]


def write_array(path: PathLike, data: np.ndarray) -> Path:
    """Write a float64, complex128 or uint16 array."""
    arr = np.asarray(data)
    code = _CODE_FOR_KIND.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise DomainError(f"cannot store dtype {arr.dtype}; use float64, complex128 or uint16")
    if arr.ndim > 255:
        raise DomainError(f"too many dimensions: {arr.ndim}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes(order="C")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, code, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(payload)
    logger.debug(f"Wrote {arr.dtype} array {arr.shape} to {path}")
    return path


def read_array(path: PathLike) -> np.ndarray:
    """Read an array file; malformed files raise FormatError with the byte offset."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    magic, version, code, ndim = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if code not in DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}", offset=6)
    dims_end = _HEADER.size + 8 * ndim
    if len(raw) < dims_end:
        raise FormatError(f"{path}: truncated dimensions", offset=len(raw))
    dims = struct.unpack_from(f"<{ndim}Q", raw, _HEADER.size)
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    available = len(raw) - dims_end
    if available < expected:
        raise FormatError(f"{path}: payload has {available} of {expected} bytes", offset=len(raw))
    if available > expected:
        raise FormatError(f"{path}: {available - expected} trailing bytes", offset=dims_end + expected)
    arr = np.frombuffer(raw, dtype=dtype, count=expected // dtype.itemsize, offset=dims_end)
    return arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)


def export_uint16(path: PathLike, data: np.ndarray, scale: Optional[float] = None) -> Path:
    """Write a 16-bit grayscale TIFF.

    Values are multiplied by ``scale`` when given and rounded; anything that
    does not round into [0, 65535] raises DomainError instead of being clipped.
    """
    arr = np.asarray(data)
    if np.iscomplexobj(arr):
        raise DomainError("export a real image (amplitude or phase), not a complex field")
    if arr.dtype != np.uint16 or scale is not None:
        values = arr.astype(np.float64) * (1.0 if scale is None else float(scale))
        if not np.isfinite(values).all():
            raise DomainError(f"{path}: image contains non-finite values")
        lo, hi = float(values.min()), float(values.max())
        if lo < -0.5 or hi >= 65535.5:
            raise DomainError(f"{path}: values span [{lo:.6g}, {hi:.6g}], outside the 16-bit range; "
                              "pass a scale to export")
        arr = np.rint(values).astype(np.uint16)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tifffile.imwrite(str(path), arr)
    logger.debug(f"Exported 16-bit image {arr.shape} to {path}")
    return path


def scale_to_uint16(data: np.ndarray) -> float:
    """Scale mapping the maximum of a nonnegative image to 65535."""
    peak = float(np.max(data)) if np.size(data) else 0.0
    return 65535.0 / peak if peak > 0 else 1.0
