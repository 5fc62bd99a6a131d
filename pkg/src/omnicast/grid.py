"""Raster container shared by every stage, and the FGRID binary format.

FGRID layout (little endian)::

    b"FGRD" | u32 version=1 | u32 width | u32 height | u32 channels | u8 mask_flag
    float32 samples, channel-planar then row-major (C, H, W)
    if mask_flag: one byte per pixel (H, W), 1 = masked / no data

The declared value range is not part of the file; on read it is taken from
the valid samples unless the caller supplies one.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Optional, Tuple, Union

import numpy as np

from .errors import DataError, DomainError

MAGIC = b"FGRD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIB")


@dataclass
class Grid2D:
    """A (channels, height, width) raster with an optional no-data mask.

    ``mask`` is a boolean (height, width) array where True marks a pixel
    that carries no data. Masked pixels are ignored by every statistic and
    by the interpolation stencils.
    """

    values: np.ndarray
    mask: Optional[np.ndarray] = None
    value_range: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim == 2:
            values = values[None]
        if values.ndim != 3:
            raise DomainError(f"Grid2D values must be 2D or 3D, got shape {values.shape}")
        if not np.issubdtype(values.dtype, np.floating):
            values = values.astype(np.float64)
        self.values = values
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != values.shape[1:]:
                raise DomainError(f"mask shape {mask.shape} does not match grid {values.shape[1:]}")
            self.mask = mask
        if self.value_range is None:
            self.value_range = self._observed_range()
        else:
            lo, hi = self.value_range
            self.value_range = (float(lo), float(hi))

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape[1:]

    @property
    def valid(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.shape, dtype=bool)
        return ~self.mask

    def _observed_range(self) -> Tuple[float, float]:
        data = self.values[:, self.valid]
        if data.size == 0:
            return (0.0, 0.0)
        return (float(data.min()), float(data.max()))

    def valid_values(self, channel: int = 0) -> np.ndarray:
        return self.values[channel][self.valid]

    def filled(self, fill: float = 0.0) -> np.ndarray:
        """Values with masked pixels replaced by ``fill``."""
        if self.mask is None:
            return self.values.copy()
        out = self.values.copy()
        out[:, self.mask] = fill
        return out

    def with_values(self, values: np.ndarray, mask=None, value_range=None) -> "Grid2D":
        return Grid2D(values, mask=mask, value_range=value_range or self.value_range)

    def in_range(self, atol: float = 0.0) -> bool:
        lo, hi = self.value_range
        data = self.values[:, self.valid]
        return bool(np.all(data >= lo - atol) and np.all(data <= hi + atol))


def to_bytes(grid: Grid2D) -> bytes:
    buf = io.BytesIO()
    write_fgrid(buf, grid)
    return buf.getvalue()


def from_bytes(data: bytes, value_range=None) -> Grid2D:
    grid, _ = read_fgrid_at(data, 0, value_range=value_range)
    return grid


def write_fgrid(target: Union[str, Path, BinaryIO], grid: Grid2D) -> int:
    """Write ``grid``; returns the number of bytes written."""
    c, h, w = grid.values.shape
    has_mask = grid.mask is not None
    parts = [
        _HEADER.pack(MAGIC, VERSION, w, h, c, 1 if has_mask else 0),
        np.ascontiguousarray(grid.values, dtype="<f4").tobytes(),
    ]
    if has_mask:
        parts.append(np.ascontiguousarray(grid.mask, dtype=np.uint8).tobytes())
    payload = b"".join(parts)
    if isinstance(target, (str, Path)):
        Path(target).write_bytes(payload)
    else:
        target.write(payload)
    return len(payload)


def read_fgrid_at(data: bytes, offset: int, value_range=None) -> Tuple[Grid2D, int]:
    """Decode one FGRID payload starting at ``offset``; returns (grid, next offset)."""
    if len(data) - offset < _HEADER.size:
        raise DataError("truncated FGRID header")
    magic, version, w, h, c, mask_flag = _HEADER.unpack_from(data, offset)
    if magic != MAGIC:
        raise DataError(f"bad FGRID magic {magic!r}")
    if version != VERSION:
        raise DataError(f"unsupported FGRID version {version}")
    if mask_flag not in (0, 1):
        raise DataError(f"bad FGRID mask flag {mask_flag}")
    pos = offset + _HEADER.size
    n = w * h * c
    end = pos + 4 * n
    if end > len(data):
        raise DataError("truncated FGRID samples")
    values = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(c, h, w).astype(np.float32)
    mask = None
    if mask_flag:
        mend = end + w * h
        if mend > len(data):
            raise DataError("truncated FGRID mask")
        mask = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=end).reshape(h, w) != 0
        end = mend
    return Grid2D(values, mask=mask, value_range=value_range), end


def read_fgrid(source: Union[str, Path, BinaryIO], value_range=None) -> Grid2D:
    if isinstance(source, (str, Path)):
        data = Path(source).read_bytes()
    else:
        data = source.read()
    grid, end = read_fgrid_at(data, 0, value_range=value_range)
    if end != len(data):
        raise DataError(f"{len(data) - end} trailing bytes after FGRID payload")
    return grid


def read_fgrid_stream(data: bytes):
    """Yield (offset, grid) for every payload in a concatenation of FGRIDs."""
    pos = 0
    while pos < len(data):
        grid, nxt = read_fgrid_at(data, pos)
        yield pos, grid
        pos = nxt
