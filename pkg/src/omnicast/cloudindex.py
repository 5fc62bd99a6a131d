"""Effective cloud albedo (cloud index) from satellite reflectance frames.

Each pixel is scaled between the ground albedo, estimated as the per-pixel
minimum over the same time-of-day slot on the previous days, and the
brightest valid pixel of the current frame::

    ci = (p - p_min) / (p_max - p_min), clamped to [0, 1]
"""
from __future__ import annotations

import struct
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Deque, Dict, Optional, Tuple

import numpy as np

from .errors import DataError, DomainError
from .grid import Grid2D, read_fgrid_at, to_bytes

SECONDS_PER_DAY = 86400
_HIST_MAGIC = b"AHST"
_HIST_VERSION = 1
_HIST_HEAD = struct.Struct("<4sIIII")
_HIST_ENTRY = struct.Struct("<IqQ")


class CloudIndexMap(Grid2D):
    """Cloud index grid with diagnostics from its computation."""

    def __init__(self, values, mask=None, degenerate: bool = False, n_clamped_low: int = 0,
                 n_clamped_high: int = 0):
        super().__init__(values, mask=mask, value_range=(0.0, 1.0))
        self.degenerate = degenerate
        self.n_clamped_low = n_clamped_low
        self.n_clamped_high = n_clamped_high


@dataclass
class AlbedoHistory:
    """Per time-of-day slot ring buffers of past frames and their running minimum."""

    shape: Optional[Tuple[int, int]] = None
    slot_period: int = 300
    n_days: int = 10
    frames: Dict[int, Deque[Tuple[int, np.ndarray]]] = field(default_factory=dict)
    p_min: Dict[int, np.ndarray] = field(default_factory=dict)
    n_clamped_low: int = 0

    def slot_of(self, timestamp) -> int:
        return int((int(round(float(timestamp))) % SECONDS_PER_DAY) // self.slot_period)

    def __len__(self):
        return sum(len(v) for v in self.frames.values())

    def minimum(self, timestamp) -> np.ndarray:
        slot = self.slot_of(timestamp)
        if slot not in self.p_min:
            raise DataError(f"albedo history has no frames for slot {slot}")
        return self.p_min[slot]

    def save(self, path) -> None:
        """Write a checkpoint: header, (slot, timestamp, length) index, FGRID frames."""
        entries = []
        payloads = []
        for slot in sorted(self.frames):
            for ts, frame in self.frames[slot]:
                blob = to_bytes(Grid2D(frame[None].astype(np.float32)))
                entries.append((slot, ts, len(blob)))
                payloads.append(blob)
        h, w = self.shape if self.shape else (0, 0)
        head = _HIST_HEAD.pack(_HIST_MAGIC, _HIST_VERSION, self.slot_period, self.n_days, len(entries))
        index = b"".join(_HIST_ENTRY.pack(*e) for e in entries)
        Path(path).write_bytes(head + index + b"".join(payloads))

    @classmethod
    def load(cls, path) -> "AlbedoHistory":
        data = Path(path).read_bytes()
        if len(data) < _HIST_HEAD.size:
            raise DataError(f"{path}: not an albedo history checkpoint")
        magic, version, slot_period, n_days, count = _HIST_HEAD.unpack_from(data, 0)
        if magic != _HIST_MAGIC or version != _HIST_VERSION:
            raise DataError(f"{path}: not an albedo history checkpoint")
        if len(data) < _HIST_HEAD.size + count * _HIST_ENTRY.size:
            raise DataError(f"{path}: truncated index")
        hist = cls(slot_period=slot_period, n_days=n_days)
        pos = _HIST_HEAD.size
        entries = []
        for _ in range(count):
            entries.append(_HIST_ENTRY.unpack_from(data, pos))
            pos += _HIST_ENTRY.size
        for slot, ts, length in entries:
            grid, nxt = read_fgrid_at(data, pos)
            if nxt - pos != length:
                raise DataError(f"{path}: index length mismatch")
            pos = nxt
            hist = update_history(hist, grid, ts)
        return hist


def update_history(hist: AlbedoHistory, frame: Grid2D, timestamp) -> AlbedoHistory:
    """Add ``frame`` to its slot, evict entries older than ``n_days``, refresh p_min.

    The history is updated in place and returned.
    """
    values = np.asarray(frame.values[0] if isinstance(frame, Grid2D) else frame, dtype=np.float32)
    if isinstance(frame, Grid2D) and frame.mask is not None:
        values = np.where(frame.mask, np.inf, values).astype(np.float32)
    if hist.shape is None:
        hist.shape = values.shape
    elif tuple(values.shape) != tuple(hist.shape):
        raise DomainError(f"frame shape {values.shape} does not match history {hist.shape}")
    ts = int(round(float(timestamp)))
    slot = hist.slot_of(ts)
    buf = hist.frames.setdefault(slot, deque())
    buf.append((ts, values))
    horizon = ts - hist.n_days * SECONDS_PER_DAY
    while buf and (buf[0][0] <= horizon or len(buf) > hist.n_days):
        buf.popleft()
    hist.p_min[slot] = np.min(np.stack([f for _, f in buf]), axis=0)
    return hist


def cloud_index(frame: Grid2D, hist: AlbedoHistory, timestamp) -> CloudIndexMap:
    """Cloud index of ``frame`` against the albedo minimum for its slot."""
    p_min = hist.minimum(timestamp).astype(float)
    # same float32 rounding as the stored history, so p == p_min compares exactly
    p = frame.values[0].astype(np.float32).astype(float)
    valid = frame.valid & np.isfinite(p_min)
    if not valid.any():
        raise DataError("frame has no valid pixels")
    p_max = float(p[valid].max())
    denom = p_max - p_min
    degenerate = False
    if np.all(np.abs(denom[valid]) <= 1e-12):
        warnings.warn("flat frame equal to albedo: cloud index set to zero", RuntimeWarning)
        raw = np.zeros_like(p)
        degenerate = True
    else:
        safe = np.where(np.abs(denom) > 1e-12, denom, np.inf)
        raw = (p - p_min) / safe
    n_low = int(np.count_nonzero((raw < 0) & valid))
    n_high = int(np.count_nonzero((raw > 1) & valid))
    hist.n_clamped_low += n_low
    ci = np.clip(raw, 0.0, 1.0)
    ci[~valid] = 0.0
    mask = None if valid.all() else ~valid
    return CloudIndexMap(ci[None], mask=mask, degenerate=degenerate, n_clamped_low=n_low,
                         n_clamped_high=n_high)
