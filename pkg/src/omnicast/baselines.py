"""Reference forecasters: persistence, smart persistence, cloud motion vectors."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import DomainError
from .grid import Grid2D
from .imaging import bilinear_sample, translate

DEFAULT_ATTENUATION = 0.75


@dataclass(frozen=True)
class BaselineForecast:
    horizon: float
    ghi_hat: float
    advected_map: Optional[Grid2D] = None
    motion: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if not np.isfinite(self.ghi_hat) or self.ghi_hat < 0:
            raise DomainError(f"baseline produced invalid irradiance {self.ghi_hat}")


def persistence(y_t: float, horizon: float) -> BaselineForecast:
    if y_t < 0:
        raise DomainError(f"irradiance must be >= 0, got {y_t}")
    return BaselineForecast(horizon, float(y_t))


def smart_persistence(y_t: float, yclr_t: float, yclr_h: float, horizon: float) -> BaselineForecast:
    """Scale the current irradiance by the clear-sky ratio over the horizon."""
    if not yclr_t > 0:
        raise DomainError("clear-sky irradiance at issue time is zero: horizon unusable")
    if y_t < 0 or yclr_h < 0:
        raise DomainError("irradiance values must be >= 0")
    if yclr_h == yclr_t:
        return BaselineForecast(horizon, float(y_t))
    return BaselineForecast(horizon, float(yclr_h / yclr_t * y_t))


def smart_persistence_series(y_t, yclr_t, yclr_h) -> np.ndarray:
    """Vectorised smart persistence; raises if any clear-sky value at issue time is 0."""
    y_t, yclr_t, yclr_h = (np.asarray(a, dtype=float) for a in (y_t, yclr_t, yclr_h))
    if np.any(yclr_t <= 0):
        raise DomainError("clear-sky irradiance at issue time is zero: horizon unusable")
    ratio = np.where(yclr_h == yclr_t, 1.0, yclr_h / yclr_t)
    return ratio * y_t


def block_motion(prev: np.ndarray, curr: np.ndarray, block: int, search: int):
    """Per-block integer displacement (dx, dy) mapping ``prev`` onto ``curr``.

    Each block of ``curr`` is compared with blocks of ``prev`` displaced by up
    to ``search`` pixels; the mean absolute difference is minimised, ties go
    to the smallest displacement. Blocks whose score does not depend on the
    displacement (no texture) are skipped.
    """
    h, w = curr.shape
    if block < 1 or search < 0:
        raise DomainError("block must be >= 1 and search >= 0")
    if block + 2 * search > min(h, w):
        raise DomainError(f"block {block} with search {search} does not fit a {h}x{w} map")
    shifts = [(dx, dy) for dy in range(-search, search + 1) for dx in range(-search, search + 1)]
    shifts.sort(key=lambda s: (s[0] ** 2 + s[1] ** 2, s[1], s[0]))
    vectors = []
    for by in range(search, h - block - search + 1, block):
        for bx in range(search, w - block - search + 1, block):
            target = curr[by:by + block, bx:bx + block]
            scores = np.empty(len(shifts))
            for k, (dx, dy) in enumerate(shifts):
                cand = prev[by - dy:by - dy + block, bx - dx:bx - dx + block]
                scores[k] = np.mean(np.abs(target - cand))
            if np.ptp(scores) <= 1e-12:
                continue
            vectors.append(shifts[int(np.argmin(scores))])
    return np.array(vectors, dtype=float).reshape(-1, 2)


def cmv_advect(map_prev: Grid2D, map_curr: Grid2D, dt_obs: float, horizon: float,
               block: int = 8, search: int = 4, *, ghi_clear: Optional[float] = None,
               site: Optional[Tuple[float, float]] = None,
               attenuation: float = DEFAULT_ATTENUATION) -> BaselineForecast:
    """Advect the current cloud-index map with the median block-matching vector.

    The irradiance estimate reads the advected cloud index at ``site`` (pixel
    (x, y), default the map centre) and applies
    ``ghi_clear * (1 - attenuation * ci)``; ``ghi_clear`` is the clear-sky
    GHI at the target time. Without it ``ghi_hat`` is 0.
    """
    if map_prev.shape != map_curr.shape:
        raise DomainError("cloud-index maps must share dimensions")
    if not dt_obs > 0:
        raise DomainError("dt_obs must be positive")
    prev = map_prev.filled(0.0)[0]
    curr = map_curr.filled(0.0)[0]
    vectors = block_motion(prev, curr, block, search)
    if len(vectors):
        dx, dy = np.median(vectors, axis=0)
    else:
        dx, dy = 0.0, 0.0
    scale = horizon / dt_obs
    shift = (float(dx * scale), float(dy * scale))
    advected = translate(map_curr, *shift)

    if site is None:
        site = ((map_curr.width - 1) / 2.0, (map_curr.height - 1) / 2.0)
    # source location of the air mass that will sit over the site, clamped to the frame
    sx = np.clip(site[0] - shift[0], 0, map_curr.width - 1)
    sy = np.clip(site[1] - shift[1], 0, map_curr.height - 1)
    valid = None if map_curr.mask is None else map_curr.valid
    ci_site, ok = bilinear_sample(map_curr.values.astype(float), valid, np.array(sx), np.array(sy))
    ci_site = float(np.clip(ci_site[0], 0.0, 1.0)) if ok else 0.0
    ghi = 0.0 if ghi_clear is None else max(float(ghi_clear) * (1.0 - attenuation * ci_site), 0.0)
    return BaselineForecast(horizon, ghi, advected_map=advected, motion=(float(dx), float(dy)))
