"""Raster transforms: fisheye unwarping, anti-aliased downscaling, centre
close-up, translation, and the sun-centred polar (SPIN) transform.

Pixel centres sit at integer coordinates, ``x`` along columns and ``y``
along rows. Every resampler is bilinear; masked pixels get zero weight and
the remaining weights are renormalised, so a stencil with no valid corner
produces a masked output pixel. Sample points outside the image are masked.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DomainError
from .grid import Grid2D


def bilinear_sample(values: np.ndarray, valid: Optional[np.ndarray], x, y, wrap_x: bool = False):
    """Sample a (C, H, W) array at float coordinates.

    Returns ``(samples, ok)`` where ``samples`` has shape (C, *x.shape) and
    ``ok`` flags points that landed inside the image on a stencil with at
    least one valid corner. With ``wrap_x`` the column axis is periodic.
    """
    c, h, w = values.shape
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    eps = 1e-9
    inside = (y >= -eps) & (y <= h - 1 + eps)
    if wrap_x:
        x = np.mod(x, w)
    else:
        inside &= (x >= -eps) & (x <= w - 1 + eps)

    yc = np.clip(y, 0, h - 1)
    y0 = np.floor(yc).astype(np.intp)
    y0 = np.minimum(y0, max(h - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    fy = np.clip(yc - y0, 0.0, 1.0)
    if wrap_x:
        x0 = np.floor(x).astype(np.intp) % w
        fx = x - np.floor(x)
        x1 = (x0 + 1) % w
    else:
        xc = np.clip(x, 0, w - 1)
        x0 = np.floor(xc).astype(np.intp)
        x0 = np.minimum(x0, max(w - 2, 0))
        x1 = np.minimum(x0 + 1, w - 1)
        fx = np.clip(xc - x0, 0.0, 1.0)

    corners = ((y0, x0, (1 - fy) * (1 - fx)), (y0, x1, (1 - fy) * fx),
               (y1, x0, fy * (1 - fx)), (y1, x1, fy * fx))
    acc = np.zeros((c,) + x.shape)
    wsum = np.zeros(x.shape)
    for yi, xi, wt in corners:
        if valid is not None:
            wt = wt * valid[yi, xi]
        acc += values[:, yi, xi] * wt
        wsum += wt
    ok = inside & (wsum > 1e-12)
    out = np.where(ok, acc / np.where(ok, wsum, 1.0), 0.0)
    return out, ok


def _resampled(img: Grid2D, x, y, wrap_x: bool = False) -> Grid2D:
    valid = None if img.mask is None else img.valid
    out, ok = bilinear_sample(img.values.astype(float), valid, x, y, wrap_x=wrap_x)
    lo, hi = img.value_range
    if hi >= lo:
        out = np.where(ok, np.clip(out, lo, hi), 0.0)
    mask = None if ok.all() else ~ok
    return Grid2D(out, mask=mask, value_range=img.value_range)


def translate(img: Grid2D, dx: float, dy: float) -> Grid2D:
    """Shift content by (dx, dy) pixels; pixels uncovered by the shift are masked."""
    yy, xx = np.mgrid[0:img.height, 0:img.width].astype(float)
    return _resampled(img, xx - dx, yy - dy)


# -- anti-aliased downscaling --------------------------------------------

def binomial_kernel(factor: int) -> np.ndarray:
    """Normalised binomial taps of length 2*factor - 1."""
    n = 2 * factor - 2
    taps = np.array([comb(n, k) for k in range(n + 1)], dtype=float)
    return taps / taps.sum()


def downscale(img: Grid2D, factor: int) -> Grid2D:
    """Low-pass with a separable binomial kernel, then keep every factor-th pixel.

    The filter is a normalised convolution (mirror boundary), so constants
    are preserved and masked pixels do not leak into their neighbours. Output
    pixel k is taken from input index ``k*factor + (factor-1)//2``.
    """
    if int(factor) != factor or factor < 2:
        raise DomainError(f"downscale factor must be an integer >= 2, got {factor}")
    factor = int(factor)
    if img.height % factor or img.width % factor:
        raise DomainError(f"grid {img.height}x{img.width} not divisible by {factor}")
    kernel = binomial_kernel(factor)
    valid = img.valid.astype(float)
    data = img.values.astype(float) * valid

    def smooth(a):
        a = correlate1d(a, kernel, axis=-1, mode="mirror")
        return correlate1d(a, kernel, axis=-2, mode="mirror")

    num = smooth(data)
    den = smooth(valid)
    off = (factor - 1) // 2
    num = num[:, off::factor, off::factor]
    den = den[off::factor, off::factor]
    ok = den > 1e-12
    out = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
    lo, hi = img.value_range
    out = np.where(ok, np.clip(out, lo, hi), 0.0)
    return Grid2D(out, mask=None if ok.all() else ~ok, value_range=img.value_range)


def stride_sample(img: Grid2D, factor: int) -> Grid2D:
    """Naive decimation without filtering, for aliasing comparisons."""
    off = (factor - 1) // 2
    mask = None if img.mask is None else img.mask[off::factor, off::factor]
    return Grid2D(img.values[:, off::factor, off::factor], mask=mask, value_range=img.value_range)


# -- centre close-up -----------------------------------------------------

def center_closeup(img: Grid2D) -> Grid2D:
    """Central crop of half the side length, upsampled back to full size."""
    h, w = img.shape
    if h % 2 or w % 2:
        raise DomainError(f"center_closeup needs even dimensions, got {h}x{w}")
    ys = h / 4.0 + (np.arange(h) + 0.5) / 2.0 - 0.5
    xs = w / 4.0 + (np.arange(w) + 0.5) / 2.0 - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return _resampled(img, xx, yy)


# -- polar transform -----------------------------------------------------

def nearest_edge_radius(center: Tuple[float, float], shape: Tuple[int, int]) -> float:
    cx, cy = center
    h, w = shape
    return float(min(cx, cy, w - 1 - cx, h - 1 - cy))


def _check_center(center, shape):
    cx, cy = center
    h, w = shape
    if not (0 <= cx <= w - 1 and 0 <= cy <= h - 1):
        raise DomainError(f"center {center} outside image bounds {w}x{h}")


def _polar_radius(center, shape, max_radius):
    if max_radius is None:
        max_radius = nearest_edge_radius(center, shape)
    if not max_radius > 0:
        raise DomainError("polar transform needs a positive maximum radius")
    return float(max_radius)


def spin_transform(img: Grid2D, center: Tuple[float, float], radial_bins: int = 128,
                   angular_bins: int = 128, max_radius: Optional[float] = None) -> Grid2D:
    """Resample ``img`` onto a polar grid centred on ``center`` = (x, y).

    Row r holds radius ``r * max_radius / (radial_bins - 1)``; column a holds
    angle ``a * 2*pi / angular_bins``, measured from +x towards +y. By default
    the largest radius touches the nearest image edge.
    """
    if radial_bins < 1 or angular_bins < 1:
        raise DomainError("spin_transform needs at least one radial and one angular bin")
    _check_center(center, img.shape)
    radius = _polar_radius(center, img.shape, max_radius)
    dr = radius / max(radial_bins - 1, 1)
    rho = np.arange(radial_bins) * dr
    theta = np.arange(angular_bins) * (2.0 * np.pi / angular_bins)
    rr, tt = np.meshgrid(rho, theta, indexing="ij")
    cx, cy = center
    return _resampled(img, cx + rr * np.cos(tt), cy + rr * np.sin(tt))


def spin_inverse(polar: Grid2D, center: Tuple[float, float], out_size,
                 max_radius: Optional[float] = None) -> Grid2D:
    """Map a polar grid back to a Cartesian image of ``out_size``.

    The geometry (centre, maximum radius) must be the one used by
    :func:`spin_transform`; pixels beyond the maximum radius are masked.
    """
    shape = (out_size, out_size) if np.ndim(out_size) == 0 else tuple(out_size)
    nr, na = polar.shape
    if nr < 2 or na < 4:
        raise DomainError(f"polar grid {nr}x{na} too small to invert")
    _check_center(center, shape)
    radius = _polar_radius(center, shape, max_radius)
    dr = radius / (nr - 1)
    dtheta = 2.0 * np.pi / na
    cx, cy = center
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(float)
    dx, dy = xx - cx, yy - cy
    rho = np.hypot(dx, dy)
    theta = np.mod(np.arctan2(dy, dx), 2.0 * np.pi)
    # rows are radius, columns are (periodic) angle
    out = _resampled(polar, theta / dtheta, rho / dr, wrap_x=True)
    beyond = rho > radius + 1e-9
    if beyond.any():
        mask = beyond if out.mask is None else (out.mask | beyond)
        values = out.values.copy()
        values[:, mask] = 0.0
        out = Grid2D(values, mask=mask, value_range=polar.value_range)
    return out


# -- fisheye unwarping ---------------------------------------------------

@dataclass(frozen=True)
class FisheyeCalibration:
    """Lens model of an upward-looking all-sky camera.

    The image is oriented north-up, east-right. ``zenith_deg`` and
    ``radius_px`` form a strictly increasing piecewise-linear table mapping
    view zenith angle to radial distance from ``optical_center`` = (x, y).
    """

    optical_center: Tuple[float, float]
    zenith_deg: Tuple[float, ...]
    radius_px: Tuple[float, ...]
    assumed_cloud_height: float = 2000.0

    def __post_init__(self):
        z = np.asarray(self.zenith_deg, dtype=float)
        r = np.asarray(self.radius_px, dtype=float)
        if z.shape != r.shape or z.ndim != 1 or len(z) < 2:
            raise DomainError("calibration table needs matching 1D zenith and radius arrays")
        if np.any(np.diff(z) <= 0) or np.any(np.diff(r) <= 0):
            raise DomainError("calibration table must be strictly increasing")
        if not self.assumed_cloud_height > 0:
            raise DomainError("assumed_cloud_height must be positive")

    @classmethod
    def equidistant(cls, size: int, max_zenith: float = 90.0, cloud_height: float = 2000.0,
                    knots: int = 19) -> "FisheyeCalibration":
        """Ideal equidistant lens whose horizon circle fills a size x size frame."""
        c = (size - 1) / 2.0
        z = np.linspace(0.0, max_zenith, knots)
        r = z / max_zenith * (size / 2.0 - 0.5)
        return cls((c, c), tuple(float(v) for v in z), tuple(float(v) for v in r), cloud_height)

    @property
    def max_zenith(self) -> float:
        return float(self.zenith_deg[-1])

    def radius_of(self, zenith_deg):
        return np.interp(zenith_deg, self.zenith_deg, self.radius_px)

    def zenith_of(self, radius_px):
        return np.interp(radius_px, self.radius_px, self.zenith_deg)

    def project(self, zenith_deg, azimuth_deg):
        """Image (x, y) of a view ray."""
        r = self.radius_of(zenith_deg)
        az = np.deg2rad(azimuth_deg)
        cx, cy = self.optical_center
        return cx + r * np.sin(az), cy - r * np.cos(az)

    def to_dict(self) -> dict:
        return {
            "optical_center": list(self.optical_center),
            "zenith_deg": list(self.zenith_deg),
            "radius_px": list(self.radius_px),
            "assumed_cloud_height": self.assumed_cloud_height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FisheyeCalibration":
        return cls(tuple(d["optical_center"]), tuple(d["zenith_deg"]), tuple(d["radius_px"]),
                   float(d["assumed_cloud_height"]))


def default_unwarp_extent(cal: FisheyeCalibration, view_zenith_deg: float = 70.0) -> float:
    return cal.assumed_cloud_height * np.tan(np.deg2rad(min(view_zenith_deg, cal.max_zenith)))


def unwarp_grid(out_size: int, half_extent_m: float):
    """East/north coordinates (m) of the unwarped grid's pixel centres."""
    step = 2.0 * half_extent_m / out_size
    centre = (out_size - 1) / 2.0
    idx = np.arange(out_size) - centre
    north, east = np.meshgrid(-idx * step, idx * step, indexing="ij")
    return east, north


def undistort_sky(raw: Grid2D, cal: FisheyeCalibration, out_size: int,
                  half_extent_m: Optional[float] = None) -> Grid2D:
    """Reproject a fisheye frame onto a regular grid on the cloud layer.

    The output covers ``[-half_extent_m, half_extent_m]`` east and north of
    the camera at ``cal.assumed_cloud_height``; rays beyond the calibrated
    zenith range are masked.
    """
    if out_size < 8:
        raise DomainError(f"out_size must be >= 8, got {out_size}")
    cx, cy = cal.optical_center
    if not (0 <= cx <= raw.width - 1 and 0 <= cy <= raw.height - 1):
        raise DomainError(f"optical center {cal.optical_center} outside image")
    if half_extent_m is None:
        half_extent_m = default_unwarp_extent(cal)
    east, north = unwarp_grid(out_size, half_extent_m)
    zenith = np.rad2deg(np.arctan2(np.hypot(east, north), cal.assumed_cloud_height))
    azimuth = np.rad2deg(np.arctan2(east, north))
    x, y = cal.project(zenith, azimuth)
    out = _resampled(raw, x, y)
    beyond = zenith > cal.max_zenith
    if beyond.any():
        mask = beyond if out.mask is None else (out.mask | beyond)
        values = out.values.copy()
        values[:, mask] = 0.0
        out = Grid2D(values, mask=mask, value_range=raw.value_range)
    return out


def layer_to_unwarp_pixel(east_m, north_m, out_size: int, half_extent_m: float):
    """Fractional (x, y) pixel of a cloud-layer point on the unwarped grid."""
    step = 2.0 * half_extent_m / out_size
    centre = (out_size - 1) / 2.0
    return centre + np.asarray(east_m) / step, centre - np.asarray(north_m) / step
