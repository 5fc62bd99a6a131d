"""Synthetic scenes: an advecting cloud layer seen from a satellite and from
an all-sky camera, plus the matching pyranometer trace.

Cloud opacity and ground albedo are band-limited Gaussian random fields
built from a fixed set of random Fourier modes, so they can be evaluated
exactly at any point and time. A single cloud layer at a fixed height makes
the satellite view, the sky view and the sun ray sample the same field.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy.special import ndtri

from . import geometry
from .errors import DomainError
from .grid import Grid2D, write_fgrid
from .imaging import FisheyeCalibration

REGIMES = ("clear_sky", "broken_sky", "overcast")
CLOUD_ALBEDO = 0.9
SKY_BRIGHTNESS = 0.35
CLOUD_BRIGHTNESS = 0.75
M_PER_DEG = 111_320.0
SECONDS_PER_DAY = 86400


class RandomField:
    """Unit-variance isotropic Gaussian field from ``n_modes`` cosine modes.

    Wave numbers follow a Gaussian spectrum of correlation length
    ``scale_m`` truncated at three standard deviations.
    """

    def __init__(self, seed: int, scale_m: float, n_modes: int = 64):
        rng = np.random.default_rng(seed)
        sigma_k = 1.0 / scale_m
        k = rng.normal(0.0, sigma_k, size=(n_modes * 2, 2))
        k = k[np.hypot(k[:, 0], k[:, 1]) <= 3.0 * sigma_k][:n_modes]
        self.k = k
        self.phase = rng.uniform(0.0, 2.0 * np.pi, size=len(k))
        self.amp = np.sqrt(2.0 / len(k))

    def __call__(self, east, north) -> np.ndarray:
        east = np.asarray(east, dtype=float)
        north = np.asarray(north, dtype=float)
        if (east.ndim == 2 and east.shape == north.shape and np.all(east == east[:1])
                and np.all(north == north[:, :1])):
            # meshgrid input: cos(a + b) factorises into a complex matrix product
            cols = np.exp(1j * (east[0][:, None] * self.k[:, 0]))
            rows = np.exp(1j * (north[:, 0][:, None] * self.k[:, 1] + self.phase))
            return self.amp * (rows @ cols.T).real
        arg = east[..., None] * self.k[:, 0] + north[..., None] * self.k[:, 1] + self.phase
        return self.amp * np.cos(arg).sum(axis=-1)


@dataclass(frozen=True)
class SceneSpec:
    """One simulated period over one site."""

    seed: int = 0
    site: Tuple[float, float] = (48.713, 2.208)
    regime: str = "broken_sky"
    start: float = 1554076800.0  # 2019-04-01T00:00Z
    duration: float = SECONDS_PER_DAY
    velocity: Tuple[float, float] = (8.0, 3.0)
    growth_rate: float = 0.0
    coverage: float = 0.5
    cloud_scale_m: float = 6000.0
    albedo_seed: int = 12345
    albedo_scale_m: float = 15000.0
    cloud_height_m: float = 2000.0
    sat_extent_deg: float = 2.2
    sat_size: int = 256
    sky_size: int = 256
    sky_cadence: int = 120
    sat_cadence: int = 300
    irr_cadence: int = 60
    attenuation: float = 0.75
    glare: bool = True
    sun_disk_deg: float = 4.0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise DomainError(f"unknown regime {self.regime!r}")
        if not self.duration > 0:
            raise DomainError("scene duration must be positive")
        if not 0.0 <= self.coverage <= 1.0:
            raise DomainError("coverage must lie in [0, 1]")
        if self.sat_size < 8 or self.sky_size < 8:
            raise DomainError("frame sizes must be >= 8")

    @property
    def end(self) -> float:
        return self.start + self.duration

    def check_time(self, t) -> None:
        t = np.asarray(t, dtype=float)
        if np.any(t < self.start) or np.any(t > self.end):
            raise DomainError(f"time outside scene [{self.start}, {self.end}]")

    @cached_property
    def _cloud(self) -> RandomField:
        return RandomField(self.seed, self.cloud_scale_m)

    @cached_property
    def _albedo(self) -> RandomField:
        return RandomField(self.albedo_seed, self.albedo_scale_m)

    @cached_property
    def calibration(self) -> FisheyeCalibration:
        return FisheyeCalibration.equidistant(self.sky_size, cloud_height=self.cloud_height_m)

    # -- fields ----------------------------------------------------------

    def albedo(self, east, north) -> np.ndarray:
        return 0.2 + 0.15 * np.tanh(self._albedo(east, north))

    def opacity(self, east, north, t) -> np.ndarray:
        """Cloud opacity in [0, 1] at layer position (m from the site) and time."""
        east = np.asarray(east, dtype=float)
        if self.regime == "clear_sky":
            return np.zeros(np.broadcast(east, north, t).shape)
        dt = np.asarray(t, dtype=float) - self.start
        g = self._cloud(east - self.velocity[0] * dt, north - self.velocity[1] * dt)
        g = g + self.growth_rate * dt
        if self.regime == "overcast":
            return np.clip(0.85 + 0.15 * g, 0.7, 1.0)
        threshold = float(ndtri(1.0 - self.coverage)) if 0 < self.coverage < 1 else (
            -np.inf if self.coverage == 1 else np.inf)
        return np.clip((g - threshold) / 0.6, 0.0, 1.0)

    def sun(self, t) -> geometry.SolarPosition:
        return geometry.solar_position(self.site[0], self.site[1], t)

    def sun_layer_point(self, t):
        return geometry.sun_offset_on_layer(self.sun(t), self.cloud_height_m)

    def opacity_on_sun_ray(self, t):
        east, north = self.sun_layer_point(t)
        return self.opacity(east, north, t)


# -- satellite ---------------------------------------------------------------

@dataclass(frozen=True)
class SatelliteFraming:
    """Equirectangular lat/lon box centred on the site."""

    site: Tuple[float, float]
    extent_deg: float
    size: int

    @property
    def metres_per_pixel(self) -> Tuple[float, float]:
        deg = self.extent_deg / self.size
        return deg * M_PER_DEG * np.cos(np.deg2rad(self.site[0])), deg * M_PER_DEG

    def pixel_centres(self):
        """East/north (m) of every pixel centre, each shaped (size, size)."""
        mx, my = self.metres_per_pixel
        idx = np.arange(self.size) - (self.size - 1) / 2.0
        north, east = np.meshgrid(-idx * my, idx * mx, indexing="ij")
        return east, north

    def pixel_of(self, east_m, north_m):
        mx, my = self.metres_per_pixel
        c = (self.size - 1) / 2.0
        return c + np.asarray(east_m) / mx, c - np.asarray(north_m) / my


def satellite_framing(scene: SceneSpec, size: Optional[int] = None) -> SatelliteFraming:
    return SatelliteFraming(scene.site, scene.sat_extent_deg, size or scene.sat_size)


def render_opacity(scene: SceneSpec, t: float, size: Optional[int] = None) -> np.ndarray:
    scene.check_time(t)
    east, north = satellite_framing(scene, size).pixel_centres()
    return scene.opacity(east, north, t)


def render_albedo(scene: SceneSpec, size: Optional[int] = None) -> np.ndarray:
    size = size or scene.sat_size
    cache = scene.__dict__.setdefault("_albedo_cache", {})
    if size not in cache:
        east, north = satellite_framing(scene, size).pixel_centres()
        cache[size] = scene.albedo(east, north)
        cache[size].setflags(write=False)
    return cache[size]


def render_satellite(scene: SceneSpec, t: float, size: Optional[int] = None) -> Grid2D:
    """Reflectance ``albedo*(1-tau) + 0.9*tau`` over the satellite box."""
    tau = render_opacity(scene, t, size)
    a = render_albedo(scene, size)
    return Grid2D(a * (1.0 - tau) + CLOUD_ALBEDO * tau, value_range=(0.0, 1.0))


# -- sky camera ----------------------------------------------------------------

def sky_rays(cal: FisheyeCalibration, size: int):
    """(zenith, azimuth, inside) for every pixel of a size x size fisheye frame."""
    cx, cy = cal.optical_center
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    dx, dy = xx - cx, cy - yy
    r = np.hypot(dx, dy)
    inside = r <= cal.radius_px[-1]
    zenith = cal.zenith_of(r)
    azimuth = np.mod(np.rad2deg(np.arctan2(dx, dy)), 360.0)
    return zenith, azimuth, inside


def render_sky(scene: SceneSpec, t: float) -> Grid2D:
    """Fisheye frame of the cloud layer with a glare disk around the sun.

    Pixels outside the horizon circle are masked.
    """
    scene.check_time(t)
    cal = scene.calibration
    zenith, azimuth, inside = sky_rays(cal, scene.sky_size)
    z = np.deg2rad(np.minimum(zenith, 89.0))
    az = np.deg2rad(azimuth)
    rho = scene.cloud_height_m * np.tan(z)
    tau = scene.opacity(rho * np.sin(az), rho * np.cos(az), t)
    value = SKY_BRIGHTNESS * (1.0 - tau) + CLOUD_BRIGHTNESS * tau

    sun = scene.sun(t)
    if scene.glare and sun.zenith < 90.0:
        tau_sun = float(scene.opacity_on_sun_ray(t))
        cos_sep = (np.cos(z) * np.cos(np.deg2rad(sun.zenith))
                   + np.sin(z) * np.sin(np.deg2rad(sun.zenith)) * np.cos(az - np.deg2rad(sun.azimuth)))
        sep = np.rad2deg(np.arccos(np.clip(cos_sep, -1.0, 1.0)))
        disk = np.clip(1.5 - sep / scene.sun_disk_deg, 0.0, 1.0)
        value = value + (1.0 - value) * disk * (1.0 - tau_sun)

    value = np.where(inside, value, 0.0)
    return Grid2D(value, mask=~inside, value_range=(0.0, 1.0))


def sun_pixel(scene: SceneSpec, t: float):
    sun = scene.sun(t)
    return scene.calibration.project(sun.zenith, sun.azimuth)


# -- pyranometer ---------------------------------------------------------------

def irradiance(scene: SceneSpec, t) -> np.ndarray:
    """Instantaneous GHI: clear-sky GHI attenuated by the opacity on the sun ray."""
    scene.check_time(t)
    clear = geometry.clear_sky_ghi(scene.sun(t))
    return clear * (1.0 - scene.attenuation * scene.opacity_on_sun_ray(t))


def irradiance_minute_mean(scene: SceneSpec, t, substeps: int = 6) -> np.ndarray:
    """Average of the instantaneous GHI over the minute ending at ``t``."""
    t = np.asarray(t, dtype=float)
    offsets = -60.0 + (np.arange(substeps) + 0.5) * (60.0 / substeps)
    times = np.clip(t[..., None] + offsets, scene.start, scene.end)
    clear = geometry.clear_sky_ghi(scene.sun(times))
    tau = scene.opacity_on_sun_ray(times)
    return np.mean(clear * (1.0 - scene.attenuation * tau), axis=-1)


# -- multi-day datasets --------------------------------------------------------

@dataclass
class SimulationConfig:
    """Multi-day simulation parameters (one scene per calendar day)."""

    seed: int = 0
    site: Tuple[float, float] = (48.713, 2.208)
    start_date: str = "2019-04-01"
    days: List[str] = field(default_factory=lambda: ["broken_sky"])
    warmup_days: int = 10
    speed_range: Tuple[float, float] = (5.0, 12.0)
    velocity: Optional[Tuple[float, float]] = None
    growth_rate: float = 0.0
    coverage: float = 0.5
    cloud_scale_m: float = 6000.0
    cloud_height_m: float = 2000.0
    sat_extent_deg: float = 2.2
    sat_size: int = 256
    sky_size: int = 256
    max_zenith: float = 85.0
    attenuation: float = 0.75

    def __post_init__(self):
        if len(self.days) == 0:
            raise DomainError("simulation needs at least one day")
        for d in self.days:
            if d not in REGIMES:
                raise DomainError(f"unknown regime {d!r}")
        if self.warmup_days < 0:
            raise DomainError("warmup_days must be >= 0")
        datetime.strptime(self.start_date, "%Y-%m-%d")
        self.site = tuple(self.site)
        if self.velocity is not None:
            self.velocity = tuple(self.velocity)
        self.speed_range = tuple(self.speed_range)

    @property
    def start_unix(self) -> int:
        d = datetime.strptime(self.start_date, "%Y-%m-%d").replace(tzinfo=timezone.utc)
        return int(d.timestamp())

    def albedo_seed(self) -> int:
        return _derive_seed(self.seed, "albedo")


def _derive_seed(seed: int, *parts) -> int:
    key = ":".join([str(seed)] + [str(p) for p in parts]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "little")


def day_scenes(cfg: SimulationConfig) -> List[SceneSpec]:
    """Warm-up (clear, satellite only) days followed by the configured days."""
    scenes = []
    regimes = ["clear_sky"] * cfg.warmup_days + list(cfg.days)
    for i, regime in enumerate(regimes):
        index = i - cfg.warmup_days
        rng = np.random.default_rng(_derive_seed(cfg.seed, "day", index))
        if cfg.velocity is not None:
            velocity = cfg.velocity
        else:
            speed = rng.uniform(*cfg.speed_range)
            heading = rng.uniform(0.0, 2.0 * np.pi)
            velocity = (float(speed * np.sin(heading)), float(speed * np.cos(heading)))
        scenes.append(SceneSpec(
            seed=_derive_seed(cfg.seed, "cloud", index),
            site=cfg.site,
            regime=regime,
            start=float(cfg.start_unix + index * SECONDS_PER_DAY),
            duration=float(SECONDS_PER_DAY - 1),
            velocity=velocity,
            growth_rate=cfg.growth_rate,
            coverage=cfg.coverage,
            cloud_scale_m=cfg.cloud_scale_m,
            albedo_seed=cfg.albedo_seed(),
            cloud_height_m=cfg.cloud_height_m,
            sat_extent_deg=cfg.sat_extent_deg,
            sat_size=cfg.sat_size,
            sky_size=cfg.sky_size,
            attenuation=cfg.attenuation,
        ))
    return scenes


def daylight_times(scene: SceneSpec, cadence: int, max_zenith: float) -> np.ndarray:
    """Cadence-aligned instants within the scene whose solar zenith is below ``max_zenith``."""
    first = int(np.ceil(scene.start / cadence) * cadence)
    times = np.arange(first, scene.end + 1e-9, cadence, dtype=np.int64)
    if len(times) == 0:
        return times
    zen = scene.sun(times.astype(float)).zenith
    return times[zen < max_zenith]


@dataclass
class SimulatedDay:
    scene: SceneSpec
    warmup: bool
    sky: Dict[int, Grid2D]
    sat: Dict[int, Grid2D]
    irr_times: np.ndarray
    ghi: np.ndarray
    ghi_clear: np.ndarray


def simulate_day(scene: SceneSpec, max_zenith: float = 85.0, warmup: bool = False) -> SimulatedDay:
    sat = {int(t): render_satellite(scene, float(t)) for t in daylight_times(scene, scene.sat_cadence, max_zenith)}
    if warmup:
        return SimulatedDay(scene, True, {}, sat, np.zeros(0, np.int64), np.zeros(0), np.zeros(0))
    sky = {int(t): render_sky(scene, float(t)) for t in daylight_times(scene, scene.sky_cadence, max_zenith)}
    irr_t = daylight_times(scene, scene.irr_cadence, max_zenith)
    ghi = irradiance_minute_mean(scene, irr_t.astype(float))
    clear = geometry.clear_sky_ghi(scene.sun(irr_t.astype(float)))
    return SimulatedDay(scene, False, sky, sat, irr_t, ghi, clear)


def simulate(cfg: SimulationConfig) -> Iterator[SimulatedDay]:
    for i, scene in enumerate(day_scenes(cfg)):
        yield simulate_day(scene, cfg.max_zenith, warmup=i < cfg.warmup_days)


def iso_utc(unix: int) -> str:
    return datetime.fromtimestamp(int(unix), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def write_dataset(cfg: SimulationConfig, out_dir) -> dict:
    """Render ``cfg`` into the on-disk dataset layout and return the manifest.

    Layout: ``frames/{sky,sat}_<unix>.fgrid``, ``irradiance.csv``,
    ``calibration.json`` and ``manifest.json``.
    """
    from .dataset import classify_day, IrradianceSeries

    out = Path(out_dir)
    frames = out / "frames"
    frames.mkdir(parents=True, exist_ok=True)
    manifest_days = []
    irr_rows = []
    calibration = None
    for day in simulate(cfg):
        for t, grid in day.sat.items():
            write_fgrid(frames / f"sat_{t}.fgrid", grid)
        for t, grid in day.sky.items():
            write_fgrid(frames / f"sky_{t}.fgrid", grid)
        calibration = day.scene.calibration
        entry = {
            "date": iso_utc(int(day.scene.start))[:10],
            "regime": day.scene.regime,
            "warmup": day.warmup,
            "seed": day.scene.seed,
            "velocity": list(day.scene.velocity),
        }
        if not day.warmup:
            irr_rows.extend(zip(day.irr_times.tolist(), day.ghi.tolist(), day.ghi_clear.tolist()))
            series = IrradianceSeries(day.irr_times, day.ghi, day.ghi_clear)
            entry["weather_class"] = classify_day(series)
        manifest_days.append(entry)

    with open(out / "irradiance.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp_utc", "ghi_wm2", "ghi_clear_wm2"])
        for t, g, c in irr_rows:
            writer.writerow([iso_utc(t), f"{g:.4f}", f"{c:.4f}"])
    (out / "calibration.json").write_text(json.dumps(calibration.to_dict(), indent=2, sort_keys=True) + "\n")
    manifest = {
        "seed": cfg.seed,
        "config": _jsonable(asdict(cfg)),
        "site": list(cfg.site),
        "cloud_height_m": cfg.cloud_height_m,
        "sat_extent_deg": cfg.sat_extent_deg,
        "days": manifest_days,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj
