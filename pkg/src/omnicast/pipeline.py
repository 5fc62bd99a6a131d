"""Preprocessing and evaluation flows shared by the CLI and the tests.

Raw streams are the simulator's (or any camera's) fisheye sky frames and
satellite reflectance frames. Preprocessing turns them into

* ``sky`` frames: unwarped onto the cloud layer, optionally SPIN-transformed
  around the sun, downscaled to the working resolution;
* ``ci`` frames: satellite reflectance downscaled, turned into cloud index
  against a rolling albedo minimum, optionally cropped (close-up) and/or
  SPIN-transformed around the site.
"""
from __future__ import annotations

import csv
import json
import shutil
from collections import defaultdict
from dataclasses import asdict, dataclass
from datetime import date
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import geometry
from .baselines import cmv_advect, smart_persistence_series
from .cloudindex import AlbedoHistory, cloud_index, update_history
from .dataset import (FrameStore, IrradianceSeries, Sample, histograms, utc_date,
                      write_histograms_csv)
from .errors import DataError, DomainError
from .grid import Grid2D, write_fgrid
from .imaging import (FisheyeCalibration, center_closeup, default_unwarp_extent, downscale,
                      layer_to_unwarp_pixel, spin_transform, undistort_sky)
from .metrics import BinnedDistribution, HorizonReport, crps, horizon_report, write_report_csv
from .simulator import SatelliteFraming, SimulatedDay

HISTORY_FILE = "albedo_history.bin"
SKY_VARIANTS = ("raw", "spin")
SAT_VARIANTS = ("raw", "closeup", "spin", "closeup_spin")


@dataclass
class PreprocessConfig:
    resolution: int = 128
    sky_variant: str = "raw"
    sat_variant: str = "raw"
    view_zenith_deg: float = 70.0
    history_days: int = 10

    def __post_init__(self):
        if self.sky_variant not in SKY_VARIANTS:
            raise DomainError(f"sky variant must be one of {SKY_VARIANTS}")
        if self.sat_variant not in SAT_VARIANTS:
            raise DomainError(f"satellite variant must be one of {SAT_VARIANTS}")
        if self.resolution < 8:
            raise DomainError("resolution must be >= 8")
        if not 0 < self.view_zenith_deg < 90:
            raise DomainError("view_zenith_deg must lie in (0, 90)")
        if self.history_days < 1:
            raise DomainError("history_days must be >= 1")


def _to_resolution(img: Grid2D, resolution: int) -> Grid2D:
    size = img.height
    if img.width != size:
        raise DomainError("frames must be square")
    if size == resolution:
        return img
    if size % resolution:
        raise DomainError(f"frame size {size} is not a multiple of resolution {resolution}")
    return downscale(img, size // resolution)


def sun_unwarp_pixel(site, t: float, cal: FisheyeCalibration, size: int, half_extent_m: float):
    sun = geometry.solar_position(site[0], site[1], float(t))
    east, north = geometry.sun_offset_on_layer(sun, cal.assumed_cloud_height)
    x, y = layer_to_unwarp_pixel(east, north, size, half_extent_m)
    return float(x), float(y)


def process_sky(raw: Grid2D, t: float, cal: FisheyeCalibration, site, cfg: PreprocessConfig) -> Grid2D:
    """Unwarp, optionally SPIN around the sun, then downscale."""
    size = raw.height
    extent = default_unwarp_extent(cal, cfg.view_zenith_deg)
    img = undistort_sky(raw, cal, size, extent)
    if cfg.sky_variant == "spin":
        x, y = sun_unwarp_pixel(site, t, cal, size, extent)
        # a low sun lies beyond the unwarped plane: pin the centre to the border
        centre = (min(max(x, 0.0), size - 1.0), min(max(y, 0.0), size - 1.0))
        img = spin_transform(img, centre, size, size, max_radius=size / 2.0)
    return _to_resolution(img, cfg.resolution)


def apply_sat_variant(ci: Grid2D, variant: str) -> Grid2D:
    out = ci
    if variant in ("closeup", "closeup_spin"):
        out = center_closeup(out)
    if variant in ("spin", "closeup_spin"):
        c = (out.width - 1) / 2.0
        out = spin_transform(out, (c, c), out.height, out.width)
    if out.mask is not None:
        out = Grid2D(out.values, out.mask, value_range=(0.0, 1.0))
    return out


class CloudIndexer:
    """Stateful satellite stream: downscale, albedo history, cloud index, variant."""

    def __init__(self, cfg: PreprocessConfig):
        self.cfg = cfg
        self.history = AlbedoHistory(n_days=cfg.history_days)

    def observe(self, frame: Grid2D, t: int) -> Grid2D:
        small = _to_resolution(frame, self.cfg.resolution)
        update_history(self.history, small, t)
        return small

    def __call__(self, frame: Grid2D, t: int) -> Grid2D:
        small = self.observe(frame, t)
        ci = cloud_index(small, self.history, t)
        return apply_sat_variant(ci, self.cfg.sat_variant)


@dataclass
class ProcessedData:
    sky: FrameStore
    ci: FrameStore
    irradiance: IrradianceSeries
    weather: Dict[date, str]
    site: Tuple[float, float]
    sat_extent_deg: float
    cloud_height_m: float


def process_days(days: Iterable[SimulatedDay], cfg: PreprocessConfig,
                 weather: Optional[Dict[date, str]] = None) -> ProcessedData:
    """In-memory preprocessing of simulated days (warm-up days feed the history only)."""
    from .dataset import classify_day

    indexer = CloudIndexer(cfg)
    sky, ci = {}, {}
    times, ghi, clear = [], [], []
    classes: Dict[date, str] = dict(weather or {})
    scene = None
    for day in days:
        scene = day.scene
        for t in sorted(day.sat):
            if day.warmup:
                indexer.observe(day.sat[t], t)
            else:
                ci[t] = indexer(day.sat[t], t)
        if day.warmup:
            continue
        cal = scene.calibration
        for t in sorted(day.sky):
            sky[t] = process_sky(day.sky[t], t, cal, scene.site, cfg)
        times.append(day.irr_times)
        ghi.append(day.ghi)
        clear.append(day.ghi_clear)
        d = utc_date(scene.start)
        if d not in classes:
            classes[d] = classify_day(IrradianceSeries(day.irr_times, day.ghi, day.ghi_clear))
    if scene is None:
        raise DataError("no simulated days")
    irr = IrradianceSeries(np.concatenate(times), np.concatenate(ghi), np.concatenate(clear))
    return ProcessedData(FrameStore(sky), FrameStore(ci), irr, classes, tuple(scene.site),
                         scene.sat_extent_deg, scene.cloud_height_m)


# -- directory flow --------------------------------------------------------------

def preprocess_directory(raw_dir, out_dir, cfg: PreprocessConfig) -> dict:
    """Process a dataset directory into ``out_dir`` with the same layout.

    Processed sky frames are stored as ``sky_<unix>.fgrid`` and cloud-index
    maps as ``ci_<unix>.fgrid``; the irradiance CSV, calibration and
    manifest are copied, and ``preprocess.json`` records the settings.
    """
    raw_dir, out_dir = Path(raw_dir), Path(out_dir)
    try:
        manifest = json.loads((raw_dir / "manifest.json").read_text())
        cal = FisheyeCalibration.from_dict(json.loads((raw_dir / "calibration.json").read_text()))
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"{raw_dir}: not a dataset directory ({exc})") from exc
    site = tuple(manifest["site"])
    sat = FrameStore.from_directory(raw_dir / "frames", "sat")
    sky = FrameStore.from_directory(raw_dir / "frames", "sky")
    if len(sat) == 0 or len(sky) == 0:
        raise DataError(f"{raw_dir}: missing sky or satellite frames")
    frames = out_dir / "frames"
    frames.mkdir(parents=True, exist_ok=True)
    warm = {d["date"] for d in manifest["days"] if d.get("warmup")}
    indexer = CloudIndexer(cfg)
    for t in sat.times:
        t = int(t)
        if utc_date(t).isoformat() in warm:
            indexer.observe(sat.get(t), t)
        else:
            write_fgrid(frames / f"ci_{t}.fgrid", indexer(sat.get(t), t))
    for t in sky.times:
        t = int(t)
        write_fgrid(frames / f"sky_{t}.fgrid", process_sky(sky.get(t), t, cal, site, cfg))
    for name in ("irradiance.csv", "calibration.json", "manifest.json"):
        shutil.copyfile(raw_dir / name, out_dir / name)
    # lets a later run keep indexing new frames without replaying the warm-up
    indexer.history.save(out_dir / HISTORY_FILE)
    info = {"preprocess": asdict(cfg), "source": raw_dir.name}
    (out_dir / "preprocess.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return info


def load_processed(directory) -> ProcessedData:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"{directory}: missing manifest ({exc})") from exc
    site = tuple(manifest["site"])
    irr = IrradianceSeries.read_csv(directory / "irradiance.csv", site)
    weather = {date.fromisoformat(d["date"]): d["weather_class"]
               for d in manifest["days"] if "weather_class" in d}
    sky = FrameStore.from_directory(directory / "frames", "sky")
    ci = FrameStore.from_directory(directory / "frames", "ci")
    if len(sky) == 0 or len(ci) == 0:
        raise DataError(f"{directory}: no processed frames (run preprocess first)")
    return ProcessedData(sky, ci, irr, weather, site, float(manifest.get("sat_extent_deg", 2.2)),
                         float(manifest.get("cloud_height_m", 2000.0)))


# -- baselines over samples ------------------------------------------------------

def spm_forecasts(samples: Sequence[Sample]) -> np.ndarray:
    """Smart-persistence forecasts, shaped (samples, horizons)."""
    y = np.array([s.ghi_t for s in samples])[:, None]
    c = np.array([s.clear_t for s in samples])[:, None]
    ch = np.stack([s.target_clear for s in samples])
    return smart_persistence_series(y, c, ch)


def shading_pixel(site, t: float, cloud_height_m: float, framing: SatelliteFraming):
    """Pixel of the cloud-layer point on the site's sun ray."""
    sun = geometry.solar_position(site[0], site[1], float(t))
    east, north = geometry.sun_offset_on_layer(sun, cloud_height_m)
    x, y = framing.pixel_of(east, north)
    return float(x), float(y)


def cmv_forecasts(samples: Sequence[Sample], data: ProcessedData, block: int = 8, search: int = 4,
                  attenuation: float = 0.75) -> np.ndarray:
    """CMV forecasts from the two latest cloud-index maps of each sample (raw variant maps)."""
    out = np.zeros((len(samples), len(samples[0].horizons)))
    for i, s in enumerate(samples):
        prev, curr = s.sat_frames[-2], s.sat_frames[-1]
        dt = s.sat_times[-1] - s.sat_times[-2]
        framing = SatelliteFraming(data.site, data.sat_extent_deg, curr.width)
        for k, h in enumerate(s.horizons):
            lead = s.target_times[k] - s.sat_times[-1]
            px = shading_pixel(data.site, s.target_times[k], data.cloud_height_m, framing)
            out[i, k] = cmv_advect(prev, curr, dt, lead, block, search, ghi_clear=s.target_clear[k],
                                   site=px, attenuation=attenuation).ghi_hat
    return out


# -- evaluation ----------------------------------------------------------------

@dataclass
class Evaluation:
    reports: Dict[str, List[HorizonReport]]
    weather_reports: Dict[str, List[HorizonReport]]
    point: np.ndarray
    spm: np.ndarray
    target: np.ndarray


def _reports(samples, point, base, dists=None) -> List[HorizonReport]:
    target = np.stack([s.target_ghi for s in samples])
    reps = []
    for k, h in enumerate(samples[0].horizons):
        crps_vals = None
        if dists is not None:
            crps_vals = np.array([crps(d[k], y) for d, y in zip(dists, target[:, k])])
        reps.append(horizon_report(h, point[:, k], target[:, k], base[:, k], crps_vals))
    return reps


def evaluate_forecasts(samples: Sequence[Sample], point: np.ndarray, probs: Optional[np.ndarray] = None,
                       bin_range: Tuple[float, float] = (0.0, 1400.0),
                       weather: Optional[Dict[date, str]] = None) -> Evaluation:
    """Metric tables for ``point`` forecasts (and optional bin probabilities) against SPM."""
    if len(samples) == 0:
        raise DataError("nothing to evaluate")
    spm = spm_forecasts(samples)
    target = np.stack([s.target_ghi for s in samples])
    dists = None
    if probs is not None:
        dists = [[BinnedDistribution(bin_range[0], bin_range[1], p / p.sum()) for p in row] for row in probs]
    reports = {"model": _reports(samples, point, spm, dists), "spm": _reports(samples, spm, spm)}
    weather_reports: Dict[str, List[HorizonReport]] = {}
    if weather:
        groups: Dict[str, List[int]] = defaultdict(list)
        for i, s in enumerate(samples):
            groups[weather.get(utc_date(s.t), "unclassified")].append(i)
        for cls in sorted(groups):
            idx = groups[cls]
            sub = [samples[i] for i in idx]
            sub_d = None if dists is None else [dists[i] for i in idx]
            weather_reports[cls] = _reports(sub, point[idx], spm[idx], sub_d)
    return Evaluation(reports, weather_reports, point, spm, target)


def write_evaluation(ev: Evaluation, samples: Sequence[Sample], out_dir, bin_range=(0.0, 1400.0)) -> List[Path]:
    """Metric CSVs, per-weather CSVs, per-day curve CSVs and issue-time histograms."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, reps in ev.reports.items():
        p = out / f"metrics_{name}.csv"
        write_report_csv(p, reps)
        written.append(p)
    for cls, reps in ev.weather_reports.items():
        p = out / f"metrics_weather_{cls}.csv"
        write_report_csv(p, reps)
        written.append(p)
    by_day: Dict[date, List[int]] = defaultdict(list)
    for i, s in enumerate(samples):
        by_day[utc_date(s.t)].append(i)
    curves = out / "curves"
    curves.mkdir(exist_ok=True)
    for d in sorted(by_day):
        p = curves / f"curve_{d.isoformat()}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["issue_unix", "horizon_s", "target_unix", "ghi", "ghi_clear", "spm", "model"])
            for i in by_day[d]:
                s = samples[i]
                for k, h in enumerate(s.horizons):
                    w.writerow([s.t, h, s.target_times[k], repr(round(float(s.target_ghi[k]), 4)),
                                repr(round(float(s.target_clear[k]), 4)), repr(round(float(ev.spm[i, k]), 4)),
                                repr(round(float(ev.point[i, k]), 4))])
        written.append(p)
    p = out / "histograms.csv"
    write_histograms_csv(p, histograms(samples, *bin_range), *bin_range)
    written.append(p)
    return written
