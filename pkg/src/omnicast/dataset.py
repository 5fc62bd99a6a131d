"""Hybrid sample assembly from irregularly sampled sky, satellite and
irradiance streams, plus splitting, weather classification and the on-disk
formats the pipeline exchanges.
"""
from __future__ import annotations

import csv
import json
import re
from bisect import bisect_right
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import geometry
from .errors import DataError, DomainError
from .grid import Grid2D, read_fgrid, read_fgrid_at, to_bytes
from .metrics import BIN_COUNT, bin_index

HORIZONS_S = (600, 1200, 1800, 2400, 3000, 3600)
WEATHER_CLASSES = ("clear_sky", "broken_sky", "overcast")
SZA_BUCKETS = tuple(range(0, 90, 10))


# -- irradiance ----------------------------------------------------------------

def parse_iso(text: str) -> int:
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(round(dt.timestamp()))


def iso_utc(unix: int) -> str:
    return datetime.fromtimestamp(int(unix), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class IrradianceSeries:
    """Minute-stamped GHI with clear-sky companion values (W/m2)."""

    times: np.ndarray
    ghi: np.ndarray
    ghi_clear: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.int64)
        self.ghi = np.asarray(self.ghi, dtype=float)
        self.ghi_clear = np.asarray(self.ghi_clear, dtype=float)
        if not (self.times.shape == self.ghi.shape == self.ghi_clear.shape):
            raise DataError("irradiance columns differ in length")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            order = np.argsort(self.times, kind="stable")
            self.times, self.ghi, self.ghi_clear = self.times[order], self.ghi[order], self.ghi_clear[order]
            if np.any(np.diff(self.times) == 0):
                raise DataError("duplicate irradiance timestamps")
        self._index = {int(t): i for i, t in enumerate(self.times)}

    def __len__(self):
        return len(self.times)

    def lookup(self, t) -> Optional[int]:
        return self._index.get(int(t))

    def value(self, t) -> Optional[Tuple[float, float]]:
        i = self._index.get(int(t))
        if i is None:
            return None
        return float(self.ghi[i]), float(self.ghi_clear[i])

    def days(self) -> List[date]:
        return sorted({utc_date(t) for t in self.times})

    def day(self, d: date) -> "IrradianceSeries":
        sel = np.array([utc_date(t) == d for t in self.times], dtype=bool)
        return IrradianceSeries(self.times[sel], self.ghi[sel], self.ghi_clear[sel])

    @classmethod
    def read_csv(cls, path, site: Optional[Tuple[float, float]] = None) -> "IrradianceSeries":
        """Read ``timestamp_utc,ghi_wm2[,ghi_clear_wm2]``.

        Without a clear-sky column the analytic clear-sky model at ``site`` fills it.
        """
        times, ghi, clear = [], [], []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or header[:2] != ["timestamp_utc", "ghi_wm2"]:
                raise DataError(f"{path}: expected header timestamp_utc,ghi_wm2[,ghi_clear_wm2]")
            has_clear = len(header) > 2 and header[2] == "ghi_clear_wm2"
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    times.append(parse_iso(row[0]))
                    ghi.append(float(row[1]))
                    clear.append(float(row[2]) if has_clear else np.nan)
                except (ValueError, IndexError) as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from exc
        clear = np.asarray(clear)
        if not has_clear:
            if site is None:
                raise DataError(f"{path}: no clear-sky column and no site to model it")
            clear = geometry.clear_sky_at(site[0], site[1], np.asarray(times, dtype=float))
        return cls(np.asarray(times), np.asarray(ghi), clear)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["timestamp_utc", "ghi_wm2", "ghi_clear_wm2"])
            for t, g, c in zip(self.times, self.ghi, self.ghi_clear):
                writer.writerow([iso_utc(t), f"{g:.4f}", f"{c:.4f}"])


def utc_date(unix) -> date:
    return datetime.fromtimestamp(int(unix), tz=timezone.utc).date()


# -- frame stores --------------------------------------------------------------

_FRAME_NAME = re.compile(r"^(?P<stream>[A-Za-z0-9]+)_(?P<t>-?\d+)\.fgrid$")


class FrameStore:
    """Time-indexed frames of one stream, in memory or backed by FGRID files."""

    def __init__(self, frames: Optional[Mapping[int, Grid2D]] = None, paths: Optional[Mapping[int, Path]] = None):
        self._frames: Dict[int, Grid2D] = dict(frames or {})
        self._paths: Dict[int, Path] = dict(paths or {})
        self.times = np.array(sorted(set(self._frames) | set(self._paths)), dtype=np.int64)

    @classmethod
    def from_directory(cls, directory, stream: str) -> "FrameStore":
        paths = {}
        for p in Path(directory).iterdir():
            m = _FRAME_NAME.match(p.name)
            if m and m.group("stream") == stream:
                paths[int(m.group("t"))] = p
        return cls(paths=paths)

    def __len__(self):
        return len(self.times)

    def __contains__(self, t) -> bool:
        return int(t) in self._frames or int(t) in self._paths

    def get(self, t) -> Grid2D:
        t = int(t)
        if t not in self._frames:
            if t not in self._paths:
                raise DataError(f"no frame at {t}")
            self._frames[t] = read_fgrid(self._paths[t])
        return self._frames[t]

    def nearest(self, t, tolerance: int) -> Optional[int]:
        """Stored timestamp closest to ``t`` within ``tolerance`` seconds."""
        if len(self.times) == 0:
            return None
        i = np.searchsorted(self.times, t)
        best = None
        for j in (i - 1, i):
            if 0 <= j < len(self.times):
                d = abs(int(self.times[j]) - int(t))
                if d <= tolerance and (best is None or d < abs(best - int(t))):
                    best = int(self.times[j])
        return best

    def latest_in(self, lo_exclusive, hi_inclusive) -> Optional[int]:
        """Most recent timestamp in (lo, hi]."""
        i = bisect_right(self.times, hi_inclusive) - 1
        if i >= 0 and self.times[i] > lo_exclusive:
            return int(self.times[i])
        return None


def distribution_range(series: "IrradianceSeries", headroom: float = 1.2) -> Tuple[float, float]:
    """Bin range [0, headroom * max clear-sky GHI] of a dataset, rounded up to 0.1 W/m2."""
    if len(series.ghi_clear) == 0 or not np.max(series.ghi_clear) > 0:
        raise DataError("irradiance series has no daylight clear-sky values")
    return 0.0, float(np.ceil(headroom * float(np.max(series.ghi_clear)) * 10.0) / 10.0)


# -- samples -------------------------------------------------------------------

@dataclass
class AssemblyConfig:
    site: Tuple[float, float] = (48.713, 2.208)
    horizons: Tuple[int, ...] = HORIZONS_S
    n_sky: int = 5
    sky_step: int = 120
    n_sat: int = 5
    sat_step: int = 300
    max_sat_lag: int = 300
    snap_tolerance: int = 30
    max_zenith: float = 80.0
    stride: int = 120
    bin_lo: float = 0.0
    bin_hi: float = 1400.0
    bins: int = BIN_COUNT

    def __post_init__(self):
        self.site = tuple(self.site)
        self.horizons = tuple(int(h) for h in self.horizons)
        if self.stride <= 0 or self.sky_step <= 0 or self.sat_step <= 0:
            raise DomainError("cadences must be positive")
        if not self.bin_hi > self.bin_lo:
            raise DomainError("bin range must satisfy hi > lo")


@dataclass
class Sample:
    """One hybrid training instance issued at time ``t``."""

    t: int
    site: Tuple[float, float]
    sza: float
    sky_times: Tuple[int, ...]
    sat_times: Tuple[int, ...]
    sky_frames: Tuple[Grid2D, ...]
    sat_frames: Tuple[Grid2D, ...]
    past_ghi: np.ndarray
    past_clear: np.ndarray
    ghi_t: float
    clear_t: float
    horizons: Tuple[int, ...]
    target_times: Tuple[int, ...]
    target_map_times: Tuple[int, ...]
    target_maps: Tuple[Grid2D, ...]
    target_ghi: np.ndarray
    target_clear: np.ndarray
    target_bins: np.ndarray

    @property
    def sat_lag(self) -> int:
        return self.t - self.sat_times[-1]

    @property
    def ic_values(self) -> np.ndarray:
        return np.clip(self.past_ghi / self.past_clear, 0.0, 1.5)

    def sky_array(self) -> np.ndarray:
        return np.stack([g.filled(0.0) for g in self.sky_frames]).astype(np.float32)

    def sat_array(self) -> np.ndarray:
        return np.stack([g.filled(0.0) for g in self.sat_frames]).astype(np.float32)

    def target_array(self) -> Tuple[np.ndarray, np.ndarray]:
        """Target cloud-index maps (H, W per horizon) and their validity."""
        maps = np.stack([g.filled(0.0)[0] for g in self.target_maps]).astype(np.float32)
        valid = np.stack([g.valid for g in self.target_maps])
        return maps, valid

    def check(self, max_zenith: float = 80.0, max_sat_lag: int = 300) -> None:
        """Raise DataError if any sample invariant is violated."""
        if self.sza > max_zenith:
            raise DataError(f"sample {self.t}: SZA {self.sza:.2f} above {max_zenith}")
        for seq in (self.sky_times, self.sat_times, self.target_times):
            if any(b <= a for a, b in zip(seq, seq[1:])):
                raise DataError(f"sample {self.t}: timestamps not strictly increasing")
        if not 0 <= self.sat_lag < max_sat_lag:
            raise DataError(f"sample {self.t}: satellite lag {self.sat_lag}s outside [0, {max_sat_lag})")
        zen = geometry.solar_position(self.site[0], self.site[1], np.asarray(self.target_times, float)).zenith
        if np.any(zen > max_zenith):
            raise DataError(f"sample {self.t}: a target time has SZA above {max_zenith}")


@dataclass
class GapReport:
    candidates: int = 0
    emitted: int = 0
    skipped: Counter = field(default_factory=Counter)

    def skip(self, reason: str) -> None:
        self.skipped[reason] += 1


def _sequence(store: FrameStore, last: int, n: int, step: int, tol: int) -> Optional[List[int]]:
    times = []
    for k in range(n - 1, -1, -1):
        got = store.nearest(last - k * step, tol)
        if got is None:
            return None
        times.append(got)
    if any(b <= a for a, b in zip(times, times[1:])):
        return None
    return times


def candidate_times(sky_store: FrameStore, stride: int) -> np.ndarray:
    if len(sky_store) == 0:
        return np.zeros(0, dtype=np.int64)
    first = int(np.ceil(sky_store.times[0] / stride) * stride)
    return np.arange(first, int(sky_store.times[-1]) + 1, stride, dtype=np.int64)


def assemble(sky_store: FrameStore, sat_store: FrameStore, irr: IrradianceSeries,
             config: Optional[AssemblyConfig] = None, report: Optional[GapReport] = None) -> Iterator[Sample]:
    """Yield every sample whose inputs, targets and solar-angle limits are satisfied.

    ``sat_store`` holds cloud-index maps: they are both the satellite input
    sequence and the future-state targets. Issue times are the multiples of
    ``config.stride`` covered by the sky stream; skipped candidates are
    tallied in ``report`` by reason.
    """
    cfg = config or AssemblyConfig()
    report = report if report is not None else GapReport()
    lat, lon = cfg.site
    for t in candidate_times(sky_store, cfg.stride):
        t = int(t)
        report.candidates += 1
        sza = float(geometry.solar_position(lat, lon, float(t)).zenith)
        if sza > cfg.max_zenith:
            report.skip("sza")
            continue
        if sky_store.nearest(t, cfg.snap_tolerance) is None:
            report.skip("sky_gap")
            continue
        sky_times = _sequence(sky_store, t, cfg.n_sky, cfg.sky_step, cfg.snap_tolerance)
        if sky_times is None:
            report.skip("sky_gap")
            continue
        last_sat = sat_store.latest_in(t - cfg.max_sat_lag, t)
        if last_sat is None:
            report.skip("sat_lag")
            continue
        sat_times = _sequence(sat_store, last_sat, cfg.n_sat, cfg.sat_step, cfg.snap_tolerance)
        if sat_times is None:
            report.skip("sat_gap")
            continue
        target_times = tuple(t + h for h in cfg.horizons)
        tzen = geometry.solar_position(lat, lon, np.asarray(target_times, float)).zenith
        if np.any(tzen > cfg.max_zenith):
            report.skip("sza_target")
            continue
        now = irr.value(t)
        if now is None:
            report.skip("irr_gap")
            continue
        past = [irr.value(s) for s in sky_times]
        if any(p is None for p in past):
            report.skip("irr_gap")
            continue
        targets = [irr.value(s) for s in target_times]
        if any(p is None for p in targets):
            report.skip("irr_gap")
            continue
        map_times = [sat_store.latest_in(s - cfg.max_sat_lag, s) for s in target_times]
        if any(m is None for m in map_times):
            report.skip("target_map_gap")
            continue
        past_clear = np.array([p[1] for p in past])
        if now[1] <= 0 or np.any(past_clear <= 0):
            report.skip("clear_zero")
            continue
        target_ghi = np.array([p[0] for p in targets])
        report.emitted += 1
        yield Sample(
            t=t,
            site=cfg.site,
            sza=sza,
            sky_times=tuple(sky_times),
            sat_times=tuple(sat_times),
            sky_frames=tuple(sky_store.get(s) for s in sky_times),
            sat_frames=tuple(sat_store.get(s) for s in sat_times),
            past_ghi=np.array([p[0] for p in past]),
            past_clear=past_clear,
            ghi_t=now[0],
            clear_t=now[1],
            horizons=cfg.horizons,
            target_times=target_times,
            target_map_times=tuple(map_times),
            target_maps=tuple(sat_store.get(m) for m in map_times),
            target_ghi=target_ghi,
            target_clear=np.array([p[1] for p in targets]),
            target_bins=np.asarray(bin_index(target_ghi, cfg.bin_lo, cfg.bin_hi, cfg.bins)),
        )


def encode_ic(past_ghi, past_clear, frame_dims: Tuple[int, int]) -> np.ndarray:
    """Constant planes of clear-sky-normalised GHI, one per past frame, clamped to [0, 1.5]."""
    past_ghi = np.asarray(past_ghi, dtype=float)
    past_clear = np.asarray(past_clear, dtype=float)
    if past_ghi.shape != past_clear.shape:
        raise DomainError("past_ghi and past_clear differ in length")
    if np.any(past_clear <= 0):
        raise DomainError("clear-sky irradiance must be positive for IC encoding")
    ratio = np.clip(past_ghi / past_clear, 0.0, 1.5)
    h, w = frame_dims
    return np.broadcast_to(ratio[:, None, None], (len(ratio), h, w)).astype(np.float32)


# -- weather classes -----------------------------------------------------------

@dataclass(frozen=True)
class WeatherThresholds:
    clear_mean: float = 0.85
    clear_std: float = 0.08
    overcast_mean: float = 0.45
    overcast_std: float = 0.15
    min_samples: int = 100


def clear_sky_index_stats(series: IrradianceSeries) -> Tuple[float, float, int]:
    day = series.ghi_clear > 0
    k = series.ghi[day] / series.ghi_clear[day]
    if k.size == 0:
        return float("nan"), float("nan"), 0
    return float(np.mean(k)), float(np.std(k)), int(k.size)


def classify_day(series: IrradianceSeries, thresholds: WeatherThresholds = WeatherThresholds()) -> str:
    """clear_sky, overcast or broken_sky from the day's clear-sky index statistics."""
    mean_k, std_k, n = clear_sky_index_stats(series)
    if n < thresholds.min_samples:
        raise DomainError(f"need {thresholds.min_samples} daytime measurements, got {n}")
    if mean_k >= thresholds.clear_mean and std_k <= thresholds.clear_std:
        return "clear_sky"
    if mean_k <= thresholds.overcast_mean and std_k <= thresholds.overcast_std:
        return "overcast"
    return "broken_sky"


def classify_days(series: IrradianceSeries, thresholds: WeatherThresholds = WeatherThresholds()) -> Dict[date, str]:
    out = {}
    for d in series.days():
        try:
            out[d] = classify_day(series.day(d), thresholds)
        except DomainError:
            continue
    return out


# -- splits --------------------------------------------------------------------

DayPredicate = Callable[[date], bool]


@dataclass(frozen=True)
class SplitSpec:
    train: DayPredicate
    val: DayPredicate
    test: DayPredicate

    @classmethod
    def final_year(cls, year: int) -> "SplitSpec":
        """Earlier years train; even days of ``year`` validate, odd days test."""
        return cls(
            train=lambda d: d.year < year,
            val=lambda d: d.year == year and d.day % 2 == 0,
            test=lambda d: d.year == year and d.day % 2 == 1,
        )

    @classmethod
    def by_dates(cls, train: Iterable[date], val: Iterable[date], test: Iterable[date]) -> "SplitSpec":
        tr, va, te = frozenset(train), frozenset(val), frozenset(test)
        return cls(train=tr.__contains__, val=va.__contains__, test=te.__contains__)


def split(samples: Iterable[Sample], spec: SplitSpec) -> Tuple[List[Sample], List[Sample], List[Sample]]:
    """Partition samples by the UTC calendar day of their issue time.

    Samples whose day matches no predicate are dropped; a day matching more
    than one predicate is an error.
    """
    parts: Tuple[List[Sample], List[Sample], List[Sample]] = ([], [], [])
    verdicts: Dict[date, int] = {}
    for s in samples:
        d = utc_date(s.t)
        if d not in verdicts:
            hits = [i for i, pred in enumerate((spec.train, spec.val, spec.test)) if pred(d)]
            if len(hits) > 1:
                raise DomainError(f"split predicates overlap on {d}")
            verdicts[d] = hits[0] if hits else -1
        k = verdicts[d]
        if k >= 0:
            parts[k].append(s)
    return parts


# -- histograms ----------------------------------------------------------------

def histograms(samples: Sequence[Sample], bin_lo: float, bin_hi: float, bins: int = BIN_COUNT) -> Dict[str, np.ndarray]:
    """Sample counts by month, 10-degree SZA bucket and GHI bin at issue time."""
    month = np.zeros(12, dtype=np.int64)
    sza = np.zeros(len(SZA_BUCKETS), dtype=np.int64)
    ghi = np.zeros(bins, dtype=np.int64)
    for s in samples:
        month[utc_date(s.t).month - 1] += 1
        sza[min(int(s.sza // 10), len(SZA_BUCKETS) - 1)] += 1
        ghi[bin_index(s.ghi_t, bin_lo, bin_hi, bins)] += 1
    return {"month": month, "sza": sza, "ghi": ghi}


def write_histograms_csv(path, hists: Dict[str, np.ndarray], bin_lo: float, bin_hi: float) -> None:
    width = (bin_hi - bin_lo) / len(hists["ghi"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["kind", "bin", "lower", "upper", "count"])
        for m, c in enumerate(hists["month"], start=1):
            writer.writerow(["month", m, m, m, int(c)])
        for i, c in enumerate(hists["sza"]):
            writer.writerow(["sza_deg", i, SZA_BUCKETS[i], SZA_BUCKETS[i] + 10, int(c)])
        for i, c in enumerate(hists["ghi"]):
            writer.writerow(["ghi_wm2", i, round(bin_lo + i * width, 6), round(bin_lo + (i + 1) * width, 6), int(c)])


# -- sample shards -------------------------------------------------------------

def write_shard(samples: Sequence[Sample], prefix) -> None:
    """Write ``<prefix>.fgrids`` (deduplicated frames) and ``<prefix>.jsonl``."""
    prefix = Path(prefix)
    offsets: Dict[Tuple[str, int], int] = {}
    pos = 0
    with open(prefix.with_suffix(".fgrids"), "wb") as payload, open(prefix.with_suffix(".jsonl"), "w") as index:
        def put(stream, t, grid):
            nonlocal pos
            key = (stream, int(t))
            if key not in offsets:
                blob = to_bytes(grid)
                offsets[key] = pos
                payload.write(blob)
                pos += len(blob)
            return offsets[key]

        for s in samples:
            rec = {
                "t": s.t,
                "site": list(s.site),
                "sza": s.sza,
                "sky_times": list(s.sky_times),
                "sat_times": list(s.sat_times),
                "sky_offsets": [put("sky", t, g) for t, g in zip(s.sky_times, s.sky_frames)],
                "sat_offsets": [put("ci", t, g) for t, g in zip(s.sat_times, s.sat_frames)],
                "past_ghi": s.past_ghi.tolist(),
                "past_clear": s.past_clear.tolist(),
                "ghi_t": s.ghi_t,
                "clear_t": s.clear_t,
                "horizons": list(s.horizons),
                "target_times": list(s.target_times),
                "target_map_times": list(s.target_map_times),
                "target_offsets": [put("ci", t, g) for t, g in zip(s.target_map_times, s.target_maps)],
                "target_ghi": s.target_ghi.tolist(),
                "target_clear": s.target_clear.tolist(),
                "target_bins": [int(b) for b in s.target_bins],
            }
            index.write(json.dumps(rec, sort_keys=True) + "\n")


def read_shard(prefix) -> List[Sample]:
    prefix = Path(prefix)
    try:
        data = prefix.with_suffix(".fgrids").read_bytes()
        lines = prefix.with_suffix(".jsonl").read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read shard {prefix}: {exc}") from exc
    cache: Dict[int, Grid2D] = {}

    def grid_at(off: int) -> Grid2D:
        if off not in cache:
            cache[off], _ = read_fgrid_at(data, off)
        return cache[off]

    samples = []
    for line in lines:
        r = json.loads(line)
        samples.append(Sample(
            t=r["t"], site=tuple(r["site"]), sza=r["sza"],
            sky_times=tuple(r["sky_times"]), sat_times=tuple(r["sat_times"]),
            sky_frames=tuple(grid_at(o) for o in r["sky_offsets"]),
            sat_frames=tuple(grid_at(o) for o in r["sat_offsets"]),
            past_ghi=np.array(r["past_ghi"]), past_clear=np.array(r["past_clear"]),
            ghi_t=r["ghi_t"], clear_t=r["clear_t"], horizons=tuple(r["horizons"]),
            target_times=tuple(r["target_times"]), target_map_times=tuple(r["target_map_times"]),
            target_maps=tuple(grid_at(o) for o in r["target_offsets"]),
            target_ghi=np.array(r["target_ghi"]), target_clear=np.array(r["target_clear"]),
            target_bins=np.array(r["target_bins"], dtype=np.int64),
        ))
    return samples
