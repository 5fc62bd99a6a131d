from dataclasses import replace
from datetime import date, datetime, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnicast import dataset as ds
from omnicast import geometry
from omnicast.errors import DataError, DomainError
from omnicast.grid import Grid2D, write_fgrid

SITE = (48.713, 2.208)
DAY = int(datetime(2019, 4, 1, tzinfo=timezone.utc).timestamp())


def full_day(site=SITE, start=DAY, sat_offset=0, sat_end=None):
    """Every stream populated around the clock: a frame per cadence step and a GHI value per minute."""
    grid = Grid2D(np.zeros((4, 4)))
    sky = ds.FrameStore({t: grid for t in range(start, start + 86400, 120)})
    sat_end = start + 86400 if sat_end is None else sat_end
    sat = ds.FrameStore({t: grid for t in range(start + sat_offset, sat_end, 300)})
    times = np.arange(start, start + 86400, 60)
    clear = geometry.clear_sky_at(site[0], site[1], times.astype(float))
    return sky, sat, ds.IrradianceSeries(times, 0.8 * clear, clear)


def brute_force_times(sky, sat, irr, cfg):
    """Exhaustive scan of issue times under the sample rules, written independently of assemble."""
    lat, lon = cfg.site
    have_sky, have_sat = set(sky.times.tolist()), set(sat.times.tolist())
    have_irr = {int(t): c for t, c in zip(irr.times, irr.ghi_clear)}
    out = []
    for t in range(int(sky.times[0]), int(sky.times[-1]) + 1):
        if t % cfg.stride:
            continue
        if geometry.solar_position(lat, lon, float(t)).zenith > cfg.max_zenith:
            continue
        sky_seq = [t - k * cfg.sky_step for k in range(cfg.n_sky)]
        if not all(s in have_sky for s in sky_seq):
            continue
        recent = [s for s in have_sat if t - cfg.max_sat_lag < s <= t]
        if not recent:
            continue
        last = max(recent)
        if not all(last - k * cfg.sat_step in have_sat for k in range(cfg.n_sat)):
            continue
        targets = [t + h for h in cfg.horizons]
        if any(geometry.solar_position(lat, lon, float(s)).zenith > cfg.max_zenith for s in targets):
            continue
        if not all(s in have_irr for s in [t] + sky_seq + targets):
            continue
        if not all(any(s - cfg.max_sat_lag < m <= s for m in have_sat) for s in targets):
            continue
        if min(have_irr[s] for s in [t] + sky_seq) <= 0:
            continue
        out.append(t)
    return out


def test_assembly_matches_brute_force():
    sky, sat, irr = full_day()
    cfg = ds.AssemblyConfig(site=SITE, stride=600)
    report = ds.GapReport()
    samples = list(ds.assemble(sky, sat, irr, cfg, report))
    assert [s.t for s in samples] == brute_force_times(sky, sat, irr, cfg)
    assert len(samples) > 40
    assert report.emitted == len(samples)
    assert report.candidates == report.emitted + sum(report.skipped.values())
    for s in samples:
        s.check()
        assert len(s.sky_frames) == 5 and len(s.sat_frames) == 5 and len(s.target_maps) == 6
        assert np.all(np.diff(s.sky_times) == 120) and np.all(np.diff(s.sat_times) == 300)


def test_polar_night_gives_no_samples():
    start = int(datetime(2019, 12, 21, tzinfo=timezone.utc).timestamp())
    sky, sat, irr = full_day(site=(85.0, 0.0), start=start)
    report = ds.GapReport()
    assert list(ds.assemble(sky, sat, irr, ds.AssemblyConfig(site=(85.0, 0.0), stride=600), report)) == []
    assert set(report.skipped) == {"sza"}


def test_satellite_six_minutes_behind_gives_no_samples():
    # the satellite feed stops 6 min before the first sky frame of the day
    start = DAY + 8 * 3600
    sky = ds.FrameStore({t: Grid2D(np.zeros((4, 4))) for t in range(start, start + 4 * 3600, 120)})
    sat = ds.FrameStore({t: Grid2D(np.zeros((4, 4))) for t in range(start - 3000 - 360, start - 359, 300)})
    _, _, irr = full_day()
    report = ds.GapReport()
    assert list(ds.assemble(sky, sat, irr, ds.AssemblyConfig(site=SITE, stride=600), report)) == []
    # apart from the first issue time (incomplete sky history) the lag rule rejects everything
    assert set(report.skipped) == {"sky_gap", "sat_lag"}
    assert report.skipped["sat_lag"] == report.candidates - report.skipped["sky_gap"] > 20


def test_satellite_lag_just_under_five_minutes_is_kept():
    sky, sat, irr = full_day(sat_offset=1)  # frames at ...:01, so issue times on the minute lag 299 s
    samples = list(ds.assemble(sky, sat, irr, ds.AssemblyConfig(site=SITE, stride=600)))
    assert samples and all(s.sat_lag == 299 for s in samples)


def test_sample_check_flags_violations(small_samples):
    s = small_samples[0]
    with pytest.raises(DataError):
        replace(s, sza=85.0).check()
    with pytest.raises(DataError):
        replace(s, sat_times=s.sat_times[:-1] + (s.t - 300,)).check()
    with pytest.raises(DataError):
        replace(s, sky_times=tuple(reversed(s.sky_times))).check()


def test_simulated_samples_satisfy_invariants(small_samples):
    assert len(small_samples) > 20
    for s in small_samples:
        s.check()
        assert s.target_bins.min() >= 0 and s.target_bins.max() <= 99


# -- IC encoding ---------------------------------------------------------------

def test_encode_ic_examples():
    np.testing.assert_array_equal(ds.encode_ic([500] * 5, [500] * 5, (4, 4)), np.ones((5, 4, 4)))
    np.testing.assert_array_equal(ds.encode_ic([0] * 5, [500] * 5, (4, 4)), np.zeros((5, 4, 4)))
    assert ds.encode_ic([400] * 5, [800] * 5, (2, 3))[2, 1, 1] == 0.5
    assert ds.encode_ic([1000] * 5, [100] * 5, (1, 1)).max() == 1.5
    with pytest.raises(DomainError):
        ds.encode_ic([1] * 5, [1, 1, 0, 1, 1], (2, 2))


@settings(max_examples=50, deadline=None)
@given(ghi=st.lists(st.floats(0, 2000), min_size=5, max_size=5),
       clear=st.lists(st.floats(1, 1100), min_size=5, max_size=5))
def test_encode_ic_is_bounded_and_constant(ghi, clear):
    planes = ds.encode_ic(ghi, clear, (3, 3))
    assert planes.min() >= 0 and planes.max() <= 1.5
    assert np.all(planes == planes[:, :1, :1])


# -- weather classes -----------------------------------------------------------

def day_series(k):
    times = np.arange(DAY + 6 * 3600, DAY + 18 * 3600, 60)
    clear = geometry.clear_sky_at(*SITE, times.astype(float))
    return ds.IrradianceSeries(times, clear * k, clear)


def test_classify_examples():
    assert ds.classify_day(day_series(1.0)) == "clear_sky"
    assert ds.classify_day(day_series(0.3)) == "overcast"
    alternating = np.where(np.arange(720) % 2 == 0, 1.0, 0.3)
    mean_k, std_k, _ = ds.clear_sky_index_stats(day_series(alternating))
    assert mean_k == pytest.approx(0.65) and std_k == pytest.approx(0.35)
    assert ds.classify_day(day_series(alternating)) == "broken_sky"


def test_classify_needs_enough_daylight():
    short = day_series(1.0)
    with pytest.raises(DomainError):
        ds.classify_day(ds.IrradianceSeries(short.times[:99], short.ghi[:99], short.ghi_clear[:99]))


# -- splits --------------------------------------------------------------------

def at(sample, d: date, hour=12):
    t = int(datetime(d.year, d.month, d.day, hour, tzinfo=timezone.utc).timestamp())
    return replace(sample, t=t)


def test_final_year_split(small_samples):
    s = small_samples[0]
    days = [date(2019, 4, d) for d in (1, 2, 3, 4)] + [date(2018, 7, 9)]
    samples = [at(s, d, h) for d in days for h in (10, 14)]
    train, val, test = ds.split(samples, ds.SplitSpec.final_year(2019))
    assert {ds.utc_date(x.t) for x in val} == {date(2019, 4, 2), date(2019, 4, 4)}
    assert {ds.utc_date(x.t) for x in test} == {date(2019, 4, 1), date(2019, 4, 3)}
    assert {ds.utc_date(x.t) for x in train} == {date(2018, 7, 9)}
    train, val, test = ds.split(samples, ds.SplitSpec.final_year(2020))
    assert len(train) == len(samples) and not val and not test


@settings(max_examples=30, deadline=None)
@given(day_numbers=st.lists(st.integers(1, 60), min_size=1, max_size=40), seed=st.integers(0, 99))
def test_split_matches_naive_partition(small_samples, day_numbers, seed):
    s = small_samples[0]
    samples = [at(s, date.fromordinal(date(2019, 3, 1).toordinal() + n)) for n in day_numbers]
    rng = np.random.default_rng(seed)
    labels = {d: int(rng.integers(0, 4)) for d in {ds.utc_date(x.t) for x in samples}}
    groups = [[d for d, k in labels.items() if k == i] for i in range(3)]
    parts = ds.split(samples, ds.SplitSpec.by_dates(*groups))
    for i, part in enumerate(parts):
        assert [x.t for x in part] == [x.t for x in samples if labels[ds.utc_date(x.t)] == i]
    ts = [{x.t for x in p} for p in parts]
    assert not (ts[0] & ts[1]) and not (ts[0] & ts[2]) and not (ts[1] & ts[2])


def test_overlapping_split_rejected(small_samples):
    d = date(2019, 4, 1)
    with pytest.raises(DomainError):
        ds.split([at(small_samples[0], d)], ds.SplitSpec.by_dates([d], [d], []))


# -- histograms, shards, ranges ------------------------------------------------------

def test_histograms_sum_to_sample_count(small_samples, tmp_path):
    hists = ds.histograms(small_samples, 0.0, 1400.0)
    assert {k: int(v.sum()) for k, v in hists.items()} == {k: len(small_samples) for k in hists}
    ds.write_histograms_csv(tmp_path / "h.csv", hists, 0.0, 1400.0)
    rows = (tmp_path / "h.csv").read_text().splitlines()
    assert rows[0] == "kind,bin,lower,upper,count"
    assert len(rows) == 1 + 12 + 9 + 100


def test_shard_round_trip(small_samples, tmp_path):
    ds.write_shard(small_samples, tmp_path / "shard")
    back = ds.read_shard(tmp_path / "shard")
    assert len(back) == len(small_samples)
    for a, b in zip(small_samples, back):
        assert (a.t, a.sky_times, a.sat_times, a.target_map_times) == (b.t, b.sky_times, b.sat_times, b.target_map_times)
        np.testing.assert_array_equal(a.sky_array(), b.sky_array())
        np.testing.assert_array_equal(a.target_array()[0], b.target_array()[0])
        np.testing.assert_array_equal(a.target_bins, b.target_bins)
        assert a.ghi_t == b.ghi_t
    # frames shared between samples are stored once
    n_frames = len({t for s in small_samples for t in s.sky_times})
    assert (tmp_path / "shard.fgrids").stat().st_size < 3 * n_frames * (21 + 4 * 16 * 16 + 256)


def test_missing_shard_is_data_error(tmp_path):
    with pytest.raises(DataError):
        ds.read_shard(tmp_path / "nothing")


def test_distribution_range():
    series = ds.IrradianceSeries([0, 60], [10.0, 20.0], [1000.0, 900.0])
    assert ds.distribution_range(series) == (0.0, 1200.0)
    series = ds.IrradianceSeries([0], [0.0], [1000.04])
    assert ds.distribution_range(series) == (0.0, 1200.1)
    with pytest.raises(DataError):
        ds.distribution_range(ds.IrradianceSeries([0], [0.0], [0.0]))


# -- irradiance CSV / frame stores ----------------------------------------------

def test_irradiance_csv_round_trip(tmp_path):
    irr = day_series(0.5)
    irr.write_csv(tmp_path / "irr.csv")
    back = ds.IrradianceSeries.read_csv(tmp_path / "irr.csv")
    np.testing.assert_array_equal(back.times, irr.times)
    np.testing.assert_allclose(back.ghi, irr.ghi, atol=5e-5)


def test_irradiance_csv_without_clear_column(tmp_path):
    path = tmp_path / "irr.csv"
    path.write_text("timestamp_utc,ghi_wm2\n2019-06-21T11:52:00Z,512.5\n")
    series = ds.IrradianceSeries.read_csv(path, site=SITE)
    assert series.ghi_clear[0] == pytest.approx(geometry.clear_sky_ghi(25.279089), rel=1e-3)
    with pytest.raises(DataError):
        ds.IrradianceSeries.read_csv(path)


@pytest.mark.parametrize("text", [
    "time,ghi\n",
    "timestamp_utc,ghi_wm2\nnot-a-date,1\n",
    "timestamp_utc,ghi_wm2,ghi_clear_wm2\n2019-06-21T11:52:00Z,1,2\n2019-06-21T11:52:00Z,1,2\n",
])
def test_bad_irradiance_csv(tmp_path, text):
    path = tmp_path / "irr.csv"
    path.write_text(text)
    with pytest.raises(DataError):
        ds.IrradianceSeries.read_csv(path, site=SITE)


def test_frame_store_from_directory(tmp_path):
    for t in (100, 400, 250):
        write_fgrid(tmp_path / f"sky_{t}.fgrid", Grid2D(np.full((2, 2), float(t))))
    write_fgrid(tmp_path / "ci_100.fgrid", Grid2D(np.zeros((2, 2))))
    (tmp_path / "notes.txt").write_text("x")
    store = ds.FrameStore.from_directory(tmp_path, "sky")
    assert store.times.tolist() == [100, 250, 400]
    assert store.get(250).values[0, 0, 0] == 250.0
    assert store.nearest(270, 30) == 250 and store.nearest(330, 30) is None
    assert store.latest_in(100, 399) == 250 and store.latest_in(250, 399) is None
    with pytest.raises(DataError):
        store.get(5)
