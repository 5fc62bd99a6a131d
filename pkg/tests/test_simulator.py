import json
from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import brentq

from omnicast import geometry
from omnicast import imaging as im
from omnicast import simulator as sim
from omnicast.errors import DomainError
from omnicast.grid import Grid2D
from omnicast.imaging import bilinear_sample

NOON = 1554076800.0 + 12 * 3600 - 9 * 60  # close to local solar noon on 2019-04-01 at the site


def small(**kw):
    base = dict(sat_size=32, sky_size=32)
    base.update(kw)
    return sim.SceneSpec(**base)


def test_clear_frame_equals_albedo():
    sc = small(regime="clear_sky")
    frame = sim.render_satellite(sc, NOON)
    np.testing.assert_array_equal(frame.values[0], sim.render_albedo(sc))
    a = sim.render_albedo(sc)
    assert a.min() >= 0.05 and a.max() <= 0.35


def test_full_cover_frame_is_cloud_albedo():
    sc = small(coverage=1.0)
    np.testing.assert_allclose(sim.render_satellite(sc, NOON).values, 0.9)
    sky = sim.render_sky(sc, NOON)
    np.testing.assert_allclose(sky.values[0][sky.valid], sim.CLOUD_BRIGHTNESS)


def test_clear_sky_has_sun_disk_at_solar_position():
    sc = small(regime="clear_sky", sky_size=128)
    sky = sim.render_sky(sc, NOON)
    x, y = sim.sun_pixel(sc, NOON)
    ys, xs = np.nonzero(sky.values[0] >= 0.999)  # saturated core of the glare disk
    assert abs(xs.mean() - x) <= 0.5 and abs(ys.mean() - y) <= 0.5
    far = sky.values[0][sky.valid]
    assert np.median(far) == pytest.approx(sim.SKY_BRIGHTNESS)
    assert sky.mask[0, 0]


def test_irradiance_law():
    clear = small(regime="clear_sky")
    assert sim.irradiance(clear, NOON) == geometry.clear_sky_ghi(clear.sun(NOON))
    cover = small(coverage=1.0)
    assert sim.irradiance(cover, NOON) == pytest.approx(geometry.clear_sky_ghi(cover.sun(NOON)) * 0.25)


def test_out_of_range_time_rejected():
    sc = small()
    with pytest.raises(DomainError):
        sim.render_satellite(sc, sc.start - 1)
    with pytest.raises(DomainError):
        sim.irradiance(sc, sc.end + 1)
    with pytest.raises(DomainError):
        sim.SceneSpec(duration=0)


class EdgeScene(sim.SceneSpec):
    """A straight north-south cloud edge through the site at NOON, cloudy on its east side."""

    def opacity(self, east, north, t):
        shifted = np.asarray(east, dtype=float) - self.velocity[0] * (np.asarray(t, dtype=float) - NOON)
        return np.broadcast_to((shifted > 0).astype(float), np.broadcast(east, north, t).shape)


def test_edge_crossing_time():
    sc = EdgeScene(velocity=(-10.0, 0.0), sat_size=16, sky_size=16)
    # analytic crossing: the sun ray meets the layer on the edge, east offset vx * (t - NOON)
    def gap(t):
        east, _ = sc.sun_layer_point(t)
        return east - sc.velocity[0] * (t - NOON)
    t_star = brentq(gap, NOON - 3600, NOON + 3600)
    minutes = np.arange(int(t_star) - 1800, int(t_star) + 1800, 60)
    ghi = sim.irradiance_minute_mean(sc, minutes.astype(float))
    clear = geometry.clear_sky_ghi(sc.sun(minutes.astype(float)))
    dropped = minutes[ghi < clear * 0.999]
    assert abs(dropped[0] - t_star) <= 60
    assert ghi[-1] == pytest.approx(clear[-1] * 0.25, rel=1e-3)  # minute mean vs instant


def test_cross_modal_consistency():
    # satellite-view opacity at the sun-ray crossing vs the fisheye sun ray, at fine rendering
    sc = sim.SceneSpec(seed=3, glare=False, sat_size=1024, sky_size=1024)
    framing = sim.satellite_framing(sc)
    for t in NOON + np.array([-3, -1, 0, 2]) * 3600.0:
        tau_sat = sim.render_opacity(sc, t)
        x, y = framing.pixel_of(*sc.sun_layer_point(t))
        from_sat = bilinear_sample(tau_sat[None], None, np.array([x]), np.array([y]))[0][0, 0]
        sky = sim.render_sky(sc, t).values
        px, py = sim.sun_pixel(sc, t)
        b = bilinear_sample(sky, None, np.array([px]), np.array([py]))[0][0, 0]
        from_sky = (b - sim.SKY_BRIGHTNESS) / (sim.CLOUD_BRIGHTNESS - sim.SKY_BRIGHTNESS)
        assert abs(from_sat - from_sky) < 0.02
        assert abs(from_sat - sc.opacity_on_sun_ray(t)) < 0.02


def test_pure_translation_scene():
    # the ground albedo is static, so the moving part of the frame is the opacity field
    sc = sim.SceneSpec(sat_size=64)
    mx, my = sim.satellite_framing(sc).metres_per_pixel
    sc = replace(sc, velocity=(3 * mx / 300.0, 2 * my / 300.0))  # 3 px east, 2 px north per 5 min
    now = Grid2D(sim.render_opacity(sc, NOON))
    later = sim.render_opacity(sc, NOON + 300)
    moved = im.translate(now, 3, -2).values[0]
    interior = (slice(4, -4), slice(4, -4))
    assert np.abs(moved[interior] - later[interior]).max() < 1e-3
    # reflectance follows: albedo * (1 - tau) + 0.9 * tau with the moved opacity
    a = sim.render_albedo(sc)
    frame = sim.render_satellite(sc, NOON + 300).values[0]
    expected = a * (1 - moved) + sim.CLOUD_ALBEDO * moved
    assert np.abs(frame[interior] - expected[interior]).max() < 1e-3


def test_undistort_matches_layer_sampling():
    sc = sim.SceneSpec(seed=5, glare=False, sky_size=256)
    cal = sc.calibration
    extent = im.default_unwarp_extent(cal)
    out = im.undistort_sky(sim.render_sky(sc, NOON), cal, 128, extent)
    east, north = im.unwarp_grid(128, extent)
    tau = sc.opacity(east, north, NOON)
    expected = sim.SKY_BRIGHTNESS * (1 - tau) + sim.CLOUD_BRIGHTNESS * tau
    assert np.abs(out.values[0] - expected)[out.valid].max() < 0.05


def test_determinism():
    cfg = sim.SimulationConfig(seed=4, days=["broken_sky"], warmup_days=1, sat_size=16, sky_size=16)
    a, b = list(sim.simulate(cfg)), list(sim.simulate(cfg))
    for da, db in zip(a, b):
        assert da.sat.keys() == db.sat.keys()
        for t in da.sat:
            assert da.sat[t].values.tobytes() == db.sat[t].values.tobytes()
        for t in da.sky:
            assert da.sky[t].values.tobytes() == db.sky[t].values.tobytes()
        assert da.ghi.tobytes() == db.ghi.tobytes()
    other = list(sim.simulate(replace(cfg, seed=5)))
    assert other[-1].ghi.tobytes() != a[-1].ghi.tobytes()


def test_regimes_and_warmup():
    cfg = sim.SimulationConfig(seed=1, days=["clear_sky", "overcast"], warmup_days=2)
    scenes = sim.day_scenes(cfg)
    assert [s.regime for s in scenes] == ["clear_sky"] * 3 + ["overcast"]
    assert scenes[2].start - scenes[0].start == 2 * 86400
    assert len({s.albedo_seed for s in scenes}) == 1
    overcast = scenes[-1]
    tau = sim.render_opacity(replace(overcast, sat_size=32), overcast.start + 43200)
    assert tau.min() >= 0.7 and tau.max() <= 1.0
    with pytest.raises(DomainError):
        sim.SimulationConfig(days=[])
    with pytest.raises(DomainError):
        sim.SimulationConfig(days=["foggy"])


def test_broken_sky_coverage():
    cover = [float((sim.render_opacity(small(seed=s, sat_size=128), NOON) > 0).mean()) for s in range(6)]
    assert 0.4 <= np.mean(cover) <= 0.6


def test_write_dataset_layout(tmp_path):
    cfg = sim.SimulationConfig(seed=2, days=["clear_sky"], warmup_days=1, sat_size=16, sky_size=16)
    manifest = sim.write_dataset(cfg, tmp_path)
    names = {p.name.split("_")[0] for p in (tmp_path / "frames").iterdir()}
    assert names == {"sat", "sky"}
    header = (tmp_path / "irradiance.csv").read_text().splitlines()[0]
    assert header == "timestamp_utc,ghi_wm2,ghi_clear_wm2"
    cal = im.FisheyeCalibration.from_dict(json.loads((tmp_path / "calibration.json").read_text()))
    assert cal.optical_center == (7.5, 7.5)
    assert [d["warmup"] for d in manifest["days"]] == [True, False]
    assert manifest["days"][1]["weather_class"] == "clear_sky"
    assert json.loads((tmp_path / "manifest.json").read_text()) == manifest
