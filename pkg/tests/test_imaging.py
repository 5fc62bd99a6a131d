import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnicast import imaging as im
from omnicast.errors import DomainError
from omnicast.grid import Grid2D
from omnicast.simulator import RandomField


def smooth_field(size, scale, seed=1):
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    v = RandomField(seed, scale)(xx, yy)
    return Grid2D((v - v.min()) / (v.max() - v.min()), value_range=(0.0, 1.0))


def blob(size, cx, cy, sigma):
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    return np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))


def centroid(values):
    yy, xx = np.mgrid[0:values.shape[0], 0:values.shape[1]].astype(float)
    w = values / values.sum()
    return float((w * xx).sum()), float((w * yy).sum())


# -- bilinear / translate ---------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), c=st.floats(-3, 3),
       x=st.floats(0, 9), y=st.floats(0, 9))
def test_bilinear_exact_on_affine_functions(a, b, c, x, y):
    yy, xx = np.mgrid[0:10, 0:10].astype(float)
    values = (a * xx + b * yy + c)[None]
    out, ok = im.bilinear_sample(values, None, np.array([x]), np.array([y]))
    assert ok[0]
    assert out[0, 0] == pytest.approx(a * x + b * y + c, abs=1e-9)


def test_integer_translation_is_exact():
    g = smooth_field(32, 6.0)
    out = im.translate(g, 3, -2)
    # out[y, x] = in[y + 2, x - 3]
    np.testing.assert_allclose(out.values[0, :30, 3:], g.values[0, 2:, :29], atol=1e-12)
    assert out.mask[:, :3].all() and out.mask[30:, :].all()
    assert not out.mask[:30, 3:].any()


def test_fully_masked_stencil_is_masked():
    mask = np.zeros((8, 8), bool)
    mask[2:6, 2:6] = True
    g = Grid2D(np.ones((8, 8)), mask=mask)
    out = im.translate(g, 0.5, 0.5)
    assert out.mask[3, 3]
    assert not out.mask[1, 1] and out.mask[0, 0]


# -- downscale ----------------------------------------------------------------

def test_downscale_preserves_constants():
    out = im.downscale(Grid2D(np.full((256, 256), 0.7)), 2)
    assert out.shape == (128, 128)
    np.testing.assert_allclose(out.values, 0.7, atol=1e-12)


def test_downscale_factor_four_512_to_128():
    out = im.downscale(smooth_field(512, 40.0), 4)
    assert out.shape == (128, 128)


def test_downscale_attenuates_checkerboard():
    yy, xx = np.mgrid[0:64, 0:64]
    checker = Grid2D(((xx + yy) % 2).astype(float))
    filtered = im.downscale(checker, 2).values
    naive = im.stride_sample(checker, 2).values
    amp = lambda v: np.abs(v - 0.5).max()
    assert amp(naive) == pytest.approx(0.5)
    assert amp(filtered) * 4 <= amp(naive)


def test_downscale_rejects_bad_factors():
    g = Grid2D(np.zeros((10, 10)))
    for f in (1, 3, 2.5):
        with pytest.raises(DomainError):
            im.downscale(g, f)


def test_downscale_composition_is_approximate():
    # the two-stage path samples a different phase and has a triangular kernel
    g = smooth_field(256, 16.0)
    two_step = im.downscale(im.downscale(g, 2), 2).values
    one_step = im.downscale(g, 4).values
    assert np.abs(two_step - one_step).max() < 0.06


def test_binomial_kernel():
    np.testing.assert_allclose(im.binomial_kernel(2), [0.25, 0.5, 0.25])
    assert len(im.binomial_kernel(4)) == 7
    assert im.binomial_kernel(4).sum() == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), factor=st.sampled_from([2, 4]))
def test_resamplers_stay_within_value_range(seed, factor):
    v = np.random.default_rng(seed).random((16, 16))
    g = Grid2D(v, value_range=(0.0, 1.0))
    for out in (im.downscale(g, factor), im.center_closeup(g), im.spin_transform(g, (7.5, 7.5), 8, 8),
                im.translate(g, 0.3, -1.7)):
        assert out.in_range()


# -- close-up -------------------------------------------------------------------

def test_closeup_shape_and_constant():
    out = im.center_closeup(Grid2D(np.full((128, 128), 0.3)))
    assert out.shape == (128, 128)
    np.testing.assert_allclose(out.values, 0.3)


def test_closeup_magnifies_about_the_centre():
    size = 128
    g = Grid2D(blob(size, 63.5, 63.5, 2.0))
    out = im.center_closeup(g)
    assert centroid(out.values[0]) == pytest.approx((63.5, 63.5), abs=1e-6)
    # an off-centre dot moves twice as far from the centre: x_out = 2 * (x_in - W/4) + 0.5
    g2 = Grid2D(blob(size, 70.0, 60.0, 1.5))
    cx, cy = centroid(im.center_closeup(g2).values[0])
    assert cx == pytest.approx(2 * (70.0 - 32) + 0.5, abs=0.2)
    assert cy == pytest.approx(2 * (60.0 - 32) + 0.5, abs=0.2)


def test_closeup_needs_even_dims():
    with pytest.raises(DomainError):
        im.center_closeup(Grid2D(np.zeros((7, 8))))


# -- SPIN ---------------------------------------------------------------------

def test_spin_radially_symmetric_rows_constant():
    size = 65
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    r = np.hypot(xx - 32, yy - 32)
    polar = im.spin_transform(Grid2D(np.cos(r / 5.0)), (32, 32), 32, 64)
    rows = polar.values[0]
    assert np.abs(rows - rows[:, :1]).max() < 0.02
    np.testing.assert_allclose(rows[0], 1.0)


def test_spin_row_zero_is_centre_value():
    g = smooth_field(64, 8.0)
    polar = im.spin_transform(g, (20.0, 30.0), 16, 16)
    np.testing.assert_allclose(polar.values[0, 0], g.values[0, 30, 20])


def test_spin_rotation_equivariance():
    size, na = 129, 128
    g = smooth_field(size, 12.0)
    c = (64.0, 64.0)
    a = im.spin_transform(g, c, 64, na).values[0]
    rotated = Grid2D(np.rot90(g.values[0]).copy(), value_range=g.value_range)
    b = im.spin_transform(rotated, c, 64, na).values[0]
    # rot90 turns +x towards -y, i.e. angles shift by -90 degrees
    assert np.abs(b - np.roll(a, -na // 4, axis=1)).max() < 1e-3


def test_spin_round_trip_inside_080_radius():
    size = 128
    c = (63.5, 63.5)
    g = Grid2D(blob(size, 70.0, 55.0, 14.0), value_range=(0.0, 1.0))
    polar = im.spin_transform(g, c, 128, 128)
    back = im.spin_inverse(polar, c, size)
    radius = im.nearest_edge_radius(c, (size, size))
    yy, xx = np.mgrid[0:size, 0:size]
    inside = np.hypot(xx - c[0], yy - c[1]) <= 0.8 * radius
    assert np.abs(back.values[0][inside] - g.values[0][inside]).max() < 0.02
    assert back.mask is not None and back.mask[0, 0]


def test_spin_constant_and_masked_inputs():
    const = Grid2D(np.full((32, 32), 0.4))
    polar = im.spin_transform(const, (15.5, 15.5), 16, 16)
    np.testing.assert_allclose(polar.values, 0.4)
    np.testing.assert_allclose(im.spin_inverse(polar, (15.5, 15.5), 32).filled(0.4), 0.4)
    masked = Grid2D(np.zeros((32, 32)), mask=np.ones((32, 32), bool))
    out = im.spin_transform(masked, (15.5, 15.5), 16, 16)
    assert out.mask.all()
    assert im.spin_inverse(out, (15.5, 15.5), 32).mask.all()


def test_spin_rejects_centre_outside():
    with pytest.raises(DomainError):
        im.spin_transform(Grid2D(np.zeros((8, 8))), (9.0, 2.0), 4, 4)


# -- fisheye ------------------------------------------------------------------

def test_calibration_validation():
    with pytest.raises(DomainError):
        im.FisheyeCalibration((10, 10), np.array([0, 40, 30.0]), np.array([0, 5, 10.0]))
    cal = im.FisheyeCalibration.equidistant(64)
    assert im.FisheyeCalibration.from_dict(cal.to_dict()) == cal


def test_undistort_constant_and_centre_dot():
    cal = im.FisheyeCalibration.equidistant(256)
    out = im.undistort_sky(Grid2D(np.full((256, 256), 0.6)), cal, 64)
    np.testing.assert_allclose(out.filled(0.6), 0.6)
    cx, cy = cal.optical_center
    dot = im.undistort_sky(Grid2D(blob(256, cx, cy, 3.0)), cal, 128)
    assert centroid(dot.values[0]) == pytest.approx((63.5, 63.5), abs=0.05)


def test_undistort_dot_at_sixty_degrees():
    size, out_size, height = 256, 128, 2000.0
    cal = im.FisheyeCalibration.equidistant(size, cloud_height=height)
    # independent ray: equidistant lens r = z/90 * (size/2 - 0.5), azimuth 90 deg is +x
    r = 60.0 / 90.0 * (size / 2 - 0.5)
    cx, cy = (size - 1) / 2.0, (size - 1) / 2.0
    raw = Grid2D(blob(size, cx + r, cy, 1.5))
    extent = height * np.tan(np.deg2rad(70.0))
    out = im.undistort_sky(raw, cal, out_size, extent)
    step = 2 * extent / out_size
    expected_x = (out_size - 1) / 2.0 + height * np.tan(np.deg2rad(60.0)) / step
    x, y = np.unravel_index(np.argmax(out.values[0]), out.shape)[::-1]
    assert abs(x - expected_x) <= 1.0
    assert abs(y - (out_size - 1) / 2.0) <= 1.0


def test_undistort_masks_beyond_calibrated_zenith():
    cal = im.FisheyeCalibration.equidistant(64, max_zenith=60.0)
    out = im.undistort_sky(Grid2D(np.ones((64, 64))), cal, 32, half_extent_m=2000.0 * np.tan(np.deg2rad(75)))
    assert out.mask is not None and out.mask[0, 0] and not out.mask[16, 16]


def test_undistort_rejects_small_output():
    with pytest.raises(DomainError):
        im.undistort_sky(Grid2D(np.ones((64, 64))), im.FisheyeCalibration.equidistant(64), 4)
