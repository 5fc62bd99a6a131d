from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnicast import autodiff as ad
from omnicast import model as M
from omnicast.errors import DataError, DomainError, TrainingFault
from omnicast.grid import Grid2D


def cfg_with(base, **kw):
    d = base.to_dict()
    d.update(kw)
    return M.ModelConfig.from_dict(d)


def same_forecasts(a, b):
    return all(x.ghi_hat.tobytes() == y.ghi_hat.tobytes() and x.probs.tobytes() == y.probs.tobytes()
               and x.ci_maps.tobytes() == y.ci_maps.tobytes() for x, y in zip(a, b))


def test_forward_shapes_and_ranges(small_samples, tiny_config):
    params = M.init_params(tiny_config, seed=0)
    fc = M.forward(params, small_samples[0], tiny_config)
    assert len(fc) == 6 and fc.horizons == (600, 1200, 1800, 2400, 3000, 3600)
    assert fc.ci_maps.shape == (6, 16, 16)
    assert fc.ci_maps.min() >= 0.0 and fc.ci_maps.max() <= 1.0
    assert np.all(fc.ghi_hat >= 0.0)
    np.testing.assert_allclose(fc.probs.sum(axis=1), 1.0, atol=1e-5)
    assert fc.distribution(2).probs.shape == (100,)


def test_zero_parameters_give_constant_finite_outputs(small_samples, tiny_config):
    params = {k: np.zeros_like(v) for k, v in M.init_params(tiny_config, seed=0).items()}
    fc = M.forward(params, small_samples[3], tiny_config)
    for arr in (fc.ghi_hat, fc.probs, fc.ci_maps):
        assert np.all(np.isfinite(arr))
        assert all(np.array_equal(arr[0], arr[k]) for k in range(1, 6))


def test_duplicate_samples_get_identical_outputs(small_samples, tiny_config):
    params = M.init_params(tiny_config, seed=1)
    s = small_samples[5]
    a, b = M.forward(params, [s, s], tiny_config)
    assert same_forecasts([a], [b])
    assert same_forecasts([M.forward(params, s, tiny_config)], [M.forward(params, s, tiny_config)])


def test_predict_matches_forward(small_samples, tiny_config):
    params = M.init_params(tiny_config, seed=2)
    rng = np.random.default_rng(0)
    chosen = [small_samples[i] for i in rng.choice(len(small_samples), size=100, replace=False)]
    fwd = M.forward(params, chosen, tiny_config)
    assert same_forecasts(fwd, M.predict(params, chosen, tiny_config, chunk=100))
    # smaller chunks change the BLAS reduction order, not the values
    chunked = M.predict(params, chosen, tiny_config, chunk=7)
    for x, y in zip(fwd, chunked):
        np.testing.assert_allclose(x.ghi_hat, y.ghi_hat, rtol=1e-5, atol=1e-3)


def test_make_batch_rejects_mismatched_modalities(small_samples, tiny_config):
    with pytest.raises(DomainError):
        M.make_batch(small_samples[:2], cfg_with(tiny_config, input_resolution=32))
    with pytest.raises(DomainError):
        M.make_batch(small_samples[:2], cfg_with(tiny_config, sky_channels=3))
    with pytest.raises(DomainError):
        M.make_batch([], tiny_config)


def test_config_validation(tiny_config):
    with pytest.raises(DomainError):
        cfg_with(tiny_config, inputs=["IC"])
    with pytest.raises(DomainError):
        cfg_with(tiny_config, n_frames=3)
    with pytest.raises(DomainError):
        cfg_with(tiny_config, alpha=-1.0)
    with pytest.raises(DomainError):
        cfg_with(tiny_config, mode="probabilistic", heads=["scalar", "cloud_map"])
    assert M.ModelConfig.from_dict(tiny_config.to_dict()) == tiny_config


def perfect_outputs(batch, cfg):
    hz, bsz = cfg.horizons, len(batch)
    ci = np.moveaxis(batch.target_maps, 1, 0)[:, :, None]
    ghi = batch.target_ghi.T[:, :, None]
    log_probs = np.full((hz, bsz, cfg.bin_count), -1e4)
    log_probs[np.arange(hz)[:, None], np.arange(bsz)[None, :], batch.target_bins.T] = 0.0
    return M.Outputs(ad.Tensor(ci), ad.Tensor(ghi), ad.Tensor(log_probs))


@pytest.mark.parametrize("mode", ["deterministic", "probabilistic"])
def test_perfect_predictions_have_zero_loss(small_samples, tiny_config, mode):
    cfg = cfg_with(tiny_config, mode=mode)
    batch = M.make_batch(small_samples[:4], cfg)
    _, br = M.loss(perfect_outputs(batch, cfg), batch, cfg)
    # x * (1/scale) against x / scale leaves rounding-level residue
    assert br.total == pytest.approx(0.0, abs=1e-12) and br.image == 0.0


def test_alpha_zero_leaves_only_irradiance_loss(small_samples, tiny_config):
    cfg = cfg_with(tiny_config, alpha=0.0)
    params = M.init_params(cfg, seed=0)
    batch = M.make_batch(small_samples[:4], cfg)
    _, br = M.loss(M.forward_batch(params, batch, cfg), batch, cfg)
    assert br.total == br.irradiance


@settings(max_examples=20, deadline=None)
@given(a=st.floats(0.0, 50.0), gap=st.floats(0.5, 50.0))
def test_loss_increases_with_alpha(small_samples, tiny_config, a, gap):
    params = M.init_params(tiny_config, seed=0)
    batch = M.make_batch(small_samples[:2], tiny_config)
    out = M.forward_batch(params, batch, tiny_config)
    lo = M.loss(out, batch, cfg_with(tiny_config, alpha=a))[1]
    hi = M.loss(out, batch, cfg_with(tiny_config, alpha=a + gap))[1]
    assert hi.image > 0 and hi.total > lo.total


def test_non_finite_values_are_training_faults(small_samples, tiny_config):
    batch = M.make_batch(small_samples[:2], tiny_config)
    out = perfect_outputs(batch, tiny_config)
    out.ghi.data[0, 0, 0] = np.nan
    with pytest.raises(TrainingFault):
        M.loss(out, batch, tiny_config)
    batch.target_ghi[0, 0] = np.inf
    with pytest.raises(TrainingFault):
        M.loss(perfect_outputs(batch, tiny_config), batch, tiny_config)


def test_loss_scale_scales_gradients(small_samples, tiny_config):
    params = M.init_params(tiny_config, seed=3)
    g1, _ = M.gradients(params, small_samples[:3], tiny_config)
    g2, _ = M.gradients(params, small_samples[:3], tiny_config, loss_scale=2.0)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2.0 * g1[k], rtol=1e-6, atol=1e-12)


@pytest.mark.parametrize("mode,alpha,silent", [
    ("deterministic", 5.0, "head_dist"),
    ("probabilistic", 5.0, "head_ghi"),
    ("deterministic", 0.0, "dec"),
])
def test_disabled_paths_get_exact_zero_gradients(small_samples, tiny_config, mode, alpha, silent):
    cfg = cfg_with(tiny_config, mode=mode, alpha=alpha)
    grads, _ = M.gradients(M.init_params(cfg, seed=0), small_samples[:3], cfg)
    silent_keys = [k for k in grads if k.startswith(silent)]
    assert silent_keys
    assert all(not grads[k].any() for k in silent_keys)
    assert any(grads[k].any() for k in grads if not k.startswith(silent))


@pytest.mark.parametrize("off,perturb", [
    ("IC", lambda s: replace(s, past_ghi=s.past_ghi * 0.3 + 50.0)),
    ("SO", lambda s: replace(s, sat_frames=tuple(Grid2D(1.0 - g.values, g.mask) for g in s.sat_frames))),
    ("SI", lambda s: replace(s, sky_frames=tuple(Grid2D(0.5 * g.values, g.mask) for g in s.sky_frames))),
])
def test_disabled_inputs_do_not_influence_forecasts(small_samples, tiny_config, off, perturb):
    cfg = cfg_with(tiny_config, inputs=[i for i in M.INPUTS if i != off])
    params = M.init_params(cfg, seed=4)
    samples = small_samples[10:14]
    base = M.forward(params, samples, cfg)
    assert same_forecasts(base, M.forward(params, [perturb(s) for s in samples], cfg))


def test_enabled_inputs_do_influence_forecasts(small_samples, tiny_config):
    params = M.init_params(tiny_config, seed=4)
    s = small_samples[10]
    moved = replace(s, past_ghi=s.past_ghi * 0.3 + 50.0)
    assert not same_forecasts([M.forward(params, s, tiny_config)], [M.forward(params, moved, tiny_config)])


def test_training_memorises_a_small_set(small_samples, tiny_config):
    cfg = cfg_with(tiny_config, alpha=0.0)
    store, log = M.train(M.init_params(cfg, seed=0), small_samples[:50], small_samples[:10], cfg,
                         M.Schedule(epochs=60, batch_size=10, learning_rate=1e-2))
    train_loss = [r["loss_total"] for r in log if r["split"] == "train" and r["horizon_s"] == 600]
    assert len(train_loss) == 60
    assert train_loss[0] / train_loss[-1] >= 10.0


def test_training_is_deterministic(small_samples, tiny_config, tmp_path):
    schedule = M.Schedule(epochs=2, batch_size=8)
    runs = [M.train(M.init_params(tiny_config, seed=0), small_samples[:24], small_samples[24:32],
                    tiny_config, schedule) for _ in range(2)]
    paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for (_, log), path in zip(runs, paths):
        M.write_log_csv(path, log)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert all(np.array_equal(runs[0][0].params[k], runs[1][0].params[k]) for k in runs[0][0].params)


def test_divergence_is_a_training_fault(small_samples, tiny_config):
    schedule = M.Schedule(epochs=3, batch_size=10, learning_rate=1e4, clip_norm=0)
    with pytest.raises(TrainingFault):
        M.train(M.init_params(tiny_config, seed=0), small_samples[:20], small_samples[:10], tiny_config, schedule)


def test_training_needs_data(small_samples, tiny_config):
    with pytest.raises(DomainError):
        M.train(M.init_params(tiny_config, seed=0), [], small_samples[:2], tiny_config)


def test_checkpoint_round_trip(small_samples, tiny_config, tmp_path):
    store, _ = M.train(M.init_params(tiny_config, seed=0), small_samples[:16], small_samples[16:24],
                       tiny_config, M.Schedule(epochs=2, batch_size=8))
    path = tmp_path / "model.ockp"
    M.save_checkpoint(store, path)
    back = M.load_checkpoint(path)
    assert back.config == store.config and back.best_epoch == store.best_epoch
    assert list(back.params) == list(store.params)
    for k, v in store.params.items():
        assert back.params[k].tobytes() == v.tobytes()
    for e, snap in store.snapshots.items():
        assert all(back.snapshots[e][k].tobytes() == snap[k].tobytes() for k in snap)
    assert same_forecasts(M.predict(store, small_samples[:5]), M.predict(back, small_samples[:5]))


def test_corrupt_checkpoints_are_data_errors(tmp_path):
    bad = tmp_path / "bad.ockp"
    bad.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(DataError):
        M.load_checkpoint(bad)
    bad.write_bytes(b"OC")
    with pytest.raises(DataError):
        M.load_checkpoint(bad)


def test_truncated_checkpoint(small_samples, tiny_config, tmp_path):
    store = M.ParameterStore(tiny_config, M.init_params(tiny_config, seed=0))
    path = tmp_path / "m.ockp"
    store.save(path)
    data = path.read_bytes()
    path.write_bytes(data[:-100])
    with pytest.raises(DataError):
        M.ParameterStore.load(path)


def test_parameter_count_is_reported(tiny_config):
    params = M.init_params(tiny_config, seed=0)
    assert M.count_parameters(params) == sum(int(np.prod(s)) for s in M.parameter_shapes(tiny_config).values())
    assert all(v.dtype == np.float32 for v in params.values())
