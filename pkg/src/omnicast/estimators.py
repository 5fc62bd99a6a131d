"""scikit-learn style wrappers around the forecasting pieces.

Transformers take a sequence of :class:`~omnicast.grid.Grid2D` frames plus
their timestamps; regressors take a sequence of assembled samples and
return ``(n_samples, n_horizons)`` GHI arrays. All of them support
``get_params`` / ``set_params`` and therefore ``sklearn.base.clone``.
"""
from __future__ import annotations

from dataclasses import fields
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import model as M
from .baselines import cmv_advect
from .dataset import Sample, utc_date
from .errors import DomainError
from .grid import Grid2D
from .imaging import FisheyeCalibration
from .metrics import forecast_skill, rmse
from .pipeline import (CloudIndexer, PreprocessConfig, apply_sat_variant, process_sky, shading_pixel,
                       spm_forecasts)
from .simulator import SatelliteFraming


# -- validation helpers ----------------------------------------------------------

def check_frames(frames, timestamps=None):
    """Validate a frame sequence (and matching, increasing timestamps)."""
    if isinstance(frames, Grid2D):
        frames = [frames]
    frames = list(frames)
    if not frames:
        raise DomainError("expected at least one frame")
    for f in frames:
        if not isinstance(f, Grid2D):
            raise DomainError(f"expected Grid2D frames, got {type(f).__name__}")
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise DomainError("frames differ in size")
    if timestamps is None:
        return frames, None
    ts = np.asarray(timestamps, dtype=np.int64).ravel()
    if ts.size != len(frames):
        raise DomainError(f"{len(frames)} frames but {ts.size} timestamps")
    if np.any(np.diff(ts) <= 0):
        raise DomainError("timestamps must be strictly increasing")
    return frames, ts


def check_samples(samples, min_samples: int = 1):
    """Validate a sample sequence; all samples must share their horizons."""
    if isinstance(samples, Sample):
        samples = [samples]
    samples = list(samples)
    if len(samples) < min_samples:
        raise DomainError(f"expected at least {min_samples} samples, got {len(samples)}")
    for s in samples:
        if not isinstance(s, Sample):
            raise DomainError(f"expected Sample objects, got {type(s).__name__}")
    horizons = samples[0].horizons
    if any(s.horizons != horizons for s in samples):
        raise DomainError("samples carry different horizon sets")
    return samples


def check_is_fitted(est, attribute: str) -> None:
    if getattr(est, attribute, None) is None:
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


# -- transformers -------------------------------------------------------------

class CloudIndexTransformer(TransformerMixin, BaseEstimator):
    """Satellite reflectance frames to cloud-index maps.

    ``fit`` seeds the rolling albedo minimum (typically with clear warm-up
    days); ``transform`` keeps updating it, so frames must arrive in time
    order across calls.
    """

    def __init__(self, resolution: int = 128, variant: str = "raw", history_days: int = 10):
        self.resolution = resolution
        self.variant = variant
        self.history_days = history_days

    def _config(self):
        return PreprocessConfig(resolution=self.resolution, sat_variant=self.variant,
                                history_days=self.history_days)

    def fit(self, frames, timestamps):
        frames, ts = check_frames(frames, timestamps)
        self.indexer_ = CloudIndexer(self._config())
        for f, t in zip(frames, ts):
            self.indexer_.observe(f, int(t))
        return self

    def transform(self, frames, timestamps):
        check_is_fitted(self, "indexer_")
        frames, ts = check_frames(frames, timestamps)
        return [self.indexer_(f, int(t)) for f, t in zip(frames, ts)]

    def fit_transform(self, frames, timestamps=None, **_):
        frames, ts = check_frames(frames, timestamps)
        self.indexer_ = CloudIndexer(self._config())
        return [self.indexer_(f, int(t)) for f, t in zip(frames, ts)]


class SkyImageTransformer(TransformerMixin, BaseEstimator):
    """Fisheye sky frames to unwarped (optionally sun-centred SPIN) frames."""

    def __init__(self, calibration: Optional[FisheyeCalibration] = None, site=(48.713, 2.208),
                 resolution: int = 128, variant: str = "raw", view_zenith_deg: float = 70.0):
        self.calibration = calibration
        self.site = site
        self.resolution = resolution
        self.variant = variant
        self.view_zenith_deg = view_zenith_deg

    def fit(self, frames=None, timestamps=None):
        if self.calibration is None:
            raise DomainError("a fisheye calibration is required")
        self.config_ = PreprocessConfig(resolution=self.resolution, sky_variant=self.variant,
                                        view_zenith_deg=self.view_zenith_deg)
        return self

    def transform(self, frames, timestamps):
        check_is_fitted(self, "config_")
        frames, ts = check_frames(frames, timestamps)
        return [process_sky(f, int(t), self.calibration, self.site, self.config_) for f, t in zip(frames, ts)]


class SatelliteVariantTransformer(TransformerMixin, BaseEstimator):
    """Close-up and/or site-centred SPIN view of cloud-index maps. Stateless."""

    def __init__(self, variant: str = "raw"):
        self.variant = variant

    def fit(self, frames=None, y=None):
        PreprocessConfig(sat_variant=self.variant)
        return self

    def transform(self, frames):
        frames, _ = check_frames(frames)
        return [apply_sat_variant(f, self.variant) for f in frames]


# -- regressors -------------------------------------------------------------

class _SampleRegressor(RegressorMixin, BaseEstimator):
    def fit(self, samples, y=None):
        samples = check_samples(samples)
        self.n_horizons_ = len(samples[0].horizons)
        return self

    def score(self, samples, y=None):
        """Mean forecast skill (percent RMSE improvement) over smart persistence."""
        samples = check_samples(samples)
        pred = self.predict(samples)
        target = np.stack([s.target_ghi for s in samples])
        base = spm_forecasts(samples)
        return float(np.mean([forecast_skill(rmse(pred[:, k], target[:, k]), rmse(base[:, k], target[:, k]))
                              for k in range(target.shape[1])]))


class SmartPersistenceRegressor(_SampleRegressor):
    """Scale the current GHI by the clear-sky ratio over each horizon."""

    def predict(self, samples):
        return spm_forecasts(check_samples(samples))


class CMVRegressor(_SampleRegressor):
    """Cloud-motion-vector advection of the latest cloud-index map.

    The site pixel is the sun-ray crossing of the cloud layer, which needs
    the satellite framing; without ``sat_extent_deg`` the map centre is used.
    """

    def __init__(self, block: int = 8, search: int = 4, attenuation: float = 0.75,
                 sat_extent_deg: Optional[float] = 2.2, cloud_height_m: float = 2000.0):
        self.block = block
        self.search = search
        self.attenuation = attenuation
        self.sat_extent_deg = sat_extent_deg
        self.cloud_height_m = cloud_height_m

    def predict(self, samples):
        samples = check_samples(samples)
        out = np.zeros((len(samples), len(samples[0].horizons)))
        for i, s in enumerate(samples):
            prev, curr = s.sat_frames[-2], s.sat_frames[-1]
            dt = s.sat_times[-1] - s.sat_times[-2]
            framing = None
            if self.sat_extent_deg is not None:
                framing = SatelliteFraming(tuple(s.site), self.sat_extent_deg, curr.width)
            for k in range(len(s.horizons)):
                px = None if framing is None else shading_pixel(s.site, s.target_times[k],
                                                                 self.cloud_height_m, framing)
                out[i, k] = cmv_advect(prev, curr, dt, s.target_times[k] - s.sat_times[-1], self.block,
                                       self.search, ghi_clear=s.target_clear[k], site=px,
                                       attenuation=self.attenuation).ghi_hat
        return out


_MODEL_FIELDS = tuple(f.name for f in fields(M.ModelConfig))
_SCHEDULE_FIELDS = ("epochs", "batch_size", "learning_rate", "optimizer", "clip_norm")


class HybridForecaster(_SampleRegressor):
    """The multi-encoder recurrent forecaster as an estimator.

    ``fit(train, val)`` trains with per-horizon best-epoch selection on the
    validation samples; without ``val`` the last fifth of the training days
    is held out.
    """

    def __init__(self, input_resolution=128, encoder_widths=(8, 16, 32), latent_width=64,
                 inputs=("SI", "SO", "IC"), heads=("cloud_map", "scalar", "distribution"),
                 mode="deterministic", alpha=5.0, image_loss="MAE", bin_lo=0.0, bin_hi=1400.0,
                 bin_count=100, epochs=10, batch_size=16, learning_rate=2e-3, optimizer="adam",
                 clip_norm=5.0, seed=0):
        self.input_resolution = input_resolution
        self.encoder_widths = encoder_widths
        self.latent_width = latent_width
        self.inputs = inputs
        self.heads = heads
        self.mode = mode
        self.alpha = alpha
        self.image_loss = image_loss
        self.bin_lo = bin_lo
        self.bin_hi = bin_hi
        self.bin_count = bin_count
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.clip_norm = clip_norm
        self.seed = seed

    def model_config(self, n_horizons: int = 6) -> M.ModelConfig:
        params = self.get_params()
        kw = {k: params[k] for k in _MODEL_FIELDS if k in params}
        return M.ModelConfig(horizons=n_horizons, **kw)

    def fit(self, samples, val_samples=None):
        samples = check_samples(samples, min_samples=2)
        if val_samples is None:
            days = sorted({utc_date(s.t) for s in samples})
            if len(days) < 2:
                raise DomainError("need samples from at least two days to hold out validation")
            cut = days[-max(1, len(days) // 5)]
            val_samples = [s for s in samples if utc_date(s.t) >= cut]
            samples = [s for s in samples if utc_date(s.t) < cut]
        val_samples = check_samples(val_samples)
        cfg = self.model_config(len(samples[0].horizons))
        schedule = M.Schedule(seed=self.seed, **{k: getattr(self, k) for k in _SCHEDULE_FIELDS})
        self.store_, self.log_ = M.train(M.init_params(cfg), samples, val_samples, cfg, schedule)
        self.n_horizons_ = cfg.horizons
        return self

    def forecast(self, samples):
        check_is_fitted(self, "store_")
        return M.predict(self.store_, check_samples(samples))

    def predict(self, samples):
        sets = self.forecast(samples)
        ghi = np.stack([f.ghi_hat for f in sets])
        probs = np.stack([f.probs for f in sets])
        return M.point_forecast(ghi, probs, self.store_.config)

    def predict_proba(self, samples):
        """Bin probabilities shaped (n_samples, n_horizons, bin_count)."""
        return np.stack([f.probs for f in self.forecast(samples)])

    def predict_maps(self, samples):
        return np.stack([f.ci_maps for f in self.forecast(samples)])

    def save(self, path) -> None:
        check_is_fitted(self, "store_")
        M.save_checkpoint(self.store_, path)

    @classmethod
    def load(cls, path) -> "HybridForecaster":
        store = M.load_checkpoint(path)
        cfg = store.config
        schedule = store.meta.get("schedule", {})
        est = cls(**{k: getattr(cfg, k) for k in _MODEL_FIELDS
                     if k in cls._get_param_names()},
                  **{k: schedule[k] for k in _SCHEDULE_FIELDS if k in schedule})
        est.store_ = store
        est.n_horizons_ = cfg.horizons
        return est
