"""Multi-encoder recurrent forecaster of future cloud-index maps and irradiance.

Architecture (all sizes from :class:`ModelConfig`)::

    sky frames --> spatial encoder (strided conv2d x3) --+
                                                         +--> concat --> temporal encoder (conv3d x2)
    cloud maps --> spatial encoder (strided conv2d x3) --+                     |
                                                                         latent map
    latent --> conv-GRU, iterated once per horizon --> states z_1..z_6
    z_k --> transposed-conv decoder --> sigmoid            (cloud-index map)
    z_k --> pooled features --> linear --> softplus        (GHI)
    z_k --> pooled features --> linear --> softmax         (100-bin GHI distribution)

The pooled features carry the clear-sky GHI at the target time both
directly and multiplied into the pooled state, so the linear heads can
express clear-sky-index times clear-sky irradiance.
"""
from __future__ import annotations

import csv
import json
import struct
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .baselines import smart_persistence_series
from .errors import DataError, DomainError, TrainingFault
from .grid import Grid2D
from .metrics import BinnedDistribution, forecast_skill, rmse

HEADS = ("cloud_map", "scalar", "distribution")
INPUTS = ("SI", "SO", "IC")
MODES = ("deterministic", "probabilistic")
IMAGE_LOSSES = ("MAE", "MSE")
DIVERGENCE_LIMIT = 1e6
INITIAL_GHI_FRACTION = 0.3


@dataclass
class ModelConfig:
    input_resolution: int = 128
    n_frames: int = 5
    sky_channels: int = 1
    sat_channels: int = 1
    encoder_widths: Tuple[int, ...] = (8, 16, 32)
    latent_width: int = 64
    horizons: int = 6
    bin_count: int = 100
    bin_lo: float = 0.0
    bin_hi: float = 1400.0
    heads: Tuple[str, ...] = HEADS
    inputs: Tuple[str, ...] = INPUTS
    mode: str = "deterministic"
    alpha: float = 5.0
    image_loss: str = "MAE"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        self.heads = tuple(self.heads)
        self.inputs = tuple(self.inputs)
        self.validate()

    def validate(self) -> None:
        if not ({"SI", "SO"} & set(self.inputs)):
            raise DomainError("at least one of the SI / SO image inputs must be enabled")
        unknown = set(self.inputs) - set(INPUTS)
        if unknown:
            raise DomainError(f"unknown inputs {sorted(unknown)}")
        unknown = set(self.heads) - set(HEADS)
        if unknown:
            raise DomainError(f"unknown heads {sorted(unknown)}")
        if self.mode not in MODES:
            raise DomainError(f"mode must be one of {MODES}")
        if self.mode == "deterministic" and "scalar" not in self.heads:
            raise DomainError("deterministic mode needs the scalar head")
        if self.mode == "probabilistic" and "distribution" not in self.heads:
            raise DomainError("probabilistic mode needs the distribution head")
        if self.image_loss not in IMAGE_LOSSES:
            raise DomainError(f"image_loss must be one of {IMAGE_LOSSES}")
        if not self.alpha >= 0:
            raise DomainError("alpha must be >= 0")
        if len(self.encoder_widths) < 1:
            raise DomainError("need at least one encoder stage")
        if self.input_resolution % (2 ** len(self.encoder_widths)):
            raise DomainError("input_resolution must be divisible by 2**stages")
        if self.n_frames < 5:
            raise DomainError("the temporal encoder needs at least 5 frames")
        if self.horizons < 1 or self.bin_count < 2 or not self.bin_hi > self.bin_lo:
            raise DomainError("invalid horizon / bin settings")

    @property
    def ghi_scale(self) -> float:
        return float(self.bin_hi - self.bin_lo) if self.bin_lo == 0 else float(self.bin_hi)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["heads"] = list(self.heads)
        d["inputs"] = list(self.inputs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ForecastSet:
    """Per-horizon outputs of the forecaster for one sample."""

    horizons: Tuple[int, ...]
    ci_maps: np.ndarray  # (H, rows, cols) in [0, 1]
    ghi_hat: np.ndarray  # (H,) W/m2
    probs: np.ndarray  # (H, bins)
    bin_lo: float
    bin_hi: float

    def distribution(self, k: int) -> BinnedDistribution:
        return BinnedDistribution(self.bin_lo, self.bin_hi, self.probs[k])

    def ci_map(self, k: int) -> Grid2D:
        return Grid2D(self.ci_maps[k], value_range=(0.0, 1.0))

    def __len__(self):
        return len(self.ghi_hat)


# -- parameters --------------------------------------------------------------

def _in_channels(cfg: ModelConfig):
    ic = "IC" in cfg.inputs
    sky = cfg.sky_channels + (1 if ic and "SI" in cfg.inputs else 0)
    sat = cfg.sat_channels + (1 if ic and "SI" not in cfg.inputs else 0)
    return sky, sat


def parameter_shapes(cfg: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    sky_in, sat_in = _in_channels(cfg)
    widths = cfg.encoder_widths
    for branch, cin, flag in (("sky", sky_in, "SI"), ("sat", sat_in, "SO")):
        if flag not in cfg.inputs:
            continue
        prev = cin
        for i, w in enumerate(widths):
            shapes[f"{branch}_enc.{i}.w"] = (w, prev, 3, 3)
            shapes[f"{branch}_enc.{i}.b"] = (w,)
            prev = w
    n_branches = int("SI" in cfg.inputs) + int("SO" in cfg.inputs)
    lat = cfg.latent_width
    shapes["temporal.0.w"] = (lat, widths[-1] * n_branches, 3, 3, 3)
    shapes["temporal.0.b"] = (lat,)
    shapes["temporal.1.w"] = (lat, lat, 3, 3, 3)
    shapes["temporal.1.b"] = (lat,)
    for gate in ("z", "r", "n"):
        shapes[f"gru.{gate}.w"] = (lat, 2 * lat, 3, 3)
        shapes[f"gru.{gate}.b"] = (lat,)
    dec = list(reversed(widths[:-1])) + [1]
    prev = lat
    for i, w in enumerate(dec):
        shapes[f"dec.{i}.w"] = (prev, w, 4, 4)
        shapes[f"dec.{i}.b"] = (w,)
        prev = w
    feat = 2 * lat + 1
    shapes["head_ghi.w"] = (feat, 1)
    shapes["head_ghi.b"] = (1,)
    shapes["head_dist.w"] = (feat, cfg.bin_count)
    shapes["head_dist.b"] = (cfg.bin_count,)
    return shapes


def init_params(cfg: ModelConfig, seed: Optional[int] = None) -> "OrderedDict[str, np.ndarray]":
    """He-style uniform initialisation, seeded; biases start at zero."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=cfg.np_dtype)
            if name == "head_ghi.b":
                # start near 30 % of the scale rather than softplus(0) = 69 %
                params[name][:] = np.log(np.expm1(INITIAL_GHI_FRACTION))
            continue
        if name.startswith("dec."):
            fan_in = shape[0] * int(np.prod(shape[2:])) // 4
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 2 else shape[0]
        bound = np.sqrt(6.0 / max(fan_in, 1))
        if name.startswith("head_"):
            bound = np.sqrt(1.0 / max(fan_in, 1))
        params[name] = rng.uniform(-bound, bound, size=shape).astype(cfg.np_dtype)
    return params


def count_parameters(params: Dict[str, np.ndarray]) -> int:
    return int(sum(p.size for p in params.values()))


# -- batches -----------------------------------------------------------------

@dataclass
class Batch:
    sky: Optional[np.ndarray]  # (B, T, C, H, W)
    sat: Optional[np.ndarray]
    ic: np.ndarray  # (B, T)
    clear: np.ndarray  # (B, horizons) W/m2 at target times
    target_ghi: np.ndarray  # (B, horizons)
    target_bins: np.ndarray  # (B, horizons)
    target_maps: np.ndarray  # (B, horizons, H, W)
    target_valid: np.ndarray  # (B, horizons, H, W)
    ghi_t: np.ndarray
    clear_t: np.ndarray

    def __len__(self):
        return len(self.ic)

    def subset(self, idx) -> "Batch":
        return Batch(*(None if v is None else v[idx] for v in (
            self.sky, self.sat, self.ic, self.clear, self.target_ghi, self.target_bins,
            self.target_maps, self.target_valid, self.ghi_t, self.clear_t)))


def make_batch(samples: Sequence, cfg: ModelConfig) -> Batch:
    """Stack samples into arrays, checking them against the enabled modalities."""
    if len(samples) == 0:
        raise DomainError("empty sample list")
    dt = cfg.np_dtype
    res = cfg.input_resolution

    def frames(get, channels, label):
        arr = np.stack([get(s) for s in samples]).astype(dt)
        if arr.shape[1] != cfg.n_frames or arr.shape[2] != channels or arr.shape[3:] != (res, res):
            raise DomainError(
                f"{label} frames shaped {arr.shape[1:]} but config expects "
                f"({cfg.n_frames}, {channels}, {res}, {res})")
        return arr

    sky = frames(lambda s: s.sky_array(), cfg.sky_channels, "sky") if "SI" in cfg.inputs else None
    sat = frames(lambda s: s.sat_array(), cfg.sat_channels, "satellite") if "SO" in cfg.inputs else None
    if "IC" in cfg.inputs:
        ic = np.stack([s.ic_values for s in samples]).astype(dt)
    else:
        ic = np.zeros((len(samples), cfg.n_frames), dtype=dt)
    maps, valid = zip(*(s.target_array() for s in samples))
    maps = np.stack(maps).astype(dt)
    if maps.shape[1] != cfg.horizons or maps.shape[2:] != (res, res):
        raise DomainError(f"target maps shaped {maps.shape[1:]} do not match the config")
    return Batch(
        sky=sky,
        sat=sat,
        ic=ic,
        clear=np.stack([s.target_clear for s in samples]).astype(dt),
        target_ghi=np.stack([s.target_ghi for s in samples]).astype(dt),
        target_bins=np.stack([s.target_bins for s in samples]).astype(np.int64),
        target_maps=maps,
        target_valid=np.stack(valid),
        ghi_t=np.array([s.ghi_t for s in samples], dtype=float),
        clear_t=np.array([s.clear_t for s in samples], dtype=float),
    )


# -- forward -----------------------------------------------------------------

@dataclass
class Outputs:
    ci: ad.Tensor  # (horizons, B, 1, H, W)
    ghi: ad.Tensor  # (horizons, B, 1)
    log_probs: ad.Tensor  # (horizons, B, bins)


def _encode(p, branch: str, frames: np.ndarray, ic: Optional[np.ndarray], cfg: ModelConfig) -> ad.Tensor:
    b, t, c, h, w = frames.shape
    x = frames.reshape(b * t, c, h, w)
    if ic is not None:
        planes = np.broadcast_to(ic.reshape(b * t, 1, 1, 1), (b * t, 1, h, w)).astype(frames.dtype)
        x = np.concatenate([x, planes], axis=1)
    out = ad.Tensor(x)
    for i in range(len(cfg.encoder_widths)):
        out = ad.silu(ad.conv2d(out, p[f"{branch}_enc.{i}.w"], p[f"{branch}_enc.{i}.b"], stride=2, padding=1))
    _, f, hh, ww = out.shape
    out = ad.reshape(out, (b, t, f, hh, ww))
    return ad.transpose(out, (0, 2, 1, 3, 4))


def _gru_step(p, x: ad.Tensor, h: ad.Tensor) -> ad.Tensor:
    xh = ad.concat([x, h], axis=1)
    z = ad.sigmoid(ad.conv2d(xh, p["gru.z.w"], p["gru.z.b"], padding=1))
    r = ad.sigmoid(ad.conv2d(xh, p["gru.r.w"], p["gru.r.b"], padding=1))
    xrh = ad.concat([x, ad.mul(r, h)], axis=1)
    n = ad.tanh(ad.conv2d(xrh, p["gru.n.w"], p["gru.n.b"], padding=1))
    return ad.add(n, ad.mul(z, ad.sub(h, n)))


def forward_batch(params, batch: Batch, cfg: ModelConfig) -> Outputs:
    """Differentiable forward pass; ``params`` maps names to Tensors or arrays."""
    p = {k: ad.as_tensor(v) for k, v in params.items()}
    ic_on = "IC" in cfg.inputs
    branches = []
    if "SI" in cfg.inputs:
        branches.append(_encode(p, "sky", batch.sky, batch.ic if ic_on else None, cfg))
    if "SO" in cfg.inputs:
        sat_ic = batch.ic if (ic_on and "SI" not in cfg.inputs) else None
        branches.append(_encode(p, "sat", batch.sat, sat_ic, cfg))
    feats = branches[0] if len(branches) == 1 else ad.concat(branches, axis=1)

    x = ad.silu(ad.conv3d(feats, p["temporal.0.w"], p["temporal.0.b"], padding=(0, 1, 1)))
    x = ad.silu(ad.conv3d(x, p["temporal.1.w"], p["temporal.1.b"], padding=(0, 1, 1)))
    x = ad.mean(x, axis=2)  # collapse what remains of the time axis
    bsz, lat, hh, ww = x.shape

    states = []
    h = x
    for _ in range(cfg.horizons):
        h = _gru_step(p, x, h)
        states.append(h)
    z = ad.concat(states, axis=0)  # (horizons*B, L, h, w)

    d = z
    n_dec = len(cfg.encoder_widths)
    for i in range(n_dec):
        d = ad.conv_transpose2d(d, p[f"dec.{i}.w"], p[f"dec.{i}.b"], stride=2, padding=1)
        if i < n_dec - 1:
            d = ad.silu(d)
    ci = ad.sigmoid(d)
    ci = ad.reshape(ci, (cfg.horizons, bsz) + ci.shape[1:])

    pooled = ad.mean(z, axis=(2, 3))  # (horizons*B, L)
    clear = (batch.clear.T.reshape(-1, 1) / cfg.ghi_scale).astype(pooled.data.dtype)
    features = ad.concat([pooled, ad.mul(pooled, clear), ad.Tensor(clear)], axis=1)
    ghi = ad.mul(ad.softplus(ad.linear(features, p["head_ghi.w"], p["head_ghi.b"])), cfg.ghi_scale)
    ghi = ad.reshape(ghi, (cfg.horizons, bsz, 1))
    logp = ad.log_softmax(ad.linear(features, p["head_dist.w"], p["head_dist.b"]), axis=-1)
    logp = ad.reshape(logp, (cfg.horizons, bsz, cfg.bin_count))
    return Outputs(ci, ghi, logp)


def _to_forecasts(out: Outputs, cfg: ModelConfig, horizons_s: Sequence[int]) -> List[ForecastSet]:
    ci = np.moveaxis(out.ci.data[:, :, 0], 0, 1)
    ghi = np.moveaxis(out.ghi.data[:, :, 0], 0, 1)
    probs = np.exp(np.moveaxis(out.log_probs.data, 0, 1).astype(np.float64))
    probs /= probs.sum(axis=-1, keepdims=True)
    return [ForecastSet(tuple(horizons_s), ci[i], ghi[i].astype(np.float64), probs[i], cfg.bin_lo, cfg.bin_hi)
            for i in range(ci.shape[0])]


def _horizons_of(samples, cfg) -> Tuple[int, ...]:
    hs = getattr(samples[0], "horizons", None)
    return tuple(hs) if hs is not None else tuple(600 * (k + 1) for k in range(cfg.horizons))


def forward(params, sample_or_samples, cfg: ModelConfig):
    """ForecastSet(s) for one sample or a list; the graph is recorded."""
    single = not isinstance(sample_or_samples, (list, tuple))
    samples = [sample_or_samples] if single else list(sample_or_samples)
    out = forward_batch(params, make_batch(samples, cfg), cfg)
    sets = _to_forecasts(out, cfg, _horizons_of(samples, cfg))
    return sets[0] if single else sets


# -- loss and gradients --------------------------------------------------------

@dataclass
class LossBreakdown:
    total: float
    irradiance: float
    image: float


def loss_terms(out: Outputs, batch: Batch, cfg: ModelConfig) -> Tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    """(total, irradiance, image) loss tensors averaged over horizons."""
    for arr in (batch.target_ghi, batch.target_maps):
        if not np.all(np.isfinite(arr)):
            raise TrainingFault("non-finite targets")
    if not (np.all(np.isfinite(out.ci.data)) and np.all(np.isfinite(out.ghi.data))
            and np.all(np.isfinite(out.log_probs.data))):
        raise TrainingFault("non-finite model outputs")

    if cfg.mode == "deterministic":
        target = (batch.target_ghi.T[:, :, None] / cfg.ghi_scale).astype(out.ghi.data.dtype)
        err = ad.sub(ad.mul(out.ghi, 1.0 / cfg.ghi_scale), target)
        l_irr = ad.mean(ad.square(err))
    else:
        onehot = np.zeros(out.log_probs.shape, dtype=out.log_probs.data.dtype)
        hz, bsz = batch.target_bins.T.shape
        onehot[np.arange(hz)[:, None], np.arange(bsz)[None, :], batch.target_bins.T] = 1.0
        l_irr = ad.mul(ad.sum_(ad.mul(out.log_probs, onehot)), -1.0 / (hz * bsz))

    if "cloud_map" in cfg.heads and cfg.alpha > 0:
        target = np.moveaxis(batch.target_maps, 1, 0)[:, :, None].astype(out.ci.data.dtype)
        valid = np.moveaxis(batch.target_valid, 1, 0)[:, :, None].astype(out.ci.data.dtype)
        diff = ad.sub(out.ci, target)
        per_pixel = ad.absolute(diff) if cfg.image_loss == "MAE" else ad.square(diff)
        # uniform average over horizons of the per-horizon mean over valid pixels
        per_h = ad.sum_(ad.mul(per_pixel, valid), axis=(1, 2, 3, 4))
        counts = np.maximum(valid.sum(axis=(1, 2, 3, 4)), 1.0)
        l_img = ad.mean(ad.mul(per_h, (1.0 / counts).astype(per_h.data.dtype)))
    else:
        l_img = ad.Tensor(np.zeros((), dtype=out.ci.data.dtype))
    total = ad.add(l_irr, ad.mul(l_img, cfg.alpha)) if cfg.alpha > 0 else ad.add(l_irr, ad.mul(l_img, 0.0))
    return total, l_irr, l_img


def loss(out: Outputs, batch: Batch, cfg: ModelConfig) -> Tuple[ad.Tensor, LossBreakdown]:
    total, l_irr, l_img = loss_terms(out, batch, cfg)
    return total, LossBreakdown(float(total.data), float(l_irr.data), float(l_img.data))


def gradients(params, samples_or_batch, cfg: ModelConfig, loss_scale: float = 1.0):
    """Exact gradients of ``loss_scale * total loss`` for every parameter.

    Returns ``(grads, breakdown)``; parameters off every active path get
    exact zeros.
    """
    batch = samples_or_batch if isinstance(samples_or_batch, Batch) else make_batch(
        samples_or_batch if isinstance(samples_or_batch, (list, tuple)) else [samples_or_batch], cfg)
    leaves = {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    out = forward_batch(leaves, batch, cfg)
    total, breakdown = loss(out, batch, cfg)
    if not np.isfinite(breakdown.total):
        raise TrainingFault("loss is not finite")
    scaled = ad.mul(total, loss_scale) if loss_scale != 1.0 else total
    scaled.backward()
    grads = OrderedDict()
    for k, leaf in leaves.items():
        if leaf.grad is None:
            grads[k] = np.zeros_like(params[k])
        elif leaf.grad.shape != params[k].shape:
            raise RuntimeError(f"gradient for {k} has shape {leaf.grad.shape}, expected {params[k].shape}")
        else:
            grads[k] = leaf.grad
    return grads, breakdown


# -- optimisation ------------------------------------------------------------

@dataclass
class Schedule:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 2e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0
    select_best: bool = True


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, state=None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        state = state or {}
        self.step_count = int(state.get("step", 0))
        self.m = {k: np.asarray(state["m"][k]) if "m" in state else np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.asarray(state["v"][k]) if "v" in state else np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k in params:
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] = (params[k] - update).astype(params[k].dtype)

    def state(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}


class MomentumSGD:
    def __init__(self, params, lr, beta1=0.9, state=None, **_):
        self.lr, self.beta1 = lr, beta1
        state = state or {}
        self.step_count = int(state.get("step", 0))
        self.m = {k: np.asarray(state["m"][k]) if "m" in state else np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads) -> None:
        self.step_count += 1
        for k in params:
            self.m[k] = self.beta1 * self.m[k] + grads[k]
            params[k] = (params[k] - self.lr * self.m[k]).astype(params[k].dtype)

    def state(self) -> dict:
        return {"step": self.step_count, "m": self.m}


def make_optimizer(params, schedule: Schedule, state=None):
    if schedule.optimizer == "adam":
        return Adam(params, schedule.learning_rate, schedule.beta1, schedule.beta2, schedule.eps, state)
    if schedule.optimizer == "sgd":
        return MomentumSGD(params, schedule.learning_rate, schedule.beta1, state=state)
    raise DomainError(f"unknown optimizer {schedule.optimizer!r}")


def _clip(grads, max_norm: float):
    if not max_norm or max_norm <= 0:
        return grads
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if not np.isfinite(norm):
        raise TrainingFault("non-finite gradient norm")
    if norm > max_norm:
        scale = max_norm / norm
        return {k: (g * scale).astype(g.dtype) for k, g in grads.items()}
    return grads


@dataclass
class ParameterStore:
    """Trained weights plus everything needed to reuse them."""

    config: ModelConfig
    params: "OrderedDict[str, np.ndarray]"
    optimizer_state: dict = field(default_factory=dict)
    snapshots: Dict[int, "OrderedDict[str, np.ndarray]"] = field(default_factory=dict)
    best_epoch: Dict[int, int] = field(default_factory=dict)  # horizon index -> epoch
    meta: dict = field(default_factory=dict)

    def params_for_horizon(self, k: int):
        epoch = self.best_epoch.get(k)
        if epoch is None or epoch not in self.snapshots:
            return self.params
        return self.snapshots[epoch]

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "ParameterStore":
        return load_checkpoint(path)


def _forecast_arrays(params, batch: Batch, cfg: ModelConfig, chunk: int = 64):
    ghi, probs, ci = [], [], []
    with ad.no_grad():
        for lo in range(0, len(batch), chunk):
            out = forward_batch(params, batch.subset(slice(lo, lo + chunk)), cfg)
            ghi.append(out.ghi.data[:, :, 0].T)
            probs.append(np.exp(np.moveaxis(out.log_probs.data, 0, 1).astype(np.float64)))
            ci.append(np.moveaxis(out.ci.data[:, :, 0], 0, 1))
    return np.concatenate(ghi).astype(np.float64), np.concatenate(probs), np.concatenate(ci)


def point_forecast(ghi: np.ndarray, probs: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Scalar GHI used for skill scores: the scalar head, or the distribution mean."""
    if cfg.mode == "deterministic":
        return ghi
    centers = cfg.bin_lo + (np.arange(cfg.bin_count) + 0.5) * (cfg.bin_hi - cfg.bin_lo) / cfg.bin_count
    return probs @ centers


def _spm(batch: Batch) -> np.ndarray:
    return smart_persistence_series(batch.ghi_t[:, None], batch.clear_t[:, None], batch.clear)


LOG_COLUMNS = ("epoch", "split", "horizon_s", "loss_total", "loss_irradiance", "loss_image", "rmse", "fs")


def train(params, train_samples, val_samples, cfg: ModelConfig, schedule: Schedule = Schedule(),
          progress=None) -> Tuple[ParameterStore, List[dict]]:
    """Mini-batch training with per-horizon model selection on validation skill.

    After every epoch each horizon's validation forecast skill (RMSE against
    smart persistence) is computed; the epoch with the best skill for a
    horizon is kept as that horizon's snapshot.
    """
    cfg.validate()
    if len(train_samples) == 0 or len(val_samples) == 0:
        raise DomainError("training and validation streams must be non-empty")
    train_batch = train_samples if isinstance(train_samples, Batch) else make_batch(train_samples, cfg)
    val_batch = val_samples if isinstance(val_samples, Batch) else make_batch(val_samples, cfg)
    horizons_s = tuple(600 * (k + 1) for k in range(cfg.horizons))
    if not isinstance(val_samples, Batch):
        horizons_s = _horizons_of(val_samples, cfg)

    params = OrderedDict((k, np.array(v, dtype=cfg.np_dtype)) for k, v in params.items())
    opt = make_optimizer(params, schedule)
    rng = np.random.default_rng(schedule.seed)
    log: List[dict] = []
    best_fs = {k: -np.inf for k in range(cfg.horizons)}
    best_epoch: Dict[int, int] = {}
    snapshots: Dict[int, "OrderedDict[str, np.ndarray]"] = {}
    val_spm = _spm(val_batch)

    n = len(train_batch)
    for epoch in range(1, schedule.epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(3)
        seen = 0
        sq_err = np.zeros(cfg.horizons)
        for lo in range(0, n, schedule.batch_size):
            idx = np.sort(order[lo:lo + schedule.batch_size])
            mb = train_batch.subset(idx)
            leaves = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
            out = forward_batch(leaves, mb, cfg)
            total, breakdown = loss(out, mb, cfg)
            if not np.isfinite(breakdown.total) or breakdown.total > DIVERGENCE_LIMIT:
                raise TrainingFault(f"training diverged at epoch {epoch}: loss {breakdown.total}")
            total.backward()
            grads = {k: (leaf.grad if leaf.grad is not None else np.zeros_like(params[k])) for k, leaf in leaves.items()}
            opt.step(params, _clip(grads, schedule.clip_norm))
            m = len(idx)
            sums += m * np.array([breakdown.total, breakdown.irradiance, breakdown.image])
            seen += m
            point = point_forecast(out.ghi.data[:, :, 0].T.astype(float),
                                   np.exp(np.moveaxis(out.log_probs.data, 0, 1).astype(float)), cfg)
            sq_err += ((point - mb.target_ghi) ** 2).sum(axis=0)
        mean_losses = sums / seen
        train_rmse = np.sqrt(sq_err / seen)
        for k in range(cfg.horizons):
            log.append(_log_row(epoch, "train", horizons_s[k], mean_losses, train_rmse[k], float("nan")))

        ghi, probs, ci = _forecast_arrays(params, val_batch, cfg)
        val_out = Outputs(ad.Tensor(np.moveaxis(ci, 0, 1)[:, :, None].astype(cfg.np_dtype)),
                          ad.Tensor(ghi.T[:, :, None].astype(cfg.np_dtype)),
                          ad.Tensor(np.log(np.maximum(np.moveaxis(probs, 0, 1), 1e-300)).astype(cfg.np_dtype)))
        _, vb = loss(val_out, val_batch, cfg)
        point = point_forecast(ghi, probs, cfg)
        for k in range(cfg.horizons):
            r_model = rmse(point[:, k], val_batch.target_ghi[:, k])
            r_base = rmse(val_spm[:, k], val_batch.target_ghi[:, k])
            fs = forecast_skill(r_model, r_base) if r_base > 0 else 0.0
            log.append(_log_row(epoch, "val", horizons_s[k], (vb.total, vb.irradiance, vb.image), r_model, fs))
            if fs > best_fs[k]:
                best_fs[k] = fs
                best_epoch[k] = epoch
        if epoch in best_epoch.values():
            snapshots[epoch] = OrderedDict((k, v.copy()) for k, v in params.items())
        snapshots = {e: s for e, s in snapshots.items() if e in best_epoch.values()}
        if progress is not None:
            progress(epoch, log[-2 * cfg.horizons:])

    if not schedule.select_best:
        best_epoch, snapshots = {}, {}
    store = ParameterStore(cfg, params, optimizer_state=opt.state(), snapshots=snapshots,
                           best_epoch=best_epoch, meta={"schedule": asdict(schedule)})
    return store, log


def _log_row(epoch, split, horizon_s, losses, rmse_value, fs) -> dict:
    return {
        "epoch": epoch, "split": split, "horizon_s": int(horizon_s),
        "loss_total": float(losses[0]), "loss_irradiance": float(losses[1]), "loss_image": float(losses[2]),
        "rmse": float(rmse_value), "fs": float(fs),
    }


def write_log_csv(path, log: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in log:
            writer.writerow([row["epoch"], row["split"], row["horizon_s"]] + [
                repr(round(row[c], 8)) for c in LOG_COLUMNS[3:]])


def predict(store_or_params, samples, cfg: Optional[ModelConfig] = None, chunk: int = 64,
            timings: Optional[list] = None) -> List[ForecastSet]:
    """Forecasts without recording the graph, in input order.

    With a :class:`ParameterStore` each horizon uses its selected snapshot.
    """
    single = not isinstance(samples, (list, tuple))
    samples = [samples] if single else list(samples)
    if isinstance(store_or_params, ParameterStore):
        store = store_or_params
        cfg = cfg or store.config
        groups: Dict[int, List[int]] = {}
        for k in range(cfg.horizons):
            groups.setdefault(id(store.params_for_horizon(k)), []).append(k)
        param_sets = {id(store.params_for_horizon(k)): store.params_for_horizon(k) for k in range(cfg.horizons)}
    else:
        if cfg is None:
            raise DomainError("predict needs a config when given raw parameters")
        groups = {0: list(range(cfg.horizons))}
        param_sets = {0: store_or_params}
    horizons_s = _horizons_of(samples, cfg)
    results: List[ForecastSet] = []
    for lo in range(0, len(samples), chunk):
        part = samples[lo:lo + chunk]
        start = time.perf_counter()
        batch = make_batch(part, cfg)
        merged = None
        for key, ks in groups.items():
            with ad.no_grad():
                out = forward_batch(param_sets[key], batch, cfg)
            sets = _to_forecasts(out, cfg, horizons_s)
            if merged is None:
                merged = sets
            else:
                for m, s in zip(merged, sets):
                    m.ci_maps[ks] = s.ci_maps[ks]
                    m.ghi_hat[ks] = s.ghi_hat[ks]
                    m.probs[ks] = s.probs[ks]
        results.extend(merged)
        if timings is not None:
            timings.append((time.perf_counter() - start) / len(part))
    return results[0] if single else results


# -- checkpoints -------------------------------------------------------------

_CKPT_MAGIC = b"OCKP"
_CKPT_VERSION = 1


def save_checkpoint(store: ParameterStore, path) -> None:
    """Header JSON (config, bin range, tensor table) followed by float32 LE tensors."""
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for k, v in store.params.items():
        tensors[f"params/{k}"] = v
    for epoch in sorted(store.snapshots):
        for k, v in store.snapshots[epoch].items():
            tensors[f"snapshot/{epoch}/{k}"] = v
    opt = store.optimizer_state or {}
    for slot in ("m", "v"):
        for k, v in (opt.get(slot) or {}).items():
            tensors[f"optimizer/{slot}/{k}"] = v
    table = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "config": store.config.to_dict(),
        "bin_range": [store.config.bin_lo, store.config.bin_hi],
        "best_epoch": {str(k): v for k, v in sorted(store.best_epoch.items())},
        "optimizer_step": int(opt.get("step", 0)),
        "meta": store.meta,
        "tensors": table,
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<II", _CKPT_VERSION, len(head)) + head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> ParameterStore:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != _CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != _CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[12:12 + hlen])
    except ValueError as exc:
        raise DataError(f"{path}: corrupt checkpoint header") from exc
    base = 12 + hlen
    cfg = ModelConfig.from_dict(header["config"])
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    snapshots: Dict[int, "OrderedDict[str, np.ndarray]"] = {}
    opt: dict = {"step": header.get("optimizer_step", 0)}
    for entry in header["tensors"]:
        if base + entry["offset"] + entry["nbytes"] > len(data):
            raise DataError(f"{path}: truncated tensor {entry['name']}")
        arr = np.frombuffer(data, dtype="<f4", count=int(np.prod(entry["shape"], dtype=np.int64)),
                            offset=base + entry["offset"]).reshape(entry["shape"]).astype(cfg.np_dtype)
        parts = entry["name"].split("/")
        if parts[0] == "params":
            params[parts[1]] = arr
        elif parts[0] == "snapshot":
            snapshots.setdefault(int(parts[1]), OrderedDict())[parts[2]] = arr
        elif parts[0] == "optimizer":
            opt.setdefault(parts[1], {})[parts[2]] = arr
    expected = parameter_shapes(cfg)
    for name, shape in expected.items():
        if name not in params or params[name].shape != shape:
            raise DataError(f"{path}: tensor {name} missing or mis-shaped")
    best = {int(k): int(v) for k, v in header.get("best_epoch", {}).items()}
    return ParameterStore(cfg, params, optimizer_state=opt, snapshots=snapshots, best_epoch=best,
                          meta=header.get("meta", {}))
