"""Experiment configuration files.

One YAML document per experiment. Every section maps onto a dataclass and
unknown keys are rejected, so a typo fails before any work starts::

    seed: 3
    paths: {raw: data/raw, processed: data/proc, run: runs/base}
    simulation: {start_date: "2019-04-01", days: [broken_sky, broken_sky], sat_size: 64, sky_size: 64}
    preprocess: {resolution: 32, sky_variant: raw, sat_variant: raw}
    assembly: {stride: 600}
    split: {kind: days, train: 20, val: 5, test: 5}
    model: {latent_width: 32, alpha: 5.0, inputs: [SI, SO, IC]}
    training: {epochs: 10, batch_size: 16, learning_rate: 0.002, n_inits: 1}
    sweep: {alphas: [0, 1, 5, 20]}
    grid:
      - {name: hybrid, inputs: [SI, SO, IC]}
      - {name: sky_only, inputs: [SI, IC]}

``grid`` cells override ``model`` keys (plus ``sky_variant`` and
``sat_variant``); each cell is trained and evaluated independently.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from datetime import date
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .dataset import AssemblyConfig, SplitSpec
from .errors import ConfigError, DomainError
from .model import ModelConfig, Schedule
from .pipeline import PreprocessConfig
from .simulator import SimulationConfig


@dataclass
class Paths:
    raw: str = "data/raw"
    processed: str = "data/processed"
    run: str = "runs/default"


@dataclass
class SplitConfig:
    """How simulated or recorded days are split.

    ``days``: the first ``train`` days train, the next ``val`` validate, the
    next ``test`` test (chronological). ``final_year``: days before ``year``
    train, even days of ``year`` validate, odd days test. ``dates``: explicit
    ISO date lists.
    """

    kind: str = "days"
    train: Any = 20
    val: Any = 5
    test: Any = 5
    year: int = 2019

    def spec(self, available: List[date]) -> SplitSpec:
        if self.kind == "days":
            days = sorted(available)
            a, b, c = int(self.train), int(self.val), int(self.test)
            return SplitSpec.by_dates(days[:a], days[a:a + b], days[a + b:a + b + c])
        if self.kind == "final_year":
            return SplitSpec.final_year(int(self.year))
        if self.kind == "dates":
            conv = lambda xs: [date.fromisoformat(str(x)) for x in xs]
            return SplitSpec.by_dates(conv(self.train), conv(self.val), conv(self.test))
        raise ConfigError(f"unknown split kind {self.kind!r}")


@dataclass
class TrainingConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 2e-3
    optimizer: str = "adam"
    clip_norm: float = 5.0
    n_inits: int = 1

    def schedule(self, seed: int) -> Schedule:
        return Schedule(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                        optimizer=self.optimizer, clip_norm=self.clip_norm, seed=seed)


@dataclass
class SweepConfig:
    alphas: List[float] = field(default_factory=lambda: [0.0, 1.0, 5.0, 20.0])


GRID_EXTRA_KEYS = ("name", "sky_variant", "sat_variant")


@dataclass
class ExperimentConfig:
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    simulation: Dict[str, Any] = field(default_factory=dict)
    preprocess: Dict[str, Any] = field(default_factory=dict)
    assembly: Dict[str, Any] = field(default_factory=dict)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: Dict[str, Any] = field(default_factory=dict)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    grid: List[Dict[str, Any]] = field(default_factory=list)
    source: Optional[str] = None

    # -- derived, validated objects ------------------------------------------

    def simulation_config(self) -> SimulationConfig:
        return _build(SimulationConfig, {"seed": self.seed, **self.simulation}, "simulation")

    def preprocess_config(self, **override) -> PreprocessConfig:
        return _build(PreprocessConfig, {**self.preprocess, **override}, "preprocess")

    def _assembly_values(self, bin_hi: Optional[float]) -> Dict[str, Any]:
        values = dict(self.assembly)
        if bin_hi is not None and "bin_hi" not in values:
            values["bin_hi"] = bin_hi
        return values

    def assembly_config(self, site, bin_hi: Optional[float] = None) -> AssemblyConfig:
        """Assembly settings; ``bin_hi`` is the data-derived default when the config sets none."""
        return _build(AssemblyConfig, {"site": tuple(site), **self._assembly_values(bin_hi)}, "assembly")

    def model_config(self, bin_hi: Optional[float] = None, **override) -> ModelConfig:
        asm = _build(AssemblyConfig, self._assembly_values(bin_hi), "assembly")
        base = {
            "input_resolution": self.preprocess_config().resolution,
            "bin_lo": asm.bin_lo,
            "bin_hi": asm.bin_hi,
            "bin_count": asm.bins,
            "horizons": len(asm.horizons),
            "seed": self.seed,
        }
        return _build(ModelConfig, {**base, **self.model, **override}, "model")

    def cells(self) -> List[Tuple[str, Dict[str, Any], Dict[str, Any]]]:
        """(name, model overrides, preprocess overrides) for every grid cell."""
        out = []
        for i, cell in enumerate(self.grid):
            cell = dict(cell)
            name = str(cell.pop("name", f"cell{i}"))
            pre = {k: cell.pop(k) for k in ("sky_variant", "sat_variant") if k in cell}
            out.append((name, cell, pre))
        return out

    def validate(self) -> "ExperimentConfig":
        """Build every derived object once so errors surface before side effects."""
        self.simulation_config()
        self.preprocess_config()
        self.assembly_config((0.0, 0.0))
        self.model_config()
        if self.split.kind not in ("days", "final_year", "dates"):
            raise ConfigError(f"unknown split kind {self.split.kind!r}")
        if self.training.epochs < 1 or self.training.batch_size < 1 or self.training.n_inits < 1:
            raise ConfigError("training epochs, batch_size and n_inits must be >= 1")
        if not self.training.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.training.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be adam or sgd")
        names = set()
        for name, model_over, pre_over in self.cells():
            if name in names:
                raise ConfigError(f"duplicate grid cell name {name!r}")
            names.add(name)
            self.model_config(**model_over)
            self.preprocess_config(**pre_over)
        return self


def _build(cls, values: Dict[str, Any], section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")
    try:
        return cls(**values)
    except (DomainError, TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{name} must be a mapping")
    return _build(cls, raw, name)


def from_dict(raw: Dict[str, Any], source: Optional[str] = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at the top level")
    known = {f.name for f in fields(ExperimentConfig)} - {"source"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    for key in ("simulation", "preprocess", "assembly", "model"):
        if raw.get(key) is not None and not isinstance(raw[key], dict):
            raise ConfigError(f"{key} must be a mapping")
    grid = raw.get("grid") or []
    if not isinstance(grid, list) or not all(isinstance(c, dict) for c in grid):
        raise ConfigError("grid must be a list of mappings")
    model_keys = {f.name for f in fields(ModelConfig)}
    for cell in grid:
        bad = set(cell) - model_keys - set(GRID_EXTRA_KEYS)
        if bad:
            raise ConfigError(f"grid cell: unknown keys {sorted(bad)}")
    try:
        seed = int(raw.get("seed", 0))
    except (TypeError, ValueError) as exc:
        raise ConfigError("seed must be an integer") from exc
    cfg = ExperimentConfig(
        seed=seed,
        paths=_section(Paths, raw.get("paths"), "paths"),
        simulation=dict(raw.get("simulation") or {}),
        preprocess=dict(raw.get("preprocess") or {}),
        assembly=dict(raw.get("assembly") or {}),
        split=_section(SplitConfig, raw.get("split"), "split"),
        model=dict(raw.get("model") or {}),
        training=_section(TrainingConfig, raw.get("training"), "training"),
        sweep=_section(SweepConfig, raw.get("sweep"), "sweep"),
        grid=[dict(c) for c in grid],
        source=source,
    )
    return cfg.validate()


def load(path, seed: Optional[int] = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    if seed is not None and isinstance(raw, dict):
        raw["seed"] = seed
    return from_dict(raw, source=str(path))


def to_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    d = dataclasses.asdict(cfg)
    d.pop("source", None)
    return d
