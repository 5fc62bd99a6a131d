"""Command line entry point.

    omnicast simulate    --config exp.yaml [--out DIR] [--seed N]
    omnicast preprocess  --config exp.yaml [--out DIR]
    omnicast train       --config exp.yaml [--out RUN_DIR]
    omnicast evaluate    --config exp.yaml [--out REPORT_DIR]
    omnicast sweep-alpha --config exp.yaml [--out DIR] [--jobs N]
    omnicast report      --config exp.yaml [--out DIR] [--jobs N]

Exit status: 0 success, 2 configuration error, 3 data error, 4 training fault.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from . import config as config_mod
from . import model as M
from .dataset import (GapReport, assemble, distribution_range, histograms, split, utc_date,
                      write_histograms_csv)
from .errors import ConfigError, DataError, DomainError, TrainingFault
from .metrics import HorizonReport, write_report_csv
from .pipeline import ProcessedData, evaluate_forecasts, load_processed, preprocess_directory, write_evaluation
from .simulator import write_dataset

log = logging.getLogger("omnicast")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING = 0, 2, 3, 4
SWEEP_COLUMNS = ("alpha", "horizon_s", "n", "rmse", "fs_rmse_pct", "crps", "fs_crps_pct")
GRID_COLUMNS = ("cell", "inputs", "sky_variant", "sat_variant", "horizon_s", "n", "rmse", "fs_rmse_pct",
                "crps", "fs_crps_pct")


# -- shared experiment plumbing -------------------------------------------------

def _check_processed(cfg: config_mod.ExperimentConfig, directory: Path, pre_over=None) -> None:
    info_path = directory / "preprocess.json"
    if not info_path.exists():
        raise DataError(f"{directory}: not a preprocessed dataset (no preprocess.json)")
    stored = json.loads(info_path.read_text())["preprocess"]
    wanted = vars(cfg.preprocess_config(**(pre_over or {})))
    if stored != wanted:
        raise ConfigError(f"{directory} was preprocessed with {stored}, config asks for {wanted}")


def build_splits(cfg: config_mod.ExperimentConfig, data: ProcessedData):
    report = GapReport()
    asm = cfg.assembly_config(data.site, distribution_range(data.irradiance)[1])
    samples = list(assemble(data.sky, data.ci, data.irradiance, asm, report))
    if not samples:
        raise DataError(f"no samples could be assembled (skipped: {dict(report.skipped)})")
    days = sorted({utc_date(s.t) for s in samples})
    train, val, test = split(samples, cfg.split.spec(days))
    log.info("samples: %d train, %d val, %d test (skipped %s)", len(train), len(val), len(test),
             dict(sorted(report.skipped.items())))
    return train, val, test, report


def train_inits(cfg, model_cfg: M.ModelConfig, train, val) -> List[Tuple[M.ParameterStore, list]]:
    if not train or not val:
        raise DataError("training and validation splits must both contain samples")
    runs = []
    for i in range(cfg.training.n_inits):
        seed = cfg.seed + i
        mcfg = M.ModelConfig.from_dict({**model_cfg.to_dict(), "seed": seed})
        store, tlog = M.train(M.init_params(mcfg), train, val, mcfg, cfg.training.schedule(seed))
        runs.append((store, tlog))
    return runs


def average_reports(groups: Sequence[Sequence[HorizonReport]]) -> List[HorizonReport]:
    """Column-wise mean of per-initialisation reports (the horizons must agree)."""
    if len(groups) == 1:
        return list(groups[0])
    out = []
    for rows in zip(*groups):
        vals = {k: float(np.mean([getattr(r, k) for r in rows]))
                for k in ("rmse", "fs_rmse_pct", "mae", "q95", "crps", "fs_crps_pct")}
        out.append(HorizonReport(rows[0].horizon_s, rows[0].n, **vals))
    return out


def evaluate_stores(stores: Sequence[M.ParameterStore], samples, weather=None, out_dir=None):
    """Evaluate each store on ``samples``; returns the per-init evaluations and averaged reports."""
    if not samples:
        raise DataError("evaluation split is empty")
    evals = []
    for i, store in enumerate(stores):
        sets = M.predict(store, samples)
        ghi = np.stack([f.ghi_hat for f in sets])
        probs = np.stack([f.probs for f in sets])
        cfg = store.config
        point = M.point_forecast(ghi, probs, cfg)
        ev = evaluate_forecasts(samples, point, probs if cfg.mode == "probabilistic" else None,
                                (cfg.bin_lo, cfg.bin_hi), weather)
        evals.append(ev)
        if out_dir is not None:
            sub = Path(out_dir) if len(stores) == 1 else Path(out_dir) / f"init{i}"
            write_evaluation(ev, samples, sub, (cfg.bin_lo, cfg.bin_hi))
    averaged = average_reports([ev.reports["model"] for ev in evals])
    if out_dir is not None and len(stores) > 1:
        write_report_csv(Path(out_dir) / "metrics_model.csv", averaged)
    return evals, averaged


def run_cell(cfg: config_mod.ExperimentConfig, model_over: Dict, pre_over: Dict, out_dir: Path,
             data: Optional[ProcessedData] = None) -> List[HorizonReport]:
    """Train and evaluate one experiment cell; artefacts go to ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    if data is None:
        data = _cell_data(cfg, pre_over, out_dir)
    train, val, test, _ = build_splits(cfg, data)
    mcfg = cfg.model_config(distribution_range(data.irradiance)[1], **model_over)
    runs = train_inits(cfg, mcfg, train, val)
    for i, (store, tlog) in enumerate(runs):
        M.save_checkpoint(store, out_dir / f"checkpoint_{i}.ckpt")
        M.write_log_csv(out_dir / f"train_log_{i}.csv", tlog)
    _, averaged = evaluate_stores([s for s, _ in runs], test, data.weather, out_dir / "eval")
    return averaged


def _cell_data(cfg, pre_over: Dict, out_dir: Path) -> ProcessedData:
    base = Path(cfg.paths.processed)
    if not pre_over or vars(cfg.preprocess_config(**pre_over)) == vars(cfg.preprocess_config()):
        _check_processed(cfg, base)
        return load_processed(base)
    target = out_dir / "processed"
    if not (target / "preprocess.json").exists():
        preprocess_directory(cfg.paths.raw, target, cfg.preprocess_config(**pre_over))
    _check_processed(cfg, target, pre_over)
    return load_processed(target)


def _cell_job(args):
    raw_cfg, source, model_over, pre_over, out_dir = args
    cfg = config_mod.from_dict(raw_cfg, source)
    return run_cell(cfg, model_over, pre_over, Path(out_dir))


def _run_jobs(cfg, jobs: Sequence[Tuple[Dict, Dict, Path]], n_workers: int) -> List[List[HorizonReport]]:
    raw = config_mod.to_dict(cfg)
    payload = [(raw, cfg.source, m, p, str(o)) for m, p, o in jobs]
    if n_workers <= 1 or len(payload) <= 1:
        return [_cell_job(a) for a in payload]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_cell_job, payload))


# -- verbs ---------------------------------------------------------------------

def cmd_simulate(cfg, out: Optional[str]) -> Path:
    sim_cfg = cfg.simulation_config()
    target = Path(out or cfg.paths.raw)
    manifest = write_dataset(sim_cfg, target)
    log.info("simulated %d days into %s", len(manifest["days"]), target)
    return target


def cmd_preprocess(cfg, out: Optional[str]) -> Path:
    pre = cfg.preprocess_config()
    target = Path(out or cfg.paths.processed)
    preprocess_directory(cfg.paths.raw, target, pre)
    log.info("preprocessed %s into %s", cfg.paths.raw, target)
    return target


def cmd_train(cfg, out: Optional[str]) -> Path:
    run = Path(out or cfg.paths.run)
    base = Path(cfg.paths.processed)
    _check_processed(cfg, base)
    data = load_processed(base)
    train, val, test, report = build_splits(cfg, data)
    bin_hi = distribution_range(data.irradiance)[1]
    runs = train_inits(cfg, cfg.model_config(bin_hi), train, val)
    run.mkdir(parents=True, exist_ok=True)
    for i, (store, tlog) in enumerate(runs):
        M.save_checkpoint(store, run / f"checkpoint_{i}.ckpt")
        M.write_log_csv(run / f"train_log_{i}.csv", tlog)
    asm = cfg.assembly_config(data.site, bin_hi)
    for name, part in (("train", train), ("val", val), ("test", test)):
        write_histograms_csv(run / f"histograms_{name}.csv", histograms(part, asm.bin_lo, asm.bin_hi, asm.bins),
                             asm.bin_lo, asm.bin_hi)
    (run / "experiment.yaml").write_text(yaml.safe_dump(config_mod.to_dict(cfg), sort_keys=True))
    return run


def cmd_evaluate(cfg, out: Optional[str], split_name: str = "test") -> Path:
    run = Path(cfg.paths.run)
    ckpts = sorted(run.glob("checkpoint_*.ckpt"))
    if not ckpts:
        raise DataError(f"{run}: no checkpoints (run train first)")
    stores = [M.load_checkpoint(p) for p in ckpts]
    base = Path(cfg.paths.processed)
    _check_processed(cfg, base)
    data = load_processed(base)
    parts = dict(zip(("train", "val", "test"), build_splits(cfg, data)[:3]))
    target = Path(out or run / "eval")
    evaluate_stores(stores, parts[split_name], data.weather, target)
    return target


def cmd_sweep_alpha(cfg, out: Optional[str], n_workers: int = 1) -> Path:
    alphas = [float(a) for a in cfg.sweep.alphas]
    if not alphas:
        raise ConfigError("sweep.alphas is empty")
    if any(not a >= 0 for a in alphas):
        raise ConfigError("alphas must be >= 0")
    target = Path(out or Path(cfg.paths.run) / "sweep")
    jobs = [({"alpha": a}, {}, target / f"alpha_{a:g}") for a in alphas]
    results = _run_jobs(cfg, jobs, n_workers)
    with open(target / "fs_vs_alpha.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for a, reps in zip(alphas, results):
            for r in reps:
                w.writerow([repr(a), r.horizon_s, r.n] + [repr(round(v, 6)) for v in
                                                            (r.rmse, r.fs_rmse_pct, r.crps, r.fs_crps_pct)])
    return target


def cmd_report(cfg, out: Optional[str], n_workers: int = 1) -> Path:
    cells = cfg.cells()
    if not cells:
        raise ConfigError("report needs a non-empty grid section")
    target = Path(out or Path(cfg.paths.run) / "grid")
    jobs = [(m, p, target / name) for name, m, p in cells]
    results = _run_jobs(cfg, jobs, n_workers)
    with open(target / "grid.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_COLUMNS)
        for (name, m, p), reps in zip(cells, results):
            mcfg = cfg.model_config(**m)
            pcfg = cfg.preprocess_config(**p)
            for r in reps:
                w.writerow([name, "+".join(mcfg.inputs), pcfg.sky_variant, pcfg.sat_variant, r.horizon_s, r.n] +
                           [repr(round(v, 6)) for v in (r.rmse, r.fs_rmse_pct, r.crps, r.fs_crps_pct)])
    return target


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omnicast", description="Hybrid sky-camera / satellite nowcasting.")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in ("simulate", "preprocess", "train", "evaluate", "sweep-alpha", "report"):
        p = sub.add_parser(verb)
        p.add_argument("--config", required=True, help="experiment YAML file")
        p.add_argument("--out", default=None, help="output directory (defaults from the config paths)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for independent cells")
        p.add_argument("-v", "--verbose", action="store_true")
        if verb == "evaluate":
            p.add_argument("--split", choices=("train", "val", "test"), default="test")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = config_mod.load(args.config, seed=args.seed)
        if args.verb == "simulate":
            cmd_simulate(cfg, args.out)
        elif args.verb == "preprocess":
            cmd_preprocess(cfg, args.out)
        elif args.verb == "train":
            cmd_train(cfg, args.out)
        elif args.verb == "evaluate":
            cmd_evaluate(cfg, args.out, args.split)
        elif args.verb == "sweep-alpha":
            cmd_sweep_alpha(cfg, args.out, args.jobs)
        else:
            cmd_report(cfg, args.out, args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingFault as exc:
        print(f"training fault: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except DomainError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
