"""Batch command line: simulate, infer, evaluate, pipeline, aggregate, selftest.

Exit codes: 0 success, 1 configuration or label error, 2 input/output
error, 3 numerical or inference failure.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .datastore import (DatasetError, read_dataset, read_model, read_truth, write_dataset,
                        write_model, write_truth)
from .errors import ConfigError, InputError, QPIError
from .evaluation import ErrorCurve, aggregate, error_curve, parse_grid, qpt_baseline
from .inference import FitOptions, infer
from .schedule import ScheduleParams, build_schedule
from .simulators import SCENARIOS, exact_probabilities, make_scenario, sample_counts

log = logging.getLogger("qpi")

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 1, 2, 3
DEFAULT_GRID = "0:1100:5"


# configuration ------------------------------------------------------------

def load_config(path) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser()
    cfg.optionxform = str           # keep Omega / Delta capitalized
    if path is None:
        raise ConfigError("--config is required")
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        cfg.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"bad config {path}: {exc}") from None
    return cfg


def _section(cfg, name) -> dict:
    return dict(cfg[name]) if cfg.has_section(name) else {}


def _int(doc, key, default=None):
    if key not in doc:
        if default is None:
            raise ConfigError(f"missing required key {key!r}")
        return default
    try:
        return int(doc[key])
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {doc[key]!r}") from None


def scenario_from_config(cfg):
    doc = _section(cfg, "scenario")
    name = doc.pop("name", None)
    if not name:
        raise ConfigError("[scenario] name is required")
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    allowed = set(SCENARIOS[name][1])
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown {name} parameters: {sorted(unknown)}")
    try:
        return make_scenario(name, **{k: float(v) for k, v in doc.items()})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def schedule_from_config(cfg):
    doc = _section(cfg, "schedule")
    try:
        params = ScheduleParams(l=_int(doc, "l"), a_bar=_int(doc, "a_bar"),
                                b_bar=_int(doc, "b_bar"),
                                flight_len=_int(doc, "flight_len", 0) or None)
    except ValueError as exc:
        raise ConfigError(f"[schedule] {exc}") from None
    return build_schedule(params)


def options_from_config(cfg) -> FitOptions:
    try:
        return FitOptions.from_mapping(_section(cfg, "inference"))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"[inference] {exc}") from None


def sampling_from_config(cfg, seed_override=None):
    doc = _section(cfg, "sampling")
    shots = _int(doc, "shots", 10000)
    seed = seed_override if seed_override is not None else _int(doc, "seed", 0)
    if shots < 1 or seed < 0:
        raise ConfigError("shots must be >= 1 and seed >= 0")
    return shots, seed


def grid_from(args, cfg=None) -> np.ndarray:
    spec = args.grid
    if spec is None and cfg is not None:
        spec = _section(cfg, "evaluation").get("grid")
    try:
        return parse_grid(spec or DEFAULT_GRID)
    except InputError as exc:
        raise ConfigError(str(exc)) from None


def out_dir(args, cfg=None) -> Path:
    path = args.out
    if path is None and cfg is not None:
        path = _section(cfg, "output").get("dir")
    path = Path(path or ".")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dump_json(doc, path: Path):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# single stages ------------------------------------------------------------

def simulate(cfg, seed, out: Path, grid) -> dict:
    scenario = scenario_from_config(cfg)
    schedule = schedule_from_config(cfg)
    shots, seed = sampling_from_config(cfg, seed)
    truth = exact_probabilities(scenario, schedule, grid)
    dataset = sample_counts(truth, schedule, shots, seed)
    write_dataset(dataset, out / "dataset.qpd")
    write_truth(truth, out / "truth.qpt")
    return {"dataset": "dataset.qpd", "truth": "truth.qpt", "seed": seed,
            "experiments": len(dataset.records)}


def run_inference(dataset, opts: FitOptions, out: Path) -> dict:
    result = infer(dataset, opts)
    write_model(result.model, out / "model.qpm")
    (out / "dimension.txt").write_text(result.dimension.to_text())
    _dump_json(result.log, out / "infer_log.json")
    return {"d": result.d, "d_stage1": result.dimension.d,
            "phi_bbar": result.stage3.phi_final, "psi": result.stage4.psi,
            "valid": result.stage4.valid}


def evaluate(model, truth, grid, dataset, out: Path) -> ErrorCurve:
    try:
        baseline = qpt_baseline(truth)
    except QPIError as exc:
        log.warning("process-tomography baseline skipped: %s", exc)
        baseline = None
    curve = error_curve(model, truth, grid, dataset, baseline)
    (out / "errors.csv").write_text(curve.to_csv())
    return curve


def _run_pipeline(job) -> dict:
    """One replicate; module-level so it can run in a worker process."""
    cfg_text, seed, out, grid = job
    cfg = configparser.ConfigParser()
    cfg.optionxform = str
    cfg.read_string(cfg_text)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    grid = np.asarray(grid)
    sim = simulate(cfg, seed, out, grid)
    dataset = read_dataset(out / "dataset.qpd")
    truth = read_truth(out / "truth.qpt")
    fit = run_inference(dataset, options_from_config(cfg), out)
    curve = evaluate(read_model(out / "model.qpm"), truth, grid, dataset, out)
    t_cap = max(dataset.schedule.T_set)
    summary = {"seed": sim["seed"], **fit,
               "mean_qpi_error": curve.mean_error(t_cap),
               "mean_raw_error": curve.mean_error(t_cap, "raw"),
               "mean_qpt_error": curve.mean_error(t_cap, "qpt")}
    _dump_json(summary, out / "summary.json")
    return summary


def pipeline(cfg, cfg_text: str, seed_base, runs: int, workers: int, out: Path, grid) -> dict:
    _, seed0 = sampling_from_config(cfg, seed_base)
    # validate everything up front so configuration errors exit with code 1
    scenario_from_config(cfg)
    schedule_from_config(cfg)
    options_from_config(cfg)
    jobs = [(cfg_text, seed0 + j, str(out / f"run_{j:03d}"), grid.tolist()) for j in range(runs)]
    if workers > 1 and runs > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_pipeline, jobs))
    else:
        results = [_run_pipeline(job) for job in jobs]
    curves = [ErrorCurve.from_csv((out / f"run_{j:03d}" / "errors.csv").read_text())
              for j in range(runs)]
    (out / "aggregate.csv").write_text(aggregate(curves).to_csv())
    dims = [r["d"] for r in results]
    summary = {"runs": results,
               "d_counts": {str(d): dims.count(d) for d in sorted(set(dims))},
               "mean_qpi_error": float(np.mean([r["mean_qpi_error"] for r in results])),
               "mean_qpt_error": float(np.mean([r["mean_qpt_error"] for r in results]))}
    _dump_json(summary, out / "summary.json")
    return summary


def selftest() -> list:
    """Fast internal consistency checks; returns (name, ok) pairs."""
    from .hankel import assemble_exact, ho_kalman_exact
    from .model import predict_many, random_model
    from .simulators import model_truth

    checks = []
    m = random_model(3, 2, 3, seed=1, t_max=60)
    sched = build_schedule(ScheduleParams(l=2, a_bar=2, b_bar=2))
    H = assemble_exact(m, sched)
    Hs = assemble_exact(m, sched, shift=1)
    rec = ho_kalman_exact(H, Hs, 2, 3, 3)
    ts = np.arange(0, 61)
    checks.append(("noiseless reconstruction",
                   float(np.abs(predict_many(rec, ts) - predict_many(m, ts)).max()) < 1e-8))
    truth = model_truth(m, max(sched.T_set))
    ds = sample_counts(truth, sched, 10000, seed=7)
    res = infer(ds)
    err = float(np.abs(predict_many(res.model, ts) - predict_many(m, ts)).max())
    checks.append(("sampled inference", res.d == 3 and err < 5e-2))
    return checks


# argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int, help="override the sampling seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--runs", type=int, default=1, help="replicates (pipeline)")
    common.add_argument("--workers", type=int, default=1, help="worker processes (pipeline)")
    common.add_argument("--grid", help="evaluation grid START:STOP:STEP (inclusive)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="qpi", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"qpi {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write dataset.qpd and truth.qpt")
    s = sub.add_parser("infer", parents=[common], help="infer a model from a dataset")
    s.add_argument("dataset")
    s = sub.add_parser("evaluate", parents=[common], help="error curve of a model")
    s.add_argument("model")
    s.add_argument("truth")
    s.add_argument("--dataset", dest="dataset_path", help="dataset for raw-measurement errors")
    sub.add_parser("pipeline", parents=[common], help="simulate, infer and evaluate")
    s = sub.add_parser("aggregate", parents=[common], help="merge error-curve CSVs")
    s.add_argument("csv", nargs="+")
    sub.add_parser("selftest", parents=[common], help="quick internal checks")
    return p


def _main(args) -> int:
    if args.command == "simulate":
        cfg = load_config(args.config)
        out = out_dir(args, cfg)
        print(json.dumps(simulate(cfg, args.seed, out, grid_from(args, cfg)), sort_keys=True))
    elif args.command == "infer":
        opts = options_from_config(load_config(args.config)) if args.config else FitOptions()
        dataset = read_dataset(args.dataset)
        print(json.dumps(run_inference(dataset, opts, out_dir(args)), sort_keys=True))
    elif args.command == "evaluate":
        grid = grid_from(args)
        model = read_model(args.model)
        truth = read_truth(args.truth)
        dataset = read_dataset(args.dataset_path) if args.dataset_path else None
        curve = evaluate(model, truth, grid, dataset, out_dir(args))
        print(json.dumps({"rows": len(curve.t), "mean_qpi_error": curve.mean_error()}))
    elif args.command == "pipeline":
        cfg = load_config(args.config)
        if args.runs < 1 or args.workers < 1:
            raise ConfigError("--runs and --workers must be >= 1")
        out = out_dir(args, cfg)
        summary = pipeline(cfg, Path(args.config).read_text(), args.seed, args.runs,
                           args.workers, out, grid_from(args, cfg))
        print(json.dumps({k: summary[k] for k in ("d_counts", "mean_qpi_error",
                                                   "mean_qpt_error")}, sort_keys=True))
    elif args.command == "aggregate":
        curves = [ErrorCurve.from_csv(Path(p).read_text()) for p in args.csv]
        out = out_dir(args)
        (out / "aggregate.csv").write_text(aggregate(curves).to_csv())
    elif args.command == "selftest":
        checks = selftest()
        for name, ok in checks:
            print(f"{'PASS' if ok else 'FAIL'} {name}")
        if not all(ok for _, ok in checks):
            return EXIT_NUMERIC
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _main(args)
    except (ConfigError, InputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DatasetError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except QPIError as exc:
        print(f"numeric error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
