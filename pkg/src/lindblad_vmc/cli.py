"""Command-line driver: ``lindblad-vmc {exact,train,evaluate,benchmark}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .ansatz import ENUMERATE_MAX_SITES, init_params
from .checkpoint import load_checkpoint
from .config import ConfigError, ExperimentConfig
from .exact import (
    BICGSTAB_MAX_SITES,
    ED_MAX_SITES,
    expectation_exact,
    purity_exact,
    steady_state_bicgstab,
    steady_state_ed,
)
from .observables import estimate_observables, magnetization, purity_enumerated
from .operators import magnetization_terms
from .vmc import TrainingHalted, TrainState, train

log = logging.getLogger("lindblad_vmc")

WORKERS_ENV = "LINDBLAD_VMC_WORKERS"

EXACT_COLUMNS = ["kind", "n_sites", "parameter", "value", "sigma_x", "sigma_y", "sigma_z",
                 "purity", "residual", "solver", "seconds"]
EVALUATE_COLUMNS = ["parameter", "value", "observable", "mean", "mc_error", "n_samples"]
BENCHMARK_COLUMNS = ["parameter", "value", "observable", "ansatz", "mc_error", "exact",
                     "abs_dev", "tolerance", "pass"]
CSV_SCHEMA_VERSION = 1


def _point_tag(param, value) -> str:
    return "single" if param is None else f"{param}={value:g}"


def checkpoint_path(out: Path, param, value) -> Path:
    return out / f"checkpoint_{_point_tag(param, value)}.bin"


def log_path(out: Path, param, value) -> Path:
    return out / f"train_{_point_tag(param, value)}.jsonl"


def write_csv(path: Path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in columns})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_manifest(out: Path, cfg: ExperimentConfig, command: str, extra=None):
    manifest = {
        "command": command,
        "config_sha256": cfg.digest(),
        "code_version": __version__,
        "seed": cfg.seed,
        "csv_schema_version": CSV_SCHEMA_VERSION,
        "config": cfg.raw,
    }
    manifest.update(extra or {})
    (out / f"manifest_{command}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _map(fn, items):
    workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*items)))


# ----------------------------------------------------------------------
# exact
# ----------------------------------------------------------------------


def solve_exact(cfg: ExperimentConfig, param, value) -> dict:
    n = cfg.n_sites
    s = cfg.superoperator(param, value)
    t0 = time.perf_counter()
    if n <= ED_MAX_SITES:
        rho, solver = steady_state_ed(s), "ed"
    else:
        rho, solver = steady_state_bicgstab(s), "bicgstab"
    row = {
        "kind": cfg.raw["model"]["kind"],
        "n_sites": n,
        "parameter": param or "",
        "value": "" if value is None else value,
        "purity": purity_exact(rho),
        "residual": rho.info["residual"],
        "solver": solver,
    }
    for axis in "xyz":
        row[f"sigma_{axis}"] = expectation_exact(magnetization_terms(n, axis), rho)
    row["seconds"] = time.perf_counter() - t0
    return row


def run_exact(cfg: ExperimentConfig, out: Path) -> list[dict]:
    n = cfg.n_sites
    if n > BICGSTAB_MAX_SITES:
        raise ConfigError(
            f"exact solvers support N <= {BICGSTAB_MAX_SITES} "
            f"(ED for N <= {ED_MAX_SITES}, BiCGStab above); got N = {n}"
        )
    rows = _map(solve_exact, [(cfg, p, v) for p, v in cfg.sweep_points()])
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "exact.csv", EXACT_COLUMNS, rows)
    write_manifest(out, cfg, "exact")
    return rows


# ----------------------------------------------------------------------
# train
# ----------------------------------------------------------------------


def train_point(cfg: ExperimentConfig, out: Path, param, value, resume=None) -> dict:
    s = cfg.superoperator(param, value)
    ckpt = checkpoint_path(out, param, value)
    logfile = log_path(out, param, value)
    if resume:
        state, _ = load_checkpoint(resume)
        if state.params.config != cfg.model_config():
            raise ConfigError("checkpoint model does not match the configured ansatz")
    else:
        state = TrainState(init_params(cfg.model_config()), seed=cfg.seed)
        logfile.unlink(missing_ok=True)
    state, records = train(state, s, cfg.sampler(), cfg.optimizer(), logfile, ckpt)
    return {"parameter": param, "value": value, "checkpoint": ckpt.name,
            "final_cost": records[-1]["cost"] if records else None, "steps": state.step}


def run_train(cfg: ExperimentConfig, out: Path, resume=None) -> list[dict]:
    out.mkdir(parents=True, exist_ok=True)
    points = cfg.sweep_points()
    if resume and len(points) != 1:
        raise ConfigError("--resume needs a single sweep point")
    results = _map(train_point, [(cfg, out, p, v, resume) for p, v in points])
    write_manifest(out, cfg, "train", {"results": results})
    return results


# ----------------------------------------------------------------------
# evaluate / benchmark
# ----------------------------------------------------------------------


def evaluate_point(cfg: ExperimentConfig, out: Path, param, value, ckpt=None) -> list[dict]:
    ckpt = Path(ckpt) if ckpt else checkpoint_path(out, param, value)
    if not ckpt.exists():
        raise FileNotFoundError(f"missing checkpoint {ckpt}; run `train` first")
    state, _ = load_checkpoint(ckpt)
    p = state.params
    n = p.config.sites
    ev = cfg.raw["evaluate"]
    obs = [magnetization(n, a) for a in "xyz"]
    ests = estimate_observables(p, obs, cfg.sampler("evaluate"), seed=int(ev["seed"]))
    rows = [{"parameter": param or "", "value": "" if value is None else value,
             "observable": e.name, "mean": e.mean, "mc_error": e.error,
             "n_samples": e.n_samples} for e in ests]
    if n <= ENUMERATE_MAX_SITES:
        rows.append({"parameter": param or "", "value": "" if value is None else value,
                     "observable": "purity", "mean": purity_enumerated(p),
                     "mc_error": 0.0, "n_samples": 0})
    return rows


def run_evaluate(cfg: ExperimentConfig, out: Path, ckpt=None) -> list[dict]:
    points = cfg.sweep_points()
    if ckpt and len(points) != 1:
        raise ConfigError("--resume/--checkpoint needs a single sweep point")
    rows = [r for chunk in _map(evaluate_point, [(cfg, out, p, v, ckpt) for p, v in points])
            for r in chunk]
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "evaluate.csv", EVALUATE_COLUMNS, rows)
    write_manifest(out, cfg, "evaluate")
    return rows


def benchmark_point(cfg: ExperimentConfig, out: Path, param, value) -> list[dict]:
    ans = evaluate_point(cfg, out, param, value)
    ex = solve_exact(cfg, param, value)
    tol = float(cfg.raw["benchmark"]["tolerance"])
    rows = []
    for r in ans:
        if r["observable"] == "purity":
            exact, t = ex["purity"], tol_purity(ex["purity"])
        else:
            exact, t = ex[r["observable"]], tol
        dev = abs(r["mean"] - exact)
        rows.append({"parameter": r["parameter"], "value": r["value"],
                     "observable": r["observable"], "ansatz": r["mean"],
                     "mc_error": r["mc_error"], "exact": exact, "abs_dev": dev,
                     "tolerance": t, "pass": bool(dev <= t)})
    return rows


def tol_purity(exact: float) -> float:
    """Purity is compared at 20% relative tolerance."""
    return 0.2 * exact


def run_benchmark(cfg: ExperimentConfig, out: Path) -> list[dict]:
    rows = [r for chunk in _map(benchmark_point, [(cfg, out, p, v) for p, v in cfg.sweep_points()])
            for r in chunk]
    write_csv(out / "benchmark.csv", BENCHMARK_COLUMNS, rows)
    write_manifest(out, cfg, "benchmark")
    return rows


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lindblad-vmc", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("exact", "exact steady states (ED / BiCGStab) over the sweep"),
        ("train", "variational training over the sweep"),
        ("evaluate", "Monte Carlo observables from trained checkpoints"),
        ("benchmark", "compare trained checkpoints against exact solutions"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, required=True, help="experiment TOML file")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        if name in ("train", "evaluate"):
            p.add_argument("--resume", type=Path, default=None,
                           help="checkpoint to resume from (train) or evaluate")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = args.out or Path(cfg.raw["output"]["dir"])
        if args.command == "exact":
            rows = run_exact(cfg, out)
            print(f"wrote {len(rows)} rows to {out / 'exact.csv'}")
        elif args.command == "train":
            res = run_train(cfg, out, args.resume)
            for r in res:
                print(f"{_point_tag(r['parameter'], r['value'])}: steps={r['steps']} "
                      f"final cost={r['final_cost']:.3e} -> {out / r['checkpoint']}")
        elif args.command == "evaluate":
            rows = run_evaluate(cfg, out, args.resume)
            print(f"wrote {len(rows)} rows to {out / 'evaluate.csv'}")
        else:
            rows = run_benchmark(cfg, out)
            failed = [r for r in rows if not r["pass"]]
            print(f"wrote {len(rows)} rows to {out / 'benchmark.csv'}; {len(failed)} failed")
            return 1 if failed else 0
    except (ConfigError, FileNotFoundError, TrainingHalted, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
