"""Experiment runner: strict key-value configs in, CSV/JSON artifacts out.

``hardtrain run config.txt`` executes one experiment (a sphere run, a pose
run, or a solver self-check) and writes ``metrics.csv``, the fully resolved
config and a ``summary.json`` into the output directory.  ``hardtrain
compare a.csv b.csv`` emits paired statistics for two metric traces.

Exit codes: 0 success, 2 configuration error (with a line/field
diagnostic), 3 numerical failure (the last finite checkpoint is kept).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import benchmarks as bm
from . import trainers as tr
from .krylov import SolverConfig, minres_qlp
from .linops import from_dense

ENV_OUT_ROOT = "HARDTRAIN_OUT"

METRIC_COLUMNS = ("iter", "risk", "pred_error", "median_violation",
                  "active_delta", "solver_iters", "solver_status", "step_norm")


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config schema and parsing
# ---------------------------------------------------------------------------

def _parse_bool(s):
    if s.lower() in ("true", "yes", "1"):
        return True
    if s.lower() in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_int_list(s):
    return tuple(int(x) for x in s.split(",") if x.strip())


_COMMON = {
    "kind": (str, None),
    "seed": (int, 0),
    "out_dir": (str, ""),
}

_SCHEMAS = {
    "spheres": {
        "method": (str, "hard_sgd"),
        "dim": (int, bm.SPHERE_DEMO_DIM),
        "n_constraints": (int, bm.SPHERE_DEFAULT_CONSTRAINTS),
        "n_active": (int, 20),
        "iterations": (int, 500),
        "lr": (float, None),            # default depends on the method
        "soft_lambda": (float, bm.SPHERE_SOFT_LAMBDA),
        "solver_rtol": (float, 1e-8),
        "solver_max_iters": (int, 500),
    },
    "toy_pose": {
        "method": (str, "soft_adam"),
        "lr": (float, 1e-3),
        "soft_lambda": (float, 0.0),
        "epochs": (int, 100),
        "batch_data": (int, 128),
        "batch_constraints": (int, 128),
        "mine": (_parse_bool, False),
        "n_mined": (int, 16),
        "n_samples": (int, 2000),
        "n_pool": (int, 384),
        "in_dim": (int, 48),
        "hidden": (_parse_int_list, (192,)),
        "asym_noise": (float, 0.06),
        "input_noise": (float, 0.01),
        "init_checkpoint": (str, ""),
        "solver_rtol": (float, 1e-8),
        "solver_max_iters": (int, 800),
    },
    "solve_check": {
        "n_systems": (int, 200),
        "max_dim": (int, 120),
        "solver_rtol": (float, 1e-10),
    },
}


def parse_config(path) -> dict:
    """Strict key=value parser; unknown keys and bad values are errors."""
    raw = {}
    lines = Path(path).read_text().splitlines()
    for lineno, line in enumerate(lines, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        raw[key] = (value, lineno)

    if "kind" not in raw:
        raise ConfigError(f"{path}: missing required key 'kind'")
    kind = raw["kind"][0]
    if kind not in _SCHEMAS:
        raise ConfigError(f"{path}:{raw['kind'][1]}: unknown kind {kind!r} "
                          f"(expected one of {sorted(_SCHEMAS)})")
    schema = {**_COMMON, **_SCHEMAS[kind]}
    cfg = {name: default for name, (_, default) in schema.items()}
    cfg["kind"] = kind
    for key, (value, lineno) in raw.items():
        if key not in schema:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r} for kind {kind!r}")
        parse = schema[key][0]
        try:
            cfg[key] = parse(value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}")
    return cfg


def resolve_out_dir(cfg: dict, config_path, override: str | None) -> Path:
    if override:
        return Path(override)
    if cfg.get("out_dir"):
        return Path(cfg["out_dir"])
    root = os.environ.get(ENV_OUT_ROOT, "hardtrain_runs")
    return Path(root) / Path(config_path).stem


# ---------------------------------------------------------------------------
# Output writers
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_metrics_csv(path, initial_row, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for r in ([initial_row] if initial_row is not None else []) + list(rows):
            writer.writerow([r.iteration, _fmt(r.risk), _fmt(r.pred_error),
                             _fmt(r.median_violation), _fmt(r.active_delta),
                             r.solver_iters, r.solver_status, _fmt(r.step_norm)])


def write_resolved_config(path, cfg: dict) -> None:
    with open(path, "w") as fh:
        for key in sorted(cfg):
            value = cfg[key]
            if isinstance(value, tuple):
                value = ",".join(map(str, value))
            fh.write(f"{key} = {value}\n")


def _write_summary(out_dir: Path, payload: dict) -> None:
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Experiment drivers
# ---------------------------------------------------------------------------


def _train_config(cfg: dict, iterations=None) -> tr.TrainConfig:
    solver = SolverConfig(rtol=cfg["solver_rtol"], max_iters=cfg["solver_max_iters"])
    return tr.TrainConfig(
        method=cfg["method"], lr=cfg["lr"], soft_lambda=cfg["soft_lambda"],
        epochs=cfg.get("epochs", 1), iterations=iterations,
        batch_data=cfg.get("batch_data", 128),
        batch_constraints=cfg.get("batch_constraints", 128),
        mine=cfg.get("mine", False), n_mined=cfg.get("n_mined", 16),
        solver=solver, seed=cfg["seed"])


def _finish_run(out_dir: Path, cfg: dict, problem, report, status: str) -> None:
    write_metrics_csv(out_dir / "metrics.csv", report.initial_row, report.rows)
    layout = getattr(getattr(problem, "mlp", None), "layout_hash", lambda: 0)()
    ad.save_params(out_dir / "params.bin", report.final_params, layout)
    ad.save_params(out_dir / "best_params.bin", report.best_params, layout)
    if hasattr(problem, "spec_dict"):
        bm.save_problem_spec(problem, out_dir / "problem.json")
    last = report.rows[-1] if report.rows else report.initial_row
    _write_summary(out_dir, {
        "status": status,
        "method": cfg.get("method", ""),
        "seed": cfg["seed"],
        "iterations": len(report.rows),
        "final_risk": last.risk,
        "final_pred_error": last.pred_error,
        "final_median_violation": last.median_violation,
        "best_val_error": report.best_val_error,
    })


def run_spheres(cfg: dict, out_dir: Path) -> int:
    if cfg["lr"] is None:
        cfg["lr"] = bm.SPHERE_HARD_LR if cfg["method"].startswith("hard") else bm.SPHERE_SOFT_LR
    problem = bm.gen_spheres(cfg["dim"], cfg["n_constraints"], cfg["seed"])
    train_cfg = _train_config({**cfg, "batch_constraints": cfg["n_active"]},
                              iterations=cfg["iterations"])
    try:
        report = tr.train(train_cfg, problem)
    except tr.TrainingDiverged as exc:
        _finish_run(out_dir, cfg, problem, exc.report, "numerical_failure")
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    _finish_run(out_dir, cfg, problem, report, "ok")
    return 0


def run_toy_pose(cfg: dict, out_dir: Path) -> int:
    problem = bm.gen_toy_pose(cfg["seed"], cfg["n_samples"], cfg["n_pool"],
                              cfg["in_dim"], cfg["hidden"],
                              cfg["asym_noise"], cfg["input_noise"])
    w0 = None
    if cfg["init_checkpoint"]:
        w0 = ad.load_params(cfg["init_checkpoint"],
                            expect_hash=problem.mlp.layout_hash())
    try:
        report = tr.train(_train_config(cfg), problem, w0=w0)
    except tr.TrainingDiverged as exc:
        _finish_run(out_dir, cfg, problem, exc.report, "numerical_failure")
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    _finish_run(out_dir, cfg, problem, report, "ok")
    return 0


def run_solve_check(cfg: dict, out_dir: Path) -> int:
    """Solver self-check: random symmetric systems against the dense
    pseudoinverse.  The risk column carries the relative error, the
    median_violation column the recomputed residual norm."""
    rng = np.random.default_rng(cfg["seed"])
    rows = []
    worst = 0.0
    statuses = {}
    for i in range(1, cfg["n_systems"] + 1):
        n = int(rng.integers(2, cfg["max_dim"] + 1))
        if rng.random() < 0.3:      # rank-deficient indefinite
            k = max(1, n // 2)
            u = rng.standard_normal((n, k))
            a = (u * rng.choice([-1.0, 1.0], k)) @ u.T
        else:
            a = rng.standard_normal((n, n))
        a = (a + a.T) / 2
        b = rng.standard_normal(n)
        sol = minres_qlp(from_dense(a), b, SolverConfig(rtol=cfg["solver_rtol"]))
        expect = np.linalg.pinv(a, rcond=1e-12) @ b
        err = float(np.linalg.norm(sol.x - expect) / max(np.linalg.norm(expect), 1e-30))
        worst = max(worst, err)
        statuses[sol.status] = statuses.get(sol.status, 0) + 1
        rows.append(tr.IterationRow(i, err, 0.0, sol.residual_norm, 0.0,
                                    sol.iters, sol.status, 0.0, "-"))
        if not np.isfinite(err):
            write_metrics_csv(out_dir / "metrics.csv", None, rows[:-1])
            print("numerical failure in solve check", file=sys.stderr)
            return 3
    write_metrics_csv(out_dir / "metrics.csv", None, rows)
    _write_summary(out_dir, {"status": "ok", "n_systems": cfg["n_systems"],
                             "worst_rel_error": worst, "statuses": statuses})
    return 0


_RUNNERS = {"spheres": run_spheres, "toy_pose": run_toy_pose,
            "solve_check": run_solve_check}


def cmd_run(args) -> int:
    try:
        cfg = parse_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.full_scale and cfg["kind"] == "spheres":
        cfg["dim"] = bm.SPHERE_FULL_DIM
    out_dir = resolve_out_dir(cfg, args.config, args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg["out_dir"] = str(out_dir)
    write_resolved_config(out_dir / "resolved_config.txt", cfg)
    return _RUNNERS[cfg["kind"]](cfg, out_dir)


# ---------------------------------------------------------------------------
# Trace comparison
# ---------------------------------------------------------------------------


def read_metrics(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != METRIC_COLUMNS:
            raise ConfigError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return list(reader)


def compare(rows_a, rows_b) -> dict:
    """Paired statistics of two equal-length metric traces."""
    if len(rows_a) != len(rows_b):
        raise ConfigError(f"traces differ in length: {len(rows_a)} vs {len(rows_b)}")

    def trace(rows, col):
        return np.array([float(r[col]) for r in rows])

    mv_a, mv_b = trace(rows_a, "median_violation"), trace(rows_b, "median_violation")
    d_a, d_b = trace(rows_a, "active_delta"), trace(rows_b, "active_delta")
    lo = min(100, max(len(mv_a) // 2, 1))
    smooth_a = float(np.std(np.diff(mv_a[lo:]))) if len(mv_a) - lo >= 2 else 0.0
    smooth_b = float(np.std(np.diff(mv_b[lo:]))) if len(mv_b) - lo >= 2 else 0.0
    eps = 1e-300
    return {
        "rows": len(rows_a),
        "final_median_violation_a": float(mv_a[-1]),
        "final_median_violation_b": float(mv_b[-1]),
        "final_median_violation_diff": float(mv_a[-1] - mv_b[-1]),
        "delta_smoothness_a": smooth_a,
        "delta_smoothness_b": smooth_b,
        "delta_smoothness_ratio": float((smooth_a + eps) / (smooth_b + eps)),
        "degradation_fraction_a": float(np.mean(d_a > 0)),
        "degradation_fraction_b": float(np.mean(d_b > 0)),
        "smoother": "a" if smooth_a < smooth_b else ("b" if smooth_b < smooth_a else "tie"),
    }


def cmd_compare(args) -> int:
    try:
        summary = compare(read_metrics(args.trace_a), read_metrics(args.trace_b))
    except (ConfigError, OSError, ValueError) as exc:
        print(f"compare error: {exc}", file=sys.stderr)
        return 2
    json.dump(summary, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="hardtrain",
                                     description="constrained-training experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out-dir", default=None)
    p_run.add_argument("--full-scale", action="store_true",
                       help="spheres: use the full-scale dimension (1e6)")
    p_run.set_defaults(func=cmd_run)
    p_cmp = sub.add_parser("compare", help="paired statistics of two metric traces")
    p_cmp.add_argument("trace_a")
    p_cmp.add_argument("trace_b")
    p_cmp.set_defaults(func=cmd_compare)
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
