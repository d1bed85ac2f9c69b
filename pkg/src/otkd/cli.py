"""Command-line front end.

Subcommands: `sinkhorn` (solve a transport instance from CSV files),
`experiment` (run the distillation experiment, write reports), and `pnp`
(solve a pose from a correspondence file).

Exit codes: 0 success, 1 parse/config errors, 2 non-convergence or
degenerate geometry, 3 training divergence (partial results preserved).
`OTKD_LOG` sets log verbosity (debug/info/warning/error).
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import multiprocessing
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (ConfigError, DegenerateConfiguration, OtkdError,
                     PointBehindCamera, TrainingDiverged)
from .geometry import CameraIntrinsics, KeypointSet
from .harness import (CONDITIONS, ExperimentReport, TrainingConfig,
                      make_scenes, make_teacher_ensemble, run_experiment,
                      write_report_csv, write_report_json)
from .pnp import Correspondences, pnp_solve
from .sinkhorn import SinkhornConfig, default_config, plan_residuals, sinkhorn_unbalanced

log = logging.getLogger("otkd")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_DIVERGED = 3


# --------------------------------------------------------------------------
# parsing helpers


def _read_matrix(path: str) -> np.ndarray:
    """Numeric CSV -> 2D array; errors name the offending line."""
    rows = []
    width = None
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        try:
            row = [float(tok) for tok in body.replace(",", " ").split()]
        except ValueError as exc:
            raise ConfigError(f"{path}: line {lineno}: {exc}") from exc
        if width is not None and len(row) != width:
            raise ConfigError(
                f"{path}: line {lineno}: expected {width} values, got {len(row)}")
        width = len(row)
        rows.append(row)
    if not rows:
        raise ConfigError(f"{path}: no numeric data")
    return np.array(rows)


def _read_vector(path: str) -> np.ndarray:
    return _read_matrix(path).ravel()


_BOOL_WORDS = {"true": True, "1": True, "yes": True,
               "false": False, "0": False, "no": False}


def _parse_config_file(path: str) -> dict:
    """key=value lines -> dict of raw string values; unknown keys are the
    caller's problem (it knows the schema)."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}: line {lineno}: expected key=value")
        key, _, value = body.partition("=")
        out[key.strip()] = value.strip()
    return out


_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(TrainingConfig)}
# experiment-level keys that live beside TrainingConfig in a config file
_EXTRA_KEYS = {"corrupt_teacher": bool, "num_seeds": int}


def _coerce(name: str, raw: str):
    if name in _EXTRA_KEYS:
        kind = _EXTRA_KEYS[name]
        if kind is bool:
            try:
                return _BOOL_WORDS[raw.lower()]
            except KeyError:
                raise ConfigError(f"{name}: expected a boolean, got {raw!r}") from None
        return kind(raw)
    field = _CONFIG_FIELDS[name]
    try:
        if name == "corrupt_keypoints":
            return tuple(int(tok) for tok in raw.replace(",", " ").split())
        if field.type in ("int", int):
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def _experiment_settings(args) -> tuple[TrainingConfig, bool, int]:
    values = {}
    if args.config:
        for key, raw in _parse_config_file(args.config).items():
            if key not in _CONFIG_FIELDS and key not in _EXTRA_KEYS:
                raise ConfigError(f"{args.config}: unknown key {key!r}")
            values[key] = _coerce(key, raw)
    for name in _CONFIG_FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = _coerce(name, flag) if isinstance(flag, str) else flag
    if args.seed is not None:
        values["seed"] = args.seed
    corrupt = bool(values.pop("corrupt_teacher", False))
    if args.corrupt:
        corrupt = True
    num_seeds = int(values.pop("num_seeds", 1))
    if args.num_seeds is not None:
        num_seeds = args.num_seeds
    if num_seeds < 1:
        raise ConfigError("num_seeds must be >= 1")
    return TrainingConfig(**values), corrupt, num_seeds


def _config_digest(cfg: TrainingConfig, corrupt: bool, seeds: list[int]) -> str:
    canon = json.dumps({"config": cfg.to_dict(), "corrupt_teacher": corrupt,
                        "seeds": seeds}, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()


# --------------------------------------------------------------------------
# subcommands


def cmd_sinkhorn(args) -> int:
    cost = _read_matrix(args.cost)
    alpha_s = _read_vector(args.alpha_s)
    alpha_t = _read_vector(args.alpha_t)
    if alpha_s.size != cost.shape[0] or alpha_t.size != cost.shape[1]:
        raise ConfigError(
            f"dimension mismatch: cost is {cost.shape[0]}x{cost.shape[1]}, "
            f"weights are {alpha_s.size} and {alpha_t.size}")
    overrides = {}
    if args.epsilon is not None:
        overrides["epsilon"] = args.epsilon
    if args.tau is not None:
        overrides["tau"] = args.tau
    if args.max_iters is not None:
        overrides["max_iters"] = args.max_iters
    if args.tol is not None:
        overrides["tol"] = args.tol
    if args.no_anneal:
        overrides["anneal"] = False
    cfg = default_config(cost, **overrides)
    log.info("solving %dx%d instance, epsilon=%g tau=%g",
             cost.shape[0], cost.shape[1], cfg.epsilon, cfg.tau)
    plan = sinkhorn_unbalanced(cost, alpha_s, alpha_t, cfg)
    for row in plan.entries:
        print(",".join(repr(float(v)) for v in row))
    row_res, col_res = plan_residuals(plan, alpha_s, alpha_t)
    print(f"# row_residual {row_res!r}")
    print(f"# col_residual {col_res!r}")
    print(f"# iterations {plan.iterations}")
    print(f"# transport_cost {plan.transport_cost(cost)!r}")
    return EXIT_OK if plan.converged else EXIT_NUMERIC


def _seed_rows(task):
    condition, cfg, seed, teachers, corrupt = task
    report = run_experiment(condition, cfg, corrupt, seeds=[seed],
                            teachers=teachers)
    return report.rows[0], report.uncertainty.get(seed)


def cmd_experiment(args) -> int:
    cfg, corrupt, num_seeds = _experiment_settings(args)
    seeds = [cfg.seed + i for i in range(num_seeds)]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    reports = []
    diverged = None
    pool = None
    try:
        log.info("training %d-member teacher ensemble", cfg.ensemble_size)
        teachers = make_teacher_ensemble(cfg)
        tasks = [(condition, cfg, seed, teachers, corrupt)
                 for condition in CONDITIONS for seed in seeds]
        if args.jobs > 1:
            pool = multiprocessing.Pool(args.jobs)
            # imap, not map: rows finished before a divergence are kept.
            produced = pool.imap(_seed_rows, tasks)
        else:
            produced = map(_seed_rows, tasks)
        by_condition = {c: ExperimentReport(c, [], {}, tuple(cfg.corrupt_keypoints)
                                            if corrupt else ())
                        for c in CONDITIONS}
        for (condition, _, seed, _, _), (row, u) in zip(tasks, produced):
            rows.append(row)
            by_condition[condition].rows.append(row)
            if u is not None:
                by_condition[condition].uncertainty[seed] = u
        reports = [by_condition[c] for c in CONDITIONS]
    except TrainingDiverged as exc:
        diverged = exc
    finally:
        if pool is not None:
            pool.terminate()
            pool.join()

    write_report_csv(rows, out_dir / "report.csv")
    if reports:
        write_report_json(reports, cfg, seeds, out_dir / "summary.json")
    manifest = {"seeds": seeds, "config_sha256": _config_digest(cfg, corrupt, seeds),
                "version": __version__}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                      sort_keys=True) + "\n")
    if diverged is not None:
        print(f"error: {diverged}", file=sys.stderr)
        print(f"partial results in {out_dir}", file=sys.stderr)
        return EXIT_DIVERGED
    log.info("wrote %d rows to %s", len(rows), out_dir / "report.csv")
    return EXIT_OK


def _read_correspondences(path: str, cam: CameraIntrinsics) -> Correspondences:
    data = _read_matrix(path)
    if data.shape[1] not in (5, 6):
        raise ConfigError(
            f"{path}: expected 5 or 6 columns (u v X Y Z [w]), got {data.shape[1]}")
    if data.shape[0] < 6:
        raise ConfigError(
            f"{path}: need at least 6 correspondences, got {data.shape[0]}")
    weights = data[:, 5] if data.shape[1] == 6 else None
    return Correspondences(points2d=KeypointSet(data[:, :2]), points3d=data[:, 2:5],
                           cam=cam, weights=weights)


def cmd_pnp(args) -> int:
    cam_vals = _read_vector(args.cam)
    if cam_vals.size != 4:
        raise ConfigError(f"{args.cam}: expected fx,fy,cx,cy")
    cam = CameraIntrinsics(*cam_vals)
    corr = _read_correspondences(args.correspondences, cam)
    result = pnp_solve(corr)
    print("rotation: " + " ".join(repr(float(v))
                                  for v in result.pose.rotation.ravel()))
    print("translation: " + " ".join(repr(float(v))
                                     for v in result.pose.translation))
    print(f"reprojection_rms_px: {float(result.reprojection_rms)!r}")
    print(f"iterations: {result.iterations}")
    return EXIT_OK if result.converged else EXIT_NUMERIC


# --------------------------------------------------------------------------
# argument plumbing


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; 2 means numeric failure here, so
    remap flag/command mistakes onto the usage exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="otkd",
        description="optimal-transport keypoint distillation toolkit")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sink = sub.add_parser("sinkhorn", help="solve one transport instance")
    p_sink.add_argument("cost", help="cost matrix CSV (M rows x N cols)")
    p_sink.add_argument("alpha_s", help="row weights CSV (M values)")
    p_sink.add_argument("alpha_t", help="column weights CSV (N values)")
    p_sink.add_argument("--epsilon", type=float)
    p_sink.add_argument("--tau", type=float)
    p_sink.add_argument("--max-iters", type=int, dest="max_iters")
    p_sink.add_argument("--tol", type=float)
    p_sink.add_argument("--no-anneal", action="store_true")
    p_sink.set_defaults(func=cmd_sinkhorn)

    p_exp = sub.add_parser("experiment", help="run the distillation experiment")
    p_exp.add_argument("--config", help="key=value config file")
    p_exp.add_argument("--out", default="otkd-out", help="output directory")
    p_exp.add_argument("--seed", type=int)
    p_exp.add_argument("--jobs", type=int, default=1,
                       help="parallel worker processes over seeds")
    p_exp.add_argument("--num-seeds", type=int, dest="num_seeds")
    p_exp.add_argument("--corrupt", action="store_true",
                       help="corrupt one teacher member's keypoints")
    for name, field in _CONFIG_FIELDS.items():
        if name == "seed":
            continue
        flag = "--" + name.replace("_", "-")
        if name == "corrupt_keypoints":
            p_exp.add_argument(flag, dest=name, metavar="K,K,...")
        elif field.type in ("int", int):
            p_exp.add_argument(flag, type=int, dest=name)
        else:
            p_exp.add_argument(flag, type=float, dest=name)
    p_exp.set_defaults(func=cmd_experiment)

    p_pnp = sub.add_parser("pnp", help="solve a pose from correspondences")
    p_pnp.add_argument("correspondences", help="CSV rows: u v X Y Z [w]")
    p_pnp.add_argument("cam", help="CSV: fx fy cx cy")
    p_pnp.set_defaults(func=cmd_pnp)
    for p in (p_sink, p_exp, p_pnp):
        p.add_argument("--version", action="version",
                       version=f"otkd {__version__}")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("OTKD_LOG", "warning").upper(),
                      logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DegenerateConfiguration, PointBehindCamera) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OtkdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
