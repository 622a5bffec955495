"""Command-line front end.

Thin dispatch over the library: parse a JSON experiment config, run the
requested pipeline, write report JSON plus plot-ready CSV files.  Exit codes:
0 success, 2 config/validation problem, 3 runtime numerical failure.  Every
output file carries the config hash and seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from .models import (
    PartitionModel,
    build_regular_collection,
    check_assumptions,
    fit_least_squares,
)
from .risk import Sample
from .selection import write_path_csv
from .simulate import (
    RegressionSpec,
    compute_replicate_path,
    estimate_min_penalty,
    linear_dimension_shape,
    run_calibration_experiment,
    run_min_penalty_experiment,
    run_theorem1_experiment,
    run_theorem2_experiment,
    write_aggregates_csv,
    write_min_penalty_csv,
    write_replicates_csv,
    write_report_json,
)

DEFAULT_BUDGET = 50_000_000
EXPERIMENT_KINDS = ("theorem1", "theorem2", "calibrate", "minpen")


class ConfigError(ValueError):
    """Configuration file is missing, malformed, or inconsistent."""


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with p.open("r", encoding="utf-8") as fh:
            config = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    return config


def _require(config: dict, key: str, kind, predicate=None, what: str = ""):
    if key not in config:
        raise ConfigError(f"config is missing required key {key!r}")
    value = config[key]
    if kind is int and isinstance(value, bool):
        raise ConfigError(f"config key {key!r} must be an integer")
    if not isinstance(value, kind):
        raise ConfigError(f"config key {key!r} has the wrong type")
    if predicate is not None and not predicate(value):
        raise ConfigError(f"config key {key!r} is invalid: {what}")
    return value


def _validate(config: dict) -> dict:
    """Resolve and sanity-check a config; returns the effective config."""
    n = _require(config, "n", int, lambda v: v >= 4, "need n >= 4")
    replicates = _require(config, "replicates", int, lambda v: v >= 1, "need >= 1")
    seed = _require(config, "seed", int, lambda v: 0 <= v < 2**64, "need a 64-bit seed")
    budget = config.get("budget", DEFAULT_BUDGET)
    if not isinstance(budget, int) or budget < 1:
        raise ConfigError("config key 'budget' must be a positive integer")
    if n * replicates > budget:
        raise ConfigError(
            f"n * replicates = {n * replicates} exceeds the configured budget {budget}"
        )
    truth = _require(config, "truth", dict)
    try:
        RegressionSpec.from_config(truth)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid truth block: {exc}") from exc

    coll = _require(config, "collection", dict)
    degrees = coll.get("degrees")
    dyadic_max = coll.get("dyadic_max")
    if not isinstance(degrees, list) or not degrees or not all(
        isinstance(d, int) and d >= 0 for d in degrees
    ):
        raise ConfigError("collection.degrees must be a non-empty list of integers >= 0")
    if not isinstance(dyadic_max, int) or dyadic_max < 0:
        raise ConfigError("collection.dyadic_max must be a non-negative integer")
    if 2**dyadic_max * (max(degrees) + 1) > n:
        raise ConfigError(
            "collection violates the dimension bound (P2): "
            f"max dimension {2**dyadic_max * (max(degrees) + 1)} exceeds n={n}"
        )

    experiment = config.get("experiment", {})
    if not isinstance(experiment, dict):
        raise ConfigError("config key 'experiment' must be an object")
    kind = experiment.get("kind")
    if kind is not None and kind not in EXPERIMENT_KINDS:
        raise ConfigError(f"experiment.kind must be one of {EXPERIMENT_KINDS}")
    multiplier = experiment.get("multiplier")
    if multiplier is not None and not isinstance(multiplier, (int, float)):
        raise ConfigError("experiment.multiplier must be a number")
    if kind == "theorem1" and multiplier is not None and not 0 <= multiplier < 1:
        raise ConfigError("theorem1 multiplier must lie in [0, 1)")
    shape = experiment.get("shape", "oracle_mean_p2")
    if shape not in ("oracle_mean_p2", "linear_dimension"):
        raise ConfigError("experiment.shape must be oracle_mean_p2 or linear_dimension")
    method = experiment.get("method", "max_jump")
    if method not in ("max_jump", "threshold"):
        raise ConfigError("experiment.method must be max_jump or threshold")
    mp_reps = experiment.get("min_penalty_replicates", 300)
    if not isinstance(mp_reps, int) or mp_reps < 50:
        raise ConfigError("experiment.min_penalty_replicates must be an integer >= 50")
    if kind == "minpen" and replicates < 50:
        raise ConfigError("minimal-penalty estimation needs at least 50 replicates")
    grid_points = experiment.get("grid_points", 200)
    if not isinstance(grid_points, int) or grid_points < 16:
        raise ConfigError("experiment.grid_points must be an integer >= 16")
    return config


def _config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _build(config: dict):
    spec = RegressionSpec.from_config(config["truth"])
    coll_cfg = config["collection"]
    collection = build_regular_collection(
        config["n"], coll_cfg["degrees"], coll_cfg["dyadic_max"]
    )
    return spec, collection


def _error_record(code: int, exc: BaseException) -> str:
    return json.dumps(
        {"error": {"code": code, "type": type(exc).__name__, "message": str(exc)}},
        sort_keys=True,
    )


def _write(out_dir: Path, name: str, writer) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / name
    with target.open("w", encoding="utf-8", newline="") as fh:
        writer(fh)
    return target


def _run_experiment(config: dict, kind: str, out_dir: Path, threads: int) -> list:
    spec, collection = _build(config)
    n = config["n"]
    replicates = config["replicates"]
    seed = config["seed"]
    experiment = config.get("experiment", {})
    mp_reps = experiment.get("min_penalty_replicates", 300)
    dim_threshold = experiment.get("dim_threshold")
    cfg_hash = _config_hash(config)

    if kind == "theorem1":
        report = run_theorem1_experiment(
            spec, collection, n, replicates,
            float(experiment.get("multiplier", 0.5)), seed,
            min_penalty_replicates=mp_reps, dim_threshold=dim_threshold,
            threads=threads,
        )
    elif kind == "theorem2":
        report = run_theorem2_experiment(
            spec, collection, n, replicates,
            float(experiment.get("multiplier", 2.0)), seed,
            min_penalty_replicates=mp_reps, dim_threshold=dim_threshold,
            threads=threads,
        )
    elif kind == "calibrate":
        report = run_calibration_experiment(
            spec, collection, n, replicates,
            experiment.get("shape", "oracle_mean_p2"), seed,
            grid_points=experiment.get("grid_points", 200),
            method=experiment.get("method", "max_jump"),
            dim_threshold=dim_threshold,
            min_penalty_replicates=mp_reps,
            threads=threads,
        )
    elif kind == "minpen":
        report = run_min_penalty_experiment(spec, collection, n, replicates, seed, threads)
    else:
        raise ConfigError(f"config has no experiment.kind and none was given")

    written = [
        _write(out_dir, "report.json", lambda fh: write_report_json(report, fh, cfg_hash)),
        _write(out_dir, "replicates.csv", lambda fh: write_replicates_csv(report, fh, cfg_hash)),
        _write(out_dir, "aggregates.csv", lambda fh: write_aggregates_csv(report, fh, cfg_hash)),
    ]
    if kind == "minpen":
        written.append(
            _write(out_dir, "minpen.csv", lambda fh: write_min_penalty_csv(report, fh, cfg_hash))
        )
    if kind == "calibrate" and report.path0 is not None:
        provenance = f"schema_version=1 config_hash={cfg_hash} seed={seed} replicate=0"
        written.append(
            _write(out_dir, "path.csv", lambda fh: write_path_csv(report.path0, fh, provenance))
        )
    if config.get("check_assumptions", False):
        assumption_report = check_assumptions(collection, spec, n)
        payload = assumption_report.to_dict()
        payload["config_hash"] = cfg_hash
        payload["seed"] = seed
        written.append(
            _write(out_dir, "assumptions.json",
                   lambda fh: (json.dump(payload, fh, indent=2, sort_keys=True), fh.write("\n")))
        )
    return written


def _cmd_path(config: dict, out_dir: Path, replicate: int, threads: int) -> list:
    spec, collection = _build(config)
    n, seed = config["n"], config["seed"]
    experiment = config.get("experiment", {})
    shape_kind = experiment.get("shape", "oracle_mean_p2")
    if shape_kind == "linear_dimension":
        shape = linear_dimension_shape(collection, n)
    else:
        shape = estimate_min_penalty(
            spec, collection, n, experiment.get("min_penalty_replicates", 300),
            seed, threads,
        )
    path = compute_replicate_path(
        spec, collection, n, replicate, seed, shape,
        grid_points=experiment.get("grid_points", 200),
    )
    cfg_hash = _config_hash(config)
    provenance = f"schema_version=1 config_hash={cfg_hash} seed={seed} replicate={replicate}"
    return [_write(out_dir, "path.csv", lambda fh: write_path_csv(path, fh, provenance))]


def _read_sample_csv(path: str) -> Sample:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"sample file not found: {path}")
    xs, ys = [], []
    with p.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:2]] != ["x", "y"]:
            raise ConfigError("sample CSV must start with a header row 'x,y'")
        for row in reader:
            if not row or row[0].startswith("#"):
                continue
            try:
                xs.append(float(row[0]))
                ys.append(float(row[1]))
            except (ValueError, IndexError) as exc:
                raise ConfigError(f"bad sample row {row!r}: {exc}") from exc
    if not xs:
        raise ConfigError("sample CSV holds no data rows")
    try:
        return Sample(np.asarray(xs), np.asarray(ys))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _cmd_fit(args, out_dir: Path) -> list:
    sample = _read_sample_csv(args.sample)
    if args.breaks:
        try:
            breaks = np.asarray([float(v) for v in args.breaks.split(",")])
        except ValueError as exc:
            raise ConfigError(f"bad --breaks value: {exc}") from exc
    else:
        breaks = np.linspace(0.0, 1.0, args.cells + 1)
    try:
        model = PartitionModel(breaks, args.degree)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    fitted = fit_least_squares(model, sample)
    polys = fitted.cell_polynomials()
    pseudo = {
        "command": "fit",
        "sample": str(args.sample),
        "breaks": [float(b) for b in breaks],
        "degree": args.degree,
    }
    cfg_hash = _config_hash(pseudo)

    def writer(fh):
        fh.write(f"# schema_version=1 config_hash={cfg_hash} seed=none\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", "lower", "upper"] + [f"c{k}" for k in range(model.degree + 1)])
        for c in range(model.n_cells):
            row = [c, repr(float(model.breakpoints[c])), repr(float(model.breakpoints[c + 1]))]
            row += [repr(float(v)) for v in polys[c]]
            w.writerow(row)

    return [_write(out_dir, "coefficients.csv", writer)]


def _cmd_check(config: dict, out_dir: Path) -> list:
    spec, collection = _build(config)
    report = check_assumptions(collection, spec, config["n"])
    payload = report.to_dict()
    payload["config_hash"] = _config_hash(config)
    payload["seed"] = config["seed"]
    return [
        _write(out_dir, "assumptions.json",
               lambda fh: (json.dump(payload, fh, indent=2, sort_keys=True), fh.write("\n")))
    ]


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slopesel",
        description="Penalized least-squares model selection experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to a JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=1,
                       help="worker processes; never affects results")

    for name in ("run", "theorem1", "theorem2", "calibrate", "minpen", "check"):
        common(sub.add_parser(name))
    p_path = sub.add_parser("path")
    common(p_path)
    p_path.add_argument("--replicate", type=int, default=0)

    p_fit = sub.add_parser("fit")
    p_fit.add_argument("--sample", required=True, help="CSV file with header x,y")
    p_fit.add_argument("--cells", type=int, default=1)
    p_fit.add_argument("--breaks", default=None,
                       help="comma-separated breakpoints overriding --cells")
    p_fit.add_argument("--degree", type=int, default=0)
    p_fit.add_argument("--out", default=None)
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    out_dir = Path(args.out) if args.out else Path(".")

    try:
        if args.command == "fit":
            written = _cmd_fit(args, out_dir)
        else:
            config = _load_config(args.config)
            if args.seed is not None:
                config["seed"] = args.seed
            if args.out is None and config.get("out"):
                out_dir = Path(config["out"])
            if args.command in EXPERIMENT_KINDS:
                config.setdefault("experiment", {})["kind"] = args.command
            config = _validate(config)
            threads = max(1, args.threads)
            if args.command == "check":
                written = _cmd_check(config, out_dir)
            elif args.command == "path":
                written = _cmd_path(config, out_dir, args.replicate, threads)
            else:
                kind = config.get("experiment", {}).get("kind")
                if kind is None:
                    raise ConfigError("config.experiment.kind is required for 'run'")
                written = _run_experiment(config, kind, out_dir, threads)
    except ConfigError as exc:
        print(_error_record(2, exc), file=sys.stderr)
        return 2
    except Exception as exc:  # numerical/runtime failures
        print(_error_record(3, exc), file=sys.stderr)
        return 3

    for path in written:
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
