"""Command-line entry point: data collection, experiment sweeps, and reports.

Configs are JSON documents (see harness.ExperimentConfig.to_dict for the
schema); any field can be overridden on the command line with repeated
``--set dotted.key=value`` flags. Exit codes: 0 success, 1 experiment failure,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .harness import (
    ExperimentConfig,
    collect_excitation_data,
    default_config,
    grid_search,
    preprocess_for_plant,
    run_closed_loop,
    run_sweep,
    write_report,
)
from .trajectory_data import (
    Dataset,
    build_data_matrices,
    is_persistently_exciting,
    min_singular_value,
)

logger = logging.getLogger("deepc_sampling")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deepc-sampling",
        description="Data-driven predictive control experiments with contextual trajectory selection",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", type=Path, default=None,
                       help="JSON experiment config; defaults to the built-in config for --plant")
        p.add_argument("--plant", choices=("vehicle", "quadrotor", "lti"), default="vehicle",
                       help="plant preset when no config file is given")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted-key config override (repeatable)")
        p.add_argument("--seeds", type=int, default=None,
                       help="replace the seed list with range(N)")
        if needs_out:
            p.add_argument("--out", type=Path, required=True, help="output directory")

    p_collect = sub.add_parser("collect", help="record an excitation dataset")
    common(p_collect)

    p_run = sub.add_parser("run", help="one closed-loop run")
    common(p_run)
    p_run.add_argument("--dataset", type=Path, default=None,
                       help="dataset directory (defaults to <out>/dataset)")
    p_run.add_argument("--strategy", choices=("contextual", "random", "full"),
                       default="contextual")
    p_run.add_argument("--n-samples", type=int, default=None)
    p_run.add_argument("--seed", type=int, default=0)

    p_sweep = sub.add_parser("sweep", help="full strategies x n_s x seeds grid")
    common(p_sweep)
    p_sweep.add_argument("--dataset", type=Path, default=None)
    p_sweep.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p_sweep.add_argument("--force", action="store_true", help="overwrite an existing sweep")

    p_report = sub.add_parser("report", help="emit plot-ready CSVs from a sweep")
    p_report.add_argument("runs_dir", type=Path, help="directory containing summary.csv and runs/")

    p_grid = sub.add_parser("gridsearch", help="coarse regularization grid search")
    common(p_grid)
    p_grid.add_argument("--dataset", type=Path, default=None)
    p_grid.add_argument("--lambda-g", type=float, nargs="+", default=(1e-2, 1e-1, 1.0, 10.0))
    p_grid.add_argument("--lambda-sigma", type=float, nargs="+", default=(1.0, 100.0, 1000.0))
    return parser


def load_config(args) -> ExperimentConfig:
    if args.config is not None:
        if not args.config.exists():
            raise CliError(f"config file not found: {args.config}")
        try:
            raw = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"{args.config}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})")
        config_dict = raw
    else:
        config_dict = default_config(args.plant).to_dict()
    for item in args.overrides:
        if "=" not in item:
            raise CliError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        _apply_override(config_dict, key.strip(), value.strip())
    try:
        config = ExperimentConfig.from_dict(config_dict)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}")
    if args.seeds is not None:
        config = replace(config, seeds=tuple(range(args.seeds)))
    return config


def _apply_override(config_dict: dict, dotted: str, value: str) -> None:
    node = config_dict
    keys = dotted.split(".")
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            raise CliError(f"override path {dotted!r}: {key!r} is not a config section")
        node = node[key]
    if keys[-1] not in node and keys[-1] not in ("strategy",):
        raise CliError(f"override path {dotted!r}: unknown key {keys[-1]!r}")
    try:
        node[keys[-1]] = json.loads(value)
    except json.JSONDecodeError:
        node[keys[-1]] = value  # bare strings allowed


def _dataset_dir(args) -> Path:
    if getattr(args, "dataset", None):
        return args.dataset
    return args.out / "dataset"


def _load_dataset(path: Path) -> Dataset:
    if not (path / "manifest.json").exists():
        raise CliError(f"no dataset at {path}; run `deepc-sampling collect` first")
    return Dataset.load(path)


def cmd_collect(args) -> int:
    config = load_config(args)
    dataset = collect_excitation_data(config)
    out = args.out / "dataset"
    dataset.save(out)
    traj = dataset.trajectories[0]
    order = config.controller.t_ini + config.controller.horizon + 4
    pe_ok = is_persistently_exciting(traj.inputs, order)
    pre = preprocess_for_plant(config, dataset)
    from .deepc_controller import align_window_columns
    matrices = align_window_columns(
        build_data_matrices(pre, config.controller.t_ini, config.controller.horizon), pre)
    sigma = min_singular_value(matrices)
    print(f"collected {traj.length} samples ({traj.length * config.sample_period:.0f} s) -> {out}")
    print(f"persistency of excitation at order {order}: {'PASS' if pe_ok else 'FAIL'}")
    print(f"normalized data-matrix sigma_min: {sigma:.6g} over {matrices.column_count} columns")
    manifest = {"config": config.to_dict(), "pe_order": order, "pe_ok": bool(pe_ok),
                "sigma_min": sigma, "columns": matrices.column_count}
    (args.out / "collect_manifest.json").write_text(json.dumps(manifest, indent=2))
    return EXIT_OK


def cmd_run(args) -> int:
    config = load_config(args)
    dataset = _load_dataset(_dataset_dir(args))
    record = run_closed_loop(config, dataset, args.strategy, args.n_samples, args.seed)
    out = args.out / "runs"
    out.mkdir(parents=True, exist_ok=True)
    name = harness.cell_name(config, args.strategy,
                             None if args.strategy == "full" else record.n_samples, args.seed)
    record.save_csv(out / f"{name}.csv")
    print(f"{name}: terminal={record.terminal_status} steps={record.step_count} "
          f"median_e={float(np.median(record.errors)):.4f} "
          f"p99_ms={harness.nearest_rank_percentile(record.solve_ms, 99):.2f}")
    return EXIT_OK if record.terminal_status == "completed" else EXIT_FAILURE


def cmd_sweep(args) -> int:
    config = load_config(args)
    dataset_dir = _dataset_dir(args)
    dataset = _load_dataset(dataset_dir)
    try:
        summary = run_sweep(config, dataset, args.out, jobs=args.jobs, force=args.force,
                            dataset_path=dataset_dir)
    except FileExistsError as exc:
        raise CliError(f"{exc} (use --force)")
    print(summary.to_string(index=False))
    ok = harness.sweep_completed(args.out)
    if not ok:
        print("some cells did not complete; see manifest.json", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAILURE


def cmd_report(args) -> int:
    try:
        paths = write_report(args.runs_dir)
    except FileNotFoundError as exc:
        raise CliError(str(exc), code=EXIT_USAGE)
    for key, value in paths.items():
        print(f"{key}: {value}")
    try:
        import deepc_plots
    except ImportError:
        print("deepc_plots not installed; skipping figure rendering")
        return EXIT_OK
    rendered = deepc_plots.render_all(args.runs_dir, args.runs_dir)
    for path in rendered:
        print(f"figure: {path}")
    return EXIT_OK


def cmd_gridsearch(args) -> int:
    config = load_config(args)
    dataset = _load_dataset(_dataset_dir(args))
    table = grid_search(config, dataset, lambda_g_values=tuple(args.lambda_g),
                        lambda_sigma_values=tuple(args.lambda_sigma))
    args.out.mkdir(parents=True, exist_ok=True)
    out_path = args.out / "gridsearch.csv"
    harness._atomic_write(out_path, table.to_csv(index=False))
    print(table.to_string(index=False))
    print(f"written: {out_path}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {
        "collect": cmd_collect,
        "run": cmd_run,
        "sweep": cmd_sweep,
        "report": cmd_report,
        "gridsearch": cmd_gridsearch,
    }
    try:
        return handlers[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # experiment-level failure
        logger.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
