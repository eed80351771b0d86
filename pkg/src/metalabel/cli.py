"""Command-line entry point: dataset generation, training, gradient checks,
evaluation and sweeps, all driven by JSON config files.

Exit codes: 0 success, 1 runtime failure, 2 usage/validation error. Every
command is deterministic given its inputs and --seed; re-runs overwrite
byte-identical outputs apart from the summary timestamp and the wall-time
metrics column.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import itertools
import json
import os
import sys
import time


from . import gradcheck
from .data import load_dataset, save_dataset
from .harness import (
    ConfigError,
    METRICS_COLUMNS,
    TrainConfig,
    baseline_ce,
    build_dataset,
    evaluate,
    load_checkpoint,
    run_experiment,
    write_metrics_csv,
)

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def _load_config(path: str) -> TrainConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
    return TrainConfig.from_dict(raw)


def _apply_overrides(cfg: TrainConfig, args) -> TrainConfig:
    raw = cfg.to_dict()
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "unlabeled_fraction", None) is not None:
        raw["train"]["unlabeled_fraction"] = args.unlabeled_fraction
    return TrainConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args)
    ds = build_dataset(cfg)
    save_dataset(ds, args.out)
    print(f"wrote {ds.n} rows ({ds.dims} dims, {ds.n_classes} classes) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args)
    os.makedirs(args.out, exist_ok=True)
    if cfg.dataset_path is not None and not os.path.exists(cfg.dataset_path):
        raise ConfigError(f"dataset file not found: {cfg.dataset_path}")
    metrics_path = os.path.join(args.out, "metrics.csv")
    checkpoint_path = os.path.join(args.out, "checkpoint.json")

    fh = open(metrics_path, "w", newline="", encoding="utf-8")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    fh.flush()

    def on_epoch(row):
        writer.writerow([row.epoch, row.phase] + [
            repr(float(getattr(row, c))) for c in METRICS_COLUMNS[2:]])
        fh.flush()

    try:
        if args.resume:
            # keep already-logged epochs at the top of the metrics file
            st = load_checkpoint(checkpoint_path, cfg)
            for row in st["log"]:
                on_epoch(row)
        result = run_experiment(cfg, checkpoint_path=checkpoint_path,
                                resume=args.resume, on_epoch=on_epoch)
    finally:
        fh.close()

    summary = result.summary()
    summary["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    with open(os.path.join(args.out, "summary.json"), "w", encoding="utf-8") as out:
        json.dump(summary, out, indent=2, sort_keys=True)
        out.write("\n")
    if args.baseline:
        base = baseline_ce(cfg)
        write_metrics_csv(base.log, os.path.join(args.out, "baseline_metrics.csv"))
        with open(os.path.join(args.out, "baseline_summary.json"), "w",
                  encoding="utf-8") as out:
            json.dump(base.summary(), out, indent=2, sort_keys=True)
            out.write("\n")
    print(f"selected epoch {result.best_epoch}: "
          f"meta {result.best_meta_acc:.4f}, test {result.test_acc_selected:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    reports = gradcheck.run_all(trials=args.trials, seed=args.seed,
                                tolerance=args.tolerance,
                                corrupt_route=args.corrupt_route)
    for r in reports:
        print(r.line())
    failed = [r for r in reports if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(reports)} checks failed")
        return RUNTIME_ERROR
    print(f"all {len(reports)} checks passed")
    return 0


def cmd_eval(args) -> int:
    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    if not os.path.exists(args.dataset):
        raise ConfigError(f"dataset file not found: {args.dataset}")
    st = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    acc = evaluate(st["theta_best"], ds, args.split)
    print(f"{acc:.6f}")
    return 0


def _set_dotted(d: dict, key: str, value) -> None:
    # keys absent from the base are created; TrainConfig.from_dict rejects
    # anything outside the schema afterwards
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        if p in cur and not isinstance(cur[p], dict):
            raise ConfigError(f"sweep grid key {key!r} does not match the config layout")
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value


def _cell_id(overrides: list[tuple[str, object]]) -> str:
    parts = [f"{k}={json.dumps(v)}" for k, v in overrides]
    return "__".join(parts).replace("/", "_").replace(" ", "")


def _run_cell(base: dict, overrides: list[tuple[str, object]], out_dir: str) -> dict:
    raw = json.loads(json.dumps(base))
    for k, v in overrides:
        _set_dotted(raw, k, v)
    cfg = TrainConfig.from_dict(raw)
    cell = _cell_id(overrides)
    cell_dir = os.path.join(out_dir, cell)
    os.makedirs(cell_dir, exist_ok=True)
    result = run_experiment(cfg)
    write_metrics_csv(result.log, os.path.join(cell_dir, "metrics.csv"))
    summary = result.summary()
    with open(os.path.join(cell_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    record = {"cell_id": cell}
    record.update({k: v for k, v in overrides})
    record.update({k: summary[k] for k in
                   ("selected_epoch", "meta_accuracy", "test_accuracy",
                    "final_test_accuracy")})
    return record


def cmd_sweep(args) -> int:
    if not os.path.exists(args.config):
        raise ConfigError(f"config file not found: {args.config}")
    with open(args.config, encoding="utf-8") as fh:
        raw = json.load(fh)
    unknown = set(raw) - {"schema_version", "base", "grid", "cells"}
    if unknown:
        raise ConfigError(f"unknown sweep config keys: {sorted(unknown)}")
    if raw.get("schema_version") != 1:
        raise ConfigError("sweep config requires schema_version = 1")
    base = raw.get("base", {"schema_version": 1})
    TrainConfig.from_dict(base)  # validate the base eagerly
    grid = raw.get("grid")
    explicit = raw.get("cells")
    if (grid is None) == (explicit is None):
        raise ConfigError("sweep config needs exactly one of 'grid' or 'cells'")
    if grid is not None:
        if not isinstance(grid, dict) or not grid:
            raise ConfigError("sweep grid must be a non-empty object")
        keys = sorted(grid)
        cells = [list(zip(keys, combo))
                 for combo in itertools.product(*(grid[k] for k in keys))]
    else:
        if not isinstance(explicit, list) or not explicit:
            raise ConfigError("sweep cells must be a non-empty list of override objects")
        keys_seen: set[str] = set()
        cells = []
        for c in explicit:
            cells.append(sorted(c.items()))
            keys_seen.update(c)
        keys = sorted(keys_seen)
    os.makedirs(args.out, exist_ok=True)

    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            records = list(pool.map(_run_cell, [base] * len(cells), cells,
                                    [args.out] * len(cells)))
    else:
        records = [_run_cell(base, cell, args.out) for cell in cells]

    records.sort(key=lambda r: r["cell_id"])
    agg_path = os.path.join(args.out, "aggregate.csv")
    cols = ["cell_id"] + keys + ["selected_epoch", "meta_accuracy",
                                 "test_accuracy", "final_test_accuracy"]
    with open(agg_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for r in records:
            vals = [r.get(c, "") for c in cols]
            writer.writerow([repr(v) if isinstance(v, float) else v for v in vals])
    print(f"{len(records)} cells -> {agg_path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metalabel",
        description="Soft-label meta-training for noisy-label classification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a dataset file from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run a full training experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--unlabeled-fraction", dest="unlabeled_fraction", type=float,
                   default=None, help="override train.unlabeled_fraction")
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint in the output directory")
    p.add_argument("--baseline", action="store_true",
                   help="also run the plain cross-entropy baseline")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference and route-equivalence suites")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--corrupt-route", dest="corrupt_route", action="store_true",
                   help="deliberately skew the analytic route (negative control)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", help="accuracy of a checkpointed model on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=["train", "meta", "test"], default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run a grid of configs and aggregate results")
    p.add_argument("--config", required=True, help="sweep config (base + grid)")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as e:  # noqa: BLE001 - boundary of the process
        print(f"runtime failure: {e}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
