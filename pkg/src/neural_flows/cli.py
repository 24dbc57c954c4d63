"""Command-line harness.

    neural-flows gen     --config CFG [--seed N] --out DIR
    neural-flows train   --config CFG [--seed N] --out DIR
    neural-flows eval    --config CFG --model model.json [--split test] --out DIR
    neural-flows bench   --config A --config B [...] [--parallel N] --out DIR
    neural-flows tpp     --config CFG --out DIR
    neural-flows density --config CFG --out DIR

Exit codes: 0 success, 1 runtime failure, 2 validation error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import data as D
from . import serialize
from .config import ConfigError, ExperimentConfig
from .density import TimeVaryingCNF, cnf_log_prob, coupling_log_prob, grid_density
from .training import (
    DENSITY_TIMES,
    REPORT_COLUMNS,
    TrainingError,
    environment_stamp,
    evaluate,
    make_dataset,
    train,
)

METRICS_VERSION = 1
BENCH_VERSION = 1
BENCH_COLUMNS = (
    "bench_version",
    "name",
    "config_hash",
    "experiment",
    "model",
    "status",
    "n_parameters",
    "epochs",
    "last_epoch_seconds",
    "mean_epoch_seconds",
    "train_seconds",
    "solver_evals_per_epoch",
    "test_metric",
    "speedup_vs_first",
    "error",
)
GRID_COLUMNS = ("x", "y", "t", "density")


class UsageError(ValueError):
    pass


def _load_config(args, path=None):
    cfg = ExperimentConfig.load(path or args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_report(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_metrics(path, cfg, metrics, extra=None):
    doc = {
        "schema_version": METRICS_VERSION,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "environment": environment_stamp(),
        "metrics": metrics,
    }
    doc.update(extra or {})
    Path(path).write_text(json.dumps(doc, indent=2, default=float))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args):
    cfg = _load_config(args)
    out = _out(args)
    ds = make_dataset(cfg)
    if cfg.experiment in ("trajectory", "stiff"):
        text = D.trajectories_to_csv(ds)
        D.save_trajectories_binary(ds, out / "dataset.bin")
        n_series = sum(sp.n for sp in ds.splits.values())
    elif cfg.experiment == "tpp":
        text = D.events_to_csv(ds)
        D.save_events_binary(ds, out / "dataset.bin")
        n_series = len(ds.sequences)
        rate = sum(len(s) for s in ds.sequences) / sum(s[-1] for s in ds.sequences)
        print(f"empirical rate {rate:.4f} events per unit time")
        print(f"ground-truth NLL per event {ds.ground_truth_nll():.4f}")
    else:
        raw = D.gen_density2d(cfg.n_samples, cfg.seed)
        text = D.density_to_csv(raw)
        n_series = len(raw.samples)
    (out / "dataset.csv").write_text(text)
    n_rows = text.count("\n") - 1
    print(f"{cfg.dataset}: {n_series} series, {n_rows} rows, sha256 {D.checksum(text)}")
    return 0


def _train_and_write(cfg, out, log=True):
    def show(row):
        if log:
            print(
                f"epoch {row['epoch']:4d}  train {row['train_loss']:.6g}  val {row['val_loss']:.6g}  "
                f"{row['epoch_seconds']:.2f}s",
                flush=True,
            )

    result = train(cfg, log=show)
    write_report(out / "report.csv", result.rows)
    write_metrics(out / "metrics.json", cfg, result.metrics)
    serialize.save(result.model, out / "model.json", metadata={"config": cfg.to_dict(), "config_hash": cfg.hash()})
    return result


def cmd_train(args, expect=None):
    cfg = _load_config(args)
    if expect and cfg.experiment != expect:
        raise ConfigError(f"field 'experiment' must be {expect!r} for this subcommand, got {cfg.experiment!r}")
    out = _out(args)
    result = _train_and_write(cfg, out)
    print(json.dumps({k: v for k, v in result.metrics.items() if not isinstance(v, str)}, default=float))
    return result


def cmd_train_only(args):
    cmd_train(args)
    return 0


def cmd_tpp(args):
    cmd_train(args, expect="tpp")
    return 0


def cmd_density(args):
    result = cmd_train(args, expect="density")
    out = Path(args.out)
    model = result.model
    fn = (lambda p, t: cnf_log_prob(model, p, t)) if isinstance(model, TimeVaryingCNF) else (
        lambda p, t: coupling_log_prob(model, p, t)
    )
    with open(out / "grid_density.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_COLUMNS)
        for t in DENSITY_TIMES:
            pts, dens, _ = grid_density(fn, t, n=args.grid)
            for (x, y), d in zip(pts, dens):
                w.writerow([f"{x:.6f}", f"{y:.6f}", t, f"{d:.8g}"])
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    out = _out(args)
    model = serialize.load(args.model)
    dataset = make_dataset(cfg)
    if args.data:
        if cfg.experiment in ("trajectory", "stiff"):
            dataset = D.load_trajectories_binary(args.data)
        elif cfg.experiment == "tpp":
            dataset = D.load_events_binary(args.data)
    if cfg.experiment in ("trajectory", "stiff") and model.dim != dataset.dim:
        raise UsageError(f"model dimension {model.dim} does not match dataset dimension {dataset.dim}")
    loss = evaluate(model, cfg, dataset, args.split)
    key = "mse" if cfg.experiment in ("trajectory", "stiff") else "nll"
    metrics = {"split": args.split, key: loss}
    write_metrics(out / "metrics.json", cfg, metrics)
    print(json.dumps(metrics))
    return 0


def _bench_one(path, seed):
    cfg = ExperimentConfig.load(path)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    row = {"bench_version": BENCH_VERSION, "name": cfg.name or Path(path).stem, "config_hash": cfg.hash(),
           "experiment": cfg.experiment, "model": cfg.model}
    try:
        result = train(cfg)
    except Exception as e:  # noqa: BLE001 - every failure becomes a row
        row.update(status="failed", error=f"{type(e).__name__}: {e}")
        return row, None
    epochs = [r for r in result.rows if r["epoch"] > 0]
    test_key = "test_mse" if cfg.experiment in ("trajectory", "stiff") else "test_nll"
    row.update(
        status="ok",
        n_parameters=result.model.num_parameters() if hasattr(result.model, "num_parameters") else "",
        epochs=len(epochs),
        last_epoch_seconds=epochs[-1]["epoch_seconds"] if epochs else 0.0,
        mean_epoch_seconds=float(np.mean([r["epoch_seconds"] for r in epochs])) if epochs else 0.0,
        train_seconds=epochs[-1]["wall_seconds"] if epochs else 0.0,
        solver_evals_per_epoch=float(np.mean([r["solver_evals"] for r in epochs])) if epochs else 0.0,
        test_metric=result.metrics.get(test_key),
        error="",
    )
    return row, result.rows


def cmd_bench(args):
    if len(args.config) < 2:
        raise UsageError("bench needs >= 2 configs")
    for p in args.config:
        ExperimentConfig.load(p)  # validate everything before running anything
    out = _out(args)
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_bench_one, args.config, [args.seed] * len(args.config)))
    else:
        results = [_bench_one(p, args.seed) for p in args.config]
    rows = [r for r, _ in results]
    ref = rows[0].get("mean_epoch_seconds") if rows[0]["status"] == "ok" else None
    for r in rows:
        t = r.get("mean_epoch_seconds")
        r["speedup_vs_first"] = ref / t if ref and t else ""
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in BENCH_COLUMNS})
    doc = {"schema_version": BENCH_VERSION, "environment": environment_stamp(), "rows": rows,
           "epochs": {r["name"]: e for r, (_, e) in zip(rows, results)}}
    (out / "bench.json").write_text(json.dumps(doc, indent=2, default=float))
    for r in rows:
        if r["status"] == "ok":
            print(f"{r['name']:>24s}  ok      epoch {r['mean_epoch_seconds']:.3f}s  speedup {r['speedup_vs_first'] or 0:.2f}")
        else:
            print(f"{r['name']:>24s}  failed  {r['error']}")
    return 0 if all(r["status"] == "ok" for r in rows) else 1


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="neural-flows", description="Neural flow benchmark harness")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, multi=False):
        if multi:
            sp.add_argument("--config", action="append", required=True, help="config JSON (repeatable)")
        else:
            sp.add_argument("--config", required=True, help="config JSON")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--parallel", type=int, default=1, help="worker processes (bench only)")
        return sp

    common(sub.add_parser("gen", help="generate a dataset"))
    common(sub.add_parser("train", help="train one model"))
    ev = common(sub.add_parser("eval", help="evaluate a saved model"))
    ev.add_argument("--model", required=True, help="model.json written by train")
    ev.add_argument("--split", default="test", choices=D.SPLITS)
    ev.add_argument("--data", default=None, help="binary dataset written by gen (default: regenerate)")
    common(sub.add_parser("bench", help="compare several configs"), multi=True)
    common(sub.add_parser("tpp", help="train a temporal point process model"))
    dn = common(sub.add_parser("density", help="train a density model and write grid densities"))
    dn.add_argument("--grid", type=int, default=400, help="grid points per axis")
    return p


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train_only,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "tpp": cmd_tpp,
    "density": cmd_density,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    try:
        return COMMANDS[args.command](args) or 0
    except (ConfigError, UsageError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        traceback.print_exc()
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
