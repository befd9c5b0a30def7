"""Command line entry points: gen-data, train, sweep, report.

Thread capping must happen before numpy first loads its BLAS, so this
module reads TAPAS_THREADS and sets the usual BLAS environment knobs at
import time, ahead of any numpy-importing module.
"""

from __future__ import annotations

import os


def _cap_threads() -> None:
    """Propagate TAPAS_THREADS to BLAS thread knobs not already set."""
    count = os.environ.get("TAPAS_THREADS")
    if not count:
        return
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
    ):
        os.environ.setdefault(var, count)


_cap_threads()

import argparse
import csv
import sys
import zlib
from pathlib import Path

from . import __version__
from .config import (
    ConfigError,
    ExperimentConfig,
    build_experiment,
    load_config_file,
    merge,
    parse_config_text,
    parse_grid,
    parse_seeds,
    resolve_preset,
)
from .data_synth import Dataset, gen_linear_dataset, gen_nonlinear_dataset, load, save
from .metrics import MetricSeries, moving_average
from .model import save_model
from .train import run_training


def _resolved_config(args) -> dict[str, str]:
    layers = []
    if args.preset:
        layers.append(resolve_preset(args.preset))
    if getattr(args, "config", None):
        layers.append(load_config_file(args.config))
    if args.overrides:
        layers.append(parse_config_text("\n".join(args.overrides)))
    if not layers:
        raise ConfigError("give --preset, --config, or key=value overrides")
    return merge(*layers)


def _make_datasets(exp: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if exp.data_kind == "files":
        return load(exp.train_path), load(exp.test_path)
    if exp.data_kind == "linear":
        train_ds, _ = gen_linear_dataset(exp.data_spec, exp.train_count, part="train")
        test_ds, _ = gen_linear_dataset(exp.data_spec, exp.test_count, part="test")
    else:
        train_ds = gen_nonlinear_dataset(exp.data_spec, exp.train_count, part="train")
        test_ds = gen_nonlinear_dataset(exp.data_spec, exp.test_count, part="test")
    return train_ds, test_ds


def _file_crc32(path) -> str:
    crc = 0
    with open(path, "rb") as fh:
        while True:
            chunk = fh.read(1 << 20)
            if not chunk:
                break
            crc = zlib.crc32(chunk, crc)
    return f"{crc:08x}"


def _write_run_dir(out: Path, cfg: dict[str, str], result, seed: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{key} = {cfg[key]}" for key in sorted(cfg)]
    (out / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    result.series.save_jsonl(out / "metrics.jsonl")
    save_model(out / "checkpoint.bin", result.encoder, result.embeddings)
    provenance = f"tapas {__version__} seed={seed} config=config.txt\n"
    (out / "provenance.txt").write_text(provenance, encoding="utf-8")


def _final_metrics_line(series: MetricSeries) -> str:
    record = series.records[-1]
    parts = [f"step={record.step}"]
    for key in sorted(record.values):
        parts.append(f"{key}={record.values[key]:.6g}")
    return "final " + " ".join(parts)


def _run_one(cfg: dict[str, str], datasets=None):
    exp = build_experiment(cfg)
    if datasets is None:
        datasets = _make_datasets(exp)
    train_ds, test_ds = datasets
    result = run_training(
        exp.train, exp.model, exp.tapas, train_ds, test_ds, shards_m=exp.shards_m
    )
    return exp, result, datasets


def _cmd_gen_data(args) -> int:
    cfg = _resolved_config(args)
    exp = build_experiment(cfg)
    if exp.data_kind == "files":
        raise ConfigError("gen-data needs a synthetic data spec, not data.*_path")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = _make_datasets(exp)
    for name, ds in (("train", train_ds), ("test", test_ds)):
        path = out / f"{name}.bin"
        save(ds, path)
        print(
            f"wrote {path} classes={ds.n_classes} dim={ds.dim} "
            f"count={ds.count} crc32={_file_crc32(path)}"
        )
    return 0


def _cmd_train(args) -> int:
    cfg = _resolved_config(args)
    cfg.pop("sweep.grid", None)
    cfg.pop("sweep.seeds", None)
    exp, result, _ = _run_one(cfg)
    if args.out:
        _write_run_dir(Path(args.out), cfg, result, exp.train.seed)
    print(_final_metrics_line(result.series))
    return 0


def _point_dir_name(point: dict[str, str], seed: int) -> str:
    parts = [f"{key.split('.')[-1]}{value}" for key, value in point.items()]
    parts.append(f"seed{seed}")
    return "_".join(parts)


def _cmd_sweep(args) -> int:
    cfg = _resolved_config(args)
    grid_spec = cfg.pop("sweep.grid", None)
    if grid_spec is None:
        raise ConfigError("sweep needs a sweep.grid key")
    seeds = parse_seeds(cfg.pop("sweep.seeds", "0"))
    points = parse_grid(grid_spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    plan = []
    for point in points:
        for seed in seeds:
            run_dir = out / _point_dir_name(point, seed)
            if run_dir.exists():
                raise ConfigError(f"run directory already exists: {run_dir}")
            plan.append((point, seed, run_dir))

    rows = []
    datasets = None
    last_data_keys = None
    for point, seed, run_dir in plan:
        run_cfg = merge(cfg, point, {"train.seed": str(seed)})
        data_keys = tuple(
            (key, run_cfg[key]) for key in sorted(run_cfg) if key.startswith("data.")
        )
        if data_keys != last_data_keys:
            datasets = None
            last_data_keys = data_keys
        _, result, datasets = _run_one(run_cfg, datasets)
        _write_run_dir(run_dir, run_cfg, result, seed)
        record = result.series.records[-1]
        row = {"run": run_dir.name, "seed": seed}
        row.update(point)
        row["final_step"] = record.step
        for key in sorted(record.values):
            row[f"final_{key}"] = record.values[key]
        rows.append(row)
        print(f"run {run_dir.name}: {_final_metrics_line(result.series)}")

    columns = ["run", "seed"]
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {out / 'summary.csv'} ({len(rows)} runs)")
    return 0


def _cmd_report(args) -> int:
    series = MetricSeries.load_jsonl(Path(args.run) / "metrics.jsonl")
    kept = [rec for rec in series.records if rec.step >= args.truncate_steps]
    if not kept:
        raise ConfigError(
            f"no records at step >= {args.truncate_steps} in {args.run}"
        )
    missing = [rec.step for rec in kept if args.metric not in rec.values]
    if missing:
        raise ConfigError(f"metric {args.metric!r} missing at steps {missing[:5]}")
    raw = [rec.values[args.metric] for rec in kept]
    smooth = moving_average(raw, args.window)
    lines = [f"step,{args.metric},{args.metric}_smoothed"]
    for rec, value, smoothed in zip(kept, raw, smooth):
        lines.append(f"{rec.step},{value:.10g},{smoothed:.10g}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out} ({len(kept)} rows)")
    else:
        sys.stdout.write(text)
    return 0


def _add_config_args(sub, with_out: bool) -> None:
    sub.add_argument("--preset", help="named preset to start from")
    sub.add_argument("--config", help="key=value config file")
    if with_out:
        sub.add_argument("--out", help="run directory to write")
    sub.add_argument(
        "overrides", nargs="*", metavar="key=value", help="config overrides"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tapas",
        description="Adaptive negative sampling experiments on synthetic benchmarks",
    )
    parser.add_argument("--version", action="version", version=f"tapas {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write synthetic train/test dataset files")
    gen.add_argument("--preset", help="named preset to start from")
    gen.add_argument("--config", help="key=value config file")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("overrides", nargs="*", metavar="key=value")
    gen.set_defaults(func=_cmd_gen_data)

    train = sub.add_parser("train", help="run one training job")
    _add_config_args(train, with_out=True)
    train.set_defaults(func=_cmd_train)

    sweep = sub.add_parser("sweep", help="run a grid of training jobs")
    sweep.add_argument("--preset", help="named preset to start from")
    sweep.add_argument("--config", help="key=value config file")
    sweep.add_argument("--out", required=True, help="sweep output directory")
    sweep.add_argument("overrides", nargs="*", metavar="key=value")
    sweep.set_defaults(func=_cmd_sweep)

    report = sub.add_parser("report", help="turn run metrics into a CSV table")
    report.add_argument("--run", required=True, help="run directory with metrics.jsonl")
    report.add_argument("--metric", default="p_at_1")
    report.add_argument("--window", type=int, default=20, help="moving average window")
    report.add_argument(
        "--truncate-steps",
        type=int,
        default=0,
        help="drop records before this step (smoothing happens after)",
    )
    report.add_argument("--out", help="CSV path, stdout when omitted")
    report.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
