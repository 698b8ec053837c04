"""Command-line harness: gen-data, pretrain, finetune, eval, ablate, gradcheck.

Exit codes: 0 success, 1 other failure, 2 config error, 3 missing data,
4 checkpoint error.
"""

from __future__ import annotations

import argparse
import shutil
import sys
import time
import warnings
from pathlib import Path

from . import pipeline
from .config import ConfigError, RunConfig, load_config, validate
from .gradcheck import build_cases, run_suite
from .store import (
    CheckpointError,
    DatasetDir,
    MetricsWriter,
    MissingDataError,
    load_checkpoint,
    save_checkpoint,
    write_bytes_atomic,
    write_dataset,
)
from .synthdata import DatasetSpec, class_split, generate_dataset

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3, 4


class UsageError(Exception):
    """Missing or contradictory command-line arguments."""


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    for item in args.set or []:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg.set(key.strip(), value.strip())
    if args.seed is not None:
        if args.command == "gen-data":
            cfg.set("data.seed", args.seed)
        else:
            cfg.set("seed", args.seed)
    if getattr(args, "episodes", None) is not None:
        if args.command == "finetune":
            cfg.set("finetune.episodes", args.episodes)
        else:
            cfg.set("eval.episodes", args.episodes)
    if getattr(args, "from_scratch", False):
        cfg.set("finetune.from_scratch", True)
    if getattr(args, "no_cross", False):
        cfg.set("fusion.mode", "concat")
    validate(cfg)
    return cfg


def _need(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


def _open_data(args) -> DatasetDir:
    return DatasetDir.open(_need(args.data, "--data"))


def _metrics_path(args, default: Path) -> Path:
    return Path(args.metrics) if args.metrics else default


def _check_data_matches(cfg: RunConfig, data: DatasetDir) -> None:
    if data.spec != DatasetSpec.from_config(cfg.data):
        raise ConfigError("data.*: config does not match the dataset manifest (regenerate or fix the config)")


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(_need(args.out, "--out"))
    if out.exists() and any(out.iterdir()):
        if not args.force:
            print(f"refusing to overwrite non-empty directory {out} (use --force)", file=sys.stderr)
            return EXIT_FAIL
        shutil.rmtree(out)
    spec = DatasetSpec.from_config(cfg.data)
    split = class_split(cfg.data.num_classes, cfg.data.num_test_classes, cfg.data.seed)
    text = write_dataset(out, generate_dataset(spec), spec, split)
    n = sum(1 for line in text.splitlines() if line.startswith("sample ="))
    print(f"wrote {n} samples to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    data = _open_data(args)
    _check_data_matches(cfg, data)
    out = Path(_need(args.out, "--out"))
    metrics = MetricsWriter(_metrics_path(args, out.with_suffix(".metrics")), cfg.digest(), cfg.metrics.wallclock)
    params, curve = pipeline.pretrain_stage(cfg, data.load("meta_train"), metrics)
    save_checkpoint(out, params, cfg, "pretrain")
    last = f"{curve[-1]:.6f}" if curve else "n/a"
    print(f"pretrained {len(curve)} epochs, final loss {last}; checkpoint {out}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args)
    data = _open_data(args)
    _check_data_matches(cfg, data)
    if len(data.split.meta_train) < 2:
        print(f"dataset split has {len(data.split.meta_train)} meta-train classes; need >= 2", file=sys.stderr)
        return EXIT_FAIL
    params = None
    if not cfg.finetune.from_scratch:
        params = load_checkpoint(_need(args.checkpoint, "--checkpoint (or --from-scratch)")).params
    out = Path(_need(args.out, "--out"))
    metrics = MetricsWriter(_metrics_path(args, out.with_suffix(".metrics")), cfg.digest(), cfg.metrics.wallclock)
    params, history = pipeline.finetune_stage(cfg, data.load("meta_train"), params, metrics)
    save_checkpoint(out, params, cfg, "finetune")
    tail = history[-200:]
    acc = sum(r.accuracy for r in tail) / len(tail) if tail else float("nan")
    print(f"finetuned {len(history)} episodes, recent train accuracy {acc:.4f}; checkpoint {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    data = _open_data(args)
    _check_data_matches(cfg, data)
    ck_path = Path(_need(args.checkpoint, "--checkpoint"))
    params = load_checkpoint(ck_path).params
    default = Path(args.out) if args.out else ck_path.with_suffix(".eval.metrics")
    metrics = MetricsWriter(_metrics_path(args, default), cfg.digest(), cfg.metrics.wallclock)
    report = pipeline.eval_stage(cfg, data.load("meta_test"), params, metrics)
    print(report.summary())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    data = _open_data(args)
    _check_data_matches(cfg, data)
    if args.sweep:
        try:
            text = Path(args.sweep).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read sweep file {args.sweep}: {exc.strerror}") from None
    else:
        text = f"preset = {args.preset or 'mask-ablation'}\n"
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        cells = pipeline.parse_sweep(text)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    out = Path(_need(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    train, test = data.load("meta_train"), data.load("meta_test")
    results = pipeline.run_ablation(cfg, train, test, cells, args.workers, out / "cells")
    table = pipeline.format_table(results)
    write_bytes_atomic(out / "table.txt", table.encode("utf-8"))
    pipeline.write_ablation_metrics(out / "metrics.txt", cfg, results)
    print(table, end="")
    for r in results:
        if not r.ok:
            print(f"cell {dict(r.cell.settings)} FAILED: {r.error}", file=sys.stderr)
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    failed = []
    results = run_suite(args.only)
    if args.only and len(results) != len(set(args.only)):
        known = [c.name for c in build_cases()]
        raise UsageError(f"unknown component in --only {args.only}; known: {', '.join(known)}")
    for name, report in results:
        status = "ok" if report.passed else "FAIL"
        print(f"{name:<22} max_rel_err={report.max_rel_err:.3e} worst={report.worst} {status}")
        if not report.passed:
            failed.append(name)
    print(f"gradcheck finished in {time.perf_counter() - start:.1f}s")
    if failed:
        print("failed components: " + ", ".join(failed), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mumae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "gradcheck":
            p.add_argument("--only", action="append", metavar="COMPONENT", help="check only this component")
            continue
        p.add_argument("--config", help="flat 'key = value' config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, help="run seed (data.seed for gen-data)")
        p.add_argument("--out", help="output path or directory")
        if name != "gen-data":
            p.add_argument("--data", help="dataset directory written by gen-data")
            p.add_argument("--metrics", help="metrics file (default derived from --out)")
        if name == "gen-data":
            p.add_argument("--force", action="store_true", help="replace a non-empty output directory")
        if name in ("finetune", "eval"):
            p.add_argument("--checkpoint", help="input checkpoint")
            p.add_argument("--episodes", type=int, help="number of finetune / eval episodes")
        if name in ("finetune", "eval", "ablate"):
            p.add_argument("--from-scratch", action="store_true", help="random init instead of pretraining")
            p.add_argument("--no-cross", action="store_true", help="concatenation fusion instead of cross attention")
        if name == "ablate":
            p.add_argument("--sweep", help="sweep definition file")
            p.add_argument("--preset", choices=sorted(pipeline.PRESETS), help="built-in sweep")
            p.add_argument("--workers", type=int, default=1, help="cells run in parallel")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingDataError as exc:
        print(f"missing data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
