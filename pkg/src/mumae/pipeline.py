"""Pretrain / finetune / evaluate stages and the ablation sweep runner.

Parameters leave every stage rounded to float32, exactly as a checkpoint
would store them, so an in-memory run and a run chained through checkpoint
files produce the same numbers.
"""

from __future__ import annotations

import itertools
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, RunConfig, validate
from .mae import pretrain
from .model import init_params
from .oneshot import EvalReport, evaluate, finetune
from .store import CheckpointError, MetricsWriter
from .synthdata import ClassSplit, DatasetSpec, class_split, generate_dataset


def stored(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.astype(np.float32).astype(np.float64) for k, v in params.items()}


def merge_params(cfg: RunConfig, loaded: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Fresh parameters for ``cfg`` overwritten by any loaded array of the same name."""
    params = init_params(cfg)
    for k, v in loaded.items():
        if k in params and params[k].shape != v.shape:
            raise CheckpointError(f"{k}: checkpoint shape {v.shape} != model shape {params[k].shape}")
    params.update({k: v for k, v in loaded.items() if k in params})
    return params


def split_samples(samples, split: ClassSplit):
    train = [s for s in samples if s.label in split.meta_train]
    test = [s for s in samples if s.label in split.meta_test]
    return train, test


def synthetic_split(cfg: RunConfig):
    """Generate the configured dataset in memory; returns (meta-train, meta-test, split)."""
    spec = DatasetSpec.from_config(cfg.data)
    split = class_split(cfg.data.num_classes, cfg.data.num_test_classes, cfg.data.seed)
    train, test = split_samples(generate_dataset(spec), split)
    return train, test, split


def pretrain_stage(cfg: RunConfig, train, metrics: MetricsWriter | None = None):
    def on_epoch(epoch: int, loss: float) -> None:
        if metrics is not None:
            metrics.record("pretrain", epoch, loss=loss)

    params, curve = pretrain(train, cfg, init_params(cfg), on_epoch)
    return stored(params), curve


def finetune_stage(cfg: RunConfig, train, params=None, metrics: MetricsWriter | None = None):
    classes = sorted({s.label for s in train})
    if len(classes) < 2:
        raise ValueError(f"finetuning needs at least 2 meta-train classes, got {len(classes)}")
    if cfg.finetune.from_scratch or params is None:
        params = init_params(cfg)
    else:
        params = merge_params(cfg, params)

    def on_episode(rec) -> None:
        if metrics is not None:
            metrics.record(
                "finetune", rec.episode, loss=rec.loss, accuracy=rec.accuracy, clamped=rec.clamped
            )

    params, history = finetune(params, train, cfg, classes, on_episode)
    return stored(params), history


def eval_stage(cfg: RunConfig, test, params, metrics: MetricsWriter | None = None) -> EvalReport:
    report = evaluate(merge_params(cfg, params), test, cfg)
    if metrics is not None:
        for i, acc in enumerate(report.per_episode):
            metrics.record("eval", i, accuracy=acc)
        metrics.record(
            "eval", report.episodes, mean=report.mean, sd=report.sd, ci95=report.ci95,
            sd_defined=report.sd_defined,
        )
    return report


# ---------------------------------------------------------------------------
# Ablation sweeps
# ---------------------------------------------------------------------------

# Axis names that are not plain config keys.
AXIS_ALIASES = {
    "pretraining": {"on": ("finetune.from_scratch", "false"), "scratch": ("finetune.from_scratch", "true")},
    "fusion": {"cross": ("fusion.mode", "cross"), "no-cross": ("fusion.mode", "concat")},
}

COLUMN_NAMES = {"mask.strategy": "strategy", "mask.ratio": "ratio", "fusion.scaling": "scaling"}


@dataclass(frozen=True)
class Cell:
    settings: tuple[tuple[str, str], ...]

    def get(self, key: str, default: str = "") -> str:
        return dict(self.settings).get(key, default)

    def apply(self, base: RunConfig) -> RunConfig:
        cfg = base.copy()
        for key, value in self.settings:
            if key in AXIS_ALIASES:
                if value not in AXIS_ALIASES[key]:
                    raise ConfigError(f"{key}: expected one of {sorted(AXIS_ALIASES[key])}, got {value!r}")
                real, val = AXIS_ALIASES[key][value]
                cfg.set(real, val)
            else:
                cfg.set(key, value)
        validate(cfg)
        return cfg

    def canonical(self) -> tuple[tuple[str, str], ...]:
        return tuple(sorted(self.settings))


PRESETS: dict[str, list[Cell]] = {
    "mask-ablation": [
        Cell((("mask.strategy", "random"), ("mask.ratio", "0.85"))),
        Cell((("mask.strategy", "synchronized"), ("mask.ratio", "0.75"))),
        Cell((("mask.strategy", "synchronized"), ("mask.ratio", "0.85"))),
        Cell((("mask.strategy", "synchronized"), ("mask.ratio", "0.95"))),
    ],
    "pretrain-fusion": [
        Cell((("pretraining", "on"), ("fusion", "cross"))),
        Cell((("pretraining", "on"), ("fusion", "no-cross"))),
        Cell((("pretraining", "scratch"), ("fusion", "cross"))),
        Cell((("pretraining", "scratch"), ("fusion", "no-cross"))),
    ],
}


def _pairs(text: str, lineno: int) -> tuple[tuple[str, str], ...]:
    out = []
    for item in text.split(","):
        key, eq, value = item.partition("=")
        if not eq or not key.strip() or not value.strip():
            raise ConfigError(f"sweep line {lineno}: expected 'key=value' items, got {item.strip()!r}")
        out.append((key.strip(), value.strip()))
    return tuple(out)


def parse_sweep(text: str) -> list[Cell]:
    """Sweep file: ``axis KEY = v1, v2`` lines form a grid; ``cell = k=v, k=v`` lines add single cells.

    Grid cells come first (axes vary slowest-first in file order), explicit
    cells follow in file order. Duplicates are dropped with a warning.
    """
    axes: list[tuple[str, list[str]]] = []
    explicit: list[Cell] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        head, eq, rest = line.partition("=")
        head = head.strip()
        if not eq:
            raise ConfigError(f"sweep line {lineno}: expected '=' in {line!r}")
        if head.startswith("axis "):
            values = [v.strip() for v in rest.split(",") if v.strip()]
            if not values:
                raise ConfigError(f"sweep line {lineno}: axis has no values")
            axes.append((head[5:].strip(), values))
        elif head == "cell":
            explicit.append(Cell(_pairs(rest, lineno)))
        elif head == "preset":
            name = rest.strip()
            if name not in PRESETS:
                raise ConfigError(f"sweep line {lineno}: unknown preset {name!r}")
            explicit.extend(PRESETS[name])
        else:
            raise ConfigError(f"sweep line {lineno}: unknown directive {head!r}")
    cells = []
    if axes:
        keys = [k for k, _ in axes]
        for combo in itertools.product(*(v for _, v in axes)):
            cells.append(Cell(tuple(zip(keys, combo))))
    return dedupe(cells + explicit)


def dedupe(cells: Sequence[Cell]) -> list[Cell]:
    seen, out = set(), []
    for c in cells:
        key = c.canonical()
        if key in seen:
            warnings.warn(f"duplicate sweep cell {dict(c.settings)} ignored", stacklevel=2)
            continue
        seen.add(key)
        out.append(c)
    return out


@dataclass
class CellResult:
    cell: Cell
    report: EvalReport | None
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.report is not None


def _pretrain_key(cfg: RunConfig) -> tuple:
    flat = cfg.flat()
    return tuple(
        (k, v) for k, v in flat.items()
        if k == "seed" or k.startswith(("data.", "embed.", "encoder.", "decoder.", "mask.", "pretrain."))
    )


def run_ablation(
    base: RunConfig, train, test, cells: Sequence[Cell], workers: int = 1, cell_dir: Path | None = None
) -> list[CellResult]:
    """Run pretrain (if on) + finetune + eval for every cell.

    Cells that would pretrain identically share one pretraining run.
    """
    configs: list[RunConfig | None] = []
    errors: list[str] = []
    for c in cells:
        try:
            configs.append(c.apply(base))
            errors.append("")
        except ConfigError as exc:
            configs.append(None)
            errors.append(str(exc))

    jobs: dict[tuple, RunConfig] = {}
    for cfg in configs:
        if cfg is not None and not cfg.finetune.from_scratch:
            jobs.setdefault(_pretrain_key(cfg), cfg)

    def do_pretrain(item):
        key, cfg = item
        try:
            return key, pretrain_stage(cfg, train)[0]
        except Exception as exc:  # reported per cell below
            return key, exc

    def do_cell(i: int) -> CellResult:
        cfg = configs[i]
        if cfg is None:
            return CellResult(cells[i], None, errors[i])
        try:
            params = None
            if not cfg.finetune.from_scratch:
                params = pretrained[_pretrain_key(cfg)]
                if isinstance(params, Exception):
                    raise params
            metrics = None
            if cell_dir is not None:
                metrics = MetricsWriter(cell_dir / f"cell{i:02d}.metrics", cfg.digest(), cfg.metrics.wallclock)
            params, _ = finetune_stage(cfg, train, params, metrics)
            return CellResult(cells[i], eval_stage(cfg, test, params, metrics))
        except Exception as exc:
            return CellResult(cells[i], None, f"{type(exc).__name__}: {exc}")

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        pretrained = dict(pool.map(do_pretrain, jobs.items()))
        return list(pool.map(do_cell, range(len(cells))))


def table_columns(cells: Sequence[Cell]) -> list[str]:
    cols: list[str] = []
    for c in cells:
        for k, _ in c.settings:
            if k not in cols:
                cols.append(k)
    return cols


def format_table(results: Sequence[CellResult]) -> str:
    keys = table_columns([r.cell for r in results])
    header = [COLUMN_NAMES.get(k, k) for k in keys] + ["accuracy", "sd"]
    rows = []
    for r in results:
        row = [r.cell.get(k, "-") for k in keys]
        if r.ok:
            row += [f"{r.report.mean:.4f}", f"{r.report.sd:.4f}"]
        else:
            row += ["FAILED", "-"]
        rows.append(row)
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in rows]
    return "\n".join(lines) + "\n"


def write_ablation_metrics(path: Path, base: RunConfig, results: Sequence[CellResult]) -> None:
    writer = MetricsWriter(path, base.digest(), base.metrics.wallclock)
    for i, r in enumerate(results):
        fields = {COLUMN_NAMES.get(k, k).replace(".", "_"): v for k, v in r.cell.settings}
        if r.ok:
            fields.update(status="ok", accuracy=r.report.mean, sd=r.report.sd, ci95=r.report.ci95)
        else:
            fields.update(status="FAILED")
        writer.record("eval", i, **fields)
