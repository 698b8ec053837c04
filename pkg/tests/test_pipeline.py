from __future__ import annotations

import numpy as np
import pytest

from mumae import pipeline
from mumae.config import ConfigError, RunConfig
from mumae.gradcheck import tiny_config
from mumae.oneshot import EvalReport
from mumae.pipeline import (
    PRESETS,
    Cell,
    CellResult,
    format_table,
    merge_params,
    parse_sweep,
    run_ablation,
    stored,
    synthetic_split,
)
from mumae.store import CheckpointError, parse_metrics


def test_stored_rounds_through_float32():
    out = stored({"w": np.array([0.1, 1 / 3])})
    np.testing.assert_array_equal(out["w"], np.float32([0.1, 1 / 3]).astype(np.float64))
    assert out["w"].dtype == np.float64


def test_merge_params_keeps_fresh_extras_and_rejects_shape_mismatch():
    cfg = tiny_config()
    fresh = merge_params(cfg, {})
    name = next(iter(fresh))
    loaded = {name: np.full(fresh[name].shape, 7.0), "unused.key": np.zeros(3)}
    merged = merge_params(cfg, loaded)
    assert (merged[name] == 7.0).all() and "unused.key" not in merged
    with pytest.raises(CheckpointError, match=name):
        merge_params(cfg, {name: np.zeros(fresh[name].size + 1)})


# ---------------------------------------------------------------------------
# Sweep files
# ---------------------------------------------------------------------------

def test_axis_grid_varies_first_axis_slowest():
    cells = parse_sweep("axis mask.strategy = random, synchronized\naxis mask.ratio = 0.5, 0.9\n")
    got = [(c.get("mask.strategy"), c.get("mask.ratio")) for c in cells]
    assert got == [("random", "0.5"), ("random", "0.9"), ("synchronized", "0.5"), ("synchronized", "0.9")]


def test_explicit_cells_follow_grid_and_comments_ignored():
    text = "# a sweep\naxis mask.ratio = 0.5\n\ncell = mask.ratio=0.75, seed=3  # extra\n"
    cells = parse_sweep(text)
    assert [c.settings for c in cells] == [
        (("mask.ratio", "0.5"),),
        (("mask.ratio", "0.75"), ("seed", "3")),
    ]


def test_duplicates_dropped_with_warning_regardless_of_key_order():
    text = "cell = mask.ratio=0.5, seed=1\ncell = seed=1, mask.ratio=0.5\n"
    with pytest.warns(UserWarning, match="duplicate"):
        cells = parse_sweep(text)
    assert len(cells) == 1


@pytest.mark.parametrize(
    "text, message",
    [
        ("grid mask.ratio = 0.5", "unknown directive"),
        ("axis mask.ratio", "expected '='"),
        ("axis mask.ratio = ,", "no values"),
        ("preset = table9", "unknown preset"),
    ],
)
def test_bad_sweep_lines(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_sweep(text)


def test_mask_ablation_preset_rows_in_order():
    cells = parse_sweep("preset = mask-ablation\n")
    got = [(c.get("mask.strategy"), c.get("mask.ratio")) for c in cells]
    assert got == [("random", "0.85"), ("synchronized", "0.75"), ("synchronized", "0.85"),
                   ("synchronized", "0.95")]


def test_pretrain_fusion_preset_is_full_two_by_two_grid():
    cfgs = [c.apply(RunConfig()) for c in PRESETS["pretrain-fusion"]]
    grid = {(c.finetune.from_scratch, c.fusion.mode) for c in cfgs}
    assert grid == {(s, m) for s in (False, True) for m in ("cross", "concat")}


def test_cell_apply_validates_and_rejects_unknown_alias_value():
    with pytest.raises(ConfigError, match="mask.ratio"):
        Cell((("mask.ratio", "1.5"),)).apply(RunConfig())
    with pytest.raises(ConfigError, match="pretraining"):
        Cell((("pretraining", "maybe"),)).apply(RunConfig())
    base = RunConfig()
    Cell((("mask.ratio", "0.5"),)).apply(base)
    assert base.mask.ratio == RunConfig().mask.ratio


# ---------------------------------------------------------------------------
# Tables and ablation runs
# ---------------------------------------------------------------------------

def test_format_table_columns_and_failed_rows():
    ok = CellResult(Cell((("mask.strategy", "random"), ("mask.ratio", "0.85"))),
                    EvalReport.from_accuracies([1.0, 0.5]))
    bad = CellResult(Cell((("mask.strategy", "synchronized"),)), None, "boom")
    lines = format_table([ok, bad]).splitlines()
    assert lines[0].split() == ["strategy", "ratio", "accuracy", "sd"]
    assert set(lines[1]) <= {"-", " "}
    assert lines[2].split() == ["random", "0.85", "0.7500", f"{np.std([1, 0.5], ddof=1):.4f}"]
    assert lines[3].split() == ["synchronized", "-", "FAILED", "-"]


def _tiny_run_config() -> RunConfig:
    return tiny_config(**{
        "data.num_classes": 6, "data.num_test_classes": 2, "data.samples_per_class": 3,
        "pretrain.epochs": 1, "pretrain.batch_size": 4, "finetune.episodes": 2, "eval.episodes": 3,
    })


def test_ablation_shares_pretraining_and_isolates_failures(tmp_path, monkeypatch):
    base = _tiny_run_config()
    train, test, _ = synthetic_split(base)
    calls = []
    real = pipeline.pretrain_stage

    def counting(cfg, data, metrics=None):
        calls.append(cfg.mask.ratio)
        return real(cfg, data, metrics)

    monkeypatch.setattr(pipeline, "pretrain_stage", counting)
    cells = [
        Cell((("fusion", "cross"),)),
        Cell((("fusion", "no-cross"),)),
        Cell((("pretraining", "scratch"),)),
        Cell((("mask.ratio", "2"),)),
    ]
    results = run_ablation(base, train, test, cells, cell_dir=tmp_path)
    assert len(calls) == 1
    assert [r.ok for r in results] == [True, True, True, False]
    assert "mask.ratio" in results[3].error
    assert len(parse_metrics(tmp_path / "cell00.metrics")) > 0
    assert not (tmp_path / "cell03.metrics").exists()


def test_ablation_is_reproducible():
    base = _tiny_run_config()
    train, test, _ = synthetic_split(base)
    cells = parse_sweep("axis mask.strategy = random, synchronized\n")
    a = run_ablation(base, train, test, cells)
    b = run_ablation(base, train, test, cells)
    assert [r.report for r in a] == [r.report for r in b]
