"""End-to-end acceptance checks, one test per criterion.

Each test records its outcome through ``record_criterion`` before asserting,
so the terminal summary prints one PASS/FAIL line per criterion. The default
scale runs (criteria 4 to 7) take roughly 30 minutes on one CPU core.
"""

from __future__ import annotations

import hashlib
import math
import re
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from mumae import cli
from mumae.config import RunConfig, dump_config
from mumae.embedding import Layout
from mumae.masking import make_plan
from mumae.model import init_params
from mumae.numerics import RngStream
from mumae.oneshot import classify_value, evaluate
from mumae.pipeline import eval_stage, finetune_stage, pretrain_stage, synthetic_split
from mumae.store import parse_metrics

SEEDS = (0, 1, 2)
RATIOS = (0.0, 0.5, 0.75, 0.85, 0.95, 1.0)
MASK_TALLY: dict[str, int] = {"trials": 0, "failures": 0}


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# 1. Gradient integrity
# ---------------------------------------------------------------------------

def test_criterion_1_gradcheck(capsys, record_criterion):
    start = time.perf_counter()
    code = cli.main(["gradcheck"])
    elapsed = time.perf_counter() - start
    out = capsys.readouterr().out
    errors = {m[0]: float(m[1]) for m in re.findall(r"^(\w+)\s+max_rel_err=(\S+)", out, re.M)}
    worst = max(errors.values())
    required = {"tubelet_embed", "sensor_embed", "encoder_block", "decoder",
                "cross_attention_head", "fusion_stack", "cosine_softmax_loss"}
    covered = required <= set(errors)
    ok = code == 0 and worst < 1e-4 and elapsed < 60 and covered
    record_criterion(1, ok, f"{len(errors)} components, max rel err {worst:.2e}, {elapsed:.1f}s")
    assert covered, sorted(errors)
    assert code == 0 and worst < 1e-4, out
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 2. Masking invariants
# ---------------------------------------------------------------------------

def _expected_count(ratio: float, population: int) -> int:
    # Round half up, exactly, via rational arithmetic.
    return math.floor(Fraction(str(ratio)) * population + Fraction(1, 2))


@pytest.mark.parametrize("layout", ["default", "large"])
def test_criterion_2_masking(layout, record_criterion):
    if layout == "default":
        lay = Layout.from_config(RunConfig())
        grid, sensors = lay.video_grid, list(lay.sensor_tokens)
    else:
        grid, sensors = (4, 7, 9), [37] * 3
    failures = 0
    trials = 0
    for strategy in ("synchronized", "random"):
        for ratio in RATIOS:
            for seed in range(200):
                plan = make_plan(grid, sensors, strategy, ratio, ratio,
                                 RngStream(seed, "mask").generator(0))
                trials += 1
                m = plan.video.masked
                tube = all(np.array_equal(m[t], m[0]) for t in range(m.shape[0]))
                spatial = grid[1] * grid[2]
                video_count = int(m[0].sum()) == _expected_count(ratio, spatial)
                sensor_count = all(
                    len(s.masked_time_indices) == _expected_count(ratio, s.num_time_tokens)
                    for s in plan.sensors
                )
                synced = True
                if strategy == "synchronized":
                    first = plan.sensors[0].masked_time_indices
                    synced = all(np.array_equal(s.masked_time_indices, first) for s in plan.sensors)
                failures += not (tube and video_count and sensor_count and synced)
    MASK_TALLY["trials"] += trials
    MASK_TALLY["failures"] += failures
    record_criterion(2, MASK_TALLY["failures"] == 0,
                     f"{MASK_TALLY['trials']} mask plans, {MASK_TALLY['failures']} failures")
    assert failures == 0


# ---------------------------------------------------------------------------
# 3. Classifier oracle equivalence
# ---------------------------------------------------------------------------

def _direct_probabilities(query, supports) -> list[float]:
    def norm(v):
        return math.sqrt(math.fsum(x * x for x in v))

    dist = [1.0 - math.fsum(a * b for a, b in zip(query, s)) / (norm(query) * norm(s)) for s in supports]
    weights = [math.exp(-d) for d in dist]
    total = math.fsum(weights)
    return [w / total for w in weights]


def test_criterion_3_classifier_oracle(record_criterion):
    worst, sum_err, argmax_bad = 0.0, 0.0, 0
    for trial in range(1000):
        rng = np.random.default_rng(trial)
        c, d, q = int(rng.integers(2, 11)), int(rng.integers(2, 65)), int(rng.integers(1, 5))
        queries = rng.standard_normal((q, d)) * rng.uniform(0.01, 100)
        supports = rng.standard_normal((c, d)) * rng.uniform(0.01, 100)
        got = classify_value(queries, supports)
        for i in range(q):
            want = _direct_probabilities(queries[i].tolist(), supports.tolist())
            worst = max(worst, float(np.max(np.abs(got[i] - want))))
            sum_err = max(sum_err, abs(float(got[i].sum()) - 1.0))
            cos = [1.0 - float(queries[i] @ s) / (np.linalg.norm(queries[i]) * np.linalg.norm(s))
                   for s in supports]
            argmax_bad += int(np.argmax(got[i]) != int(np.argmin(cos)))
    ok = worst <= 1e-10 and sum_err <= 1e-12 and argmax_bad == 0
    record_criterion(3, ok, f"max |p - direct| {worst:.1e}, max |sum - 1| {sum_err:.1e}, "
                            f"argmax mismatches {argmax_bad}")
    assert worst <= 1e-10
    assert sum_err <= 1e-12
    assert argmax_bad == 0


# ---------------------------------------------------------------------------
# 4, 5. Pretraining efficacy and cross-attention contribution
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def seed_runs():
    """Per seed: pretrained and scratch arms with cross fusion, plus a pretrained concat arm."""
    runs = {}
    efficacy_seconds = 0.0
    for seed in SEEDS:
        cfg = RunConfig()
        cfg.seed = seed
        train, test, _ = synthetic_split(cfg)
        start = time.perf_counter()
        pre, curve = pretrain_stage(cfg, train)
        params, _ = finetune_stage(cfg, train, pre)
        full = eval_stage(cfg, test, params)
        scratch_cfg = cfg.copy()
        scratch_cfg.finetune.from_scratch = True
        params, _ = finetune_stage(scratch_cfg, train)
        scratch = eval_stage(scratch_cfg, test, params)
        efficacy_seconds += time.perf_counter() - start
        concat_cfg = cfg.copy()
        concat_cfg.fusion.mode = "concat"
        params, _ = finetune_stage(concat_cfg, train, pre)
        no_cross = eval_stage(concat_cfg, test, params)
        runs[seed] = {"full": full.mean, "scratch": scratch.mean, "no_cross": no_cross.mean,
                      "curve": curve}
    runs["efficacy_seconds"] = efficacy_seconds
    return runs


def test_criterion_4_pretraining_efficacy(seed_runs, record_criterion):
    wins = [seed_runs[s]["full"] >= 0.70 and seed_runs[s]["full"] - seed_runs[s]["scratch"] >= 0.10
            for s in SEEDS]
    minutes = seed_runs["efficacy_seconds"] / 60
    arms = ", ".join(f"seed {s}: {seed_runs[s]['full']:.3f} vs scratch {seed_runs[s]['scratch']:.3f}"
                     for s in SEEDS)
    ok = sum(wins) >= 2 and minutes < 45
    record_criterion(4, ok, f"{arms}; {minutes:.1f} min")
    assert minutes < 45
    assert sum(wins) >= 2, arms


def test_criterion_5_cross_attention_contribution(seed_runs, record_criterion):
    full = float(np.mean([seed_runs[s]["full"] for s in SEEDS]))
    no_cross = float(np.mean([seed_runs[s]["no_cross"] for s in SEEDS]))
    record_criterion(5, no_cross <= full, f"no-cross mean {no_cross:.3f} vs full mean {full:.3f}")
    assert no_cross <= full


# ---------------------------------------------------------------------------
# 6. Synchronized-masking leakage probe
# ---------------------------------------------------------------------------

def test_criterion_6_leakage_probe(record_criterion):
    finals = {}
    for seed in SEEDS:
        for strategy in ("random", "synchronized"):
            cfg = RunConfig()
            cfg.seed = seed
            cfg.data.redundancy = 1.0
            cfg.data.noise_sigma = 0.0
            cfg.mask.strategy = strategy
            train, _, _ = synthetic_split(cfg)
            finals[seed, strategy] = pretrain_stage(cfg, train)[1][-1]
    lower = [finals[s, "random"] < finals[s, "synchronized"] for s in SEEDS]
    detail = ", ".join(f"seed {s}: random {finals[s, 'random']:.4f} vs sync {finals[s, 'synchronized']:.4f}"
                       for s in SEEDS)
    record_criterion(6, sum(lower) >= 2, detail)
    assert sum(lower) >= 2, detail


# ---------------------------------------------------------------------------
# 7. Chance-level sanity
# ---------------------------------------------------------------------------

def test_criterion_7_untrained_is_chance(record_criterion):
    cfg = RunConfig()
    _, test, _ = synthetic_split(cfg)
    report = evaluate(init_params(cfg), test, cfg, episodes=500)
    ok = 0.14 <= report.mean <= 0.26
    record_criterion(7, ok, f"untrained accuracy {report.mean:.3f} over {report.episodes} episodes")
    assert ok


# ---------------------------------------------------------------------------
# 8, 9. Reproducibility and harness completeness (reduced budgets, default geometry)
# ---------------------------------------------------------------------------

def _small_config(path: Path) -> Path:
    cfg = RunConfig()
    for key, value in {"data.samples_per_class": "6", "pretrain.epochs": "2", "pretrain.batch_size": "8",
                       "finetune.episodes": "20", "eval.episodes": "20"}.items():
        cfg.set(key, value)
    path.write_text(dump_config(cfg), encoding="utf-8")
    return path


def _run_all(root: Path, cfg: Path) -> list[Path]:
    data = root / "data"
    base = ["--config", str(cfg), "--data", str(data)]
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
    assert cli.main(["pretrain", *base, "--out", str(root / "pre.ck")]) == 0
    assert cli.main(["finetune", *base, "--checkpoint", str(root / "pre.ck"), "--out", str(root / "ft.ck")]) == 0
    assert cli.main(["finetune", *base, "--from-scratch", "--no-cross", "--out", str(root / "sc.ck")]) == 0
    assert cli.main(["eval", *base, "--checkpoint", str(root / "ft.ck"), "--out", str(root / "ft.eval")]) == 0
    assert cli.main(["ablate", *base, "--preset", "mask-ablation", "--out", str(root / "t3")]) == 0
    assert cli.main(["ablate", *base, "--preset", "pretrain-fusion", "--out", str(root / "t2")]) == 0
    return sorted(p for p in root.rglob("*") if p.is_file())


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    cfg = _small_config(root / "small.cfg")
    a = _run_all(root / "a", cfg)
    b = _run_all(root / "b", cfg)
    return root / "a", root / "b", a, b


def test_criterion_8_byte_identical_reruns(two_runs, record_criterion):
    root_a, root_b, files_a, files_b = two_runs
    rel_a = [p.relative_to(root_a) for p in files_a]
    rel_b = [p.relative_to(root_b) for p in files_b]
    differing = [str(r) for r in rel_a if r in rel_b and _sha(root_a / r) != _sha(root_b / r)]
    ok = rel_a == rel_b and not differing
    record_criterion(8, ok, f"{len(rel_a)} files compared, {len(differing)} differ")
    assert rel_a == rel_b
    assert not differing, differing


def test_criterion_9_ablation_harness(two_runs, record_criterion):
    root = two_runs[0]
    t3 = [line.split() for line in (root / "t3" / "table.txt").read_text().splitlines()[2:]]
    t2 = [line.split() for line in (root / "t2" / "table.txt").read_text().splitlines()[2:]]
    t3_rows = [row[:2] for row in t3]
    t2_rows = {tuple(row[:2]) for row in t2}
    failed = [row for row in t3 + t2 if "FAILED" in row]
    metrics = len(parse_metrics(root / "t3" / "metrics.txt")) + len(parse_metrics(root / "t2" / "metrics.txt"))
    ok = (
        t3_rows == [["random", "0.85"], ["synchronized", "0.75"], ["synchronized", "0.85"],
                    ["synchronized", "0.95"]]
        and t2_rows == {(p, f) for p in ("on", "scratch") for f in ("cross", "no-cross")}
        and not failed and metrics == 8
    )
    record_criterion(9, ok, f"mask-ablation rows {len(t3)}, pretrain-fusion cells {len(t2)}, failed {len(failed)}, "
                            f"metric records {metrics}")
    assert t3_rows == [["random", "0.85"], ["synchronized", "0.75"], ["synchronized", "0.85"],
                       ["synchronized", "0.95"]]
    assert t2_rows == {(p, f) for p in ("on", "scratch") for f in ("cross", "no-cross")}
    assert not failed
    assert metrics == 8
