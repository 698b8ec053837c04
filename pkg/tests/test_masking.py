from __future__ import annotations

from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mumae.embedding import TokenSequence
from mumae.masking import (
    apply_mask,
    make_plan,
    masked_count,
    random_mask,
    round_half_up,
    synchronized_mask,
    tube_mask,
)
from mumae.numerics import RngStream, const

RATIOS = [0.0, 0.5, 0.75, 0.85, 0.95, 1.0]


def _rng(seed: int) -> np.random.Generator:
    return RngStream(seed, "mask").generator(0)


# ---------------------------------------------------------------------------
# Rounding
# ---------------------------------------------------------------------------

@pytest.mark.parametrize(
    "ratio, population, expected",
    [(0.85, 20, 17), (0.5, 4, 2), (0.75, 16, 12), (0.5, 5, 3), (0.85, 10, 9), (0.95, 10, 10), (0.0, 7, 0)],
)
def test_masked_count_rounds_half_up(ratio, population, expected):
    assert masked_count(ratio, population) == expected


def test_round_half_up_ties_go_up():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 2.4999)] == [1, 2, 3, 2]


@pytest.mark.parametrize("ratio", [-0.1, 1.01])
def test_ratio_out_of_range_rejected(ratio):
    with pytest.raises(ValueError):
        masked_count(ratio, 10)


@given(population=st.integers(0, 500), a=st.sampled_from(RATIOS), b=st.sampled_from(RATIOS))
def test_masked_count_monotone_in_ratio(population, a, b):
    lo, hi = sorted((a, b))
    assert masked_count(lo, population) <= masked_count(hi, population) <= population


# ---------------------------------------------------------------------------
# Tube masking
# ---------------------------------------------------------------------------

def test_tube_mask_2x4x4_at_075():
    m = tube_mask((2, 4, 4), 0.75, _rng(0))
    assert m.masked[0].sum() == 12
    assert m.masked.sum() == 24
    assert len(m.masked_indices()) + len(m.visible_indices()) == 32


def test_tube_mask_extremes():
    assert tube_mask((2, 4, 4), 0.0, _rng(0)).masked.sum() == 0
    assert tube_mask((2, 4, 4), 1.0, _rng(0)).masked.all()


@pytest.mark.parametrize("ratio", RATIOS)
def test_tube_property_over_200_seeds(ratio):
    for seed in range(200):
        rng = _rng(seed)
        t, h, w = 1 + seed % 4, 1 + (seed // 4) % 6, 1 + (seed // 24) % 6
        m = tube_mask((t, h, w), ratio, rng)
        assert (m.masked == m.masked[:1]).all()
        assert m.masked.sum() == masked_count(ratio, h * w) * t


def test_tube_mask_deterministic_per_stream():
    a = tube_mask((2, 4, 4), 0.85, _rng(3)).masked
    b = tube_mask((2, 4, 4), 0.85, _rng(3)).masked
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# Synchronized and random sensor masking
# ---------------------------------------------------------------------------

def test_synchronized_examples():
    assert len(synchronized_mask(20, 0.85, _rng(0)).masked_time_indices) == 17
    assert len(synchronized_mask(4, 0.5, _rng(0)).masked_time_indices) == 2


def test_synchronized_plan_shares_one_mask_object():
    plan = make_plan((2, 2, 2), [16, 16, 16], "synchronized", 0.85, 0.85, _rng(0))
    assert all(s is plan.sensors[0] for s in plan.sensors)


@pytest.mark.parametrize("ratio", RATIOS)
def test_synchronization_and_cardinality_over_200_seeds(ratio):
    for seed in range(200):
        n = 1 + seed % 25
        plan = make_plan((2, 2, 2), [n, n, n], "synchronized", ratio, ratio, _rng(seed))
        first = plan.sensors[0].masked_time_indices
        assert len(first) == masked_count(ratio, n)
        for s in plan.sensors[1:]:
            np.testing.assert_array_equal(s.masked_time_indices, first)
        assert plan.video.masked.sum() == masked_count(ratio, 4) * 2


def test_synchronized_rejects_unequal_token_counts():
    with pytest.raises(ValueError):
        make_plan(None, [10, 12], "synchronized", 0.5, 0.5, _rng(0))


def test_unknown_strategy_rejected():
    with pytest.raises(ValueError):
        make_plan(None, [10], "block", 0.5, 0.5, _rng(0))


def test_random_mask_examples():
    assert len(random_mask(20, 0.85, _rng(0))) == 17
    assert len(random_mask(20, 0.0, _rng(0))) == 0


@pytest.mark.parametrize("ratio", RATIOS)
def test_random_plan_cardinality_per_modality(ratio):
    for seed in range(200):
        counts = [5 + seed % 7, 11, 20]
        plan = make_plan(None, counts, "random", ratio, ratio, _rng(seed))
        for s, n in zip(plan.sensors, counts):
            assert len(s.masked_time_indices) == masked_count(ratio, n)


def test_random_masks_differ_across_modalities():
    # Two independent 17-of-20 draws coincide with probability 1/C(20,17) = 1/1140;
    # over 100 seeds P(more than 2 coincidences) is below 1e-4.
    same = 0
    for seed in range(100):
        plan = make_plan(None, [20, 20], "random", 0.85, 0.85, _rng(seed))
        same += np.array_equal(plan.sensors[0].masked_time_indices, plan.sensors[1].masked_time_indices)
    assert comb(20, 17) == 1140
    assert same <= 2


def test_video_mask_independent_of_sensor_mask_ratio():
    plan = make_plan((2, 4, 4), [8, 8], "synchronized", 0.5, 1.0, _rng(1))
    assert plan.video.masked.sum() == 16
    assert len(plan.sensors[0].masked_time_indices) == 8


# ---------------------------------------------------------------------------
# Applying masks
# ---------------------------------------------------------------------------

def _tokens(n: int) -> TokenSequence:
    values = np.arange(n * 2, dtype=float).reshape(n, 2)
    positions = np.zeros((n, 4), dtype=np.int64)
    positions[:, 1] = np.arange(n) * 10
    return TokenSequence(const(values), positions)


def test_apply_mask_examples():
    toks = _tokens(4)
    vis, masked = apply_mask(toks, [])
    np.testing.assert_array_equal(vis.tokens.value, toks.tokens.value)
    assert masked.size == 0

    vis, masked = apply_mask(toks, [0, 1, 2, 3])
    assert len(vis) == 0
    np.testing.assert_array_equal(masked, [0, 1, 2, 3])

    vis, masked = apply_mask(toks, [3, 1])
    np.testing.assert_array_equal(vis.positions[:, 1], [0, 20])
    np.testing.assert_array_equal(vis.tokens.value, toks.tokens.value[[0, 2]])
    np.testing.assert_array_equal(masked, [1, 3])


def test_apply_mask_out_of_range():
    with pytest.raises(IndexError):
        apply_mask(_tokens(3), [3])


@settings(max_examples=200)
@given(n=st.integers(1, 30), seed=st.integers(0, 10**6), ratio=st.sampled_from(RATIOS))
def test_apply_mask_partitions_tokens(n, seed, ratio):
    toks = _tokens(n)
    idx = random_mask(n, ratio, _rng(seed))
    vis, masked = apply_mask(toks, idx)
    assert len(vis) + len(masked) == n
    assert set(vis.positions[:, 1].tolist()).isdisjoint((masked * 10).tolist())
