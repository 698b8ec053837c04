from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mumae import numerics as nx
from mumae.config import RunConfig
from mumae.embedding import (
    Layout,
    TokenSequence,
    concat_modalities,
    embed_modalities,
    patchify,
    positional_encoding,
    sensor_embed,
    sinusoid,
    tubelet_embed,
    windows,
)
from mumae.model import init_params


def _const(params: dict) -> dict:
    return {k: nx.const(v) for k, v in params.items()}


def test_default_geometry_token_counts():
    layout = Layout.from_config(RunConfig())
    assert layout.video_tokens == 16  # 8x32x32 video, 2x16x16 tubelets
    assert layout.sensor_tokens == (16, 16, 16, 16)  # length 128, window 8, stride 8
    assert layout.total_tokens == 80


def test_all_zero_video_gives_zero_tokens():
    tub = (2, 16, 16, 1)
    w = np.random.default_rng(0).standard_normal((512, 8))
    params = {"embed.video.w": nx.const(w), "embed.video.b": nx.const(np.zeros(8))}
    out = tubelet_embed(np.zeros((8, 32, 32, 1)), tub, params)
    assert out.shape == (16, 8)
    assert not out.value.any()


def test_identity_projection_returns_flattened_tubelet():
    tub = (2, 2, 2, 1)
    video = np.zeros((4, 4, 4, 1))
    video[2:4, 0:2, 2:4, 0] = 1.0  # tubelet at grid (1, 0, 1) -> token 1*4 + 0*2 + 1 = 5
    params = {"embed.video.w": nx.const(np.eye(8)), "embed.video.b": nx.const(np.zeros(8))}
    out = tubelet_embed(video, tub, params).value
    np.testing.assert_array_equal(out[5], np.ones(8))
    assert out.sum() == 8.0


def test_patchify_rejects_indivisible_geometry():
    with pytest.raises(ValueError, match="multiple of 2"):
        patchify(np.zeros((3, 4, 4, 1)), (2, 2, 2, 1))


def test_windows_count_and_content():
    series = np.arange(128 * 3, dtype=float).reshape(128, 3)
    w = windows(series, 8, 8)
    assert w.shape == (16, 24)
    np.testing.assert_array_equal(w[1], series[8:16].reshape(-1))


def test_sensor_embed_zero_series_zero_bias():
    rng = np.random.default_rng(1)
    params = {
        "s.conv": nx.const(rng.standard_normal((8, 3, 5))),
        "s.conv_b": nx.const(np.zeros(5)),
        "s.proj": nx.const(rng.standard_normal((5, 4))),
        "s.proj_b": nx.const(np.zeros(4)),
    }
    out = sensor_embed(np.zeros((128, 3)), 8, 8, params, "s")
    assert out.shape == (16, 4)
    assert not out.value.any()


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), length=st.integers(4, 40), window=st.integers(1, 4), stride=st.integers(1, 4))
def test_sensor_embed_matches_sliding_window_oracle(seed, length, window, stride):
    rng = np.random.default_rng(seed)
    ch, width, d = 2, 3, 4
    x = rng.standard_normal((length, ch))
    raw = {
        "s.conv": rng.standard_normal((window, ch, width)),
        "s.conv_b": rng.standard_normal(width),
        "s.proj": rng.standard_normal((width, d)),
        "s.proj_b": rng.standard_normal(d),
    }
    n = (length - window) // stride + 1
    conv = np.zeros((n, width))
    for t in range(n):
        for o in range(width):
            acc = raw["s.conv_b"][o]
            for k in range(window):
                for c in range(ch):
                    acc += x[t * stride + k, c] * raw["s.conv"][k, c, o]
            conv[t, o] = acc
    expected = nx.gelu(nx.const(conv)).value @ raw["s.proj"] + raw["s.proj_b"]
    got = sensor_embed(x, window, stride, _const(raw), "s").value
    np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-12)


def test_sensor_shorter_than_window_rejected():
    with pytest.raises(ValueError):
        sensor_embed(np.zeros((3, 2)), 4, 1, {}, "s")


# ---------------------------------------------------------------------------
# Positional encodings
# ---------------------------------------------------------------------------

def test_sinusoid_at_zero_alternates():
    np.testing.assert_array_equal(sinusoid(np.array([0]), 8)[0], [0, 1, 0, 1, 0, 1, 0, 1])


def test_sinusoid_rejects_odd_dim():
    with pytest.raises(ValueError):
        sinusoid(np.array([0]), 5)


def test_positional_encoding_deterministic():
    layout = Layout.from_config(RunConfig())
    pos = layout.all_positions()
    np.testing.assert_array_equal(positional_encoding(pos, 32, layout), positional_encoding(pos, 32, layout))


@pytest.mark.parametrize("dim", [4, 8, 32])
def test_positional_encoding_injective_at_desk_scale(dim):
    layout = Layout.from_config(RunConfig())
    pe = positional_encoding(layout.all_positions(), dim, layout)
    n = len(pe)
    dist = np.sqrt(((pe[:, None, :] - pe[None, :, :]) ** 2).sum(-1))
    off = dist[~np.eye(n, dtype=bool)]
    assert off.min() > 1e-6


# ---------------------------------------------------------------------------
# Sequence assembly
# ---------------------------------------------------------------------------

def _seq(n: int, modality: int, d: int = 4) -> TokenSequence:
    pos = np.zeros((n, 4), dtype=np.int64)
    pos[:, 0] = modality
    pos[:, 1] = np.arange(n)
    return TokenSequence(nx.const(np.full((n, d), float(modality))), pos)


def test_concat_lengths_and_order():
    seq = concat_modalities(_seq(16, 0), [_seq(16, 1), _seq(16, 2)])
    assert len(seq) == 48
    assert (seq.modalities[:16] == 0).all() and (seq.modalities[16:] > 0).all()
    np.testing.assert_array_equal(seq.modalities[16:32], 1)


def test_concat_video_only():
    seq = concat_modalities(_seq(16, 0), [])
    assert len(seq) == 16


def test_concat_rejects_width_mismatch():
    with pytest.raises(ValueError):
        concat_modalities(_seq(2, 0, d=4), [_seq(2, 1, d=6)])


def test_token_sequence_checks_position_count():
    with pytest.raises(ValueError):
        TokenSequence(nx.const(np.zeros((3, 2))), np.zeros((2, 4)))


def test_modality_slots_do_not_depend_on_sensor_content():
    cfg = RunConfig()
    layout = Layout.from_config(cfg)
    params = _const(init_params(cfg))
    rng = np.random.default_rng(0)
    video = rng.uniform(size=(8, 32, 32, 1))
    sensors = [rng.standard_normal((128, 3)) for _ in range(4)]
    a = embed_modalities(video, sensors, layout, params)
    b = embed_modalities(video, sensors[::-1], layout, params)
    assert [t.shape for t in a] == [t.shape for t in b]
    np.testing.assert_array_equal(a[0].value, b[0].value)
    # Stream j always lands in slot j: swapping the data swaps the content, not the layout.
    assert not np.allclose(a[1].value, b[1].value)


@settings(max_examples=100, deadline=None)
@given(
    tt=st.integers(1, 3), ph=st.integers(1, 4), pw=st.integers(1, 4),
    nt=st.integers(1, 3), nh=st.integers(1, 3), nw=st.integers(1, 3),
    length=st.integers(1, 64), window=st.integers(1, 8), stride=st.integers(1, 8),
)
def test_token_count_closed_forms(tt, ph, pw, nt, nh, nw, length, window, stride):
    video = np.zeros((nt * tt, nh * ph, nw * pw, 1))
    assert patchify(video, (tt, ph, pw, 1)).shape[0] == nt * nh * nw
    if length >= window:
        series = np.zeros((length, 2))
        assert windows(series, window, stride).shape[0] == (length - window) // stride + 1
