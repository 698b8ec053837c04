"""Finite-difference checks of every differentiable component at tiny sizes.

Each case builds a scalar objective over a handful of inputs and parameters.
Non-scalar outputs are contracted with a fixed random tensor so that every
output element contributes a distinct weight to the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .config import RunConfig
from .embedding import Layout, positional_encoding, sensor_embed, tubelet_embed
from .fusion import FusedRepresentation, concat_fusion, cross_attention_head, cross_fusion
from .mae import Batch, block, decode_modality, init_block, mae_forward, plan_masks, reconstruction_loss
from .model import init_params
from .numerics import GradCheckReport, RngStream
from .oneshot import classify, embed_batch, episode_loss, forward_param_names, oneshot_embed

Objective = Callable[[dict], nx.Node]


@dataclass
class GradCase:
    name: str
    objective: Objective
    point: dict[str, np.ndarray]


def tiny_config(**overrides) -> RunConfig:
    cfg = RunConfig()
    settings = {
        "data.num_classes": 4,
        "data.num_test_classes": 2,
        "data.samples_per_class": 2,
        "data.frames": 2,
        "data.height": 4,
        "data.width": 4,
        "data.sensors": "8x2,8x2",
        "embed.tubelet_t": 2,
        "embed.patch_h": 2,
        "embed.patch_w": 2,
        "embed.dim": 4,
        "embed.sensor_window": 4,
        "embed.sensor_stride": 4,
        "embed.sensor_dim": 3,
        "encoder.depth": 1,
        "encoder.heads": 2,
        "decoder.depth": 1,
        "decoder.heads": 1,
        "decoder.width": 4,
        "fusion.heads": 2,
        "fusion.head_dim": 2,
        "fusion.modality_dim": 3,
        "fusion.dim": 4,
        "oneshot.ways": 2,
        "oneshot.queries": 2,
    }
    settings.update(overrides)
    return cfg.with_overrides(settings)


def _contract(out: nx.Node, weights: np.ndarray) -> nx.Node:
    return nx.sum(nx.mul(out, weights))


def _tiny_batch(cfg: RunConfig, rng: np.random.Generator, n: int) -> Batch:
    d = cfg.data
    video = rng.uniform(0.0, 1.0, size=(n, d.frames, d.height, d.width, d.channels))
    sensors = [rng.standard_normal((n, length, ch)) for length, ch in d.sensor_specs()]
    return Batch(video, sensors)


def _subset(params: dict, prefix: str) -> dict[str, np.ndarray]:
    return {k: v for k, v in params.items() if k.startswith(prefix)}


def build_cases(seed: int = 0) -> list[GradCase]:
    rng = RngStream(seed, "gradcheck").generator()
    cfg = tiny_config()
    layout = Layout.from_config(cfg)
    params = init_params(cfg, seed)
    # Non-trivial affine parameters so their gradients are exercised.
    params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}
    batch = _tiny_batch(cfg, rng, 3)
    d = cfg.embed.dim
    cases: list[GradCase] = []

    # Embedders
    out_shape = tubelet_embed(batch.video, layout.tubelet, {k: nx.const(v) for k, v in params.items()}).shape
    w_tub = rng.standard_normal(out_shape)
    cases.append(GradCase(
        "tubelet_embed",
        lambda p: _contract(tubelet_embed(batch.video, layout.tubelet, p), w_tub),
        _subset(params, "embed.video."),
    ))
    series = batch.sensors[0]
    w_sen = rng.standard_normal((3, layout.sensor_tokens[0], d))
    cases.append(GradCase(
        "sensor_embed",
        lambda p: _contract(sensor_embed(series, layout.window, layout.stride, p, "embed.s0"), w_sen),
        _subset(params, "embed.s0."),
    ))

    # Encoder block (pre-norm attention + MLP), input tokens included
    blk: dict[str, np.ndarray] = {}
    init_block(blk, rng, "blk", d, cfg.encoder.mlp_ratio)
    blk = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in blk.items()}
    blk["x"] = rng.standard_normal((2, 3, d))
    w_blk = rng.standard_normal((2, 3, d))
    cases.append(GradCase(
        "encoder_block",
        lambda p: _contract(block(p["x"], p, "blk", cfg.encoder.heads), w_blk),
        blk,
    ))

    # Per-modality decoder through the reconstruction loss
    dec = _subset(params, "decoder.m1.")
    dec["context"] = rng.standard_normal((2, 1, d))
    ctx_pe = positional_encoding(layout.positions(1), cfg.decoder.width, layout)[[[0], [1]]]
    mask_pos = np.array([[1], [0]])
    target = rng.standard_normal((2, 1, layout.patch_sizes[1]))
    cases.append(GradCase(
        "decoder",
        lambda p: reconstruction_loss(
            [decode_modality(p["context"], ctx_pe, mask_pos, 1, p, layout, cfg.decoder.depth, cfg.decoder.heads)],
            [target],
        ),
        dec,
    ))

    # Masked autoencoder objective end to end (embedders, encoder, all decoders)
    plans = plan_masks(layout, cfg.mask, RngStream(seed, "mask").generator(0), 2)
    mae_batch = batch.take([0, 1])
    mae_point = {k: v for k, v in params.items() if k.startswith(("embed.", "encoder.", "decoder."))}
    cases.append(GradCase(
        "mae_objective",
        lambda p: mae_forward(mae_batch, plans, p, cfg, layout),
        mae_point,
    ))

    # Single cross-attention head
    qkv = {
        "q": rng.standard_normal((3, 2)),
        "k": rng.standard_normal((4, 2)),
        "v": rng.standard_normal((4, 3)),
    }
    w_head = rng.standard_normal((3, 3))
    cases.append(GradCase(
        "cross_attention_head",
        lambda p: _contract(cross_attention_head(p["q"], p["k"], p["v"], 2, cfg.fusion.scaling), w_head),
        qkv,
    ))

    # Fusion stack: per-modality multi-head cross attention, W^c, W^m, pooling
    fus = {k: v for k, v in params.items() if k.startswith("fusion.m") or k == "fusion.wm"}
    n_tok = list(layout.modality_tokens)
    for m, n in enumerate(n_tok):
        fus[f"U{m}"] = rng.standard_normal((2, n, d))
    fus["enc"] = rng.standard_normal((2, sum(n_tok), d))
    w_fus = rng.standard_normal((2, cfg.fusion.dim))
    cases.append(GradCase(
        "fusion_stack",
        lambda p: _contract(
            cross_fusion([p[f"U{m}"] for m in range(len(n_tok))], p["enc"], p, cfg.fusion).pooled, w_fus
        ),
        fus,
    ))
    cat = _subset(params, "fusion.concat.")
    for m, n in enumerate(n_tok):
        cat[f"U{m}"] = rng.standard_normal((2, n, d))
    cases.append(GradCase(
        "concat_fusion",
        lambda p: _contract(concat_fusion([p[f"U{m}"] for m in range(len(n_tok))], p).pooled, w_fus),
        cat,
    ))

    # One-shot heads
    ln_point = {"pooled": rng.standard_normal((3, cfg.fusion.dim))}
    w_ln = rng.standard_normal((3, cfg.fusion.dim))
    cases.append(GradCase(
        "oneshot_layernorm",
        lambda p: _contract(oneshot_embed(FusedRepresentation(p["pooled"], p["pooled"]), p, "layernorm"), w_ln),
        ln_point,
    ))
    att: dict[str, np.ndarray] = {}
    init_block(att, rng, "oneshot.attn", cfg.fusion.dim, 2.0)
    att = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in att.items()}
    att["seq"] = rng.standard_normal((3, 5, cfg.fusion.dim))
    cases.append(GradCase(
        "oneshot_attention",
        lambda p: _contract(
            oneshot_embed(FusedRepresentation(nx.mean(p["seq"], axis=-2), p["seq"]), p, "attention"), w_ln
        ),
        att,
    ))

    # Cosine-softmax classifier and episode loss
    cls_point = {"queries": rng.standard_normal((4, 5)), "supports": rng.standard_normal((3, 5))}
    slots = np.array([0, 2, 1, 2])
    cases.append(GradCase(
        "cosine_softmax_loss",
        lambda p: episode_loss(classify(p["queries"], p["supports"]), slots)[0],
        cls_point,
    ))

    # Whole episodic forward: embedding -> encoder -> fusion -> head -> loss
    ep_batch = batch.take([0, 1, 2])
    ep_point = {k: params[k] for k in forward_param_names(params, cfg)}

    def episode_objective(p):
        emb = embed_batch(ep_batch, p, cfg, layout)
        probs = classify(nx.take(emb, np.array([2]), axis=0), nx.take(emb, np.array([0, 1]), axis=0))
        return episode_loss(probs, np.array([1]))[0]

    cases.append(GradCase("episode_forward", episode_objective, ep_point))
    return cases


def run_suite(
    names: list[str] | None = None, seed: int = 0, tolerance: float = 1e-4
) -> list[tuple[str, GradCheckReport]]:
    results = []
    for case in build_cases(seed):
        if names is not None and case.name not in names:
            continue
        results.append((case.name, nx.grad_check(case.objective, case.point, tolerance=tolerance)))
    return results
