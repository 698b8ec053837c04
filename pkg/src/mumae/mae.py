"""Multimodal masked autoencoder: shared encoder, one light decoder per modality."""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .embedding import Layout, TokenSequence, embed_modalities, modality_encoding, patchify, positional_encoding, windows
from .masking import MaskPlan, make_plan
from .numerics import Node, RngStream

# ---------------------------------------------------------------------------
# Parameter initialisation
# ---------------------------------------------------------------------------


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape if shape is not None else (fan_in, fan_out))


def init_block(p: dict, rng, prefix: str, width: int, mlp_ratio: float) -> None:
    hidden = max(1, int(round(width * mlp_ratio)))
    p[f"{prefix}.ln1.g"] = np.ones(width)
    p[f"{prefix}.ln1.b"] = np.zeros(width)
    for k in ("wq", "wk", "wv", "wo"):
        p[f"{prefix}.attn.{k}"] = xavier(rng, width, width)
    p[f"{prefix}.attn.bo"] = np.zeros(width)
    p[f"{prefix}.ln2.g"] = np.ones(width)
    p[f"{prefix}.ln2.b"] = np.zeros(width)
    p[f"{prefix}.mlp.w1"] = xavier(rng, width, hidden)
    p[f"{prefix}.mlp.b1"] = np.zeros(hidden)
    p[f"{prefix}.mlp.w2"] = xavier(rng, hidden, width)
    p[f"{prefix}.mlp.b2"] = np.zeros(width)


def init_embedding(p: dict, rng, layout: Layout, dim: int, sensor_dim: int) -> None:
    pv = layout.patch_sizes[0]
    p["embed.video.w"] = xavier(rng, pv, dim)
    p["embed.video.b"] = np.zeros(dim)
    for j, ch in enumerate(layout.sensor_channels):
        fan_in = layout.window * ch
        p[f"embed.s{j}.conv"] = xavier(rng, fan_in, sensor_dim, (layout.window, ch, sensor_dim))
        p[f"embed.s{j}.conv_b"] = np.zeros(sensor_dim)
        p[f"embed.s{j}.proj"] = xavier(rng, sensor_dim, dim)
        p[f"embed.s{j}.proj_b"] = np.zeros(dim)


def init_encoder(p: dict, rng, dim: int, depth: int, mlp_ratio: float) -> None:
    for b in range(depth):
        init_block(p, rng, f"encoder.block{b}", dim, mlp_ratio)
    p["encoder.norm.g"] = np.ones(dim)
    p["encoder.norm.b"] = np.zeros(dim)


def init_decoders(p: dict, rng, layout: Layout, dim: int, width: int, depth: int, mlp_ratio: float) -> None:
    for m, patch in enumerate(layout.patch_sizes):
        pre = f"decoder.m{m}"
        p[f"{pre}.embed.w"] = xavier(rng, dim, width)
        p[f"{pre}.embed.b"] = np.zeros(width)
        p[f"{pre}.mask_token"] = 0.02 * rng.standard_normal(width)
        for b in range(depth):
            init_block(p, rng, f"{pre}.block{b}", width, mlp_ratio)
        p[f"{pre}.norm.g"] = np.ones(width)
        p[f"{pre}.norm.b"] = np.zeros(width)
        p[f"{pre}.head.w"] = xavier(rng, width, patch)
        p[f"{pre}.head.b"] = np.zeros(patch)


# ---------------------------------------------------------------------------
# Transformer pieces
# ---------------------------------------------------------------------------


def _split_heads(x: Node, heads: int) -> Node:
    B, L, d = x.shape
    return nx.transpose(nx.reshape(x, (B, L, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Node) -> Node:
    B, H, L, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (B, L, H * dh))


def self_attention(x: Node, params: dict, prefix: str, heads: int) -> Node:
    d = x.shape[-1]
    q = _split_heads(nx.matmul(x, params[f"{prefix}.wq"]), heads)
    k = _split_heads(nx.matmul(x, params[f"{prefix}.wk"]), heads)
    v = _split_heads(nx.matmul(x, params[f"{prefix}.wv"]), heads)
    scores = nx.mul(nx.matmul(q, nx.swap_last(k)), 1.0 / math.sqrt(d // heads))
    out = _merge_heads(nx.matmul(nx.softmax(scores, axis=-1), v))
    return nx.linear(out, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def block(x: Node, params: dict, prefix: str, heads: int) -> Node:
    """Pre-norm transformer block on [B, L, d]."""
    h = nx.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    x = nx.add(x, self_attention(h, params, f"{prefix}.attn", heads))
    h = nx.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = nx.gelu(nx.linear(h, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"]))
    return nx.add(x, nx.linear(h, params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"]))


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------

_token_probe: list[list[int]] = []


@contextlib.contextmanager
def count_encoder_tokens():
    """Record the sequence length of every encoder call made inside the block."""
    seen: list[int] = []
    _token_probe.append(seen)
    try:
        yield seen
    finally:
        _token_probe.remove(seen)


def encode_tokens(x: Node, params: dict, depth: int, heads: int) -> Node:
    if x.shape[-2] == 0:
        raise ValueError("encoder input is empty: every token was masked")
    for probe in _token_probe:
        probe.append(x.shape[-2])
    for b in range(depth):
        x = block(x, params, f"encoder.block{b}", heads)
    return nx.layer_norm(x, params["encoder.norm.g"], params["encoder.norm.b"])


def encode(visible: TokenSequence, params: dict, depth: int, heads: int) -> TokenSequence:
    """Run the encoder over already position-coded visible tokens."""
    if len(visible) == 0:
        raise ValueError("encoder input is empty: every token was masked")
    x = visible.tokens
    batched = x.ndim == 3
    if not batched:
        x = nx.reshape(x, (1, *x.shape))
    y = encode_tokens(x, params, depth, heads)
    if not batched:
        y = nx.reshape(y, y.shape[1:])
    return TokenSequence(y, visible.positions)


# ---------------------------------------------------------------------------
# Decoders
# ---------------------------------------------------------------------------


def decode_modality(
    context: Node,
    context_pe: np.ndarray,
    mask_positions: np.ndarray,
    modality: int,
    params: dict,
    layout: Layout,
    depth: int,
    heads: int,
) -> Node:
    """Reconstruct masked tokens of one modality.

    ``context`` [B, V, d] holds the encoder outputs this decoder may see,
    ``context_pe`` [B, V, d_dec] their decoder position codes, and
    ``mask_positions`` [B, M] the token indices (within the modality) to
    predict. Returns [B, M, patch_size].
    """
    pre = f"decoder.m{modality}"
    if f"{pre}.head.w" not in params:
        raise KeyError(f"unknown modality {modality}")
    mask_positions = np.asarray(mask_positions, dtype=np.int64)
    B, M = mask_positions.shape
    patch = params[f"{pre}.head.w"].shape[-1]
    if M == 0:
        return nx.const(np.zeros((B, 0, patch)))
    width = params[f"{pre}.embed.w"].shape[-1]
    z = nx.add(nx.linear(context, params[f"{pre}.embed.w"], params[f"{pre}.embed.b"]), context_pe)
    pe = modality_encoding(layout, modality, width)[mask_positions]  # [B, M, w]
    m = nx.add(nx.reshape(params[f"{pre}.mask_token"], (1, 1, width)), pe)
    x = nx.concat([z, m], axis=1)
    for b in range(depth):
        x = block(x, params, f"{pre}.block{b}", heads)
    x = nx.layer_norm(x, params[f"{pre}.norm.g"], params[f"{pre}.norm.b"])
    V = z.shape[1]
    x = nx.take(x, np.arange(V, V + M), axis=1)
    return nx.linear(x, params[f"{pre}.head.w"], params[f"{pre}.head.b"])


def reconstruction_loss(reconstructions: list[Node], targets: list[np.ndarray]) -> Node:
    """Unweighted mean over modalities of each modality's masked-element MSE.

    Modalities with nothing masked contribute nothing; if none has masked
    elements the loss is 0.
    """
    if len(reconstructions) != len(targets):
        raise ValueError("one target per reconstruction required")
    terms = []
    for rec, tgt in zip(reconstructions, targets):
        tgt = np.asarray(tgt, dtype=np.float64)
        if rec.shape != tgt.shape:
            raise ValueError(f"reconstruction shape {rec.shape} != target shape {tgt.shape}")
        if tgt.size == 0:
            continue
        terms.append(nx.mean(nx.square(nx.sub(rec, tgt))))
    if not terms:
        return nx.const(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = nx.add(total, t)
    return nx.mul(total, 1.0 / len(terms))


# ---------------------------------------------------------------------------
# Batched forward
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    video: np.ndarray  # [B, T, H, W, C]
    sensors: list[np.ndarray]  # per stream [B, T_s, D_s]

    @classmethod
    def from_samples(cls, samples) -> "Batch":
        video = np.stack([s.video for s in samples])
        n = len(samples[0].sensors)
        sensors = [np.stack([s.sensors[j] for s in samples]) for j in range(n)]
        return cls(video, sensors)

    def take(self, rows) -> "Batch":
        rows = np.asarray(rows)
        return Batch(self.video[rows], [s[rows] for s in self.sensors])

    def __len__(self) -> int:
        return self.video.shape[0]


def targets_for(batch: Batch, layout: Layout) -> list[np.ndarray]:
    """Raw patch / window contents per modality: [B, L_i, P_i]."""
    out = [patchify(batch.video, layout.tubelet)]
    out += [windows(s, layout.window, layout.stride) for s in batch.sensors]
    return out


def plan_masks(layout: Layout, mask_cfg, rng: np.random.Generator, batch_size: int) -> list[MaskPlan]:
    return [
        make_plan(
            layout.video_grid,
            list(layout.sensor_tokens),
            mask_cfg.strategy,
            mask_cfg.video(),
            mask_cfg.sensor(),
            rng,
        )
        for _ in range(batch_size)
    ]


def plan_indices(plans: list[MaskPlan], layout: Layout) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-modality visible / masked index arrays of shape [B, V_i] / [B, M_i]."""
    vis = [np.stack([p.video.visible_indices() for p in plans])]
    msk = [np.stack([p.video.masked_indices() for p in plans])]
    for j in range(len(layout.sensor_tokens)):
        vis.append(np.stack([p.sensors[j].visible_time_indices() for p in plans]))
        msk.append(np.stack([np.asarray(p.sensors[j].masked_time_indices) for p in plans]))
    return vis, msk


def mae_forward(batch: Batch, plans: list[MaskPlan], params: dict, cfg, layout: Layout) -> Node:
    """Masked reconstruction loss for one batch under the given mask plans."""
    vis, msk = plan_indices(plans, layout)
    U = embed_modalities(batch.video, batch.sensors, layout, params)
    visible = [nx.gather_rows(u, v) for u, v in zip(U, vis)]
    enc = encode_tokens(nx.concat(visible, axis=1), params, cfg.encoder.depth, cfg.encoder.heads)

    width = cfg.decoder.width
    counts = [v.shape[1] for v in vis]
    starts = np.concatenate([[0], np.cumsum(counts)])
    dec_pe = [positional_encoding(layout.positions(m), width, layout) for m in range(layout.num_modalities)]
    ctx_pe_own = [dec_pe[m][vis[m]] for m in range(layout.num_modalities)]
    targets = targets_for(batch, layout)

    recs, tgts = [], []
    bidx = np.arange(len(batch))[:, None]
    for m in range(layout.num_modalities):
        if cfg.decoder.context == "full":
            ctx, ctx_pe = enc, np.concatenate(ctx_pe_own, axis=1)
        else:
            ctx = nx.take(enc, np.arange(starts[m], starts[m + 1]), axis=1)
            ctx_pe = ctx_pe_own[m]
        recs.append(
            decode_modality(ctx, ctx_pe, msk[m], m, params, layout, cfg.decoder.depth, cfg.decoder.heads)
        )
        tgts.append(targets[m][bidx, msk[m]])
    return reconstruction_loss(recs, tgts)


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def current_lr(self) -> float:
        if self.total_steps <= 1:
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * self.step / self.total_steps))

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        lr = self.current_lr()
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        out = dict(params)
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(k, 0.0) * b2 + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            if lr == 0.0:
                continue
            mhat = m / (1 - b1**self.step)
            vhat = v / (1 - b2**self.step)
            upd = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay and params[k].ndim > 1:
                upd = upd + self.weight_decay * params[k]
            out[k] = params[k] - lr * upd
        return out


def mae_param_names(params: dict) -> list[str]:
    return [k for k in params if k.startswith(("embed.", "encoder.", "decoder."))]


def pretrain_step(
    batch: Batch,
    params: dict[str, np.ndarray],
    opt: AdamState,
    cfg,
    layout: Layout,
    mask_rng: np.random.Generator,
) -> tuple[float, dict[str, np.ndarray]]:
    """One masked-reconstruction update; masks are drawn fresh for every sample."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    plans = plan_masks(layout, cfg.mask, mask_rng, len(batch))
    leaves = nx.param_leaves(params, mae_param_names(params))
    loss = mae_forward(batch, plans, leaves, cfg, layout)
    nx.backward(loss)
    return float(loss.value), opt.update(params, nx.collect_grads(leaves))


def evaluate_reconstruction(batch: Batch, params: dict, cfg, layout: Layout, seed: int, batch_size: int = 64) -> float:
    """Mean masked-reconstruction loss over a fixed, seeded set of masks."""
    rng = RngStream(seed, "mask").generator(10**9)
    losses, weights = [], []
    for start in range(0, len(batch), batch_size):
        rows = np.arange(start, min(len(batch), start + batch_size))
        sub = batch.take(rows)
        plans = plan_masks(layout, cfg.mask, rng, len(sub))
        consts = {k: nx.const(v) for k, v in params.items()}
        losses.append(float(mae_forward(sub, plans, consts, cfg, layout).value))
        weights.append(len(rows))
    return float(np.average(losses, weights=weights))


def pretrain(
    samples,
    cfg,
    params: dict[str, np.ndarray],
    on_epoch=None,
) -> tuple[dict[str, np.ndarray], list[float]]:
    """Seeded, epoch-shuffled mini-batch loop. Returns params and per-epoch mean loss."""
    if len(samples) == 0:
        raise ValueError("pretraining needs a nonempty dataset")
    layout = Layout.from_config(cfg)
    data = Batch.from_samples(samples)
    pc = cfg.pretrain
    n = len(data)
    steps_per_epoch = math.ceil(n / pc.batch_size)
    opt = AdamState(pc.lr, pc.epochs * steps_per_epoch, pc.beta1, pc.beta2, weight_decay=pc.weight_decay)
    curve = []
    step = 0
    for epoch in range(pc.epochs):
        order = RngStream(cfg.seed, "shuffle").generator(0, epoch).permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, pc.batch_size):
            rows = order[start : start + pc.batch_size]
            mask_rng = RngStream(cfg.seed, "mask").generator(step)
            loss, params = pretrain_step(data.take(rows), params, opt, cfg, layout, mask_rng)
            total += loss * len(rows)
            count += len(rows)
            step += 1
        curve.append(total / count)
        if on_epoch is not None:
            on_epoch(epoch, curve[-1])
    return params, curve
