"""Cross-attention fusion: encoder tokens query each modality's unimodal tokens."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .mae import xavier
from .numerics import Node

SCALINGS = ("sqrt", "exp")


@dataclass
class FusedRepresentation:
    pooled: Node  # [..., d_m]
    sequence: Node  # [..., L, d_m]


def init_fusion(p: dict, rng, num_modalities: int, dim: int, cfg) -> None:
    hd = cfg.heads * cfg.head_dim
    for i in range(num_modalities):
        for k in ("wq", "wk", "wv"):
            p[f"fusion.m{i}.{k}"] = xavier(rng, dim, hd)
        p[f"fusion.m{i}.wc"] = xavier(rng, hd, cfg.modality_dim)
    p["fusion.wm"] = xavier(rng, num_modalities * cfg.modality_dim, cfg.dim)
    p["fusion.concat.w"] = xavier(rng, num_modalities * dim, cfg.dim)
    p["fusion.concat.b"] = np.zeros(cfg.dim)


def _head_cols(head: int, head_dim: int) -> np.ndarray:
    return np.arange(head * head_dim, (head + 1) * head_dim)


def _check_width(x: Node, w: Node, what: str) -> None:
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"{what}: input width {x.shape[-1]} does not match projection input {w.shape[0]}")


def project_kv(U: Node, params: dict, modality: int, head: int, head_dim: int) -> tuple[Node, Node]:
    wk = params[f"fusion.m{modality}.wk"]
    wv = params[f"fusion.m{modality}.wv"]
    _check_width(U, wk, "project_kv")
    cols = _head_cols(head, head_dim)
    return nx.matmul(U, nx.take(wk, cols, axis=1)), nx.matmul(U, nx.take(wv, cols, axis=1))


def project_q(encoder_rep: Node, params: dict, modality: int, head: int, head_dim: int) -> Node:
    wq = params[f"fusion.m{modality}.wq"]
    _check_width(encoder_rep, wq, "project_q")
    return nx.matmul(encoder_rep, nx.take(wq, _head_cols(head, head_dim), axis=1))


def attention_scale(d_head: int, scaling: str = "sqrt") -> float:
    if scaling == "sqrt":
        return math.sqrt(d_head)
    if scaling == "exp":
        return math.exp(d_head)
    raise ValueError(f"unknown attention scaling {scaling!r}; expected one of {SCALINGS}")


def attention_weights(Q: Node, K: Node, d_head: int, scaling: str = "sqrt") -> Node:
    if K.shape[-2] == 0:
        raise ValueError("cross attention needs at least one key")
    if Q.shape[-1] != K.shape[-1]:
        raise ValueError(f"query width {Q.shape[-1]} != key width {K.shape[-1]}")
    logits = nx.mul(nx.matmul(Q, nx.swap_last(K)), 1.0 / attention_scale(d_head, scaling))
    return nx.softmax(logits, axis=-1)


def cross_attention_head(Q, K, V, d_head: int, scaling: str = "sqrt") -> Node:
    """softmax(Q K^T / scale) V with row-wise softmax."""
    Q, K, V = nx.as_node(Q), nx.as_node(K), nx.as_node(V)
    if K.shape[-2] != V.shape[-2]:
        raise ValueError(f"key length {K.shape[-2]} != value length {V.shape[-2]}")
    return nx.matmul(attention_weights(Q, K, d_head, scaling), V)


def fuse_modality(U: Node, encoder_rep: Node, params: dict, modality: int, cfg) -> Node:
    """All heads for one modality, concatenated on features and projected by W^c.

    Heads are evaluated together from the stacked projections; the result is
    identical to concatenating ``cross_attention_head`` over
    ``project_q``/``project_kv`` per head.
    """
    H, dh = cfg.heads, cfg.head_dim
    wq, wk, wv = (params[f"fusion.m{modality}.{k}"] for k in ("wq", "wk", "wv"))
    _check_width(U, wk, "fuse_modality")
    _check_width(encoder_rep, wq, "fuse_modality")

    def split(x: Node) -> Node:
        lead, L = x.shape[:-2], x.shape[-2]
        x = nx.reshape(x, (*lead, L, H, dh))
        n = len(lead)
        return nx.transpose(x, (*range(n), n + 1, n, n + 2))

    q = split(nx.matmul(encoder_rep, wq))
    k = split(nx.matmul(U, wk))
    v = split(nx.matmul(U, wv))
    out = cross_attention_head(q, k, v, dh, cfg.scaling)  # [..., H, L, dh]
    n = out.ndim - 3
    out = nx.transpose(out, (*range(n), n + 1, n, n + 2))
    out = nx.reshape(out, (*out.shape[:-2], H * dh))
    return nx.matmul(out, params[f"fusion.m{modality}.wc"])


def fuse_all(modality_outputs: list[Node], params: dict) -> FusedRepresentation:
    """Concatenate R^c_i on features, project by W^m, mean-pool over tokens."""
    lengths = {x.shape[-2] for x in modality_outputs}
    if len(lengths) != 1:
        raise ValueError(f"modality outputs differ in sequence length: {sorted(lengths)}")
    seq = nx.matmul(nx.concat(modality_outputs, axis=-1), params["fusion.wm"])
    return FusedRepresentation(nx.mean(seq, axis=-2), seq)


def cross_fusion(U: list[Node], encoder_rep: Node, params: dict, cfg) -> FusedRepresentation:
    return fuse_all([fuse_modality(u, encoder_rep, params, i, cfg) for i, u in enumerate(U)], params)


def concat_fusion(U: list[Node], params: dict) -> FusedRepresentation:
    """Ablation without cross attention: pool each U_i, concatenate, project.

    The pre-pooling sequence is the single fused row.
    """
    pooled = [nx.mean(u, axis=-2) for u in U]
    vec = nx.linear(nx.concat(pooled, axis=-1), params["fusion.concat.w"], params["fusion.concat.b"])
    return FusedRepresentation(vec, nx.reshape(vec, (*vec.shape[:-1], 1, vec.shape[-1])))
