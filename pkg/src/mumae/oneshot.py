"""Episodic C-way K-shot training and evaluation with a cosine-softmax classifier."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .embedding import Layout, embed_modalities
from .fusion import FusedRepresentation, concat_fusion, cross_fusion
from .mae import Batch, block, encode_tokens, init_block
from .numerics import Node, RngStream

HEADS = ("layernorm", "attention")
LOG_CLAMP = 1e-12


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------


@dataclass
class Episode:
    classes: tuple[int, ...]  # class id per slot
    support: list[tuple[object, int]]  # (sample, slot)
    queries: list[tuple[object, int]]
    support_rows: np.ndarray  # dataset row per support entry
    query_rows: np.ndarray

    @property
    def ways(self) -> int:
        return len(self.classes)

    @property
    def support_slots(self) -> np.ndarray:
        return np.array([s for _, s in self.support])

    @property
    def query_slots(self) -> np.ndarray:
        return np.array([s for _, s in self.queries])


class EpisodeSampler:
    """Draws episodes from the given classes of a dataset."""

    def __init__(self, dataset: Sequence, classes: Sequence[int]):
        self.dataset = dataset
        self.classes = tuple(sorted(int(c) for c in classes))
        labels = np.array([s.label for s in dataset])
        self.rows = {c: np.flatnonzero(labels == c) for c in self.classes}

    def sample(self, ways: int, shots: int, num_queries: int, rng: np.random.Generator) -> Episode:
        if len(self.classes) < ways:
            raise ValueError(f"need {ways} classes, split side has only {len(self.classes)}")
        per_class = shots + math.ceil(num_queries / ways)
        for c in self.classes:
            if len(self.rows[c]) < per_class:
                raise ValueError(
                    f"class {c} has {len(self.rows[c])} samples, episode needs {per_class} "
                    f"({shots} shots + up to {per_class - shots} queries)"
                )
        chosen = rng.choice(np.array(self.classes), size=ways, replace=False)
        query_slot = [k % ways for k in range(num_queries)]
        support_rows, support_slots = [], []
        query_rows, query_slots = [], []
        for slot, c in enumerate(chosen):
            n_q = query_slot.count(slot)
            picked = rng.permutation(self.rows[int(c)])[: shots + n_q]
            support_rows += list(picked[:shots])
            support_slots += [slot] * shots
            query_rows += list(picked[shots:])
            query_slots += [slot] * n_q
        ds = self.dataset
        return Episode(
            tuple(int(c) for c in chosen),
            [(ds[r], s) for r, s in zip(support_rows, support_slots)],
            [(ds[r], s) for r, s in zip(query_rows, query_slots)],
            np.array(support_rows, dtype=np.int64),
            np.array(query_rows, dtype=np.int64),
        )


def sample_episode(dataset, side: Sequence[int], ways: int, shots: int, num_queries: int, rng) -> Episode:
    return EpisodeSampler(dataset, side).sample(ways, shots, num_queries, rng)


# ---------------------------------------------------------------------------
# Model-agnostic head, classifier, loss
# ---------------------------------------------------------------------------


def init_oneshot(p: dict, rng, cfg) -> None:
    if cfg.oneshot.head == "attention":
        init_block(p, rng, "oneshot.attn", cfg.fusion.dim, 2.0)


def _attention_heads(dim: int, wanted: int) -> int:
    return wanted if dim % wanted == 0 else 1


def oneshot_embed(fused: FusedRepresentation, params: dict, head: str = "layernorm", heads: int = 2) -> Node:
    """Map a fused representation to the vector compared by the classifier.

    ``layernorm`` standardises the pooled vector (no learned affine).
    ``attention`` runs one self-attention block over the pre-pooling
    sequence, pools, then standardises.
    """
    if head == "layernorm":
        return nx.layer_norm(fused.pooled)
    if head == "attention":
        seq = fused.sequence
        squeeze = seq.ndim == 2
        if squeeze:
            seq = nx.reshape(seq, (1, *seq.shape))
        x = block(seq, params, "oneshot.attn", _attention_heads(seq.shape[-1], heads))
        pooled = nx.mean(x, axis=-2)
        if squeeze:
            pooled = nx.reshape(pooled, pooled.shape[1:])
        return nx.layer_norm(pooled)
    raise ValueError(f"unknown one-shot head {head!r}; expected one of {HEADS}")


def _unit(x: Node) -> Node:
    norm = nx.sqrt(nx.sum(nx.square(x), axis=-1, keepdims=True))
    if np.any(norm.value == 0):
        raise ValueError("cosine distance is undefined for a zero-norm embedding")
    return nx.div(x, norm)


def cosine_distance(queries, supports) -> Node:
    """D_cos between every query row and every support row: [Q, C]."""
    q, s = nx.as_node(queries), nx.as_node(supports)
    return nx.sub(1.0, nx.matmul(_unit(q), nx.swap_last(_unit(s))))


def classify(query, supports) -> Node:
    """p_k = softmax_k(-D_cos(query, support_k)); works for one query or a [Q, d] batch."""
    q, s = nx.as_node(query), nx.as_node(supports)
    if s.shape[-2] < 2:
        raise ValueError(f"need at least 2 supports, got {s.shape[-2]}")
    single = q.ndim == 1
    if single:
        q = nx.reshape(q, (1, q.shape[0]))
    p = nx.softmax(nx.neg(cosine_distance(q, s)), axis=-1)
    return nx.reshape(p, (p.shape[-1],)) if single else p


def classify_value(queries: np.ndarray, supports: np.ndarray) -> np.ndarray:
    return classify(nx.const(queries), nx.const(supports)).value


def _clamped_log(p: Node) -> tuple[Node, int]:
    pv = p.value
    clamped = pv < LOG_CLAMP
    safe = np.where(clamped, LOG_CLAMP, pv)
    out = Node(np.log(safe), (p,), "clamped_log", lambda g: (np.where(clamped, 0.0, g / safe),))
    return out, int(clamped.sum())


def episode_loss(probs, true_slots) -> tuple[Node, int]:
    """Mean over queries of -log p(true slot). Returns (loss, number of clamped entries)."""
    p = nx.as_node(probs)
    if p.ndim == 1:
        p = nx.reshape(p, (1, p.shape[0]))
    slots = np.asarray(true_slots, dtype=np.int64).reshape(-1)
    Q, C = p.shape
    picked = nx.take(nx.reshape(p, (Q * C,)), np.arange(Q) * C + slots)
    logp, clamped = _clamped_log(picked)
    return nx.neg(nx.mean(logp)), clamped


# ---------------------------------------------------------------------------
# Full forward: raw sample -> one-shot embedding
# ---------------------------------------------------------------------------


def forward_param_names(params: dict, cfg) -> list[str]:
    keep = ["embed."]
    if cfg.fusion.mode == "cross":
        keep += ["encoder."]
        keep += [k for k in params if k.startswith("fusion.m") or k == "fusion.wm"]
    else:
        keep += ["fusion.concat."]
    if cfg.oneshot.head == "attention":
        keep += ["oneshot.attn."]
    return [k for k in params if k.startswith(tuple(keep)) or k in keep]


def embed_batch(batch: Batch, params: dict, cfg, layout: Layout) -> Node:
    """embedding -> (encoder -> cross fusion | concat fusion) -> one-shot head. [B, d_m]."""
    U = embed_modalities(batch.video, batch.sensors, layout, params)
    if cfg.fusion.mode == "cross":
        enc = encode_tokens(nx.concat(U, axis=1), params, cfg.encoder.depth, cfg.encoder.heads)
        fused = cross_fusion(U, enc, params, cfg.fusion)
    else:
        fused = concat_fusion(U, params)
    return oneshot_embed(fused, params, cfg.oneshot.head, cfg.fusion.heads)


def embed_dataset(params: dict, data: Batch, cfg, chunk: int = 64) -> np.ndarray:
    layout = Layout.from_config(cfg)
    consts = {k: nx.const(v) for k, v in params.items()}
    out = []
    for start in range(0, len(data), chunk):
        rows = np.arange(start, min(len(data), start + chunk))
        out.append(embed_batch(data.take(rows), consts, cfg, layout).value)
    return np.concatenate(out) if out else np.zeros((0, cfg.fusion.dim))


def prototypes(emb: Node, slots: np.ndarray, ways: int) -> Node:
    """Mean support embedding per slot: [ways, d]."""
    rows = []
    for k in range(ways):
        idx = np.flatnonzero(slots == k)
        rows.append(nx.mean(nx.take(emb, idx, axis=0), axis=0, keepdims=True))
    return nx.concat(rows, axis=0)


# ---------------------------------------------------------------------------
# Finetuning
# ---------------------------------------------------------------------------


@dataclass
class MomentumSGD:
    lr: float
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def update(self, params: dict, grads: dict) -> dict:
        out = dict(params)
        for k, g in grads.items():
            v = self.velocity.get(k, 0.0) * self.momentum + g
            self.velocity[k] = v
            if self.lr != 0.0:
                out[k] = params[k] - self.lr * v
        return out


@dataclass
class EpisodeRecord:
    episode: int
    loss: float
    accuracy: float
    clamped: int = 0


def finetune(
    params: dict[str, np.ndarray],
    train_samples: Sequence,
    cfg,
    classes: Sequence[int] | None = None,
    on_episode: Callable[[EpisodeRecord], None] | None = None,
) -> tuple[dict[str, np.ndarray], list[EpisodeRecord]]:
    """Episodic finetuning with momentum SGD on the meta-train side."""
    layout = Layout.from_config(cfg)
    if classes is None:
        classes = sorted({s.label for s in train_samples})
    sampler = EpisodeSampler(train_samples, classes)
    data = Batch.from_samples(train_samples)
    o = cfg.oneshot
    ways = min(o.ways, len(sampler.classes))
    opt = MomentumSGD(cfg.finetune.lr, cfg.finetune.momentum)
    names = forward_param_names(params, cfg)
    history = []
    for e in range(cfg.finetune.episodes):
        ep = sampler.sample(ways, o.shots, o.queries, RngStream(cfg.seed, "episode").generator(0, e))
        rows = np.concatenate([ep.support_rows, ep.query_rows])
        leaves = nx.param_leaves(params, names)
        emb = embed_batch(data.take(rows), leaves, cfg, layout)
        ns = len(ep.support_rows)
        protos = prototypes(nx.take(emb, np.arange(ns), axis=0), ep.support_slots, ways)
        probs = classify(nx.take(emb, np.arange(ns, len(rows)), axis=0), protos)
        loss, clamped = episode_loss(probs, ep.query_slots)
        nx.backward(loss)
        params = opt.update(params, nx.collect_grads(leaves))
        acc = float((probs.value.argmax(axis=1) == ep.query_slots).mean())
        rec = EpisodeRecord(e, float(loss.value), acc, clamped)
        history.append(rec)
        if on_episode is not None:
            on_episode(rec)
    return params, history


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    episodes: int
    mean: float
    sd: float
    ci95: float
    sd_defined: bool
    per_episode: list[float]

    @classmethod
    def from_accuracies(cls, accs: Sequence[float]) -> "EvalReport":
        a = np.asarray(accs, dtype=np.float64)
        n = len(a)
        sd = float(a.std(ddof=1)) if n > 1 else 0.0
        return cls(n, float(a.mean()), sd, 1.96 * sd / math.sqrt(n), n > 1, [float(x) for x in a])

    def summary(self) -> str:
        sd = f"{self.sd:.4f}" if self.sd_defined else "undefined (1 episode)"
        return (
            f"episodes={self.episodes} accuracy={self.mean:.4f} "
            f"sd={sd} ci95=+/-{self.ci95:.4f}"
        )


def evaluate_embeddings(
    emb: np.ndarray,
    sampler: EpisodeSampler,
    ways: int,
    shots: int,
    queries: int,
    episodes: int,
    seed: int,
    order: Sequence[int] | None = None,
) -> EvalReport:
    """Episode accuracies over precomputed embeddings; episode i always uses key (seed, i)."""
    order = range(episodes) if order is None else order
    accs = np.zeros(episodes)
    for i in order:
        ep = sampler.sample(ways, shots, queries, RngStream(seed, "episode").generator(1, i))
        s = emb[ep.support_rows]
        protos = np.stack([s[ep.support_slots == k].mean(axis=0) for k in range(ways)])
        p = classify_value(emb[ep.query_rows], protos)
        accs[i] = (p.argmax(axis=1) == ep.query_slots).mean()
    return EvalReport.from_accuracies(accs)


def evaluate(
    params: dict[str, np.ndarray],
    test_samples: Sequence,
    cfg,
    ways: int | None = None,
    shots: int | None = None,
    episodes: int | None = None,
    seed: int | None = None,
    classes: Sequence[int] | None = None,
) -> EvalReport:
    o = cfg.oneshot
    ways = o.ways if ways is None else ways
    shots = o.shots if shots is None else shots
    episodes = cfg.eval.episodes if episodes is None else episodes
    seed = cfg.seed if seed is None else seed
    if classes is None:
        classes = sorted({s.label for s in test_samples})
    sampler = EpisodeSampler(test_samples, classes)
    if len(sampler.classes) < ways:
        raise ValueError(f"meta-test side has {len(sampler.classes)} classes, need {ways}")
    emb = embed_dataset(params, Batch.from_samples(test_samples), cfg)
    return evaluate_embeddings(emb, sampler, ways, shots, o.queries, episodes, seed)
