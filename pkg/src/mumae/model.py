"""Parameter construction for the whole pipeline."""

from __future__ import annotations

import numpy as np

from .embedding import Layout
from .fusion import init_fusion
from .mae import init_decoders, init_embedding, init_encoder
from .numerics import RngStream
from .oneshot import init_oneshot


def init_params(cfg, seed: int | None = None) -> dict[str, np.ndarray]:
    """Fresh parameters. Each group draws from its own key of the ``init`` stream."""
    seed = cfg.seed if seed is None else seed
    layout = Layout.from_config(cfg)
    stream = RngStream(seed, "init")
    d = cfg.embed.dim
    p: dict[str, np.ndarray] = {}
    init_embedding(p, stream.generator(0), layout, d, cfg.embed.sensor_dim)
    init_encoder(p, stream.generator(1), d, cfg.encoder.depth, cfg.encoder.mlp_ratio)
    init_decoders(
        p, stream.generator(2), layout, d, cfg.decoder.width, cfg.decoder.depth, cfg.encoder.mlp_ratio
    )
    init_fusion(p, stream.generator(3), layout.num_modalities, d, cfg.fusion)
    init_oneshot(p, stream.generator(4), cfg)
    return p


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))
