"""Per-modality token embedders and fixed sinusoidal position codes."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numerics as nx
from .numerics import Node


@dataclass
class TokenSequence:
    """Tokens plus structural coordinates.

    ``positions`` is an int array [L, 4] of (modality, t, h, w); modality 0 is
    the video, modality j+1 is sensor stream j (whose h and w are 0).
    ``tokens`` is [L, d] or batched [B, L, d].
    """

    tokens: Node
    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64).reshape(-1, 4)
        if self.tokens.shape[-2] != len(self.positions):
            raise ValueError(
                f"{self.tokens.shape[-2]} tokens but {len(self.positions)} position entries"
            )

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    @property
    def modalities(self) -> np.ndarray:
        return self.positions[:, 0]

    def select(self, indices) -> "TokenSequence":
        idx = np.asarray(indices, dtype=np.int64)
        return TokenSequence(nx.take(self.tokens, idx, axis=-2), self.positions[idx])


@dataclass(frozen=True)
class Layout:
    """Static token geometry for one configuration."""

    video_grid: tuple[int, int, int]
    tubelet: tuple[int, int, int, int]  # (tt, ph, pw, C)
    sensor_tokens: tuple[int, ...]
    sensor_channels: tuple[int, ...]
    window: int
    stride: int

    @classmethod
    def from_config(cls, cfg) -> "Layout":
        d, e = cfg.data, cfg.embed
        specs = d.sensor_specs()
        return cls(
            video_grid=(d.frames // e.tubelet_t, d.height // e.patch_h, d.width // e.patch_w),
            tubelet=(e.tubelet_t, e.patch_h, e.patch_w, d.channels),
            sensor_tokens=tuple((n - e.sensor_window) // e.sensor_stride + 1 for n, _ in specs),
            sensor_channels=tuple(ch for _, ch in specs),
            window=e.sensor_window,
            stride=e.sensor_stride,
        )

    @property
    def num_modalities(self) -> int:
        return 1 + len(self.sensor_tokens)

    @property
    def video_tokens(self) -> int:
        t, h, w = self.video_grid
        return t * h * w

    @property
    def modality_tokens(self) -> tuple[int, ...]:
        return (self.video_tokens, *self.sensor_tokens)

    @property
    def patch_sizes(self) -> tuple[int, ...]:
        tt, ph, pw, c = self.tubelet
        return (tt * ph * pw * c, *[self.window * ch for ch in self.sensor_channels])

    @property
    def total_tokens(self) -> int:
        return sum(self.modality_tokens)

    def positions(self, modality: int) -> np.ndarray:
        if modality == 0:
            t, h, w = self.video_grid
            g = np.stack(np.meshgrid(np.arange(t), np.arange(h), np.arange(w), indexing="ij"), -1)
            g = g.reshape(-1, 3)
            return np.concatenate([np.zeros((len(g), 1), dtype=np.int64), g], axis=1)
        n = self.sensor_tokens[modality - 1]
        pos = np.zeros((n, 4), dtype=np.int64)
        pos[:, 0] = modality
        pos[:, 1] = np.arange(n)
        return pos

    def all_positions(self) -> np.ndarray:
        return np.concatenate([self.positions(m) for m in range(self.num_modalities)])


# ---------------------------------------------------------------------------
# Raw-data slicing (no gradients: inputs are data)
# ---------------------------------------------------------------------------


def check_video_geometry(video_shape, tubelet) -> None:
    T, H, W = video_shape[-4:-1]
    tt, ph, pw, _ = tubelet
    if T % tt or H % ph or W % pw:
        raise ValueError(
            f"video {T}x{H}x{W} is not divisible into tubelets {tt}x{ph}x{pw}; "
            f"frames must be a multiple of {tt}, height of {ph}, width of {pw}"
        )


def patchify(video: np.ndarray, tubelet: tuple[int, int, int, int]) -> np.ndarray:
    """[..., T, H, W, C] -> [..., L, tt*ph*pw*C] in (t, h, w) token order."""
    check_video_geometry(video.shape, tubelet)
    tt, ph, pw, _ = tubelet
    *lead, T, H, W, C = video.shape
    x = video.reshape(*lead, T // tt, tt, H // ph, ph, W // pw, pw, C)
    n = len(lead)
    axes = list(range(n)) + [n, n + 2, n + 4, n + 1, n + 3, n + 5, n + 6]
    x = np.transpose(x, axes)
    return x.reshape(*lead, (T // tt) * (H // ph) * (W // pw), tt * ph * pw * C)


def windows(series: np.ndarray, window: int, stride: int) -> np.ndarray:
    """[..., T, C] -> [..., T', window*C] raw window contents."""
    T = series.shape[-2]
    if T < window:
        raise ValueError(f"series length {T} shorter than window {window}")
    n = (T - window) // stride + 1
    idx = np.arange(n)[:, None] * stride + np.arange(window)[None, :]
    w = series[..., idx, :]
    return w.reshape(*series.shape[:-2], n, -1)


# ---------------------------------------------------------------------------
# Embedders
# ---------------------------------------------------------------------------


def tubelet_embed(video, tubelet, params: dict[str, Node], prefix: str = "embed.video") -> Node:
    """Linear map of each flattened tubelet: [..., T, H, W, C] -> [..., L, d]."""
    patches = patchify(np.asarray(video, dtype=np.float64), tubelet)
    return nx.linear(patches, params[f"{prefix}.w"], params[f"{prefix}.b"])


def sensor_embed(series, window: int, stride: int, params: dict[str, Node], prefix: str) -> Node:
    """Strided conv1d + GELU, then a linear map to the shared token width."""
    x = np.asarray(series, dtype=np.float64)
    if x.shape[-2] < window:
        raise ValueError(f"series length {x.shape[-2]} shorter than window {window}")
    h = nx.gelu(nx.conv1d(x, params[f"{prefix}.conv"], stride, params[f"{prefix}.conv_b"]))
    return nx.linear(h, params[f"{prefix}.proj"], params[f"{prefix}.proj_b"])


def sinusoid(index: np.ndarray, dim: int) -> np.ndarray:
    if dim % 2:
        raise ValueError(f"positional encoding needs an even dimension, got {dim}")
    index = np.asarray(index, dtype=np.float64).reshape(-1, 1)
    freq = 1.0 / (10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim))
    out = np.empty((index.shape[0], dim), dtype=np.float64)
    out[:, 0::2] = np.sin(index * freq)
    out[:, 1::2] = np.cos(index * freq)
    return out


def positional_encoding(positions: np.ndarray, dim: int, layout: Layout) -> np.ndarray:
    """Fixed codes for (modality, t, h, w) tags.

    Video tokens sum three codes whose indices occupy disjoint ranges (one per
    axis). Sensor stream j uses its time index shifted past the video ranges
    and past every earlier stream, so no two streams share a code.
    """
    positions = np.asarray(positions, dtype=np.int64).reshape(-1, 4)
    t_n, h_n, w_n = layout.video_grid
    video_span = t_n + h_n + w_n
    bases = np.cumsum([video_span, *layout.sensor_tokens])[:-1]
    out = np.zeros((len(positions), dim))
    vid = positions[:, 0] == 0
    if vid.any():
        p = positions[vid]
        out[vid] = (
            sinusoid(p[:, 1], dim) + sinusoid(t_n + p[:, 2], dim) + sinusoid(t_n + h_n + p[:, 3], dim)
        )
    sen = ~vid
    if sen.any():
        p = positions[sen]
        out[sen] = sinusoid(bases[p[:, 0] - 1] + p[:, 1], dim)
    return out


@lru_cache(maxsize=64)
def modality_encoding(layout: Layout, modality: int, dim: int) -> np.ndarray:
    pe = positional_encoding(layout.positions(modality), dim, layout)
    pe.setflags(write=False)
    return pe


def embed_modalities(video, sensors, layout: Layout, params: dict[str, Node]) -> list[Node]:
    """Unimodal token sets U_i with position codes added, video first."""
    d = params["embed.video.w"].shape[-1]
    out = [nx.add(tubelet_embed(video, layout.tubelet, params), modality_encoding(layout, 0, d))]
    for j, series in enumerate(sensors):
        tok = sensor_embed(series, layout.window, layout.stride, params, f"embed.s{j}")
        out.append(nx.add(tok, modality_encoding(layout, j + 1, d)))
    return out


def concat_modalities(video_tokens: TokenSequence, sensor_tokens: list[TokenSequence]) -> TokenSequence:
    """Concatenate along the sequence axis: video first, then sensors in order."""
    seqs = [video_tokens, *sensor_tokens]
    dims = {s.dim for s in seqs}
    if len(dims) != 1:
        raise ValueError(f"token widths differ across modalities: {sorted(dims)}")
    return TokenSequence(
        nx.concat([s.tokens for s in seqs], axis=-2),
        np.concatenate([s.positions for s in seqs]),
    )
