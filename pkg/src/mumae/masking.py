"""Tube, synchronized and plain random masking."""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .embedding import TokenSequence

STRATEGIES = ("synchronized", "random")


def round_half_up(x) -> int:
    d = x if isinstance(x, Decimal) else Decimal(repr(float(x)))
    return int(d.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def masked_count(ratio: float, population: int) -> int:
    """round_half_up(ratio * population), computed on the decimal literal of ``ratio``."""
    _check_ratio(ratio)
    # 0.85 * 20 must give 17 even though float(0.85) sits just below 0.85.
    return min(population, round_half_up(Decimal(repr(float(ratio))) * population))


def _check_ratio(ratio: float) -> None:
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1], got {ratio}")


@dataclass(frozen=True)
class VideoMask:
    grid: tuple[int, int, int]
    masked: np.ndarray  # bool [t, h, w]
    ratio: float

    @property
    def flat(self) -> np.ndarray:
        return self.masked.reshape(-1)

    def masked_indices(self) -> np.ndarray:
        return np.flatnonzero(self.flat)

    def visible_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.flat)


@dataclass(frozen=True)
class SensorMask:
    num_time_tokens: int
    masked_time_indices: np.ndarray  # sorted int
    ratio: float

    def visible_time_indices(self) -> np.ndarray:
        keep = np.ones(self.num_time_tokens, dtype=bool)
        keep[self.masked_time_indices] = False
        return np.flatnonzero(keep)


@dataclass(frozen=True)
class MaskPlan:
    """Masking decisions for one sample.

    Under ``synchronized`` every entry of ``sensors`` is the same object.
    """

    video: VideoMask | None
    sensors: tuple[SensorMask, ...]
    strategy: str


def tube_mask(grid: tuple[int, int, int], ratio: float, rng: np.random.Generator) -> VideoMask:
    t, h, w = grid
    n = masked_count(ratio, h * w)
    spatial = np.zeros(h * w, dtype=bool)
    spatial[rng.permutation(h * w)[:n]] = True
    masked = np.broadcast_to(spatial.reshape(1, h, w), (t, h, w)).copy()
    return VideoMask((t, h, w), masked, ratio)


def synchronized_mask(num_time_tokens: int, ratio: float, rng: np.random.Generator) -> SensorMask:
    n = masked_count(ratio, num_time_tokens)
    idx = np.sort(rng.permutation(num_time_tokens)[:n])
    return SensorMask(num_time_tokens, idx, ratio)


def random_mask(num_tokens: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    n = masked_count(ratio, num_tokens)
    return np.sort(rng.permutation(num_tokens)[:n])


def make_plan(
    video_grid: tuple[int, int, int] | None,
    sensor_tokens: list[int],
    strategy: str,
    video_ratio: float,
    sensor_ratio: float,
    rng: np.random.Generator,
) -> MaskPlan:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown mask strategy {strategy!r}; expected one of {STRATEGIES}")
    video = tube_mask(video_grid, video_ratio, rng) if video_grid is not None else None
    if not sensor_tokens:
        return MaskPlan(video, (), strategy)
    if strategy == "synchronized":
        if len(set(sensor_tokens)) != 1:
            raise ValueError(
                f"synchronized masking needs equal token counts per sensor, got {sensor_tokens}"
            )
        shared = synchronized_mask(sensor_tokens[0], sensor_ratio, rng)
        return MaskPlan(video, tuple(shared for _ in sensor_tokens), strategy)
    sensors = tuple(
        SensorMask(n, random_mask(n, sensor_ratio, rng), sensor_ratio) for n in sensor_tokens
    )
    return MaskPlan(video, sensors, strategy)


def apply_mask(tokens: TokenSequence, masked_indices) -> tuple[TokenSequence, np.ndarray]:
    """Drop masked tokens, keeping order and position tags of the rest."""
    masked = np.unique(np.asarray(masked_indices, dtype=np.int64))
    L = len(tokens)
    if masked.size and (masked[0] < 0 or masked[-1] >= L):
        raise IndexError(f"mask index out of range for a sequence of {L} tokens: {masked}")
    keep = np.ones(L, dtype=bool)
    keep[masked] = False
    visible = np.flatnonzero(keep)
    return tokens.select(visible), masked
