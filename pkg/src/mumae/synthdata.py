"""Synthetic multimodal activity data: a moving blob video plus IMU-like streams.

Each class owns a trajectory (angular frequency, phase, Lissajous shape) and
a harmonic signature per sensor channel. Sensors are driven by the same
trajectory phase as the video, so masked sensor windows can in principle be
recovered from the other modalities.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 13
    samples_per_class: int = 50
    video_geometry: tuple[int, int, int, int] = (8, 32, 32, 1)
    sensor_specs: tuple[tuple[int, int], ...] = ((128, 3),) * 4
    noise_sigma: float = 0.1
    sensor_redundancy: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.samples_per_class < 1:
            raise ValueError("num_classes and samples_per_class must be positive")
        if len(self.video_geometry) != 4 or min(self.video_geometry) < 1:
            raise ValueError(f"video_geometry must be 4 positive extents, got {self.video_geometry}")
        for length, ch in self.sensor_specs:
            if length < 1 or ch < 1:
                raise ValueError(f"sensor extents must be positive, got {(length, ch)}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.sensor_redundancy <= 1.0:
            raise ValueError("sensor_redundancy must lie in [0, 1]")

    @classmethod
    def from_config(cls, data) -> "DatasetSpec":
        return cls(
            num_classes=data.num_classes,
            samples_per_class=data.samples_per_class,
            video_geometry=(data.frames, data.height, data.width, data.channels),
            sensor_specs=tuple(data.sensor_specs()),
            noise_sigma=data.noise_sigma,
            sensor_redundancy=data.redundancy,
            seed=data.seed,
        )


@dataclass
class MultimodalSample:
    video: np.ndarray  # [T, H, W, C] in [0, 1]
    sensors: list[np.ndarray]  # each [T_s, D_s]
    label: int
    sample_id: str

    @property
    def num_modalities(self) -> int:
        return 1 + len(self.sensors)


@dataclass(frozen=True)
class ClassSplit:
    meta_train: tuple[int, ...]
    meta_test: tuple[int, ...]

    def __post_init__(self):
        if set(self.meta_train) & set(self.meta_test):
            raise ValueError("meta-train and meta-test classes overlap")
        if not self.meta_test:
            raise ValueError("meta-test side is empty")


@dataclass(frozen=True)
class _ClassPattern:
    freq: float
    phase: float
    radius: tuple[float, float]
    lissajous: int
    tilt: float
    # per sensor stream: amplitudes/phases of shape [D_s, harmonics]
    amps: tuple[np.ndarray, ...] = field(default=())
    phis: tuple[np.ndarray, ...] = field(default=())


HARMONICS = 3
FREQ_BASE, FREQ_BAND = 1.0, 2.0
FREQ_JITTER = 0.02
PHASE_JITTER = 0.1
GAIN_RANGE = (0.7, 1.4)
OFFSET_SD = 1.0
CLUTTER = 0.6


def _class_pattern(spec: DatasetSpec, class_id: int) -> _ClassPattern:
    rng = RngStream(spec.seed, "data").generator(0, class_id)
    # Frequencies are spread over a fixed band by class rank, then jittered,
    # so no two classes share the same tempo.
    order = RngStream(spec.seed, "data").generator(0, 10**6).permutation(spec.num_classes)
    rank = int(np.flatnonzero(order == class_id)[0])
    freq = FREQ_BASE + FREQ_BAND * (rank + rng.uniform(0.2, 0.8)) / spec.num_classes
    phase = rng.uniform(0.0, TWO_PI)
    radius = (rng.uniform(0.18, 0.3), rng.uniform(0.18, 0.3))
    lissajous = int(rng.integers(1, 3))
    tilt = rng.uniform(0.0, TWO_PI)
    amps, phis = [], []
    for _, ch in spec.sensor_specs:
        a = rng.standard_normal((ch, HARMONICS)) / np.arange(1, HARMONICS + 1)
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        amps.append(a)
        phis.append(rng.uniform(0.0, TWO_PI, size=(ch, HARMONICS)))
    return _ClassPattern(freq, phase, radius, lissajous, tilt, tuple(amps), tuple(phis))


def _sensor_signal(theta: np.ndarray, amps: np.ndarray, phis: np.ndarray) -> np.ndarray:
    m = np.arange(1, HARMONICS + 1)
    # theta [T] -> [T, D]
    arg = theta[:, None, None] * m[None, None, :] + phis[None, :, :]
    return (amps[None, :, :] * np.sin(arg)).sum(axis=-1)


def _resample(x: np.ndarray, length: int, channels: int) -> np.ndarray:
    src = np.linspace(0.0, 1.0, x.shape[0], endpoint=False)
    dst = np.linspace(0.0, 1.0, length, endpoint=False)
    cols = [np.interp(dst, src, x[:, c % x.shape[1]]) for c in range(channels)]
    return np.stack(cols, axis=1)


def generate_sample(spec: DatasetSpec, class_id: int, sample_index: int) -> MultimodalSample:
    if not 0 <= class_id < spec.num_classes:
        raise ValueError(f"class_id {class_id} out of range [0, {spec.num_classes})")
    pat = _class_pattern(spec, class_id)
    rng = RngStream(spec.seed, "data").generator(1, class_id, sample_index)

    freq = pat.freq * (1.0 + FREQ_JITTER * rng.standard_normal())
    phase = pat.phase + PHASE_JITTER * rng.standard_normal()
    gain = rng.uniform(*GAIN_RANGE)
    center = 0.5 + 0.03 * rng.standard_normal(2)
    blob_sd = rng.uniform(0.08, 0.12)
    blob_level = rng.uniform(0.5, 1.0)

    def theta(n: int) -> np.ndarray:
        return TWO_PI * freq * np.arange(n) / n + phase

    T, H, W, C = spec.video_geometry
    th = theta(T)
    cx = center[0] + pat.radius[0] * np.cos(th)
    cy = center[1] + pat.radius[1] * np.sin(pat.lissajous * th + pat.tilt)
    ys = (np.arange(H) + 0.5) / H
    xs = (np.arange(W) + 0.5) / W
    d2 = (xs[None, None, :] - cx[:, None, None]) ** 2 + (ys[None, :, None] - cy[:, None, None]) ** 2
    blob = blob_level * np.exp(-d2 / (2.0 * blob_sd**2))
    # Static scene behind the actor: per-pixel clutter plus a brightness level.
    scene = rng.uniform(0.0, CLUTTER, size=(H, W, C)) + rng.uniform(0.0, 0.2)
    video = np.maximum(scene[None], blob[..., None])
    if spec.noise_sigma > 0:
        video = video + spec.noise_sigma * rng.standard_normal(video.shape)
    video = np.clip(video, 0.0, 1.0)

    clean = []
    for j, (length, ch) in enumerate(spec.sensor_specs):
        x = _sensor_signal(theta(length), pat.amps[j], pat.phis[j])
        # The motion pattern is zero-mean in time; a constant per-channel
        # offset (device pose) rides on top of it.
        x = gain * (x - x.mean(axis=0)) + OFFSET_SD * rng.standard_normal(ch)
        clean.append(x)
    r = spec.sensor_redundancy
    sensors = []
    for j, (length, ch) in enumerate(spec.sensor_specs):
        x = clean[j]
        if j > 0 and r > 0:
            x = r * _resample(clean[0], length, ch) + (1.0 - r) * x
        if spec.noise_sigma > 0:
            x = x + spec.noise_sigma * rng.standard_normal(x.shape)
        sensors.append(x)

    # Round through float32 so in-memory and on-disk datasets agree bit for bit.
    video = video.astype(np.float32).astype(np.float64)
    sensors = [s.astype(np.float32).astype(np.float64) for s in sensors]
    return MultimodalSample(video, sensors, class_id, f"c{class_id:03d}_{sample_index:05d}")


def generate_dataset(spec: DatasetSpec) -> list[MultimodalSample]:
    return [
        generate_sample(spec, c, i)
        for c in range(spec.num_classes)
        for i in range(spec.samples_per_class)
    ]


def dataset_hash(samples: list[MultimodalSample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.sample_id.encode())
        h.update(np.int64(s.label).tobytes())
        h.update(np.ascontiguousarray(s.video).tobytes())
        for x in s.sensors:
            h.update(np.ascontiguousarray(x).tobytes())
    return h.hexdigest()


def class_split(num_classes: int, num_test_classes: int, seed: int) -> ClassSplit:
    if not 0 < num_test_classes < num_classes:
        raise ValueError(
            f"need 0 < num_test_classes < num_classes, got {num_test_classes} of {num_classes}"
        )
    perm = RngStream(seed, "split").generator().permutation(num_classes)
    test = tuple(sorted(int(c) for c in perm[:num_test_classes]))
    train = tuple(sorted(int(c) for c in perm[num_test_classes:]))
    return ClassSplit(train, test)


def centroid_accuracy(samples: list[MultimodalSample]) -> float:
    """Train-set accuracy of a nearest-class-centroid rule on flattened sensors."""
    X = np.stack([np.concatenate([s.reshape(-1) for s in smp.sensors]) for smp in samples])
    y = np.array([smp.label for smp in samples])
    classes = np.unique(y)
    cents = np.stack([X[y == c].mean(axis=0) for c in classes])
    d = ((X[:, None, :] - cents[None, :, :]) ** 2).sum(axis=-1)
    return float((classes[d.argmin(axis=1)] == y).mean())
