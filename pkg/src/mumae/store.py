"""On-disk formats: framed tensor files, checkpoints, dataset directories, metrics.

Tensor frame layout (all little-endian)::

    magic  b"MUMAE" + version byte
    u32    array count
    per array: u16 name length, UTF-8 name, u8 rank, rank x u32 dims,
               float32 payload
    u32    CRC32 of every preceding byte

Checkpoints are frames whose arrays are the model parameters plus metadata
arrays under the ``__meta__.`` prefix (UTF-8 text stored one byte per float).
"""

from __future__ import annotations

import os
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .config import RunConfig, dump_config, parse_config
from .synthdata import ClassSplit, DatasetSpec, MultimodalSample

MAGIC = b"MUMAE"
FORMAT_VERSION = 1
META_PREFIX = "__meta__."


class CheckpointError(Exception):
    """Unreadable, corrupt, or wrong-version tensor file."""


class MissingDataError(Exception):
    """Dataset directory absent or incomplete."""


# ---------------------------------------------------------------------------
# Framed tensors
# ---------------------------------------------------------------------------


def encode_frame(arrays: Mapping[str, np.ndarray], version: int = FORMAT_VERSION) -> bytes:
    parts = [MAGIC, bytes([version]), struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"array name too long: {name[:40]}...")
        a = np.asarray(arr)
        if a.ndim > 0xFF:
            raise ValueError(f"{name}: rank {a.ndim} exceeds 255")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_frame(data: bytes) -> dict[str, np.ndarray]:
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a tensor file (bad magic)")
    if len(data) < len(MAGIC) + 9:
        raise CheckpointError(f"file truncated ({len(data)} bytes)")
    version = data[len(MAGIC)]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"format version {version}, expected {FORMAT_VERSION}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC mismatch (file corrupt or truncated)")
    pos = len(MAGIC) + 1
    try:
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(body):
                raise CheckpointError(f"{name}: payload runs past end of file")
            out[name] = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated header: {exc}") from None
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes before CRC")
    return out


def _text_array(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def _array_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")


def write_bytes_atomic(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config_text: str = ""
    rng_summary: str = ""

    def config(self) -> RunConfig:
        return parse_config(self.config_text)

    def to_bytes(self) -> bytes:
        arrays: dict[str, np.ndarray] = {}
        arrays[META_PREFIX + "config"] = _text_array(self.config_text)
        arrays[META_PREFIX + "rng"] = _text_array(self.rng_summary)
        for name in sorted(self.params):
            arrays[name] = self.params[name]
        return encode_frame(arrays)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        arrays = decode_frame(data)
        meta = {k[len(META_PREFIX) :]: v for k, v in arrays.items() if k.startswith(META_PREFIX)}
        params = {k: v.astype(np.float64) for k, v in arrays.items() if not k.startswith(META_PREFIX)}
        return cls(params, _array_text(meta.get("config", np.zeros(0))), _array_text(meta.get("rng", np.zeros(0))))


def rng_summary(cfg: RunConfig, phase: str) -> str:
    return f"seed={cfg.seed} data.seed={cfg.data.seed} phase={phase} streams=philox"


def save_checkpoint(path, params: Mapping[str, np.ndarray], cfg: RunConfig, phase: str) -> None:
    ck = Checkpoint(dict(params), dump_config(cfg), rng_summary(cfg, phase))
    write_bytes_atomic(path, ck.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return Checkpoint.from_bytes(data)


# ---------------------------------------------------------------------------
# Dataset directories
# ---------------------------------------------------------------------------

MANIFEST = "manifest.txt"


def _spec_lines(spec: DatasetSpec) -> list[str]:
    sensors = ",".join(f"{n}x{c}" for n, c in spec.sensor_specs)
    return [
        f"spec.num_classes = {spec.num_classes}",
        f"spec.samples_per_class = {spec.samples_per_class}",
        "spec.video_geometry = " + ",".join(str(v) for v in spec.video_geometry),
        f"spec.sensor_specs = {sensors}",
        f"spec.noise_sigma = {spec.noise_sigma!r}",
        f"spec.sensor_redundancy = {spec.sensor_redundancy!r}",
        f"spec.seed = {spec.seed}",
    ]


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def write_dataset(
    root, samples: Iterable[MultimodalSample], spec: DatasetSpec, split: ClassSplit
) -> str:
    """Write one framed file per sample plus the manifest; returns the manifest text."""
    root = Path(root)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    lines = ["# dataset manifest", *_spec_lines(spec)]
    lines.append("split.meta_train = " + ",".join(str(c) for c in split.meta_train))
    lines.append("split.meta_test = " + ",".join(str(c) for c in split.meta_test))
    for s in samples:
        rel = f"samples/{s.sample_id}.bin"
        arrays = {"video": s.video}
        arrays.update({f"sensor{j}": x for j, x in enumerate(s.sensors)})
        write_bytes_atomic(root / rel, encode_frame(arrays))
        lines.append(f"sample = {s.sample_id} {s.label} {rel}")
    text = "\n".join(lines) + "\n"
    write_bytes_atomic(root / MANIFEST, text.encode("utf-8"))
    return text


@dataclass
class ManifestEntry:
    sample_id: str
    label: int
    file: str


@dataclass
class DatasetDir:
    """Read side of a dataset directory. ``opened`` records every sample file read."""

    root: Path
    spec: DatasetSpec
    split: ClassSplit
    entries: list[ManifestEntry]
    opened: list[str] = field(default_factory=list)

    @classmethod
    def open(cls, root) -> "DatasetDir":
        root = Path(root)
        path = root / MANIFEST
        if not path.is_file():
            raise MissingDataError(f"no dataset manifest at {path}")
        kv: dict[str, str] = {}
        entries = []
        for line in path.read_text(encoding="utf-8").splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = (p.strip() for p in line.partition("="))
            if key == "sample":
                sid, label, rel = value.split()
                entries.append(ManifestEntry(sid, int(label), rel))
            else:
                kv[key] = value
        try:
            spec = DatasetSpec(
                num_classes=int(kv["spec.num_classes"]),
                samples_per_class=int(kv["spec.samples_per_class"]),
                video_geometry=_ints(kv["spec.video_geometry"]),
                sensor_specs=tuple(
                    (int(a), int(b))
                    for a, _, b in (t.partition("x") for t in kv["spec.sensor_specs"].split(",") if t)
                ),
                noise_sigma=float(kv["spec.noise_sigma"]),
                sensor_redundancy=float(kv["spec.sensor_redundancy"]),
                seed=int(kv["spec.seed"]),
            )
            train, test = _ints(kv["split.meta_train"]), _ints(kv["split.meta_test"])
        except KeyError as exc:
            raise MissingDataError(f"manifest {path} lacks {exc.args[0]}") from None
        return cls(root, spec, ClassSplit(train, test), entries)

    def classes(self, side: str) -> tuple[int, ...]:
        if side == "meta_train":
            return self.split.meta_train
        if side == "meta_test":
            return self.split.meta_test
        raise ValueError(f"unknown split side {side!r}")

    def load(self, side: str) -> list[MultimodalSample]:
        wanted = set(self.classes(side))
        out = []
        for e in self.entries:
            if e.label not in wanted:
                continue
            path = self.root / e.file
            try:
                data = path.read_bytes()
            except OSError:
                raise MissingDataError(f"sample file missing: {path}") from None
            self.opened.append(e.file)
            arrays = decode_frame(data)
            n = len(self.spec.sensor_specs)
            sensors = [arrays[f"sensor{j}"].astype(np.float64) for j in range(n)]
            out.append(MultimodalSample(arrays["video"].astype(np.float64), sensors, e.label, e.sample_id))
        return out


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    text = str(v)
    if any(ch.isspace() for ch in text) or ":" in text:
        raise ValueError(f"metric value {text!r} contains whitespace or ':'")
    return text


class MetricsWriter:
    """Append-only metric records, one ``key:value`` record per line.

    Each record starts with ``run``, ``phase`` and ``step``; the remaining
    fields are named scalars. Step indices must increase within a phase.
    """

    PHASES = ("pretrain", "finetune", "eval")

    def __init__(self, path, run_id: str, wallclock: bool = False, fresh: bool = True):
        self.path = Path(path)
        self.run_id = run_id
        self.wallclock = wallclock
        self._last: dict[str, int] = {}
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if fresh:
            self.path.write_bytes(b"")

    def record(self, phase: str, step: int, **metrics) -> str:
        if phase not in self.PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        last = self._last.get(phase)
        if last is not None and step <= last:
            raise ValueError(f"{phase}: step {step} not after {last}")
        self._last[phase] = step
        fields = [("run", self.run_id), ("phase", phase), ("step", step), *metrics.items()]
        if self.wallclock:
            fields.append(("wallclock", time.time()))
        line = " ".join(f"{k}:{_fmt_value(v)}" for k, v in fields) + "\n"
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line)
        return line


def parse_metrics(path) -> list[dict[str, str]]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(dict(item.split(":", 1) for item in line.split()))
    return out
