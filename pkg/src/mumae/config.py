"""Run configuration: nested dataclasses, flat ``section.key = value`` text form."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from typing import Any


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value."""


@dataclass
class DataConfig:
    num_classes: int = 13
    num_test_classes: int = 5
    samples_per_class: int = 50
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 1
    sensors: str = "128x3,128x3,128x3,128x3"
    noise_sigma: float = 0.1
    redundancy: float = 0.0
    seed: int = 0

    def sensor_specs(self) -> list[tuple[int, int]]:
        if not self.sensors.strip():
            return []
        out = []
        for item in self.sensors.split(","):
            length, _, chans = item.strip().partition("x")
            out.append((int(length), int(chans)))
        return out


@dataclass
class EmbedConfig:
    tubelet_t: int = 2
    patch_h: int = 16
    patch_w: int = 16
    dim: int = 32
    sensor_window: int = 8
    sensor_stride: int = 8
    sensor_dim: int = 64


@dataclass
class EncoderConfig:
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0


@dataclass
class DecoderConfig:
    depth: int = 4
    heads: int = 2
    width: int = 16
    context: str = "modality"


@dataclass
class MaskConfig:
    strategy: str = "synchronized"
    ratio: float = 0.85
    video_ratio: float | None = None
    sensor_ratio: float | None = None

    def video(self) -> float:
        return self.ratio if self.video_ratio is None else self.video_ratio

    def sensor(self) -> float:
        return self.ratio if self.sensor_ratio is None else self.sensor_ratio


@dataclass
class PretrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0


@dataclass
class FusionConfig:
    mode: str = "cross"
    heads: int = 2
    head_dim: int = 16
    modality_dim: int = 32
    dim: int = 32
    scaling: str = "sqrt"


@dataclass
class OneShotConfig:
    head: str = "layernorm"
    ways: int = 5
    shots: int = 1
    queries: int = 5


@dataclass
class FinetuneConfig:
    episodes: int = 3000
    lr: float = 0.02
    momentum: float = 0.9
    from_scratch: bool = False


@dataclass
class EvalConfig:
    episodes: int = 500


@dataclass
class MetricsConfig:
    wallclock: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    oneshot: OneShotConfig = field(default_factory=OneShotConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    # ------------------------------------------------------------------
    def flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                for g in fields(v):
                    out[f"{f.name}.{g.name}"] = getattr(v, g.name)
            else:
                out[f.name] = v
        return out

    def keys(self) -> list[str]:
        return list(self.flat())

    def set(self, key: str, raw: Any) -> None:
        section, _, name = key.partition(".")
        if not name:
            target, name = self, section
        else:
            target = getattr(self, section, None)
            if not dataclasses.is_dataclass(target):
                raise ConfigError(f"unknown config key: {key}")
        types = {f.name: f.type for f in fields(target)}
        if name not in types or dataclasses.is_dataclass(getattr(target, name)):
            raise ConfigError(f"unknown config key: {key}")
        setattr(target, name, _coerce(key, types[name], raw))

    def copy(self) -> "RunConfig":
        return parse_config(dump_config(self))

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        cfg = self.copy()
        for k, v in overrides.items():
            cfg.set(k, v)
        validate(cfg)
        return cfg

    def digest(self) -> str:
        return hashlib.sha256(dump_config(self).encode("utf-8")).hexdigest()[:12]


def _coerce(key: str, typ: Any, raw: Any) -> Any:
    typ = str(typ)
    optional = "None" in typ
    if isinstance(raw, str):
        text = raw.strip()
        if optional and text.lower() in ("none", ""):
            return None
    else:
        if raw is None:
            if optional:
                return None
            raise ConfigError(f"{key}: value required")
        text = raw
    try:
        if typ.startswith("bool"):
            if isinstance(text, bool):
                return text
            low = str(text).lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if typ.startswith("int"):
            if isinstance(text, float) and not text.is_integer():
                raise ValueError(text)
            return int(text)
        if typ.startswith("float"):
            return float(text)
        return str(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from None


def _fmt(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in cfg.flat().items())


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = RunConfig() if base is None else base
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        cfg.set(key.strip(), value.strip())
    return cfg


def load_config(path: str | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        with open(path, encoding="utf-8") as fh:
            cfg = parse_config(fh.read())
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Reject values that violate a module precondition."""
    d, e = cfg.data, cfg.embed

    def need(cond: bool, key: str, msg: str) -> None:
        if not cond:
            raise ConfigError(f"{key}: {msg}")

    need(d.num_classes >= 2, "data.num_classes", "need at least 2 classes")
    need(0 < d.num_test_classes < d.num_classes, "data.num_test_classes", "must be in (0, num_classes)")
    need(d.samples_per_class >= 1, "data.samples_per_class", "must be positive")
    for k in ("frames", "height", "width", "channels"):
        need(getattr(d, k) >= 1, f"data.{k}", "must be positive")
    need(d.noise_sigma >= 0, "data.noise_sigma", "must be >= 0")
    need(0.0 <= d.redundancy <= 1.0, "data.redundancy", "must lie in [0, 1]")
    try:
        specs = d.sensor_specs()
    except ValueError:
        raise ConfigError(f"data.sensors: expected 'LENxCH,...', got {d.sensors!r}") from None
    for length, ch in specs:
        need(length >= 1 and ch >= 1, "data.sensors", "extents must be positive")
        need(length >= e.sensor_window, "data.sensors", f"length {length} shorter than window")
    need(d.frames % e.tubelet_t == 0, "embed.tubelet_t", f"must divide data.frames={d.frames}")
    need(d.height % e.patch_h == 0, "embed.patch_h", f"must divide data.height={d.height}")
    need(d.width % e.patch_w == 0, "embed.patch_w", f"must divide data.width={d.width}")
    need(e.dim > 0 and e.dim % 2 == 0, "embed.dim", "must be positive and even")
    need(e.sensor_dim > 0, "embed.sensor_dim", "must be positive")
    need(e.sensor_window >= 1 and e.sensor_stride >= 1, "embed.sensor_window", "must be positive")
    need(cfg.encoder.depth >= 1, "encoder.depth", "must be >= 1")
    need(cfg.encoder.heads >= 1 and e.dim % cfg.encoder.heads == 0, "encoder.heads", "must divide embed.dim")
    need(cfg.encoder.mlp_ratio > 0, "encoder.mlp_ratio", "must be positive")
    need(cfg.decoder.depth >= 1, "decoder.depth", "must be >= 1")
    need(cfg.decoder.width % 2 == 0 and cfg.decoder.width > 0, "decoder.width", "must be positive and even")
    need(cfg.decoder.width % cfg.decoder.heads == 0, "decoder.heads", "must divide decoder.width")
    need(cfg.decoder.context in ("modality", "full"), "decoder.context", "modality | full")
    need(cfg.mask.strategy in ("synchronized", "random"), "mask.strategy", "synchronized | random")
    for k, v in (("mask.ratio", cfg.mask.ratio), ("mask.video_ratio", cfg.mask.video_ratio),
                 ("mask.sensor_ratio", cfg.mask.sensor_ratio)):
        need(v is None or 0.0 <= v <= 1.0, k, "must lie in [0, 1]")
    if cfg.mask.strategy == "synchronized" and specs:
        counts = {(n - e.sensor_window) // e.sensor_stride + 1 for n, _ in specs}
        need(len(counts) == 1, "mask.strategy", "synchronized masking needs equal sensor token counts")
    p = cfg.pretrain
    need(p.epochs >= 0, "pretrain.epochs", "must be >= 0")
    need(p.batch_size >= 1, "pretrain.batch_size", "must be positive")
    need(p.lr >= 0, "pretrain.lr", "must be >= 0")
    f = cfg.fusion
    need(f.mode in ("cross", "concat"), "fusion.mode", "cross | concat")
    need(f.heads >= 1 and f.head_dim >= 1, "fusion.heads", "must be positive")
    need(f.scaling in ("sqrt", "exp"), "fusion.scaling", "sqrt | exp")
    need(f.dim >= 2 and f.modality_dim >= 1, "fusion.dim", "must be positive")
    o = cfg.oneshot
    need(o.head in ("layernorm", "attention"), "oneshot.head", "layernorm | attention")
    need(o.ways >= 2, "oneshot.ways", "must be >= 2")
    need(o.shots >= 1, "oneshot.shots", "must be >= 1")
    need(o.queries >= 1, "oneshot.queries", "must be >= 1")
    need(o.ways <= d.num_test_classes, "oneshot.ways", "exceeds data.num_test_classes")
    need(cfg.finetune.episodes >= 0, "finetune.episodes", "must be >= 0")
    need(cfg.finetune.lr >= 0, "finetune.lr", "must be >= 0")
    need(0 <= cfg.finetune.momentum < 1, "finetune.momentum", "must lie in [0, 1)")
    need(cfg.eval.episodes >= 1, "eval.episodes", "must be >= 1")
