"""Run configuration and its INI-style text format.

The file has sections purely for readability; keys are unique across
sections, so a ``key=value`` override never needs a section prefix.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

SECTIONS = {
    "train": ("epochs", "batch_size", "base_lr", "weight_decay", "warmup_epochs", "warmup_ratio",
              "poly_power", "grad_clip", "seed", "eval_every", "augment", "workers"),
    "model": ("num_classes", "in_channels", "widths", "window", "lora_rank", "c_e", "c_mem",
              "decoder_width"),
    "ablation": ("memory_mechanism", "spmm", "residual_connection", "spmm_reuse_projection"),
    "freeze": ("freeze_backbone", "freeze_lora", "freeze_decoder", "freeze_memory_encoder",
               "freeze_memory_attention"),
    "loss": ("mu", "alpha", "ohem_threshold", "ohem_min_kept"),
    "data": ("manifest", "train_split", "val_split"),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    epochs: int = 30
    batch_size: int = 4
    base_lr: float = 4.5e-4
    weight_decay: float = 0.01
    warmup_epochs: int = 2
    warmup_ratio: float = 0.1
    poly_power: float = 0.9
    grad_clip: float = 1.0
    seed: int = 0
    eval_every: int = 1
    augment: bool = True
    workers: int = 1

    num_classes: int = 4
    in_channels: int = 1
    widths: tuple = (16, 32, 64, 64)
    window: int = 4
    lora_rank: int = 4
    c_e: int = 64
    c_mem: int = 16
    decoder_width: int = 32

    memory_mechanism: bool = True
    spmm: bool = True
    residual_connection: bool = True
    spmm_reuse_projection: bool = False

    freeze_backbone: bool = False
    freeze_lora: bool = False
    freeze_decoder: bool = False
    freeze_memory_encoder: bool = False
    freeze_memory_attention: bool = False

    mu: float = 0.2
    alpha: float = 1.0
    ohem_threshold: float = 0.7
    ohem_min_kept: float = 0.0625

    manifest: str = ""
    train_split: str = "train"
    val_split: str = "val"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.validate()

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.epochs and not self.warmup_epochs < self.epochs:
            raise ConfigError("warmup_epochs must be < epochs")
        if not 0 < self.warmup_ratio <= 1:
            raise ConfigError("warmup_ratio must lie in (0, 1]")
        if self.poly_power <= 0:
            raise ConfigError("poly_power must be > 0")
        if not 0 <= self.mu <= 1:
            raise ConfigError("mu must lie in [0, 1]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if len(self.widths) != 4:
            raise ConfigError("widths needs four stage widths")

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        return self.replace(**{k: _parse_value(k, v) for k, v in overrides.items()})

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        for sec, keys in SECTIONS.items():
            cp[sec] = {k: _format_value(getattr(self, k)) for k in keys}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def save(self, path: str | Path):
        Path(path).write_text(self.to_text())


_FIELD_TYPES = {f.name: f for f in fields(RunConfig)}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_value(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    default = _FIELD_TYPES[key].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "1", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r}") from e
    return raw


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config parse error: {e}") from e
    values = {}
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        for k, v in cp[sec].items():
            if k not in SECTIONS[sec]:
                raise ConfigError(f"key {k!r} does not belong in [{sec}]")
            values[k] = _parse_value(k, v)
    return (base or RunConfig()).replace(**values)


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)
