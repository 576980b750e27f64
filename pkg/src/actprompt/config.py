"""Configuration dataclasses and the flat ``key = value`` config file format.

A config file holds one assignment per line; ``#`` starts a comment.  Dotted
keys address nested sections, e.g.::

    learning_rate = 0.1
    loss.alpha1 = 5
    temporal.T = 1
    encoder.embed_dim = 64
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .exceptions import ConfigError


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    video_dim: int = 48
    num_layers: int = 4
    num_heads: int = 4
    vocab_size: int = 1024
    max_tokens: int = 16
    seed: int = 0
    pretrain_steps: int = 200

    def __post_init__(self):
        for name in ("image_size", "patch_size", "channels", "embed_dim", "video_dim",
                     "num_layers", "num_heads", "vocab_size", "max_tokens"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"encoder.{name} must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.pretrain_steps < 0:
            raise ConfigError("encoder.pretrain_steps must be >= 0")
        if self.max_tokens < 3:
            raise ConfigError("max_tokens must leave room for BOS, EOS and one word")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def text_dim(self) -> int:
        return self.embed_dim


@dataclass(frozen=True)
class TemporalConfig:
    T: int = 1
    hidden_width: int = 0  # 0 means "same as embed_dim"
    enabled: bool = True

    def __post_init__(self):
        if self.T < 0:
            raise ConfigError("temporal.T must be nonnegative")
        if self.hidden_width < 0:
            raise ConfigError("temporal.hidden_width must be nonnegative")

    @property
    def window(self) -> int:
        return 2 * self.T + 1


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 5.0
    alpha2: float = 200.0

    def __post_init__(self):
        if not (self.alpha1 >= 0 and self.alpha2 >= 0):
            raise ConfigError("loss weights must be nonnegative")
        if self.alpha1 == float("inf") or self.alpha2 == float("inf"):
            raise ConfigError("loss weights must be finite")


@dataclass(frozen=True)
class SamplingConfig:
    min_gap_clips: int = 0
    inter_negative: str = "annotated"

    def __post_init__(self):
        if self.min_gap_clips < 0:
            raise ConfigError("sampling.min_gap_clips must be nonnegative")
        if self.inter_negative not in ("annotated", "random"):
            raise ConfigError("sampling.inter_negative must be 'annotated' or 'random'")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 10
    data_ratio: float = 0.1
    batch_size: int = 32
    seed: int = 0
    momentum: float = 0.0
    clip_length: float = 2.0
    prompt: str = "action"
    verb_extractor: str = "heuristic"
    loss: LossWeights = field(default_factory=LossWeights)
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if not 0 < self.data_ratio <= 1:
            raise ConfigError("data_ratio must lie in (0, 1]")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (inter-video negatives)")
        if self.learning_rate < 0 or self.momentum < 0:
            raise ConfigError("learning_rate and momentum must be nonnegative")
        if self.clip_length <= 0:
            raise ConfigError("clip_length must be positive")
        if self.prompt not in ("action", "vanilla"):
            raise ConfigError("prompt must be 'action' or 'vanilla'")
        if self.verb_extractor not in ("heuristic", "annotation"):
            raise ConfigError("verb_extractor must be 'heuristic' or 'annotation'")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _coerce(value: str, kind: Any, key: str):
    try:
        if kind in (bool, "bool"):
            lowered = value.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind in (int, "int"):
            return int(value)
        if kind in (float, "float"):
            return float(value)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from None
    return value


def to_flat(config) -> dict[str, Any]:
    """Flatten a (nested) config dataclass into dotted keys."""
    flat = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if dataclasses.is_dataclass(value):
            for key, sub in to_flat(value).items():
                flat[f"{f.name}.{key}"] = sub
        else:
            flat[f.name] = value
    return flat


def from_flat(flat: dict[str, Any], base=None, cls=TrainConfig):
    """Build a config from dotted keys, starting from ``base`` (or defaults)."""
    base = base if base is not None else cls()
    nested: dict[str, dict[str, Any]] = {}
    top: dict[str, Any] = {}
    fields = {f.name: f for f in dataclasses.fields(base)}
    for key, value in flat.items():
        head, _, rest = key.partition(".")
        if head not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(base, head)
        if rest:
            if not dataclasses.is_dataclass(current):
                raise ConfigError(f"unknown config key {key!r}")
            nested.setdefault(head, {})[rest] = value
        else:
            if dataclasses.is_dataclass(current):
                raise ConfigError(f"config key {key!r} names a section")
            if isinstance(value, str):
                value = _coerce(value, fields[head].type, key)
            top[head] = value
    for head, sub in nested.items():
        top[head] = from_flat(sub, getattr(base, head), type(getattr(base, head)))
    return dataclasses.replace(base, **top)


def parse_config_text(text: str, base=None, cls=TrainConfig):
    flat = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        for sep in ("=", ":"):
            if sep in line:
                key, value = line.split(sep, 1)
                break
        else:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        flat[key.strip()] = value.strip()
    return from_flat(flat, base, cls)


def load_config(path, base=None, cls=TrainConfig):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"), base, cls)


def dump_config_text(config) -> str:
    return "".join(f"{k} = {v}\n" for k, v in sorted(to_flat(config).items()))
