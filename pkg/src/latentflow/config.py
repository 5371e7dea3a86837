"""Model and training configuration plus the flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    Df: int = 32
    Dp: int = 16
    K: int = 4
    D: int = 32
    Dh: int = 32
    agt_depth: int = 1
    heads: int = 0  # 0 means max(1, D // 32)
    window: int = 2
    ffn_ratio: int = 2
    iters_train: int = 12
    iters_eval: int = 24
    gamma: float = 0.8
    seed: int = 0
    precision: str = "f32"
    deterministic: bool = True
    zero_init_flow_head: bool = True
    cache_kv: bool = True

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        return dataclasses.replace(cls(), **overrides)

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        base = cls(Df=256, Dp=64, K=8, D=128, Dh=128, agt_depth=3, ffn_ratio=4)
        return dataclasses.replace(base, **overrides)

    @property
    def num_heads(self) -> int:
        return self.heads if self.heads > 0 else max(1, self.D // 32)

    def validate(self) -> "ModelConfig":
        if self.Dp % 4:
            raise ConfigError(f"Dp={self.Dp} must be divisible by 4")
        if self.D % 4:
            raise ConfigError(f"D={self.D} must be divisible by 4 (positional embedding)")
        if self.Df % 4:
            raise ConfigError(f"Df={self.Df} must be divisible by 4")
        if self.D % self.num_heads:
            raise ConfigError(f"D={self.D} not divisible by {self.num_heads} heads")
        if min(self.K, self.D, self.Dh, self.window) < 1 or self.agt_depth < 0:
            raise ConfigError("K, D, Dh, window must be positive and agt_depth non-negative")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma={self.gamma} must lie in (0, 1]")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        return self


@dataclass
class TrainConfig:
    steps: int = 1000
    lr: float = 4e-4
    weight_decay: float = 1e-5
    clip: float = 1.0
    batch: int = 1
    image_h: int = 64
    image_w: int = 64
    kind: str = "smooth_random"
    magnitude: float = 4.0
    num_samples: int = 1
    data_seed: int = 0
    augment: bool = False  # random flips / transposes, applied exactly to the flow
    log_every: int = 1


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _coerce(value: str, typ):
    if typ in (bool, "bool"):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    return value


def parse_config_text(text: str) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. ``preset = full`` selects
    the full-size architecture before other keys are applied."""
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    preset = pairs.pop("preset", "toy")
    if preset not in ("toy", "full"):
        raise ConfigError(f"unknown preset {preset!r}")
    model = ModelConfig.full() if preset == "full" else ModelConfig.toy()
    train = TrainConfig()
    mfields = {f.name: f.type for f in fields(ModelConfig)}
    tfields = {f.name: f.type for f in fields(TrainConfig)}
    for key, value in pairs.items():
        try:
            if key in mfields:
                setattr(model, key, _coerce(value, mfields[key]))
            elif key in tfields:
                setattr(train, key, _coerce(value, tfields[key]))
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{key}: {exc}") from None
    model.validate()
    return RunConfig(model, train)


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for obj in (cfg.model, cfg.train):
        for f in fields(obj):
            lines.append(f"{f.name} = {getattr(obj, f.name)}")
    return "\n".join(lines) + "\n"
