"""Model and training configuration, stored as ``key = value`` text."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    blocks_per_level: int = 1
    attn_levels: tuple[int, ...] | None = None  # None: the two lowest resolutions
    heads: int = 4
    image_size: int = 32
    temb_dim: int = 128
    norm_groups: int = 8
    embed_dim: int = 8
    num_labels: int = 32
    traj_channels: int = 16
    raster_radius: int = 1

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))
        if self.attn_levels is None:
            L = len(self.channel_mults)
            object.__setattr__(self, "attn_levels", tuple(range(max(L - 2, 0), L)))
        else:
            object.__setattr__(self, "attn_levels", tuple(sorted(int(a) for a in self.attn_levels)))
        self.validate()

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_mults)

    def resolution(self, level: int) -> int:
        return self.image_size >> level

    def validate(self) -> None:
        if not self.channel_mults:
            raise ConfigError("channel_mults must not be empty")
        if min(self.channel_mults) < 1 or self.base_channels < 1 or self.blocks_per_level < 1:
            raise ConfigError("channel counts and block counts must be positive")
        if self.image_size % (1 << (self.levels - 1)):
            raise ConfigError(f"image_size {self.image_size} not divisible by 2^{self.levels - 1}")
        if not self.attn_levels:
            raise ConfigError("at least one attention level is required")
        for a in self.attn_levels:
            if not 0 <= a < self.levels:
                raise ConfigError(f"attention level {a} outside 0..{self.levels - 1}")
            if self.channels[a] % self.heads:
                raise ConfigError(f"width {self.channels[a]} at level {a} not divisible by {self.heads} heads")
        if self.temb_dim % 2:
            raise ConfigError("temb_dim must be even")
        if self.in_channels not in (1, 3):
            raise ConfigError("in_channels must be 1 or 3")


@dataclass(frozen=True)
class TrainConfig:
    diffusion_steps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.05  # alpha_bar at the last step ~ 7e-3
    lr: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    grad_clip: float = 1.0  # global-norm clip; 0 disables
    sample_steps: int = 50  # DDIM steps at sampling time


@dataclass(frozen=True)
class Config:
    model: UNetConfig = field(default_factory=UNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _coerce(raw: str, typ, key: str):
    text = raw.strip()
    try:
        if typ in ("int", int):
            return int(text)
        if typ in ("float", float):
            return float(text)
        if "tuple" in str(typ):
            if "None" in str(typ) and text.lower() in ("none", ""):
                return None
            return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from None
    raise ConfigError(f"{key}: unsupported field type {typ}")


def parse_config(text: str) -> Config:
    model_fields = {f.name: f.type for f in fields(UNetConfig)}
    train_fields = {f.name: f.type for f in fields(TrainConfig)}
    m, t = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in model_fields:
            m[key] = _coerce(value, model_fields[key], key)
        elif key in train_fields:
            t[key] = _coerce(value, train_fields[key], key)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    try:
        return Config(UNetConfig(**m), TrainConfig(**t))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def format_config(cfg: Config) -> str:
    lines = []
    for part in (cfg.model, cfg.train):
        for k, v in dataclasses.asdict(part).items():
            if isinstance(v, tuple):
                v = " ".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def load_config(path: str | Path) -> Config:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def save_config(path: str | Path, cfg: Config) -> None:
    Path(path).write_text(format_config(cfg), encoding="utf-8")
