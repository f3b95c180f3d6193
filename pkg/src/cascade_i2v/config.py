"""Dimensional profiles and layered run configuration (defaults < file < flags)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .conditioning import GlobalEncoderSpec
from .errors import ConfigError
from .unet3d import UNetSpec


@dataclass(frozen=True)
class Profile:
    name: str
    base_size: tuple[int, int]
    refine_size: tuple[int, int]
    downsample: int
    latent_channels: int
    cond_dim: int
    unet: UNetSpec
    global_encoder: GlobalEncoderSpec
    frame_set: tuple[int, ...]
    fps_set: tuple[int, ...]
    native_fps: int
    frame_ratios: tuple[int, ...] = (1, 1, 1, 5)
    fps_ratios: tuple[int, ...] = (1, 2, 4, 1)
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    text_max_length: int = 16

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for label, (h, w) in (("base_size", self.base_size), ("refine_size", self.refine_size)):
            if h % self.downsample or w % self.downsample:
                raise ConfigError(f"{self.name}.{label} {h}x{w} not divisible by {self.downsample}")
        if self.unet.in_channels != self.latent_channels:
            raise ConfigError(f"{self.name}: unet.in_channels != latent_channels")
        if self.global_encoder.in_channels != self.latent_channels:
            raise ConfigError(f"{self.name}: global encoder stem does not take the latent channels")
        if self.global_encoder.out_dim != self.cond_dim or self.unet.cond_dim != self.cond_dim:
            raise ConfigError(f"{self.name}: conditioning dimensions disagree")
        if tuple(self.unet.fps_set) != tuple(self.fps_set):
            raise ConfigError(f"{self.name}: unet fps_set differs from the profile fps_set")
        if len(self.frame_set) != len(self.frame_ratios) or len(self.fps_set) != len(self.fps_ratios):
            raise ConfigError(f"{self.name}: sampling sets and ratio vectors differ in length")
        if self.fps_set[0] != 1:
            raise ConfigError(f"{self.name}: the first fps entry must be 1 (static images)")

    @property
    def base_latent_size(self) -> tuple[int, int]:
        return self.base_size[0] // self.downsample, self.base_size[1] // self.downsample

    @property
    def max_seconds(self) -> float:
        """Longest clip duration the frame/fps sets can request (for scene sampling)."""
        moving = [f for f in self.fps_set if f > 1]
        return (max(self.frame_set) - 1) / min(moving)

    def to_config(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "to_config"):
                v = v.to_config()
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @classmethod
    def from_config(cls, cfg: dict) -> "Profile":
        kw = dict(cfg)
        kw["unet"] = UNetSpec.from_config(kw["unet"])
        kw["global_encoder"] = GlobalEncoderSpec.from_config(kw["global_encoder"])
        for k, v in kw.items():
            if isinstance(v, list):
                kw[k] = tuple(v)
        return cls(**kw)


def toy_profile() -> Profile:
    return Profile(
        name="toy", base_size=(64, 64), refine_size=(128, 128), downsample=4,
        latent_channels=4, cond_dim=256, unet=UNetSpec.toy(),
        global_encoder=GlobalEncoderSpec.toy(256), frame_set=(1, 2, 4, 8),
        fps_set=(1, 2, 4, 8), native_fps=8)


def full_profile() -> Profile:
    return Profile(
        name="full", base_size=(256, 448), refine_size=(720, 1280), downsample=8,
        latent_channels=4, cond_dim=1024, unet=UNetSpec.full(),
        global_encoder=GlobalEncoderSpec.full(), frame_set=(1, 8, 16, 32),
        fps_set=(1, 4, 8, 16), native_fps=16)


def micro_profile() -> Profile:
    """Smallest working profile, for smoke runs and tests."""
    return Profile(
        name="micro", base_size=(32, 32), refine_size=(64, 64), downsample=4,
        latent_channels=4, cond_dim=8, unet=UNetSpec.micro(),
        global_encoder=GlobalEncoderSpec.micro(8), frame_set=(1, 2, 4, 8),
        fps_set=(1, 2, 4, 8), native_fps=8)


PROFILES = {"toy": toy_profile, "full": full_profile, "micro": micro_profile}


def get_profile(name: str) -> Profile:
    try:
        return PROFILES[name]()
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


@dataclass
class RunConfig:
    """Every knob the command line understands, with its default."""

    profile: str = "toy"
    seed: int = 0
    # schedule / noise
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    offset_strength: float = 0.1
    # diffusion training
    lr: float = 8e-5
    gamma: float = 0.2
    T_r: int = 600
    steps: int = 2000
    batch_size: int = 8
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    detail_injection: str = "every_step"
    # codec training
    codec_steps: int = 3000
    codec_lr: float = 2e-3
    codec_batch_size: int = 8
    codec_hidden: int = 32
    # data
    num_clips: int = 500
    # sampling
    frames: int = 8
    fps: int = 8
    base_steps: int = 50
    refine_steps: int = 50
    # analysis
    bins: int = 24

    def validate(self) -> "RunConfig":
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must satisfy 0 < gamma <= 1, got {self.gamma}")
        if not 1 <= self.T_r <= self.T:
            raise ConfigError(f"T_r must satisfy 1 <= T_r <= T={self.T}, got {self.T_r}")
        if self.offset_strength < 0:
            raise ConfigError("offset_strength must be >= 0")
        if self.detail_injection not in ("every_step", "initial_noise"):
            raise ConfigError(f"detail_injection must be every_step or initial_noise, "
                              f"got {self.detail_injection!r}")
        for key in ("steps", "codec_steps", "num_clips"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0")
        for key in ("batch_size", "codec_batch_size", "frames", "fps", "base_steps",
                    "refine_steps", "bins"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        get_profile(self.profile)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(key: str, value: Any, typ: type):
    if isinstance(value, str) and typ in (int, float):
        try:
            value = typ(value)
        except ValueError:
            raise ConfigError(f"{key!r} expects {typ.__name__}, got {value!r}") from None
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if isinstance(value, bool) or not isinstance(value, typ):
        raise ConfigError(f"{key!r} expects {typ.__name__}, got {value!r}")
    return value


def load_config(defaults: RunConfig | None = None, file=None, overrides: dict | None = None) -> RunConfig:
    """Resolve a RunConfig with precedence ``overrides > file > defaults``.

    ``file`` may be YAML or JSON. Unknown keys and type mismatches raise
    ConfigError naming the key.
    """
    base = dataclasses.asdict(defaults or RunConfig())
    types = {f.name: type(getattr(RunConfig(), f.name)) for f in dataclasses.fields(RunConfig)}
    layers = []
    if file is not None:
        try:
            text = Path(file).read_text()
            data = yaml.safe_load(text) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config file {file}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {file} must contain a mapping")
        layers.append(data)
    if overrides:
        layers.append({k: v for k, v in overrides.items() if v is not None})
    for layer in layers:
        for key, value in layer.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            base[key] = _coerce(key, value, types[key])
    return RunConfig(**base).validate()


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
