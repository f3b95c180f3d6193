"""Discrete linear-beta diffusion schedule, v-parameterization and offset noise.

Timesteps are 1-based: ``t`` in ``1..T`` reads ``alpha_bars[t - 1]`` and ``t = 0``
denotes the clean latent (``alpha_bar = 1``). Every function accepts either a
python int or a 1-D integer tensor with one timestep per leading batch element.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, DimensionError
from .validation import check_same_shape


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def alpha_bar(self, t, *, allow_zero: bool = True):
        """``alpha_bar`` at 1-based step(s) ``t``; ``t = 0`` gives exactly 1."""
        if isinstance(t, torch.Tensor):
            idx = t.long()
            if bool(((idx < (0 if allow_zero else 1)) | (idx > self.T)).any()):
                raise IndexError(f"timesteps outside [1, {self.T}]: {idx.tolist()}")
            padded = torch.from_numpy(np.concatenate([[1.0], self.alpha_bars]))
            return padded[idx]
        t = int(t)
        if t == 0 and allow_zero:
            return 1.0
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside [1, {self.T}]")
        return float(self.alpha_bars[t - 1])

    def to_config(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


@dataclass(frozen=True)
class OffsetNoiseConfig:
    """Offset noise: one extra Gaussian per (sample, channel), shared by all frames and pixels."""

    strength: float = 0.1

    def __post_init__(self):
        if self.strength < 0:
            raise ConfigError(f"offset noise strength must be >= 0, got {self.strength}")


def build_linear_schedule(T: int = 1000, beta_start: float = 1e-4,
                          beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise ConfigError(f"T must be an integer >= 2, got {T}")
    if not 0 < beta_start < 1:
        raise ConfigError(f"beta_start must lie in (0, 1), got {beta_start}")
    if not beta_start <= beta_end < 1:
        raise ConfigError(f"beta_end must lie in [beta_start, 1), got {beta_end}")
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(int(T), float(beta_start), float(beta_end), betas, alpha_bars)


def _coef(value, like: torch.Tensor):
    # python float for scalar t, per-sample column for tensor t
    if isinstance(value, torch.Tensor):
        return value.to(like.dtype).reshape(-1, *([1] * (like.dim() - 1)))
    return value


def _sqrt_pair(schedule: NoiseSchedule, t, like: torch.Tensor, allow_zero=False):
    ab = schedule.alpha_bar(t, allow_zero=allow_zero)
    if isinstance(ab, torch.Tensor):
        return _coef(ab.sqrt(), like), _coef((1 - ab).sqrt(), like)
    return float(np.sqrt(ab)), float(np.sqrt(1.0 - ab))


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward-noise ``z0`` to step ``t``: ``sqrt(ab) * z0 + sqrt(1 - ab) * eps``."""
    check_same_shape(z0, eps, ("z0", "eps"))
    a, s = _sqrt_pair(schedule, t, z0)
    return a * z0 + s * eps


def v_from_eps_x0(z0: torch.Tensor, eps: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    check_same_shape(z0, eps, ("z0", "eps"))
    a, s = _sqrt_pair(schedule, t, z0)
    return a * eps - s * z0


def recover_x0_eps(z_t: torch.Tensor, v: torch.Tensor, t, schedule: NoiseSchedule):
    """Invert the v-parameterization; returns ``(x0_pred, eps_pred)``.

    The map ``(x0, eps) -> (z_t, v)`` is a rotation, so the inverse is its transpose.
    """
    check_same_shape(z_t, v, ("z_t", "v"))
    a, s = _sqrt_pair(schedule, t, z_t, allow_zero=True)
    return a * z_t - s * v, s * z_t + a * v


def sample_offset_noise(shape, cfg: OffsetNoiseConfig, rng: torch.Generator,
                        dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Gaussian noise plus ``cfg.strength`` times a per-(sample, channel) offset.

    ``shape`` is ``(B, F, C, H, W)``. The i.i.d. part is drawn before the offset
    part so a strength of zero consumes the generator identically.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 5:
        raise DimensionError(f"offset noise expects (B, F, C, H, W), got {shape}")
    noise = torch.randn(shape, generator=rng, dtype=dtype)
    b, _, c, _, _ = shape
    offset = torch.randn((b, 1, c, 1, 1), generator=rng, dtype=dtype)
    if cfg.strength == 0:
        return noise
    return noise + cfg.strength * offset
