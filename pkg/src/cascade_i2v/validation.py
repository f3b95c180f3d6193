"""Input validation helpers in the spirit of ``sklearn.utils.validation``.

They coerce array-likes into float32 torch tensors of a known layout and raise
the package's exception types with a readable message otherwise.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import DimensionError, UsageError


def as_tensor(x, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def check_video(x, *, channels: int | None = 3, allow_batch: bool = True,
                divisible_by: int | None = None, name: str = "video") -> torch.Tensor:
    """Validate a clip laid out as ``(F, C, H, W)`` or ``(B, F, C, H, W)``.

    Returns a float32 tensor. Raises DimensionError on wrong rank, channel
    count, or spatial dims not divisible by ``divisible_by``.
    """
    t = as_tensor(x)
    ranks = (4, 5) if allow_batch else (4,)
    if t.dim() not in ranks:
        raise DimensionError(f"{name} must have rank {ranks}, got shape {tuple(t.shape)}")
    if channels is not None and t.shape[-3] != channels:
        raise DimensionError(f"{name} must have {channels} channels, got {t.shape[-3]}")
    if divisible_by:
        h, w = t.shape[-2:]
        if h % divisible_by or w % divisible_by:
            raise DimensionError(
                f"{name} spatial dims {h}x{w} are not divisible by {divisible_by}")
    return t


def check_single_frame(x, *, channels: int | None = 3, name: str = "image") -> torch.Tensor:
    """Accept ``(1, C, H, W)``, ``(C, H, W)`` or a batch ``(B, 1, C, H, W)``.

    Returns ``(B, 1, C, H, W)``.
    """
    t = as_tensor(x)
    if t.dim() == 3:
        t = t[None, None]
    elif t.dim() == 4:
        if t.shape[0] != 1:
            raise UsageError(f"{name} must contain exactly one frame, got {t.shape[0]}")
        t = t[None]
    elif t.dim() == 5:
        if t.shape[1] != 1:
            raise UsageError(f"{name} must contain exactly one frame, got {t.shape[1]}")
    else:
        raise DimensionError(f"{name} has unsupported shape {tuple(t.shape)}")
    if channels is not None and t.shape[2] != channels:
        raise DimensionError(f"{name} must have {channels} channels, got {t.shape[2]}")
    return t


def check_same_shape(a: torch.Tensor, b: torch.Tensor, names=("a", "b")) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(
            f"{names[0]} shape {tuple(a.shape)} does not match {names[1]} shape {tuple(b.shape)}")


def check_timestep(t: int, T: int) -> int:
    t = int(t)
    if not 1 <= t <= T:
        raise IndexError(f"timestep {t} outside [1, {T}]")
    return t


def ensure_batched(x: torch.Tensor, rank: int = 5) -> tuple[torch.Tensor, bool]:
    """Add a leading batch axis if ``x`` has ``rank - 1`` dims."""
    if x.dim() == rank - 1:
        return x[None], True
    return x, False
