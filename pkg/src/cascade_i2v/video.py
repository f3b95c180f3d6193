"""Pixel- and latent-space clip containers."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DimensionError


@dataclass
class VideoTensor:
    """Pixel clip ``(F, 3, H, W)`` with values in ``[-1, 1]`` (clamped on construction)."""

    data: torch.Tensor
    fps: int = 8

    def __post_init__(self):
        self.data = torch.as_tensor(self.data, dtype=torch.float32).clamp(-1.0, 1.0)
        if self.data.dim() != 4 or self.data.shape[1] != 3:
            raise DimensionError(f"VideoTensor expects (F, 3, H, W), got {tuple(self.data.shape)}")
        if self.data.shape[0] < 1:
            raise DimensionError("VideoTensor needs at least one frame")
        if int(self.fps) < 1:
            raise DimensionError(f"fps must be positive, got {self.fps}")
        self.fps = int(self.fps)

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self):
        return tuple(self.data.shape)

    def frame(self, k: int = 0) -> "VideoTensor":
        return VideoTensor(self.data[k:k + 1], self.fps)

    def numpy(self):
        return self.data.detach().cpu().numpy()


@dataclass
class LatentVideo:
    """Latent clip ``(F, c, h, w)`` produced by the codec with spatial factor ``downsample_factor``."""

    data: torch.Tensor
    downsample_factor: int = 4

    def __post_init__(self):
        if self.data.dim() != 4:
            raise DimensionError(f"LatentVideo expects (F, c, h, w), got {tuple(self.data.shape)}")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self):
        return tuple(self.data.shape)
