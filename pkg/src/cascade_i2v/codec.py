"""Convolutional autoencoder mapping pixel frames to latents and back.

Frames are coded independently. The same encoder doubles as the detail encoder
that turns the conditioning image into a first-frame latent.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import Checkpoint, load_into, state_to_tensors
from .errors import CheckpointError, DimensionError, TrainingError, UsageError
from .validation import check_single_frame, check_video
from .video import LatentVideo, VideoTensor

logger = logging.getLogger(__name__)


@dataclass
class CodecConfig:
    downsample: int = 4
    latent_channels: int = 4
    hidden_channels: int = 32
    steps: int = 3000
    batch_size: int = 8
    lr: float = 2e-3
    edge_weight: float = 0.1
    seed: int = 0


class ConvAutoencoder(nn.Module):
    def __init__(self, downsample: int = 4, latent_channels: int = 4, hidden_channels: int = 32):
        super().__init__()
        levels = int(round(math.log2(downsample)))
        if 2 ** levels != downsample or levels < 1:
            raise UsageError(f"downsample factor must be a power of two >= 2, got {downsample}")
        self.downsample = downsample
        self.latent_channels = latent_channels
        ch = hidden_channels

        enc = [nn.Conv2d(3, ch, 3, padding=1), nn.SiLU()]
        for _ in range(levels):
            enc += [nn.Conv2d(ch, ch, 3, stride=2, padding=1), nn.SiLU(),
                    nn.Conv2d(ch, ch, 3, padding=1), nn.SiLU()]
        enc += [nn.Conv2d(ch, latent_channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(latent_channels, ch, 3, padding=1), nn.SiLU()]
        for _ in range(levels):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(ch, ch, 3, padding=1), nn.SiLU(),
                    nn.Conv2d(ch, ch, 3, padding=1), nn.SiLU()]
        dec += [nn.Conv2d(ch, 3, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)
        # latents are rescaled to roughly unit variance once training finishes
        self.register_buffer("latent_scale", torch.ones(()))

    def encode_frames(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x) * self.latent_scale

    def decode_frames(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z / self.latent_scale)

    def forward(self, x):
        return self.decoder(self.encoder(x))


def _frames_apply(fn, x: torch.Tensor) -> torch.Tensor:
    lead = x.shape[:-3]
    out = fn(x.reshape(-1, *x.shape[-3:]))
    return out.reshape(*lead, *out.shape[-3:])


class LatentCodecModel:
    """Frozen-at-inference wrapper around :class:`ConvAutoencoder`."""

    def __init__(self, net: ConvAutoencoder, config: CodecConfig | None = None):
        self.net = net.eval()
        self.config = config or CodecConfig(net.downsample, net.latent_channels)

    @property
    def downsample(self) -> int:
        return self.net.downsample

    @property
    def latent_channels(self) -> int:
        return self.net.latent_channels

    @torch.no_grad()
    def encode_tensor(self, x: torch.Tensor) -> torch.Tensor:
        """Encode ``(..., 3, H, W)`` pixels to ``(..., c, H/d, W/d)`` latents."""
        x = torch.as_tensor(x, dtype=torch.float32)
        if x.dim() == 3:
            return self.encode_tensor(x[None])[0]
        x = check_video(x, divisible_by=self.downsample)
        return _frames_apply(self.net.encode_frames, x)

    @torch.no_grad()
    def decode_tensor(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() < 3 or z.shape[-3] != self.latent_channels:
            raise DimensionError(
                f"latent of shape {tuple(z.shape)} does not have {self.latent_channels} channels")
        return _frames_apply(self.net.decode_frames, z).clamp(-1.0, 1.0)

    def encode(self, x: VideoTensor) -> LatentVideo:
        return LatentVideo(self.encode_tensor(x.data), self.downsample)

    def decode(self, z: LatentVideo, fps: int = 8) -> VideoTensor:
        return VideoTensor(self.decode_tensor(z.data), fps)

    def detail_features(self, image: VideoTensor) -> LatentVideo:
        """First-frame detail latent of a single conditioning image (same as :meth:`encode`)."""
        if image.num_frames != 1:
            raise UsageError(f"detail features need exactly one frame, got {image.num_frames}")
        return self.encode(image)

    def detail_tensor(self, image: torch.Tensor) -> torch.Tensor:
        """Batched form: ``(B, 1, 3, H, W)`` -> ``(B, c, h, w)``."""
        image = check_single_frame(image)
        return self.encode_tensor(image)[:, 0]

    def to_tensors(self):
        return state_to_tensors("codec", self.net)

    def to_checkpoint(self, **extras) -> Checkpoint:
        return Checkpoint("autoencoder", self.to_tensors(), {"codec": asdict(self.config)},
                          {"seed": self.config.seed}, extras)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "LatentCodecModel":
        cfg = ckpt.config.get("codec")
        if cfg is None:
            raise CheckpointError("checkpoint carries no codec configuration")
        config = CodecConfig(**cfg)
        net = ConvAutoencoder(config.downsample, config.latent_channels, config.hidden_channels)
        tensors = ckpt.subset("codec")
        if not tensors:
            raise CheckpointError(f"{ckpt.stage} checkpoint carries no codec weights")
        load_into(net, tensors, "codec")
        return cls(net, config)


def psnr(x, y, data_range: float = 2.0) -> float:
    """PSNR in dB for signals in ``[-1, 1]`` (peak-to-peak range 2)."""
    mse = float(torch.mean((torch.as_tensor(x) - torch.as_tensor(y)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10(data_range ** 2 / mse)


def edge_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    def grads(x):
        return x[..., 1:, :] - x[..., :-1, :], x[..., :, 1:] - x[..., :, :-1]

    (py, px), (ty, tx) = grads(pred), grads(target)
    return F.mse_loss(py, ty) + F.mse_loss(px, tx)


def frame_bank(dataset, frames: int = 8, fps: int | None = None) -> torch.Tensor:
    """Stack every frame of every clip, rendered at ``(frames, fps)``, into ``(N, 3, H, W)``."""
    out = []
    for i in range(len(dataset)):
        use_fps = fps or dataset.specs[i].native_fps
        out.append(dataset.clip(i, frames, use_fps))
    return torch.cat(out) if out else torch.empty(0, 3, dataset.H, dataset.W)


def fit_autoencoder(frames: torch.Tensor, config: CodecConfig, *, log_every: int = 250):
    """Fit the codec on a bank of frames ``(N, 3, H, W)``.

    Returns ``(codec, losses)``. Training is single-threaded-deterministic given
    ``config.seed``; zero steps returns the seeded initialization untouched.
    """
    torch.manual_seed(config.seed)
    net = ConvAutoencoder(config.downsample, config.latent_channels, config.hidden_channels)
    losses: list[float] = []
    if config.steps > 0:
        frames = check_video(frames[:, None], divisible_by=config.downsample)[:, 0]
        gen = torch.Generator().manual_seed(config.seed)
        opt = torch.optim.Adam(net.parameters(), lr=config.lr)
        sched = torch.optim.lr_scheduler.OneCycleLR(
            opt, max_lr=config.lr, total_steps=config.steps, pct_start=0.1)
        net.train()
        for step in range(config.steps):
            idx = torch.randint(len(frames), (config.batch_size,), generator=gen)
            x = frames[idx]
            recon = net(x)
            loss = F.mse_loss(recon, x) + config.edge_weight * edge_loss(recon, x)
            if not torch.isfinite(loss):
                raise TrainingError(f"autoencoder loss became non-finite at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
            if log_every and (step + 1) % log_every == 0:
                logger.info("codec step %d loss %.5f", step + 1, np.mean(losses[-log_every:]))
        net.eval()
        with torch.no_grad():
            probe = frames[torch.randperm(len(frames), generator=gen)[:256]]
            std = net.encoder(probe).std()
            net.latent_scale.fill_(1.0 / float(std.clamp_min(1e-6)))
    return LatentCodecModel(net, config), losses


def train_autoencoder(dataset, config: CodecConfig | None = None, *, frames: int = 8,
                      fps: int | None = 2, log_every: int = 250) -> Checkpoint:
    """Train the codec on every frame of ``dataset`` and return an autoencoder checkpoint.

    Clips are rendered at ``fps=2`` by default so each clip contributes frames
    spread over its whole motion. The loss curve is stored in ``extras['losses']``.
    """
    config = config or CodecConfig()
    codec, losses = fit_autoencoder(frame_bank(dataset, frames, fps), config, log_every=log_every)
    return codec.to_checkpoint(losses=losses)
