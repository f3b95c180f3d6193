"""Condition encoders for the two stages.

Base stage: a frozen image encoder (stand-in for a pretrained vision encoder)
and a trainable convolutional *global encoder* over the image latent produce two
vectors of equal length that are summed into one semantic vector. Refinement
stage: a caption is embedded token-by-token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, DimensionError, UsageError

NULL_TOKEN = "<null>"


@dataclass
class ConditioningBundle:
    """Everything a stage's denoiser consumes besides ``z_t`` and ``t``.

    Shapes carry a leading batch axis: ``semantic (B, D)``, ``detail (B, c, h, w)``,
    ``text (B, K, D)``. ``fps`` is an int or a ``(B,)`` tensor.
    """

    fps: int | torch.Tensor
    semantic: torch.Tensor | None = None
    detail: torch.Tensor | None = None
    text: torch.Tensor | None = None

    @property
    def stage(self) -> str:
        has_image = self.semantic is not None or self.detail is not None
        if has_image and self.text is not None:
            raise UsageError("a bundle cannot carry both image and text conditions")
        if self.text is not None:
            return "refine"
        if self.semantic is not None:
            return "base"
        raise UsageError("bundle carries neither a semantic vector nor text")

    def context(self) -> torch.Tensor:
        """Cross-attention context ``(B, K, D)``: the semantic vector as one token, or the text."""
        if self.stage == "refine":
            return self.text
        return self.semantic[:, None, :]

    def batch_size(self) -> int:
        return self.context().shape[0]


# --------------------------------------------------------------------------- global encoder


@dataclass(frozen=True)
class Conv:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def out_hw(self, hw):
        return tuple((n + 2 * self.padding - self.kernel) // self.stride + 1 for n in hw)

    def build(self) -> nn.Conv2d:
        return nn.Conv2d(self.in_ch, self.out_ch, self.kernel, self.stride, self.padding)


@dataclass(frozen=True)
class GlobalEncoderSpec:
    """Layer table of the trainable global encoder.

    Every stem and stage conv is followed by SiLU; the output conv is not.
    """

    stem: tuple[Conv, ...]
    pool_size: tuple[int, int]
    stages: tuple[tuple[Conv, ...], ...]
    output: Conv
    input_size: tuple[int, int] = (32, 48)

    @property
    def in_channels(self) -> int:
        return self.stem[0].in_ch

    @property
    def out_dim(self) -> int:
        return self.output.out_ch

    def shape_chain(self, input_hw=None) -> list[tuple[int, int, int]]:
        """``(C, H, W)`` after the stem, the pool, each stage, and the output conv."""
        hw = tuple(input_hw or self.input_size)
        chain = []
        for conv in self.stem:
            hw = conv.out_hw(hw)
        chain.append((self.stem[-1].out_ch, *hw))
        hw = tuple(self.pool_size)
        chain.append((self.stem[-1].out_ch, *hw))
        for stage in self.stages:
            for conv in stage:
                hw = conv.out_hw(hw)
            chain.append((stage[-1].out_ch, *hw))
        hw = self.output.out_hw(hw)
        chain.append((self.output.out_ch, *hw))
        return chain

    @classmethod
    def full(cls) -> "GlobalEncoderSpec":
        # The second stem conv has no padding listed; 2 restores 32x48 after the
        # padding-1 5x5 conv. The output conv uses padding 0 so 2x2 collapses to 1x1.
        return cls(
            stem=(Conv(4, 64, 5, 1, 1), Conv(64, 64, 3, 1, 2)),
            pool_size=(32, 32),
            stages=(
                (Conv(64, 256, 3, 2, 1), Conv(256, 256, 3, 1, 1)),
                (Conv(256, 512, 3, 2, 1), Conv(512, 512, 3, 1, 1)),
                (Conv(512, 512, 3, 2, 1), Conv(512, 512, 3, 1, 1)),
                (Conv(512, 512, 3, 2, 1), Conv(512, 1024, 3, 1, 1)),
            ),
            output=Conv(1024, 1024, 2, 2, 0),
            input_size=(32, 48),
        )

    @classmethod
    def toy(cls, dim: int = 256, latent_channels: int = 4) -> "GlobalEncoderSpec":
        return cls(
            stem=(Conv(latent_channels, 16, 5, 1, 1), Conv(16, 16, 3, 1, 2)),
            pool_size=(16, 16),
            stages=(
                (Conv(16, 64, 3, 2, 1), Conv(64, 64, 3, 1, 1)),
                (Conv(64, 128, 3, 2, 1), Conv(128, 128, 3, 1, 1)),
                (Conv(128, 128, 3, 2, 1), Conv(128, dim, 3, 1, 1)),
            ),
            output=Conv(dim, dim, 2, 2, 0),
            input_size=(16, 16),
        )

    @classmethod
    def micro(cls, dim: int = 8, latent_channels: int = 4) -> "GlobalEncoderSpec":
        return cls(
            stem=(Conv(latent_channels, 8, 3, 1, 1),),
            pool_size=(8, 8),
            stages=((Conv(8, 8, 3, 2, 1),), (Conv(8, dim, 3, 2, 1),)),
            output=Conv(dim, dim, 2, 2, 0),
            input_size=(8, 8),
        )

    def to_config(self) -> dict:
        def c(conv):
            return [conv.in_ch, conv.out_ch, conv.kernel, conv.stride, conv.padding]

        return {"stem": [c(x) for x in self.stem], "pool_size": list(self.pool_size),
                "stages": [[c(x) for x in s] for s in self.stages], "output": c(self.output),
                "input_size": list(self.input_size)}

    @classmethod
    def from_config(cls, cfg: dict) -> "GlobalEncoderSpec":
        return cls(stem=tuple(Conv(*x) for x in cfg["stem"]), pool_size=tuple(cfg["pool_size"]),
                   stages=tuple(tuple(Conv(*x) for x in s) for s in cfg["stages"]),
                   output=Conv(*cfg["output"]), input_size=tuple(cfg["input_size"]))


class GlobalEncoder(nn.Module):
    def __init__(self, spec: GlobalEncoderSpec):
        super().__init__()
        self.spec = spec
        self.stem = nn.ModuleList(c.build() for c in spec.stem)
        self.pool = nn.AdaptiveAvgPool2d(spec.pool_size)
        self.stages = nn.ModuleList(nn.ModuleList(c.build() for c in s) for s in spec.stages)
        self.output = spec.output.build()

    def forward(self, z: torch.Tensor, return_intermediates: bool = False):
        """``z`` is an image latent ``(B, c, h, w)``; returns ``(B, D)``."""
        if z.dim() != 4 or z.shape[1] != self.spec.in_channels:
            raise DimensionError(
                f"global encoder stem C({self.spec.stem[0].in_ch}, {self.spec.stem[0].out_ch}, "
                f"{self.spec.stem[0].kernel}) expects (B, {self.spec.in_channels}, h, w), "
                f"got {tuple(z.shape)}")
        inter = []
        h = z
        for conv in self.stem:
            h = F.silu(conv(h))
        inter.append(h)
        h = self.pool(h)
        inter.append(h)
        for stage in self.stages:
            for conv in stage:
                h = F.silu(conv(h))
            inter.append(h)
        h = self.output(h)
        inter.append(h)
        out = h.flatten(1)
        if out.shape[1] != self.spec.out_dim:
            raise DimensionError(f"global encoder output {tuple(h.shape)} does not reduce to a vector")
        return (out, inter) if return_intermediates else out


def global_encode(image_latent: torch.Tensor, encoder: GlobalEncoder) -> torch.Tensor:
    return encoder(image_latent)


# --------------------------------------------------------------------------- semantic encoder


class FrozenImageEncoder(nn.Module):
    """Fixed random convolutional image embedder; never trained.

    Weights depend only on ``seed`` and the shape arguments, so two instances
    built with the same arguments are identical. Any image -> vector module with
    a ``dim`` attribute can replace it.
    """

    def __init__(self, dim: int = 256, seed: int = 1234, width: int = 32):
        super().__init__()
        self.dim = dim
        self.seed = seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            # bias-free so features scale with image content rather than a constant;
            # a coarse 4x4 grid keeps some layout before the projection
            self.net = nn.Sequential(
                nn.Conv2d(3, width, 4, stride=4, bias=False), nn.SiLU(),
                nn.Conv2d(width, 2 * width, 3, stride=2, padding=1, bias=False), nn.SiLU(),
                nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1, bias=False), nn.SiLU(),
                nn.AdaptiveAvgPool2d(4), nn.Flatten(),
                nn.Linear(64 * width, dim, bias=False),
            )
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    @torch.no_grad()
    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """``image`` is ``(B, 3, H, W)`` in ``[-1, 1]``; returns ``(B, dim)``."""
        return F.layer_norm(self.net(image), (self.dim,))


def semantic_encode(image: torch.Tensor, encoder: nn.Module) -> torch.Tensor:
    if image.dim() == 5:
        if image.shape[1] != 1:
            raise UsageError(f"semantic encoder takes a single frame, got {image.shape[1]}")
        image = image[:, 0]
    if image.dim() == 3:
        image = image[None]
    with torch.no_grad():
        return encoder(image)


def fuse_semantic(clip_vec: torch.Tensor, global_vec: torch.Tensor) -> torch.Tensor:
    if clip_vec.shape != global_vec.shape:
        raise DimensionError(
            f"cannot fuse semantic vectors of shapes {tuple(clip_vec.shape)} and {tuple(global_vec.shape)}")
    return clip_vec + global_vec


class ImageConditioner(nn.Module):
    """Frozen semantic encoder + trainable global encoder, fused by addition."""

    def __init__(self, spec: GlobalEncoderSpec, semantic_seed: int = 1234):
        super().__init__()
        self.semantic = FrozenImageEncoder(spec.out_dim, seed=semantic_seed)
        self.global_encoder = GlobalEncoder(spec)

    def forward(self, image: torch.Tensor, image_latent: torch.Tensor) -> torch.Tensor:
        return fuse_semantic(semantic_encode(image, self.semantic), self.global_encoder(image_latent))


# --------------------------------------------------------------------------- text encoder


@dataclass
class Vocabulary:
    tokens: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.tokens or self.tokens[0] != NULL_TOKEN:
            self.tokens = [NULL_TOKEN] + [t for t in self.tokens if t != NULL_TOKEN]
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, caption: str) -> list[int]:
        words = caption.lower().split()
        unknown = [w for w in words if w not in self.index]
        if unknown:
            raise DataError(f"out-of-vocabulary tokens: {unknown}")
        return [self.index[w] for w in words]

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{t}\n" for t in self.tokens))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls([line for line in Path(path).read_text().splitlines() if line])


def sinusoidal(positions: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Transformer-style sinusoidal features of (possibly fractional) positions."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = positions.to(torch.float64)[..., None] * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb.to(torch.float32)


class TextEncoder(nn.Module):
    """Learned token embeddings plus fixed sinusoidal positions."""

    def __init__(self, vocab: Vocabulary, dim: int = 256, max_length: int = 16):
        super().__init__()
        self.vocab = vocab
        self.dim = dim
        self.max_length = max_length
        self.embed = nn.Embedding(len(vocab), dim)
        self.register_buffer("positions", sinusoidal(torch.arange(max_length), dim),
                             persistent=False)

    def token_ids(self, captions: list[str]) -> torch.Tensor:
        ids = [self.vocab.encode(c) or [0] for c in captions]
        too_long = [c for c, i in zip(captions, ids) if len(i) > self.max_length]
        if too_long:
            raise DataError(f"captions longer than {self.max_length} tokens: {too_long}")
        k = max(len(i) for i in ids)
        return torch.tensor([i + [0] * (k - len(i)) for i in ids], dtype=torch.long)

    def forward(self, captions) -> torch.Tensor:
        """Captions (str or list of str) -> ``(B, K, D)``; an empty caption is one null token."""
        if isinstance(captions, str):
            captions = [captions]
        ids = self.token_ids(list(captions))
        return self.embed(ids) + self.positions[: ids.shape[1]]


def text_encode(caption, encoder: TextEncoder) -> torch.Tensor:
    return encoder(caption)
