"""Factorized space-time UNet that predicts v from a noisy latent clip.

Spatial layers (residual blocks, spatial self-attention, cross-attention,
resampling) act on every frame independently; temporal layers (a 1-D conv and
self-attention along frames) act on every pixel independently. Temporal layers
start as exact identities, so a fresh model is a per-frame image model.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import sinusoidal
from .errors import ConfigError, DimensionError

SPATIAL, TEMPORAL = "spatial", "temporal"


@dataclass(frozen=True)
class UNetSpec:
    in_channels: int = 4
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2)
    attention_levels: tuple[int, ...] = (1,)
    temporal_kernel: int = 3
    cond_dim: int = 256
    num_heads: int = 4
    num_timesteps: int = 1000
    fps_set: tuple[int, ...] = (1, 2, 4, 8)

    @classmethod
    def micro(cls) -> "UNetSpec":
        return cls(base_channels=8, channel_mults=(1,), attention_levels=(), cond_dim=8,
                   num_heads=2)

    @classmethod
    def toy(cls) -> "UNetSpec":
        return cls()

    @classmethod
    def full(cls) -> "UNetSpec":
        return cls(base_channels=320, channel_mults=(1, 2, 4, 4), attention_levels=(0, 1, 2),
                   cond_dim=1024, num_heads=8, fps_set=(1, 4, 8, 16))

    def to_config(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_config(cls, cfg: dict) -> "UNetSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()})


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0:
            return g
    return 1


class TimestepFPSEmbedding(nn.Module):
    """Sinusoidal embedding of ``t`` plus a learned row per supported fps."""

    def __init__(self, dim: int, fps_set=(1, 4, 8, 16)):
        super().__init__()
        self.dim = dim
        self.fps_set = tuple(int(f) for f in fps_set)
        self.fps_embed = nn.Embedding(len(self.fps_set), dim)
        nn.init.normal_(self.fps_embed.weight, std=0.1)

    def fps_index(self, fps) -> torch.Tensor:
        values = fps.tolist() if isinstance(fps, torch.Tensor) else [fps]
        values = values if isinstance(values, list) else [values]
        unknown = [f for f in values if int(f) not in self.fps_set]
        if unknown:
            raise ConfigError(f"fps {unknown} not in the supported set {self.fps_set}")
        return torch.tensor([self.fps_set.index(int(f)) for f in values], dtype=torch.long)

    def forward(self, t, fps) -> torch.Tensor:
        t = torch.as_tensor(t).reshape(-1)
        return sinusoidal(t, self.dim) + self.fps_embed(self.fps_index(fps))


def timestep_fps_embedding(t, fps, module: TimestepFPSEmbedding) -> torch.Tensor:
    return module(t, fps)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        # x: (N, C, H, W) frames; emb: (N, E)
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Attention(nn.Module):
    def __init__(self, dim: int, context_dim: int | None = None, heads: int = 4):
        super().__init__()
        context_dim = context_dim or dim
        self.heads = heads if dim % heads == 0 else 1
        self.norm = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(context_dim, dim, bias=False)
        self.v = nn.Linear(context_dim, dim, bias=False)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, context=None, pos=None):
        # x: (N, L, C); context: (N, K, Dc) or None for self-attention
        h = self.norm(x)
        if pos is not None:
            h = h + pos
        ctx = h if context is None else context
        n, L, c = h.shape
        q = self.q(h).view(n, L, self.heads, -1).transpose(1, 2)
        k = self.k(ctx).view(n, ctx.shape[1], self.heads, -1).transpose(1, 2)
        v = self.v(ctx).view(n, ctx.shape[1], self.heads, -1).transpose(1, 2)
        o = F.scaled_dot_product_attention(q, k, v)
        return x + self.out(o.transpose(1, 2).reshape(n, L, c))


class SpatialSelfAttention(nn.Module):
    def __init__(self, ch: int, heads: int):
        super().__init__()
        self.attn = Attention(ch, heads=heads)

    def forward(self, x):
        n, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        return self.attn(tokens).transpose(1, 2).reshape(n, c, h, w)


class CrossAttention(nn.Module):
    def __init__(self, ch: int, cond_dim: int, heads: int):
        super().__init__()
        self.attn = Attention(ch, cond_dim, heads)

    def forward(self, x, context):
        # x: (B*F, C, H, W); context already repeated per frame: (B*F, K, D)
        n, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        return self.attn(tokens, context).transpose(1, 2).reshape(n, c, h, w)


class TemporalConv(nn.Module):
    """Per-pixel 1-D convolution along frames, initialised to the identity (delta kernel)."""

    def __init__(self, ch: int, kernel: int = 3):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError(f"temporal kernel must be odd, got {kernel}")
        self.conv = nn.Conv3d(ch, ch, (kernel, 1, 1), padding=(kernel // 2, 0, 0))
        with torch.no_grad():
            self.conv.weight.zero_()
            self.conv.weight[:, :, kernel // 2, 0, 0] = torch.eye(ch)
            self.conv.bias.zero_()

    def forward(self, x):
        # x: (B, F, C, H, W)
        return self.conv(x.transpose(1, 2)).transpose(1, 2)


class TemporalAttention(nn.Module):
    """Self-attention across frames at each pixel; the output projection starts at zero."""

    def __init__(self, ch: int, heads: int):
        super().__init__()
        self.attn = Attention(ch, heads=heads)
        nn.init.zeros_(self.attn.out.weight)
        nn.init.zeros_(self.attn.out.bias)

    def forward(self, x):
        b, f, c, h, w = x.shape
        tokens = x.permute(0, 3, 4, 1, 2).reshape(b * h * w, f, c)
        out = self.attn(tokens, pos=sinusoidal(torch.arange(f), c))
        return out.reshape(b, h, w, f, c).permute(0, 3, 4, 1, 2)


class SpaceTimeBlock(nn.Module):
    """ResBlock -> [self-attn] -> cross-attn (spatial), then temporal conv -> temporal attn."""

    def __init__(self, in_ch, out_ch, emb_dim, spec: UNetSpec, self_attention: bool):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, emb_dim)
        self.self_attn = SpatialSelfAttention(out_ch, spec.num_heads) if self_attention else None
        self.cross_attn = CrossAttention(out_ch, spec.cond_dim, spec.num_heads)
        self.temporal_conv = TemporalConv(out_ch, spec.temporal_kernel)
        self.temporal_attn = TemporalAttention(out_ch, spec.num_heads)

    def forward(self, x, emb, context, frames: int, temporal: bool = True):
        h = self.res(x, emb)
        if self.self_attn is not None:
            h = self.self_attn(h)
        h = self.cross_attn(h, context)
        if temporal:
            v = h.reshape(-1, frames, *h.shape[1:])
            v = self.temporal_attn(self.temporal_conv(v))
            h = v.reshape(-1, *h.shape[1:])
        return h


class UNet3D(nn.Module):
    def __init__(self, spec: UNetSpec):
        super().__init__()
        self.spec = spec
        ch0 = spec.base_channels
        emb_dim = 4 * ch0
        self.temporal_enabled = True
        self.time_embed = TimestepFPSEmbedding(ch0, spec.fps_set)
        self.emb_mlp = nn.Sequential(nn.Linear(ch0, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.in_conv = nn.Conv2d(spec.in_channels, ch0, 3, padding=1)

        widths = [ch0 * m for m in spec.channel_mults]
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = ch0
        for level, w in enumerate(widths):
            self.down.append(SpaceTimeBlock(prev, w, emb_dim, spec, level in spec.attention_levels))
            last = level == len(widths) - 1
            self.downsample.append(nn.Identity() if last else nn.Conv2d(w, w, 3, stride=2, padding=1))
            prev = w
        self.mid = SpaceTimeBlock(prev, prev, emb_dim, spec, True)
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for level in reversed(range(len(widths))):
            w = widths[level]
            self.up.append(SpaceTimeBlock(prev + w, w, emb_dim, spec, level in spec.attention_levels))
            self.upsample.append(nn.Identity() if level == 0 else
                                 nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                                               nn.Conv2d(w, widths[level - 1], 3, padding=1)))
            prev = w if level == 0 else widths[level - 1]
        self.out_norm = nn.GroupNorm(_groups(prev), prev)
        self.out_conv = nn.Conv2d(prev, spec.in_channels, 3, padding=1)

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.spec.channel_mults) - 1)

    @contextmanager
    def temporal_disabled(self):
        """Run the model with every temporal layer bypassed (a per-frame image model)."""
        prev, self.temporal_enabled = self.temporal_enabled, False
        try:
            yield self
        finally:
            self.temporal_enabled = prev

    def forward(self, z_t: torch.Tensor, t, context: torch.Tensor, fps) -> torch.Tensor:
        """Predict v.

        Args:
            z_t: noisy latents ``(B, F, c, h, w)``.
            t: int or ``(B,)`` integer timesteps in ``[1, num_timesteps]``.
            context: cross-attention tokens ``(B, K, cond_dim)``.
            fps: int or ``(B,)`` frame rates from ``spec.fps_set``.
        """
        if z_t.dim() != 5 or z_t.shape[2] != self.spec.in_channels:
            raise DimensionError(
                f"UNet expects (B, F, {self.spec.in_channels}, h, w), got {tuple(z_t.shape)}")
        b, f, c, h, w = z_t.shape
        if context.dim() != 3 or context.shape[0] != b or context.shape[2] != self.spec.cond_dim:
            raise DimensionError(
                f"context must be (B={b}, K, {self.spec.cond_dim}), got {tuple(context.shape)}")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if bool(((t < 1) | (t > self.spec.num_timesteps)).any()):
            raise IndexError(f"timesteps outside [1, {self.spec.num_timesteps}]: {t.tolist()}")
        t = t.expand(b) if t.numel() == 1 else t
        fps = torch.as_tensor(fps).reshape(-1)
        fps = fps.expand(b) if fps.numel() == 1 else fps

        emb = self.emb_mlp(self.time_embed(t, fps))
        emb = emb.repeat_interleave(f, dim=0)
        ctx = context.repeat_interleave(f, dim=0)
        temporal = self.temporal_enabled

        # pad to a multiple of the UNet's total downsampling, crop back at the end
        m = self.downsample_factor
        ph, pw = -h % m, -w % m
        x = z_t.reshape(b * f, c, h, w)
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        x = self.in_conv(x)
        skips = []
        for block, down in zip(self.down, self.downsample):
            x = block(x, emb, ctx, f, temporal)
            skips.append(x)
            x = down(x)
        x = self.mid(x, emb, ctx, f, temporal)
        for block, up in zip(self.up, self.upsample):
            x = block(torch.cat([x, skips.pop()], dim=1), emb, ctx, f, temporal)
            x = up(x)
        out = self.out_conv(F.silu(self.out_norm(x)))[..., :h, :w]
        return out.reshape(b, f, c, h, w)


def tag_parameters(model: nn.Module) -> dict[str, str]:
    """Map every trainable parameter name to ``"spatial"`` or ``"temporal"``.

    Parameters owned by a TemporalConv or TemporalAttention are temporal;
    everything else (including cross-attention and the embeddings) is spatial.
    """
    tags: dict[str, str] = {}
    for mod_name, module in model.named_modules():
        if isinstance(module, (TemporalConv, TemporalAttention)):
            for p_name, _ in module.named_parameters():
                tags[f"{mod_name}.{p_name}" if mod_name else p_name] = TEMPORAL
    for name, p in model.named_parameters():
        if p.requires_grad:
            tags.setdefault(name, SPATIAL)
    trainable = {n for n, p in model.named_parameters() if p.requires_grad}
    if set(tags) != trainable:
        raise RuntimeError(f"parameter tagging is inconsistent: {sorted(set(tags) ^ trainable)[:5]}")
    return tags
