"""Two-stage inference: base generation, pixel-space resize, re-noising to ``T_r``,
and text-conditioned refinement of the first ``T_r`` denoising steps."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .conditioning import ConditioningBundle
from .errors import CheckpointError, ConfigError, UsageError
from .samplers import ddim_sample, make_step_schedule, noise_to_level
from .stage import StageModel
from .validation import as_tensor
from .video import VideoTensor

logger = logging.getLogger(__name__)


@dataclass
class CascadeParams:
    frames: int = 8
    fps: int = 8
    T_r: int = 600
    base_steps: int = 50
    refine_steps: int = 50
    seed: int = 0


@dataclass
class CascadeResult:
    video: VideoTensor
    base_video: VideoTensor
    base_bundle: ConditioningBundle | None
    refine_bundle: ConditioningBundle
    shapes: dict = field(default_factory=dict)


def resize_video(x: torch.Tensor, size) -> torch.Tensor:
    """Bilinear resize of ``(..., 3, H, W)`` frames (anti-aliased when shrinking)."""
    size = tuple(int(s) for s in size)
    if tuple(x.shape[-2:]) == size:
        return x
    lead = x.shape[:-3]
    flat = x.reshape(-1, *x.shape[-3:])
    out = F.interpolate(flat, size=size, mode="bilinear", align_corners=False, antialias=True)
    return out.reshape(*lead, *out.shape[-3:]).clamp(-1.0, 1.0)


def _image_tensor(image) -> torch.Tensor:
    data = image.data if isinstance(image, VideoTensor) else as_tensor(image)
    if data.dim() == 3:
        data = data[None]
    if data.dim() != 4 or data.shape[0] != 1:
        raise UsageError(f"conditioning image must be a single frame, got {tuple(data.shape)}")
    return data


def check_compatible(base: StageModel, refine: StageModel) -> None:
    if base.stage != "base":
        raise CheckpointError(f"expected a base stage, got {base.stage!r}")
    if refine.stage != "refine":
        raise CheckpointError(f"expected a refine stage, got {refine.stage!r}")
    bp, rp = base.profile, refine.profile
    if (bp.refine_size != rp.refine_size or bp.latent_channels != rp.latent_channels
            or bp.downsample != rp.downsample or base.schedule.T != refine.schedule.T):
        raise ConfigError(
            f"base profile {bp.name!r} ({bp.base_size}->{bp.refine_size}) and refine profile "
            f"{rp.name!r} ({rp.base_size}->{rp.refine_size}) are incompatible")


@torch.no_grad()
def refine_latent_trajectory(refine: StageModel, video: torch.Tensor, caption: str, fps: int,
                             T_r: int, steps: int, gen: torch.Generator, shapes: dict):
    """Resize -> encode -> noise to ``T_r`` -> refine-denoise -> decode. ``video`` is ``(F, 3, H, W)``."""
    T = refine.schedule.T
    if not 1 <= int(T_r) <= T:
        raise ConfigError(f"T_r must satisfy 1 <= T_r <= {T}, got {T_r}")
    up = resize_video(video, refine.profile.refine_size)
    shapes["resized"] = tuple(up.shape)
    z = refine.codec.encode_tensor(up[None])
    shapes["refine_latent"] = tuple(z.shape)
    eps = torch.randn(z.shape, generator=gen)
    z_start = noise_to_level(z, int(T_r), eps, refine.schedule)
    bundle = refine.condition(captions=[caption], fps=fps)
    if bundle.semantic is not None or bundle.detail is not None:
        raise UsageError("refinement bundle must not carry image conditions")
    step_list = make_step_schedule(min(int(steps), int(T_r)), T, int(T_r))
    z_ref = ddim_sample(refine, z_start, bundle, step_list, refine.schedule)
    out = refine.codec.decode_tensor(z_ref)[0]
    shapes["refined"] = tuple(out.shape)
    return out, bundle


@torch.no_grad()
def sample_base(base: StageModel, image: torch.Tensor, frames: int, fps: int, steps: int,
                gen: torch.Generator, shapes: dict | None = None):
    """Base-stage clip for one conditioning image ``(1, 3, H, W)``; returns ``(pixels, bundle)``."""
    shapes = {} if shapes is None else shapes
    image = resize_video(image, base.profile.base_size)
    bundle = base.condition(images=image[None], fps=fps)
    if bundle.text is not None:
        raise UsageError("base bundle must not carry text")
    h, w = base.profile.base_latent_size
    noise = torch.randn((1, int(frames), base.profile.latent_channels, h, w), generator=gen)
    init = base.inject_initial_noise(noise, bundle)
    shapes["base_latent"] = tuple(init.shape)
    z = ddim_sample(base, init, bundle, make_step_schedule(int(steps), base.schedule.T),
                    base.schedule)
    pixels = base.codec.decode_tensor(z)[0]
    shapes["base_video"] = tuple(pixels.shape)
    return pixels, bundle


def run_cascade(image, caption: str, base: StageModel, refine: StageModel,
                params: CascadeParams | None = None) -> CascadeResult:
    params = params or CascadeParams()
    check_compatible(base, refine)
    base.eval()
    refine.eval()
    gen = torch.Generator().manual_seed(int(params.seed))
    shapes: dict = {}
    img = _image_tensor(image)
    shapes["image"] = tuple(img.shape)
    base_px, base_bundle = sample_base(base, img, params.frames, params.fps, params.base_steps,
                                       gen, shapes)
    refined, refine_bundle = refine_latent_trajectory(
        refine, base_px, caption, params.fps, params.T_r, params.refine_steps, gen, shapes)
    for key, shape in shapes.items():
        logger.debug("cascade %s: %s", key, shape)
    return CascadeResult(VideoTensor(refined, params.fps), VideoTensor(base_px, params.fps),
                         base_bundle, refine_bundle, shapes)


def generate(image, caption: str, base: StageModel, refine: StageModel,
             params: CascadeParams | None = None) -> VideoTensor:
    return run_cascade(image, caption, base, refine, params).video


def refine_only(video, caption: str, refine: StageModel, T_r: int = 600, steps: int = 50,
                seed: int = 0) -> VideoTensor:
    """Refine an existing low-resolution clip without running the base stage."""
    if refine.stage != "refine":
        raise CheckpointError(f"expected a refine stage, got {refine.stage!r}")
    refine.eval()
    data = video.data if isinstance(video, VideoTensor) else as_tensor(video)
    fps = video.fps if isinstance(video, VideoTensor) else 8
    if fps not in refine.profile.fps_set:
        nearest = min(refine.profile.fps_set, key=lambda f: (abs(f - fps), -f))
        logger.warning("clip fps %s is not in the profile's set; conditioning on %s", fps, nearest)
        fps = nearest
    gen = torch.Generator().manual_seed(int(seed))
    out, _ = refine_latent_trajectory(refine, data, caption, fps, T_r, steps, gen, {})
    return VideoTensor(out, fps)
