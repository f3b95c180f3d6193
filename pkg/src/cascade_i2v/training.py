"""v-prediction training for the base and refinement stages."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint
from .codec import LatentCodecModel
from .config import Profile
from .data import sample_frames_fps
from .errors import CheckpointError, ConfigError, TrainingError
from .noise_schedule import (NoiseSchedule, OffsetNoiseConfig, q_sample, sample_offset_noise,
                             v_from_eps_x0)
from .stage import StageModel
from .unet3d import SPATIAL, TEMPORAL

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    stage: str = "base"
    lr: float = 8e-5
    gamma_spatial: float = 0.2
    T_r: int = 600
    steps: int = 2000
    batch_size: int = 8
    seed: int = 0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.99)
    offset_strength: float = 0.1
    log_every: int = 100

    def __post_init__(self):
        if self.stage not in ("base", "refine"):
            raise ConfigError(f"stage must be 'base' or 'refine', got {self.stage!r}")
        if not 0 < self.gamma_spatial <= 1:
            raise ConfigError(f"gamma_spatial must satisfy 0 < gamma <= 1, got {self.gamma_spatial}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")

    def check_T_r(self, T: int) -> None:
        if self.stage == "refine" and not 1 <= self.T_r <= T:
            raise ConfigError(f"T_r must satisfy 1 <= T_r <= T={T}, got {self.T_r}")


def draw_timesteps(n: int, stage: str, T: int, T_r: int, rng: np.random.Generator) -> torch.Tensor:
    """``n`` uniform timesteps: ``[1, T]`` for the base stage, ``[1, T_r]`` for refinement."""
    high = T if stage == "base" else T_r
    if stage == "refine" and not 1 <= T_r <= T:
        raise ConfigError(f"T_r must satisfy 1 <= T_r <= T={T}, got {T_r}")
    t = rng.integers(1, high + 1, size=n)
    return torch.from_numpy(t.astype(np.int64))


def draw_timestep(stage: str, T: int, T_r: int, rng: np.random.Generator) -> int:
    return int(draw_timesteps(1, stage, T, T_r, rng)[0])


def compute_loss(model, z0: torch.Tensor, bundle, t, noise: torch.Tensor,
                 schedule: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between the model's v-prediction and the true v.

    ``model(z_t, t, bundle)`` is any callable returning v; a StageModel adds the
    detail latent to the first frame of its input itself.
    """
    if hasattr(model, "inject_initial_noise"):
        noise = model.inject_initial_noise(noise, bundle)
    z_t = q_sample(z0, t, noise, schedule)
    target = v_from_eps_x0(z0, noise, t, schedule)
    pred = model(z_t, t, bundle)
    loss = F.mse_loss(pred, target)
    if not torch.isfinite(loss):
        t_list = t.tolist() if isinstance(t, torch.Tensor) else [t]
        raise TrainingError(
            f"non-finite loss at t={t_list}; |z_t|={float(z_t.norm()):.3g}, "
            f"|pred|={float(pred.detach().norm()):.3g}")
    return loss


def spatial_lr(lr: float, gamma: float) -> float:
    # rounded to 15 significant digits so 8e-5 * 0.2 is exactly 1.6e-5
    return float(f"{lr * gamma:.15g}")


def build_param_groups(model, lr: float, gamma: float, tags: dict | None = None) -> list[dict]:
    """Two optimizer groups: spatial parameters at ``lr * gamma``, temporal at ``lr``.

    ``gamma`` may be 0 here (freezing the spatial layers); training configs
    require ``0 < gamma <= 1``.
    """
    if not 0 <= gamma <= 1:
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
    tags = tags if tags is not None else model.parameter_tags()
    params = dict(model.named_parameters())
    trainable = {n for n, p in params.items() if p.requires_grad}
    missing = trainable - set(tags)
    if missing:
        raise RuntimeError(f"parameters without a spatial/temporal tag: {sorted(missing)[:5]}")
    spatial = [params[n] for n, tag in tags.items() if tag == SPATIAL]
    temporal = [params[n] for n, tag in tags.items() if tag == TEMPORAL]
    return [{"name": SPATIAL, "params": spatial, "lr": spatial_lr(lr, gamma)},
            {"name": TEMPORAL, "params": temporal, "lr": float(lr)}]


def make_optimizer(model, config: TrainConfig, gamma: float | None = None) -> torch.optim.AdamW:
    groups = build_param_groups(model, config.lr, config.gamma_spatial if gamma is None else gamma)
    return torch.optim.AdamW(groups, lr=config.lr, betas=tuple(config.betas),
                             weight_decay=config.weight_decay)


def training_batch(model: StageModel, dataset, captions_dataset, rng: np.random.Generator,
                   batch_size: int):
    """Sample (frames, fps), render a batch, encode it, and build its bundle."""
    p = model.profile
    frames, fps = sample_frames_fps(rng, p.frame_set, p.fps_set, p.frame_ratios, p.fps_ratios)
    idx = rng.integers(0, len(dataset), size=batch_size)
    clips = dataset.batch(idx, frames, fps)
    z0 = model.codec.encode_tensor(clips)
    if model.stage == "base":
        bundle = model.condition(images=clips[:, :1], fps=fps, detail=z0[:, 0])
    else:
        bundle = model.condition(captions=[captions_dataset.caption(i) for i in idx], fps=fps)
    return z0, bundle, (frames, fps, idx)


def fit_stage(model: StageModel, dataset, config: TrainConfig, *, callback=None) -> list[float]:
    """Run ``config.steps`` optimizer steps on ``model`` in place; returns per-step losses."""
    if config.stage != model.stage:
        raise CheckpointError(f"training config is for {config.stage!r}, model is {model.stage!r}")
    schedule = model.schedule
    config.check_T_r(schedule.T)
    size = model.size
    if (dataset.H, dataset.W) != tuple(size):
        dataset = dataset.at_resolution(*size)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    noise_cfg = OffsetNoiseConfig(config.offset_strength)
    opt = make_optimizer(model, config)
    losses: list[float] = []
    model.train()
    for step in range(config.steps):
        z0, bundle, _ = training_batch(model, dataset, dataset, rng, config.batch_size)
        t = draw_timesteps(z0.shape[0], config.stage, schedule.T, config.T_r, rng)
        if config.stage == "refine":
            assert int(t.max()) <= config.T_r
        noise = sample_offset_noise(z0.shape, noise_cfg, gen)
        loss = compute_loss(model, z0, bundle, t, noise, schedule)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if config.log_every and (step + 1) % config.log_every == 0:
            logger.info("%s step %d loss %.5f", config.stage, step + 1,
                        float(np.mean(losses[-config.log_every:])))
        if callback is not None:
            callback(step, losses[-1])
    model.eval()
    return losses


def train_stage(dataset, config: TrainConfig, init: Checkpoint, *, profile: Profile | None = None,
                detail_injection: str = "every_step", callback=None) -> Checkpoint:
    """Train a stage and return its checkpoint (loss curve under ``extras['losses']``).

    ``init`` is an autoencoder checkpoint (fresh base stage), a base checkpoint
    (continue base training, or initialise refinement), or a refine checkpoint
    (continue refinement).
    """
    if config.stage == "base":
        if init.stage == "autoencoder":
            if profile is None:
                raise ConfigError("a fresh base stage needs a profile")
            model = StageModel("base", profile, LatentCodecModel.from_checkpoint(init),
                               detail_injection=detail_injection, seed=config.seed)
        elif init.stage == "base":
            model = StageModel.from_checkpoint(init)
        else:
            raise CheckpointError(f"cannot train the base stage from a {init.stage!r} checkpoint")
    else:
        if init.stage == "base":
            model = StageModel.refine_from_base(StageModel.from_checkpoint(init), seed=config.seed)
        elif init.stage == "refine":
            model = StageModel.from_checkpoint(init)
        else:
            raise CheckpointError(f"refinement must start from a base checkpoint, got {init.stage!r}")
    losses = fit_stage(model, dataset, config, callback=callback)
    train_cfg = asdict(config)
    train_cfg["betas"] = list(config.betas)
    lineage = dict(init.seeds)
    lineage[config.stage] = config.seed
    return model.to_checkpoint(config={"train": train_cfg}, seeds=lineage,
                               extras={"losses": losses})
