"""A diffusion stage: frozen codec + condition encoders + 3D UNet + schedule.

The base stage conditions on an image (fused semantic vector through
cross-attention, detail latent added to the first input frame); the refinement
stage conditions on a caption only.
"""

from __future__ import annotations

from collections import OrderedDict

import torch
import torch.nn as nn

from .checkpoint import Checkpoint, load_into, state_to_tensors
from .codec import LatentCodecModel
from .conditioning import ConditioningBundle, ImageConditioner, TextEncoder, Vocabulary
from .config import Profile
from .data import caption_vocabulary
from .errors import CheckpointError, ConfigError, UsageError
from .noise_schedule import NoiseSchedule, build_linear_schedule
from .unet3d import SPATIAL, UNet3D, tag_parameters
from .validation import check_single_frame

DETAIL_MODES = ("every_step", "initial_noise")


class StageModel(nn.Module):
    def __init__(self, stage: str, profile: Profile, codec: LatentCodecModel,
                 vocab: Vocabulary | None = None, *, detail_injection: str = "every_step",
                 schedule: NoiseSchedule | None = None, seed: int = 0):
        super().__init__()
        if stage not in ("base", "refine"):
            raise ConfigError(f"stage must be 'base' or 'refine', got {stage!r}")
        if detail_injection not in DETAIL_MODES:
            raise ConfigError(f"detail_injection must be one of {DETAIL_MODES}")
        if codec.latent_channels != profile.latent_channels or codec.downsample != profile.downsample:
            raise ConfigError("codec does not match the profile's latent channels / downsample factor")
        self.stage = stage
        self.profile = profile
        self.detail_injection = detail_injection
        self.seed = seed
        self.schedule = schedule or build_linear_schedule(profile.T, profile.beta_start, profile.beta_end)
        if self.schedule.T != profile.unet.num_timesteps:
            raise ConfigError(f"schedule T={self.schedule.T} differs from the UNet's "
                              f"{profile.unet.num_timesteps} timesteps")
        # the codec is frozen and deliberately not registered as a submodule
        self.__dict__["codec"] = codec
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.unet = UNet3D(profile.unet)
            if stage == "base":
                self.conditioner = ImageConditioner(profile.global_encoder)
                self.text_encoder = None
            else:
                self.conditioner = None
                self.text_encoder = TextEncoder(vocab or Vocabulary(caption_vocabulary()),
                                                profile.cond_dim, profile.text_max_length)

    @property
    def size(self) -> tuple[int, int]:
        return self.profile.base_size if self.stage == "base" else self.profile.refine_size

    # ------------------------------------------------------------------ conditioning

    def condition(self, *, images: torch.Tensor | None = None, captions=None, fps=8,
                  detail: torch.Tensor | None = None) -> ConditioningBundle:
        """Build this stage's bundle.

        Base stage: ``images`` ``(B, 1, 3, H, W)``; ``detail`` may be passed when the
        image latent is already known. Refinement stage: ``captions`` only.
        """
        if self.stage == "base":
            if captions is not None:
                raise UsageError("the base stage is conditioned on images, not text")
            if images is None:
                raise UsageError("the base stage needs a conditioning image")
            images = check_single_frame(images)
            if detail is None:
                detail = self.codec.detail_tensor(images)
            semantic = self.conditioner(images[:, 0], detail)
            return ConditioningBundle(fps=fps, semantic=semantic, detail=detail)
        if images is not None:
            raise UsageError("the refinement stage is conditioned on text, not images")
        if captions is None:
            raise UsageError("the refinement stage needs captions")
        return ConditioningBundle(fps=fps, text=self.text_encoder(captions))

    def _check_bundle(self, bundle: ConditioningBundle) -> None:
        if bundle.stage != self.stage:
            raise UsageError(f"{self.stage} stage received a {bundle.stage} bundle")

    def model_input(self, z_t: torch.Tensor, bundle: ConditioningBundle) -> torch.Tensor:
        """Add the detail latent to frame 0 of the network input (every-step injection)."""
        if bundle.detail is None or self.detail_injection != "every_step":
            return z_t
        first = z_t[:, :1] + bundle.detail[:, None]
        return torch.cat([first, z_t[:, 1:]], dim=1)

    def inject_initial_noise(self, noise: torch.Tensor, bundle: ConditioningBundle) -> torch.Tensor:
        """Add the detail latent to frame 0 of the noise (initial-noise injection only)."""
        if bundle.detail is None or self.detail_injection != "initial_noise":
            return noise
        first = noise[:, :1] + bundle.detail[:, None]
        return torch.cat([first, noise[:, 1:]], dim=1)

    def forward(self, z_t: torch.Tensor, t, bundle: ConditioningBundle) -> torch.Tensor:
        """v-prediction for ``z_t`` of shape ``(B, F, c, h, w)``."""
        self._check_bundle(bundle)
        return self.unet(self.model_input(z_t, bundle), t, bundle.context(), bundle.fps)

    # ------------------------------------------------------------------ parameters

    def parameter_tags(self) -> "OrderedDict[str, str]":
        """Spatial/temporal tag of every trainable parameter (encoders count as spatial)."""
        unet_tags = tag_parameters(self.unet)
        tags = OrderedDict()
        for name, p in self.named_parameters():
            if not p.requires_grad:
                continue
            if name.startswith("unet."):
                tags[name] = unet_tags[name[len("unet."):]]
            else:
                tags[name] = SPATIAL
        return tags

    # ------------------------------------------------------------------ checkpoints

    def config_snapshot(self) -> dict:
        cfg = {"profile": self.profile.to_config(), "codec": dict(vars(self.codec.config)),
               "detail_injection": self.detail_injection, "schedule": self.schedule.to_config(),
               "init_seed": self.seed}
        if self.text_encoder is not None:
            cfg["vocabulary"] = list(self.text_encoder.vocab.tokens)
        return cfg

    def to_checkpoint(self, *, config: dict | None = None, seeds: dict | None = None,
                      extras: dict | None = None) -> Checkpoint:
        tensors = OrderedDict()
        tensors.update(state_to_tensors("unet", self.unet))
        if self.conditioner is not None:
            tensors.update(state_to_tensors("conditioner", self.conditioner))
        if self.text_encoder is not None:
            tensors.update(state_to_tensors("text", self.text_encoder))
        tensors.update(self.codec.to_tensors())
        snapshot = self.config_snapshot()
        snapshot.update(config or {})
        return Checkpoint(self.stage, tensors, snapshot, seeds or {"init": self.seed}, extras or {})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, expect_stage: str | None = None) -> "StageModel":
        if expect_stage is not None:
            ckpt.require_stage(expect_stage)
        if ckpt.stage not in ("base", "refine"):
            raise CheckpointError(f"{ckpt.stage!r} checkpoint is not a diffusion stage")
        cfg = ckpt.config
        try:
            profile = Profile.from_config(cfg["profile"])
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"checkpoint config lacks a usable profile: {exc}") from exc
        codec = LatentCodecModel.from_checkpoint(ckpt)
        vocab = Vocabulary(cfg["vocabulary"]) if "vocabulary" in cfg else None
        sched = cfg.get("schedule", {})
        schedule = build_linear_schedule(sched.get("T", profile.T),
                                         sched.get("beta_start", profile.beta_start),
                                         sched.get("beta_end", profile.beta_end))
        model = cls(ckpt.stage, profile, codec, vocab,
                    detail_injection=cfg.get("detail_injection", "every_step"),
                    schedule=schedule, seed=cfg.get("init_seed", 0))
        model.load_tensors(ckpt)
        return model

    def load_tensors(self, ckpt: Checkpoint) -> None:
        load_into(self.unet, ckpt.subset("unet"), "unet")
        if self.conditioner is not None:
            load_into(self.conditioner, ckpt.subset("conditioner"), "conditioner")
        if self.text_encoder is not None:
            load_into(self.text_encoder, ckpt.subset("text"), "text encoder")

    @classmethod
    def refine_from_base(cls, base: "StageModel", vocab: Vocabulary | None = None,
                         seed: int = 0) -> "StageModel":
        """A refinement stage whose UNet starts from the base stage's weights."""
        if base.stage != "base":
            raise CheckpointError(f"refinement must be initialised from a base stage, got {base.stage!r}")
        model = cls("refine", base.profile, base.codec, vocab,
                    detail_injection=base.detail_injection, schedule=base.schedule, seed=seed)
        model.unet.load_state_dict(base.unet.state_dict())
        return model


def unet_forward(model: StageModel, z_t: torch.Tensor, t, cond: ConditioningBundle) -> torch.Tensor:
    """v-prediction of ``model`` for ``z_t``; raises UsageError if ``cond`` is for the other stage."""
    return model(z_t, t, cond)
