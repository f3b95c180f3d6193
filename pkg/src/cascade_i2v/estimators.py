"""scikit-learn style front ends: constructor hyperparameters, ``fit`` and
``transform``/``predict``, ``get_params``/``set_params`` via ``BaseEstimator``.

Fitted state lives in trailing-underscore attributes (``codec_``, ``model_``,
``losses_``), so ``sklearn.base.clone`` yields an unfitted copy with the same
hyperparameters.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .cascade import CascadeParams, refine_only, run_cascade, sample_base
from .checkpoint import Checkpoint
from .codec import CodecConfig, LatentCodecModel, fit_autoencoder, frame_bank, psnr
from .config import get_profile
from .data import MovingShapesDataset
from .errors import CheckpointError, UsageError
from .freqlab import band_report, radial_spatial_distribution, spatial_band_energies
from .stage import StageModel
from .training import TrainConfig, fit_stage
from .validation import check_single_frame, check_video
from .video import VideoTensor


def _pixel_frames(X, divisible_by: int) -> torch.Tensor:
    """Dataset, ``(N, 3, H, W)`` or ``(B, F, 3, H, W)`` -> ``(N, 3, H, W)``."""
    if isinstance(X, MovingShapesDataset):
        return frame_bank(X, 8, 2)
    t = check_video(X, divisible_by=divisible_by, name="X")
    return t.reshape(-1, *t.shape[-3:])


def _as_checkpoint(obj, what: str) -> Checkpoint:
    if isinstance(obj, Checkpoint):
        return obj
    if hasattr(obj, "to_checkpoint"):
        return obj.to_checkpoint()
    raise CheckpointError(f"cannot use {type(obj).__name__} as a {what}")


class LatentCodec(TransformerMixin, BaseEstimator):
    """Pixel clips <-> latent clips. ``score`` is the mean reconstruction PSNR in dB."""

    def __init__(self, downsample: int = 4, latent_channels: int = 4, hidden_channels: int = 32,
                 steps: int = 3000, batch_size: int = 8, lr: float = 2e-3,
                 edge_weight: float = 0.1, seed: int = 0):
        self.downsample = downsample
        self.latent_channels = latent_channels
        self.hidden_channels = hidden_channels
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.edge_weight = edge_weight
        self.seed = seed

    def fit(self, X, y=None):
        config = CodecConfig(**self.get_params())
        self.codec_, self.losses_ = fit_autoencoder(_pixel_frames(X, self.downsample), config, log_every=0)
        return self

    def transform(self, X) -> torch.Tensor:
        check_is_fitted(self, "codec_")
        return self.codec_.encode_tensor(check_video(X, divisible_by=self.downsample, name="X"))

    def inverse_transform(self, Z) -> torch.Tensor:
        check_is_fitted(self, "codec_")
        return self.codec_.decode_tensor(torch.as_tensor(Z, dtype=torch.float32))

    def score(self, X, y=None) -> float:
        x = check_video(X, divisible_by=self.downsample, name="X")
        return psnr(self.inverse_transform(self.transform(x)), x)

    def to_checkpoint(self) -> Checkpoint:
        check_is_fitted(self, "codec_")
        return self.codec_.to_checkpoint(losses=list(self.losses_))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "LatentCodec":
        ckpt.require_stage("autoencoder")
        codec = LatentCodecModel.from_checkpoint(ckpt)
        est = cls(**vars(codec.config))
        est.codec_, est.losses_ = codec, list(ckpt.extras.get("losses", []))
        return est


class _StageEstimator(BaseEstimator):
    stage = "base"

    def _train_config(self) -> TrainConfig:
        return TrainConfig(stage=self.stage, lr=self.lr, gamma_spatial=self.gamma,
                           T_r=getattr(self, "T_r", 600), steps=self.steps,
                           batch_size=self.batch_size, seed=self.seed,
                           offset_strength=self.offset_strength, log_every=0)

    def _fit_model(self, X, model: StageModel):
        if not isinstance(X, MovingShapesDataset):
            raise UsageError(f"fit expects a MovingShapesDataset, got {type(X).__name__}")
        self.losses_ = fit_stage(model, X, self._train_config())
        self.model_ = model
        return self

    def to_checkpoint(self) -> Checkpoint:
        check_is_fitted(self, "model_")
        return self.model_.to_checkpoint(config={"estimator": self.get_params()},
                                         seeds={self.stage: self.seed},
                                         extras={"losses": list(self.losses_)})


class ImageToVideoDiffusion(_StageEstimator):
    """Base stage: one conditioning image -> a low-resolution clip.

    ``fit(dataset, codec=...)`` trains from scratch on top of a trained codec
    (a fitted :class:`LatentCodec`, a codec model, or an autoencoder checkpoint).
    """

    stage = "base"

    def __init__(self, profile: str = "toy", lr: float = 8e-5, gamma: float = 0.2,
                 steps: int = 2000, batch_size: int = 8, offset_strength: float = 0.1,
                 detail_injection: str = "every_step", sample_steps: int = 50,
                 frames: int = 8, fps: int = 8, seed: int = 0):
        self.profile = profile
        self.lr = lr
        self.gamma = gamma
        self.steps = steps
        self.batch_size = batch_size
        self.offset_strength = offset_strength
        self.detail_injection = detail_injection
        self.sample_steps = sample_steps
        self.frames = frames
        self.fps = fps
        self.seed = seed

    def fit(self, X, y=None, *, codec=None):
        if codec is None:
            raise UsageError("ImageToVideoDiffusion.fit needs a trained codec")
        if isinstance(codec, LatentCodec):
            check_is_fitted(codec, "codec_")
            codec = codec.codec_
        elif not isinstance(codec, LatentCodecModel):
            codec = LatentCodecModel.from_checkpoint(_as_checkpoint(codec, "codec"))
        model = StageModel("base", get_profile(self.profile), codec,
                           detail_injection=self.detail_injection, seed=self.seed)
        return self._fit_model(X, model)

    def predict(self, X, *, frames: int | None = None, fps: int | None = None,
                seed: int | None = None) -> torch.Tensor:
        """Images ``(B, 3, H, W)`` or ``(B, 1, 3, H, W)`` -> clips ``(B, F, 3, h, w)``."""
        check_is_fitted(self, "model_")
        x = as_images(X)
        gen = torch.Generator().manual_seed(self.seed if seed is None else int(seed))
        self.model_.eval()
        out = [sample_base(self.model_, img, frames or self.frames, fps or self.fps,
                           self.sample_steps, gen)[0] for img in x]
        return torch.stack(out)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ImageToVideoDiffusion":
        model = StageModel.from_checkpoint(ckpt, expect_stage="base")
        params = ckpt.config.get("estimator", {"profile": model.profile.name})
        est = cls(**params)
        est.model_, est.losses_ = model, list(ckpt.extras.get("losses", []))
        return est


class TextGuidedRefiner(TransformerMixin, _StageEstimator):
    """Refinement stage: re-noise a clip to ``T_r`` and denoise it at high resolution
    under a caption. ``fit(dataset, base=...)`` initialises from a trained base stage."""

    stage = "refine"

    def __init__(self, T_r: int = 600, lr: float = 8e-5, gamma: float = 0.2, steps: int = 2000,
                 batch_size: int = 8, offset_strength: float = 0.1, sample_steps: int = 50,
                 seed: int = 0):
        self.T_r = T_r
        self.lr = lr
        self.gamma = gamma
        self.steps = steps
        self.batch_size = batch_size
        self.offset_strength = offset_strength
        self.sample_steps = sample_steps
        self.seed = seed

    def fit(self, X, y=None, *, base=None):
        if base is None:
            raise UsageError("TextGuidedRefiner.fit needs a trained base stage")
        if isinstance(base, ImageToVideoDiffusion):
            check_is_fitted(base, "model_")
            base = base.model_
        elif not isinstance(base, StageModel):
            base = StageModel.from_checkpoint(_as_checkpoint(base, "base stage"), expect_stage="base")
        return self._fit_model(X, StageModel.refine_from_base(base, seed=self.seed))

    def transform(self, X, captions=None, *, fps: int = 8, seed: int | None = None) -> torch.Tensor:
        """Clips ``(B, F, 3, h, w)`` (or one ``(F, 3, h, w)``) + captions -> refined clips."""
        check_is_fitted(self, "model_")
        x = check_video(X, name="X")
        single = x.dim() == 4
        x = x[None] if single else x
        if captions is None:
            raise UsageError("refinement needs one caption per clip")
        captions = [captions] if isinstance(captions, str) else list(captions)
        if len(captions) != len(x):
            raise UsageError(f"{len(x)} clips but {len(captions)} captions")
        seed = self.seed if seed is None else int(seed)
        out = torch.stack([refine_only(VideoTensor(clip, fps), cap, self.model_, self.T_r,
                                       self.sample_steps, seed + i).data
                           for i, (clip, cap) in enumerate(zip(x, captions))])
        return out[0] if single else out

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "TextGuidedRefiner":
        model = StageModel.from_checkpoint(ckpt, expect_stage="refine")
        est = cls(**ckpt.config.get("estimator", {}))
        est.model_, est.losses_ = model, list(ckpt.extras.get("losses", []))
        return est


class CascadeGenerator(BaseEstimator):
    """Image + caption -> refined clip, composing a fitted base stage and refiner."""

    def __init__(self, T_r: int = 600, frames: int = 8, fps: int = 8, base_steps: int = 50,
                 refine_steps: int = 50, seed: int = 0):
        self.T_r = T_r
        self.frames = frames
        self.fps = fps
        self.base_steps = base_steps
        self.refine_steps = refine_steps
        self.seed = seed

    def fit(self, X=None, y=None, *, base=None, refine=None):
        if base is None or refine is None:
            raise UsageError("CascadeGenerator.fit needs fitted base and refine estimators")
        check_is_fitted(base, "model_")
        check_is_fitted(refine, "model_")
        self.base_, self.refine_ = base.model_, refine.model_
        return self

    def predict(self, X, captions=None):
        """Images ``(B, 3, H, W)`` + captions -> list of :class:`~.cascade.CascadeResult`."""
        check_is_fitted(self, ["base_", "refine_"])
        images = as_images(X)
        captions = [captions] if isinstance(captions, str) else list(captions or [])
        if len(captions) != len(images):
            raise UsageError(f"{len(images)} images but {len(captions)} captions")
        params = CascadeParams(self.frames, self.fps, self.T_r, self.base_steps,
                               self.refine_steps, self.seed)
        return [run_cascade(img, cap, self.base_, self.refine_, params)
                for img, cap in zip(images, captions)]


class SpectrumAnalyzer(TransformerMixin, BaseEstimator):
    """Stateless frequency features. ``transform`` maps clips to radial spatial spectra;
    ``compare`` builds a before/after band report."""

    def __init__(self, bins: int = 24, per_channel: bool = False):
        self.bins = bins
        self.per_channel = per_channel

    def fit(self, X=None, y=None):
        self.n_bins_ = int(self.bins)
        return self

    def transform(self, X) -> np.ndarray:
        x = check_video(X, name="X")
        clips = x[None] if x.dim() == 4 else x
        return np.stack([radial_spatial_distribution(c, self.bins, self.per_channel) for c in clips])

    def band_energies(self, X) -> np.ndarray:
        return spatial_band_energies(check_video(X, allow_batch=False, name="X"),
                                     per_channel=self.per_channel)

    def compare(self, before, after):
        return band_report(check_video(before, allow_batch=False, name="before"),
                           check_video(after, allow_batch=False, name="after"),
                           self.bins, per_channel=self.per_channel)


def as_images(X) -> torch.Tensor:
    """``(B, 3, H, W)``, ``(3, H, W)`` or ``(B, 1, 3, H, W)`` -> ``(B, 1, 3, H, W)``."""
    t = X.data if isinstance(X, VideoTensor) else torch.as_tensor(np.asarray(X) if not
                                                                  isinstance(X, torch.Tensor) else X)
    t = t.to(torch.float32)
    if t.dim() == 4 and t.shape[1] == 3:
        t = t[:, None]
    return check_single_frame(t)
