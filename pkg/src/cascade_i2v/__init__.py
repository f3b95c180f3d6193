"""Cascaded image-to-video latent diffusion at desk scale, with frequency diagnostics."""

from .cascade import CascadeParams, CascadeResult, generate, refine_only, run_cascade
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .codec import CodecConfig, LatentCodecModel, fit_autoencoder, psnr, train_autoencoder
from .conditioning import (ConditioningBundle, GlobalEncoder, GlobalEncoderSpec, TextEncoder,
                           Vocabulary, fuse_semantic, global_encode, semantic_encode, text_encode)
from .config import (Profile, RunConfig, get_profile, load_config, micro_profile, full_profile,
                     toy_profile)
from .data import MovingShapesDataset, SceneSpec, build_dataset, render_clip, sample_frames_fps
from .errors import (CascadeError, CheckpointError, ConfigError, DataError, DimensionError,
                     TrainingError, UsageError)
from .estimators import (CascadeGenerator, ImageToVideoDiffusion, LatentCodec, SpectrumAnalyzer,
                         TextGuidedRefiner)
from .freqlab import (SpectrumReport, band_report, radial_spatial_distribution,
                      spatial_spectrogram, temporal_distribution, temporal_section)
from .noise_schedule import (NoiseSchedule, OffsetNoiseConfig, build_linear_schedule, q_sample,
                             recover_x0_eps, sample_offset_noise, v_from_eps_x0)
from .samplers import ddim_sample, ddim_step, make_step_schedule, noise_to_level
from .stage import StageModel, unet_forward
from .training import TrainConfig, compute_loss, draw_timestep, fit_stage, train_stage
from .unet3d import UNet3D, UNetSpec, timestep_fps_embedding
from .video import LatentVideo, VideoTensor

__version__ = "0.1.0"
