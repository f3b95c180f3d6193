import numpy as np
import pytest
import torch
from scipy import stats

from cascade_i2v.checkpoint import Checkpoint
from cascade_i2v.codec import LatentCodecModel
from cascade_i2v.errors import CheckpointError, ConfigError, TrainingError
from cascade_i2v.noise_schedule import build_linear_schedule, v_from_eps_x0
from cascade_i2v.stage import StageModel
from cascade_i2v.training import (TrainConfig, build_param_groups, compute_loss, draw_timestep,
                                  draw_timesteps, make_optimizer, spatial_lr, train_stage)
from cascade_i2v.unet3d import SPATIAL, TEMPORAL

SCHED = build_linear_schedule()


@pytest.mark.parametrize("kw", [{"gamma_spatial": 0.0}, {"gamma_spatial": 1.5}, {"lr": 0.0},
                                {"stage": "middle"}, {"steps": -1}, {"batch_size": 0}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


@pytest.mark.parametrize("T_r", [0, 1001])
def test_T_r_range(T_r):
    with pytest.raises(ConfigError, match="T_r"):
        TrainConfig(stage="refine", T_r=T_r).check_T_r(1000)
    with pytest.raises(ConfigError):
        draw_timesteps(3, "refine", 1000, T_r, np.random.default_rng(0))


def test_gamma_one_is_allowed():
    assert TrainConfig(gamma_spatial=1.0).gamma_spatial == 1.0


@pytest.mark.parametrize("stage,T_r,high", [("base", 600, 1000), ("refine", 600, 600),
                                            ("refine", 1, 1)])
def test_timestep_range_and_uniformity(stage, T_r, high):
    t = draw_timesteps(100_000, stage, 1000, T_r, np.random.default_rng(0)).numpy()
    assert t.min() == 1 and t.max() == high
    if high > 1:
        counts = np.bincount(t, minlength=high + 1)[1:]
        assert stats.chisquare(counts).pvalue > 1e-3


def test_refine_with_full_T_matches_base():
    a = draw_timesteps(500, "base", 1000, 600, np.random.default_rng(4))
    b = draw_timesteps(500, "refine", 1000, 1000, np.random.default_rng(4))
    assert torch.equal(a, b)


def test_draw_timestep_scalar():
    t = draw_timestep("refine", 1000, 50, np.random.default_rng(1))
    assert isinstance(t, int) and 1 <= t <= 50


class Oracle:
    """Stand-in model returning a fixed prediction."""

    def __init__(self, out):
        self.out = out

    def __call__(self, z_t, t, bundle):
        return self.out


def test_loss_zero_for_exact_target():
    g = torch.Generator().manual_seed(0)
    z0, eps = torch.randn(2, 3, 4, 4, 4, generator=g), torch.randn(2, 3, 4, 4, 4, generator=g)
    t = torch.tensor([10, 900])
    target = v_from_eps_x0(z0, eps, t, SCHED)
    assert compute_loss(Oracle(target), z0, None, t, eps, SCHED).item() == 0.0


def test_loss_of_zero_prediction_is_mean_square_target():
    g = torch.Generator().manual_seed(1)
    z0, eps = torch.randn(2, 2, 4, 4, 4, generator=g), torch.randn(2, 2, 4, 4, 4, generator=g)
    t = torch.tensor([300, 301])
    target = v_from_eps_x0(z0, eps, t, SCHED)
    loss = compute_loss(Oracle(torch.zeros_like(z0)), z0, None, t, eps, SCHED)
    assert loss.item() == pytest.approx(target.pow(2).mean().item(), rel=1e-6)


def test_loss_invariant_to_duplicated_batch():
    g = torch.Generator().manual_seed(2)
    z0, eps = torch.randn(1, 2, 4, 4, 4, generator=g), torch.randn(1, 2, 4, 4, 4, generator=g)
    pred = torch.randn(1, 2, 4, 4, 4, generator=g)
    single = compute_loss(Oracle(pred), z0, None, 77, eps, SCHED)
    double = compute_loss(Oracle(pred.repeat(2, 1, 1, 1, 1)), z0.repeat(2, 1, 1, 1, 1), None, 77,
                          eps.repeat(2, 1, 1, 1, 1), SCHED)
    assert double.item() == pytest.approx(single.item(), rel=1e-6)


def test_non_finite_loss_raises():
    z0 = torch.zeros(1, 1, 4, 2, 2)
    with pytest.raises(TrainingError, match="t="):
        compute_loss(Oracle(torch.full_like(z0, float("nan"))), z0, None, 5, z0, SCHED)


def test_spatial_lr_is_exact():
    assert spatial_lr(8e-5, 0.2) == 1.6e-5
    assert spatial_lr(8e-5, 1.0) == 8e-5


@pytest.fixture
def base_model(micro, micro_codec_ckpt):
    return StageModel("base", micro, LatentCodecModel.from_checkpoint(micro_codec_ckpt), seed=3)


def test_param_groups(base_model):
    groups = build_param_groups(base_model, 8e-5, 0.2)
    by_name = {g["name"]: g for g in groups}
    assert by_name[SPATIAL]["lr"] == 1.6e-5 and by_name[TEMPORAL]["lr"] == 8e-5
    sizes = sum(p.numel() for g in groups for p in g["params"])
    assert sizes == sum(p.numel() for p in base_model.parameters() if p.requires_grad)
    ids = [id(p) for g in groups for p in g["params"]]
    assert len(ids) == len(set(ids))
    assert all(g["lr"] == 8e-5 for g in build_param_groups(base_model, 8e-5, 1.0))


def test_frozen_semantic_encoder_excluded(base_model):
    groups = build_param_groups(base_model, 1e-4, 0.5)
    frozen = {id(p) for p in base_model.conditioner.semantic.parameters()}
    assert frozen and not frozen & {id(p) for g in groups for p in g["params"]}


def test_gamma_zero_freezes_spatial(base_model, micro_dataset):
    from cascade_i2v.training import training_batch
    cfg = TrainConfig(lr=1e-3, steps=1)
    opt = make_optimizer(base_model, cfg, gamma=0.0)
    tags = base_model.parameter_tags()
    before = {n: p.detach().clone() for n, p in base_model.named_parameters()}
    rng = np.random.default_rng(0)
    z0, bundle, _ = training_batch(base_model, micro_dataset.at_resolution(32, 32), micro_dataset,
                                   rng, 2)
    # force a multi-frame batch so the temporal layers receive gradient
    z0 = z0[:, :1].repeat(1, 4, 1, 1, 1) if z0.shape[1] == 1 else z0
    loss = compute_loss(base_model, z0, bundle, torch.tensor([400, 500]), torch.randn_like(z0),
                        base_model.schedule)
    loss.backward()
    opt.step()
    moved_temporal = False
    for n, p in base_model.named_parameters():
        if tags.get(n) == SPATIAL:
            assert torch.equal(p, before[n]), n
        elif tags.get(n) == TEMPORAL:
            moved_temporal |= not torch.equal(p, before[n])
    assert moved_temporal


def test_single_frame_loss_matches_temporal_disabled(base_model, micro_dataset):
    clips = micro_dataset.batch([0, 1], 1, 1)
    z0 = base_model.codec.encode_tensor(clips)
    bundle = base_model.condition(images=clips[:, :1], fps=1)
    eps = torch.randn(z0.shape, generator=torch.Generator().manual_seed(0))
    t = torch.tensor([20, 800])
    with torch.no_grad():
        a = compute_loss(base_model, z0, bundle, t, eps, base_model.schedule)
        with base_model.unet.temporal_disabled():
            b = compute_loss(base_model, z0, bundle, t, eps, base_model.schedule)
    assert a.item() == pytest.approx(b.item(), rel=1e-5)


def _cfg(stage="base", **kw):
    return TrainConfig(stage=stage, steps=kw.pop("steps", 3), batch_size=2, log_every=0, **kw)


def test_zero_steps_keeps_initialisation(micro, micro_dataset, micro_codec_ckpt):
    ckpt = train_stage(micro_dataset, _cfg(steps=0, seed=5), micro_codec_ckpt, profile=micro)
    ref = StageModel("base", micro, LatentCodecModel.from_checkpoint(micro_codec_ckpt), seed=5)
    for n, v in ref.unet.state_dict().items():
        assert torch.equal(ckpt.tensors[f"unet.{n}"], v)
    assert ckpt.extras["losses"] == []


def test_training_deterministic(micro, micro_dataset, micro_codec_ckpt):
    a = train_stage(micro_dataset, _cfg(seed=2), micro_codec_ckpt, profile=micro)
    b = train_stage(micro_dataset, _cfg(seed=2), micro_codec_ckpt, profile=micro)
    assert a.extras["losses"] == b.extras["losses"] and len(a.extras["losses"]) == 3
    for k in a.tensors:
        assert torch.equal(a.tensors[k], b.tensors[k]), k


def test_training_changes_weights_and_keeps_semantic_encoder(micro, micro_dataset, micro_codec_ckpt):
    init = StageModel("base", micro, LatentCodecModel.from_checkpoint(micro_codec_ckpt), seed=0)
    ckpt = train_stage(micro_dataset, _cfg(seed=0, lr=1e-3), micro_codec_ckpt, profile=micro)
    trained = StageModel.from_checkpoint(ckpt)
    changed = any(not torch.equal(a, b) for a, b in zip(init.unet.parameters(),
                                                         trained.unet.parameters()))
    assert changed
    for a, b in zip(init.conditioner.semantic.parameters(), trained.conditioner.semantic.parameters()):
        assert torch.equal(a, b)


def test_stage_and_init_mismatch(micro, micro_dataset, micro_codec_ckpt):
    with pytest.raises(CheckpointError):
        train_stage(micro_dataset, _cfg("refine"), micro_codec_ckpt)
    fake = Checkpoint("refine", {}, {})
    with pytest.raises(CheckpointError):
        train_stage(micro_dataset, _cfg("base"), fake)
    with pytest.raises(ConfigError):
        train_stage(micro_dataset, _cfg("base"), micro_codec_ckpt)


def test_refine_from_base(micro, micro_dataset, micro_codec_ckpt):
    base = train_stage(micro_dataset, _cfg(steps=1), micro_codec_ckpt, profile=micro)
    ref = train_stage(micro_dataset, _cfg("refine", steps=2, T_r=50, seed=1), base)
    assert ref.stage == "refine"
    assert ref.seeds["base"] == 0 and ref.seeds["refine"] == 1
    assert not any(k.startswith("conditioner.") for k in ref.tensors)
    model = StageModel.from_checkpoint(ref)
    assert model.size == (64, 64) and model.text_encoder is not None
