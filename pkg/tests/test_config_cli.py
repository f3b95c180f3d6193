import json

import pytest
import torch
import yaml

from cascade_i2v.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from cascade_i2v.cli import build_parser, cli_dispatch, resolve_config
from cascade_i2v.config import RunConfig, dump_config, get_profile, load_config
from cascade_i2v.errors import CheckpointError, ConfigError


def test_defaults():
    cfg = load_config()
    assert cfg == RunConfig() and cfg.T_r == 600 and cfg.gamma == 0.2 and cfg.lr == 8e-5


def test_precedence_flag_over_file_over_default(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({"T_r": 300, "lr": 1e-4}))
    assert load_config(file=path).T_r == 300
    cfg = load_config(file=path, overrides={"T_r": 500})
    assert cfg.T_r == 500 and cfg.lr == 1e-4 and cfg.gamma == 0.2


def test_precedence_through_argv(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"T_r": 300, "seed": 4}))
    args = build_parser().parse_args(["refine-only", "--config", str(path), "--tr", "500",
                                      "--input", "x", "--text", "t", "--refine", "r", "--out", "o"])
    cfg = resolve_config(args)
    assert cfg.T_r == 500 and cfg.seed == 4
    args = build_parser().parse_args(["analyze", "--set", "bins=12", "--before", "a", "--after", "b",
                                      "--out", "o"])
    assert resolve_config(args).bins == 12


def test_dump_and_reload(tmp_path):
    cfg = load_config(overrides={"gamma": 0.5, "profile": "micro"})
    dump_config(cfg, tmp_path / "c.json")
    assert load_config(file=tmp_path / "c.json") == cfg


@pytest.mark.parametrize("overrides,key", [({"T_rr": 5}, "T_rr"), ({"gamma": 1.5}, "gamma"),
                                           ({"gamma": 0}, "gamma"), ({"T_r": 0}, "T_r"),
                                           ({"T_r": 1001}, "T_r"), ({"lr": "fast"}, "lr"),
                                           ({"profile": "huge"}, "huge"),
                                           ({"detail_injection": "sometimes"}, "detail_injection")])
def test_invalid_config(overrides, key):
    with pytest.raises(ConfigError, match=key):
        load_config(overrides=overrides)


def test_profiles():
    toy = get_profile("toy")
    assert toy.base_size == (64, 64) and toy.refine_size == (128, 128) and toy.downsample == 4
    assert toy.cond_dim == 256 and toy.fps_set == (1, 2, 4, 8) and toy.frame_set == (1, 2, 4, 8)
    full = get_profile("full")
    assert full.base_size == (256, 448) and full.refine_size == (720, 1280)
    assert full.downsample == 8 and full.cond_dim == 1024
    assert full.frame_set == (1, 8, 16, 32) and full.fps_set == (1, 4, 8, 16)


def test_checkpoint_bitwise_roundtrip(tmp_path):
    g = torch.Generator().manual_seed(0)
    ckpt = Checkpoint("base", {"a.w": torch.randn(3, 4, generator=g), "a.s": torch.tensor(2.5)},
                      {"x": [1, 2]}, {"base": 3}, {"losses": [0.5, 0.25]})
    path = save_checkpoint(ckpt, tmp_path / "c.ckpt")
    back = load_checkpoint(path, "base")
    assert back.tensors.keys() == ckpt.tensors.keys()
    for k in ckpt.tensors:
        assert back.tensors[k].shape == ckpt.tensors[k].shape
        assert torch.equal(back.tensors[k], ckpt.tensors[k])
    assert back.config == ckpt.config and back.seeds == ckpt.seeds and back.extras == ckpt.extras
    assert save_checkpoint(back, tmp_path / "d.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    path = save_checkpoint(Checkpoint("refine", {"w": torch.zeros(2)}), tmp_path / "c.ckpt")
    with pytest.raises(CheckpointError, match="base"):
        load_checkpoint(path, "base")
    raw = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-3])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trunc.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_cli_usage_errors(capsys):
    assert cli_dispatch(["teleport"]) == 2
    assert cli_dispatch([]) == 2
    assert cli_dispatch(["--help"]) == 0
    assert cli_dispatch(["analyze", "--before", "a", "--after", "b", "--out", "o",
                         "--set", "nonsense=1"]) == 2
    assert cli_dispatch(["analyze", "--before", "a", "--after", "b", "--out", "o",
                         "--set", "gamma=1.5"]) == 2
    assert "gamma" in capsys.readouterr().err


def test_cli_train_refine_rejects_gamma(tmp_path):
    assert cli_dispatch(["train-refine", "--gamma", "1.5", "--data", "d", "--base", "b",
                         "--out", str(tmp_path / "r.ckpt")]) == 2


def test_cli_corrupt_checkpoint_exit_code(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    (tmp_path / "clip").mkdir()
    assert cli_dispatch(["refine-only", "--input", str(tmp_path / "clip"), "--text", "red square growing",
                         "--refine", str(tmp_path / "bad.ckpt"), "--out", str(tmp_path / "o")]) == 3


def test_cli_missing_data_exit_code(tmp_path):
    assert cli_dispatch(["analyze", "--before", str(tmp_path / "nope"), "--after",
                         str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 4


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run every subcommand once on the micro profile with a handful of steps."""
    root = tmp_path_factory.mktemp("cli")
    common = ["--profile", "micro", "--seed", "0"]
    data = root / "data"
    steps = {}
    steps["make-data"] = cli_dispatch(["make-data", *common, "--n", "4", "--out", str(data)])
    steps["train-ae"] = cli_dispatch(["train-ae", *common, "--codec-steps", "3", "--set",
                                      "codec_hidden=8", "--data", str(data), "--out",
                                      str(root / "ae.ckpt")])
    train = ["--steps", "2", "--batch-size", "2"]
    steps["train-base"] = cli_dispatch(["train-base", *common, *train, "--data", str(data),
                                        "--codec", str(root / "ae.ckpt"), "--out",
                                        str(root / "base.ckpt")])
    steps["train-refine"] = cli_dispatch(["train-refine", *common, *train, "--tr", "100", "--data",
                                          str(data), "--base", str(root / "base.ckpt"), "--out",
                                          str(root / "refine.ckpt")])
    sample = ["--tr", "100", "--base-steps", "3", "--refine-steps", "3"]
    steps["generate"] = cli_dispatch(["generate", *common, *sample, "--frames", "2", "--fps", "4",
                                      "--image", str(data / "clip_00000" / "frame_000.png"),
                                      "--text", "red square growing", "--base",
                                      str(root / "base.ckpt"), "--refine", str(root / "refine.ckpt"),
                                      "--out", str(root / "gen")])
    steps["refine-only"] = cli_dispatch(["refine-only", *common, "--tr", "50", "--refine-steps", "2",
                                         "--input", str(root / "gen" / "base"), "--text",
                                         "blue circle rotating", "--refine",
                                         str(root / "refine.ckpt"), "--out", str(root / "ro")])
    steps["analyze"] = cli_dispatch(["analyze", "--bins", "8", "--before", str(root / "gen"),
                                     "--after", str(root / "ro"), "--out", str(root / "report")])
    return root, steps


def test_cli_pipeline_exit_codes(pipeline):
    _, steps = pipeline
    assert steps == {k: 0 for k in steps}


def test_cli_pipeline_outputs(pipeline):
    root, _ = pipeline
    assert (root / "data" / "manifest.txt").read_text().count("\n") == 4
    assert json.loads((root / "data" / "run.json").read_text())["config"]["num_clips"] == 4
    assert load_checkpoint(root / "ae.ckpt").stage == "autoencoder"
    assert (root / "base.ckpt.loss.csv").read_text().splitlines()[0] == "step,loss"
    assert len((root / "base.ckpt.loss.csv").read_text().splitlines()) == 3
    refine = load_checkpoint(root / "refine.ckpt", "refine")
    assert refine.config["train"]["T_r"] == 100
    run = json.loads((root / "refine.ckpt.run.json").read_text())
    assert run["argv"][0] == "train-refine" and run["config"]["T_r"] == 100
    assert len(list((root / "gen").glob("frame_*.png"))) == 2
    assert len(list((root / "gen" / "base").glob("frame_*.png"))) == 2
    meta = json.loads((root / "gen" / "meta").read_text())
    assert meta["fps"] == 4 and meta["shapes"]["refined"] == [2, 3, 64, 64]
    assert meta["shapes"]["base_video"] == [2, 3, 32, 32]
    report = json.loads((root / "report" / "report.json").read_text())
    assert set(report["band_ratios"]) == {"spatial", "temporal"}
    assert len(list((root / "report").glob("*.png"))) == 4


def test_cli_generate_deterministic(pipeline, tmp_path):
    root, _ = pipeline
    argv = ["generate", "--profile", "micro", "--seed", "0", "--tr", "100", "--base-steps", "3",
            "--refine-steps", "3", "--frames", "2", "--fps", "4", "--image",
            str(root / "data" / "clip_00000" / "frame_000.png"), "--text", "red square growing",
            "--base", str(root / "base.ckpt"), "--refine", str(root / "refine.ckpt"),
            "--out", str(tmp_path / "again")]
    assert cli_dispatch(argv) == 0
    for frame in sorted((root / "gen").glob("frame_*.png")):
        assert (tmp_path / "again" / frame.name).read_bytes() == frame.read_bytes()


def test_cli_stage_swap_is_checkpoint_error(pipeline, tmp_path):
    root, _ = pipeline
    argv = ["generate", "--profile", "micro", "--image",
            str(root / "data" / "clip_00000" / "frame_000.png"), "--text", "red square growing",
            "--base", str(root / "refine.ckpt"), "--refine", str(root / "refine.ckpt"),
            "--out", str(tmp_path / "x")]
    assert cli_dispatch(argv) == 3
    assert cli_dispatch(["train-base", "--data", str(root / "data"), "--codec",
                         str(root / "base.ckpt"), "--out", str(tmp_path / "b.ckpt")]) == 3


def test_cli_out_of_vocabulary_caption(pipeline, tmp_path):
    root, _ = pipeline
    argv = ["refine-only", "--input", str(root / "gen" / "base"), "--text", "red zebra growing",
            "--refine", str(root / "refine.ckpt"), "--out", str(tmp_path / "x")]
    assert cli_dispatch(argv) == 4


def test_checkpoint_header_missing_fields(tmp_path):
    header = json.dumps({"tensors": [{"name": "w"}]}).encode()
    (tmp_path / "h.ckpt").write_bytes(b"CASCADE-CKPT 1\n" + str(len(header)).encode() + b"\n" + header)
    with pytest.raises(CheckpointError, match="required fields"):
        load_checkpoint(tmp_path / "h.ckpt")
