"""Command line entry point.

Subcommands: make-data, train-ae, train-base, train-refine, generate,
refine-only, analyze. Exit codes: 0 ok, 1 unexpected, 2 config/usage,
3 checkpoint, 4 data.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .cascade import CascadeParams, refine_only, run_cascade
from .checkpoint import load_checkpoint
from .codec import CodecConfig, fit_autoencoder, frame_bank
from .config import RunConfig, get_profile, load_config
from .data import MovingShapesDataset, build_dataset, read_frames, read_image, write_frames
from .errors import CascadeError
from .freqlab import band_report, render_report
from .stage import StageModel
from .training import TrainConfig, train_stage

logger = logging.getLogger("cascade_i2v")

# flag name -> RunConfig key
FLAG_KEYS = {
    "profile": "profile", "seed": "seed", "steps": "steps", "lr": "lr", "gamma": "gamma",
    "tr": "T_r", "batch_size": "batch_size", "n": "num_clips", "frames": "frames", "fps": "fps",
    "base_steps": "base_steps", "refine_steps": "refine_steps", "bins": "bins",
    "offset_strength": "offset_strength", "detail_injection": "detail_injection",
    "codec_steps": "codec_steps",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CascadeErrorExit(f"{self.prog}: error: {message}")


class CascadeErrorExit(CascadeError):
    exit_code = 2


def _common(p: argparse.ArgumentParser, *flags: str) -> None:
    p.add_argument("--config", help="YAML/JSON file of config overrides")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--profile")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    for flag in flags:
        p.add_argument(f"--{flag.replace('_', '-')}", dest=flag, type=str)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cascade-i2v", description="Toy cascaded image-to-video diffusion: "
                     "data, training, generation and frequency analysis.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-data", help="render a moving-shapes dataset")
    _common(p, "n")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-ae", help="train the latent autoencoder")
    _common(p, "codec_steps")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-base", help="train the image-conditioned base stage")
    _common(p, "steps", "lr", "gamma", "batch_size", "offset_strength", "detail_injection")
    p.add_argument("--data", required=True)
    p.add_argument("--codec", help="autoencoder checkpoint (fresh start)")
    p.add_argument("--init", help="base checkpoint to continue from")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-refine", help="train the text-conditioned refinement stage")
    _common(p, "steps", "lr", "gamma", "batch_size", "offset_strength", "tr")
    p.add_argument("--data", required=True)
    p.add_argument("--base", required=True, help="base checkpoint to initialise from")
    p.add_argument("--out", required=True)

    p = sub.add_parser("generate", help="image + caption -> refined clip")
    _common(p, "tr", "frames", "fps", "base_steps", "refine_steps")
    p.add_argument("--image", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--refine", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("refine-only", help="refine an existing low-resolution clip")
    _common(p, "tr", "refine_steps")
    p.add_argument("--input", required=True, help="frame folder")
    p.add_argument("--text", required=True)
    p.add_argument("--refine", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("analyze", help="frequency report comparing two clips")
    _common(p, "bins")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--out", required=True)
    return parser


def resolve_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise CascadeErrorExit(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return load_config(RunConfig(), args.config, overrides)


def write_run_manifest(path: Path, cfg: RunConfig, argv, extra: dict | None = None) -> None:
    record = {"argv": list(argv), "config": cfg.to_dict(), "seed": cfg.seed}
    record.update(extra or {})
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def write_loss_csv(path: Path, losses) -> None:
    Path(path).write_text("step,loss\n" + "".join(f"{i + 1},{l:.8g}\n" for i, l in enumerate(losses)))


def _ckpt_side(path: Path, suffix: str) -> Path:
    return path.with_name(path.name + suffix)


def cmd_make_data(args, cfg, argv):
    profile = get_profile(cfg.profile)
    H, W = profile.base_size
    out = Path(args.out)
    build_dataset(cfg.num_clips, cfg.seed, out, H=H, W=W, frames=max(profile.frame_set),
                  native_fps=profile.native_fps, max_seconds=profile.max_seconds)
    write_run_manifest(out / "run.json", cfg, argv)


def cmd_train_ae(args, cfg, argv):
    profile = get_profile(cfg.profile)
    ds = MovingShapesDataset.from_manifest(args.data, *profile.base_size)
    config = CodecConfig(profile.downsample, profile.latent_channels, cfg.codec_hidden,
                         cfg.codec_steps, cfg.codec_batch_size, cfg.codec_lr, 0.1, cfg.seed)
    codec, losses = fit_autoencoder(frame_bank(ds, max(profile.frame_set), 2), config)
    out = Path(args.out)
    codec.to_checkpoint(losses=losses, run=cfg.to_dict()).save(out)
    write_loss_csv(_ckpt_side(out, ".loss.csv"), losses)
    write_run_manifest(_ckpt_side(out, ".run.json"), cfg, argv)


def _train_config(stage: str, cfg: RunConfig) -> TrainConfig:
    return TrainConfig(stage=stage, lr=cfg.lr, gamma_spatial=cfg.gamma, T_r=cfg.T_r,
                       steps=cfg.steps, batch_size=cfg.batch_size, seed=cfg.seed,
                       weight_decay=cfg.weight_decay, betas=(cfg.adam_beta1, cfg.adam_beta2),
                       offset_strength=cfg.offset_strength)


def _train(stage: str, args, cfg, argv, init):
    profile = get_profile(cfg.profile)
    ds = MovingShapesDataset.from_manifest(args.data)
    ckpt = train_stage(ds, _train_config(stage, cfg), init, profile=profile,
                       detail_injection=cfg.detail_injection)
    ckpt.config["run"] = cfg.to_dict()
    out = Path(args.out)
    ckpt.save(out)
    write_loss_csv(_ckpt_side(out, ".loss.csv"), ckpt.extras["losses"])
    write_run_manifest(_ckpt_side(out, ".run.json"), cfg, argv)


def cmd_train_base(args, cfg, argv):
    if bool(args.codec) == bool(args.init):
        raise CascadeErrorExit("train-base needs exactly one of --codec or --init")
    init = (load_checkpoint(args.codec, "autoencoder") if args.codec
            else load_checkpoint(args.init, "base"))
    _train("base", args, cfg, argv, init)


def cmd_train_refine(args, cfg, argv):
    init = load_checkpoint(args.base, ("base", "refine"))
    _train("refine", args, cfg, argv, init)


def _write_clip(video, out: Path, meta: dict) -> None:
    write_frames(video, out)
    (out / "meta").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def cmd_generate(args, cfg, argv):
    base = StageModel.from_checkpoint(load_checkpoint(args.base), expect_stage="base")
    refine = StageModel.from_checkpoint(load_checkpoint(args.refine), expect_stage="refine")
    image = read_image(args.image)
    params = CascadeParams(cfg.frames, cfg.fps, cfg.T_r, cfg.base_steps, cfg.refine_steps, cfg.seed)
    result = run_cascade(image, args.text, base, refine, params)
    out = Path(args.out)
    meta = {"caption": args.text, "fps": params.fps, "T_r": params.T_r, "seed": params.seed,
            "shapes": {k: list(v) for k, v in result.shapes.items()}}
    _write_clip(result.video, out, meta)
    _write_clip(result.base_video, out / "base", dict(meta, stage="base"))
    write_run_manifest(out / "run.json", cfg, argv, {"base": args.base, "refine": args.refine})


def cmd_refine_only(args, cfg, argv):
    refine = StageModel.from_checkpoint(load_checkpoint(args.refine), expect_stage="refine")
    video = read_frames(args.input)
    out_video = refine_only(video, args.text, refine, cfg.T_r, cfg.refine_steps, cfg.seed)
    out = Path(args.out)
    _write_clip(out_video, out, {"caption": args.text, "fps": out_video.fps, "T_r": cfg.T_r,
                                 "seed": cfg.seed, "source": str(args.input)})
    write_run_manifest(out / "run.json", cfg, argv)


def cmd_analyze(args, cfg, argv):
    a, b = read_frames(args.before), read_frames(args.after)
    report = band_report(a, b, cfg.bins)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    render_report(report, a, b, out)
    write_run_manifest(out / "run.json", cfg, argv)


COMMANDS = {
    "make-data": cmd_make_data, "train-ae": cmd_train_ae, "train-base": cmd_train_base,
    "train-refine": cmd_train_refine, "generate": cmd_generate, "refine-only": cmd_refine_only,
    "analyze": cmd_analyze,
}


def cli_dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        torch.set_num_threads(1)
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg, argv)
    except CascadeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        logger.exception("unexpected failure")
        print(f"unexpected error: {exc!r}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
