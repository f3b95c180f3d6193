"""Procedural moving-shapes clips with captions, frame/FPS ratio sampling, and
the frame-folder dataset layout.

Scene geometry lives in *reference pixels*: a frame of height ``H`` is
``REFERENCE_HEIGHT`` reference pixels tall, so one spec renders the same scene
at any resolution. ``speed`` is measured in reference pixels per frame at the
scene's native fps, which keeps physical (per-second) motion independent of the
fps a clip is rendered at.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError
from .video import VideoTensor

logger = logging.getLogger(__name__)

REFERENCE_HEIGHT = 64
SUPERSAMPLE = 4

SHAPES = ("square", "circle", "triangle")
MOTIONS = ("left", "right", "up", "down", "rotate", "grow")
PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 90, 230),
    "yellow": (235, 220, 40),
    "cyan": (40, 215, 220),
    "magenta": (210, 50, 200),
    "white": (245, 245, 245),
    "orange": (245, 140, 30),
}
BACKGROUNDS = {
    "black": (10, 10, 10),
    "gray": (110, 110, 110),
    "navy": (20, 25, 90),
    "maroon": (90, 20, 25),
    "olive": (85, 90, 20),
    "teal": (20, 85, 85),
}
_DIRECTIONS = {"left": (-1.0, 0.0), "right": (1.0, 0.0), "up": (0.0, -1.0), "down": (0.0, 1.0)}
ROTATION_RAD_PER_UNIT = 0.1
GROWTH_PER_UNIT = 0.5


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    motion: str
    speed: float
    background: str
    seed: int
    cx: float = 32.0
    cy: float = 32.0
    radius: float = 8.0
    native_fps: int = 8

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise DataError(f"unknown shape {self.shape!r}")
        if self.color not in PALETTE:
            raise DataError(f"unknown color {self.color!r}")
        if self.background not in BACKGROUNDS:
            raise DataError(f"unknown background {self.background!r}")
        if self.motion not in MOTIONS:
            raise DataError(f"unknown motion {self.motion!r}")
        if self.speed < 0 or self.radius <= 0 or self.native_fps < 1:
            raise DataError(f"invalid scene geometry: {self}")

    @property
    def caption(self) -> str:
        return make_caption(self)

    def state_at(self, seconds: float) -> tuple[float, float, float, float]:
        """Center x, center y, radius, and rotation angle at time ``seconds``."""
        units = self.speed * self.native_fps * seconds
        cx, cy, r, angle = self.cx, self.cy, self.radius, 0.0
        if self.motion in _DIRECTIONS:
            dx, dy = _DIRECTIONS[self.motion]
            cx += dx * units
            cy += dy * units
        elif self.motion == "rotate":
            angle = ROTATION_RAD_PER_UNIT * units
        else:
            r += GROWTH_PER_UNIT * units
        return cx, cy, r, angle

    def extent(self, radius: float) -> float:
        if self.shape == "square":
            return radius * (math.sqrt(2.0) if self.motion == "rotate" else 1.0)
        return radius


def make_caption(spec: SceneSpec) -> str:
    if spec.motion in _DIRECTIONS:
        return f"{spec.color} {spec.shape} moving {spec.motion}"
    verb = "rotating" if spec.motion == "rotate" else "growing"
    return f"{spec.color} {spec.shape} {verb}"


def parse_caption(caption: str) -> dict:
    """Inverse of :func:`make_caption` over the caption grammar."""
    words = caption.split()
    if len(words) == 4 and words[2] == "moving" and words[3] in _DIRECTIONS:
        motion = words[3]
    elif len(words) == 3 and words[2] in ("rotating", "growing"):
        motion = "rotate" if words[2] == "rotating" else "grow"
    else:
        raise DataError(f"caption {caption!r} does not follow the template")
    if words[0] not in PALETTE or words[1] not in SHAPES:
        raise DataError(f"caption {caption!r} has unknown color or shape")
    return {"color": words[0], "shape": words[1], "motion": motion}


def caption_vocabulary() -> list[str]:
    """Every word the caption grammar can emit (the null token is added by the text encoder)."""
    words = list(PALETTE) + list(SHAPES) + ["moving", *_DIRECTIONS, "rotating", "growing"]
    return list(dict.fromkeys(words))


def _shape_mask(spec: SceneSpec, xs, ys, cx, cy, r, angle):
    dx, dy = xs - cx, ys - cy
    if spec.shape == "circle":
        return dx * dx + dy * dy <= r * r
    c, s = math.cos(angle), math.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if spec.shape == "square":
        return (np.abs(u) <= r) & (np.abs(v) <= r)
    # equilateral triangle pointing up, inscribed in radius r: three half-planes
    inside = np.ones_like(u, dtype=bool)
    for k in range(3):
        phi = -math.pi / 2 + k * 2 * math.pi / 3
        inside &= u * math.cos(phi) + v * math.sin(phi) <= r / 2
    return inside


def render_clip(spec: SceneSpec, frames: int, fps: int, H: int, W: int) -> tuple[VideoTensor, str]:
    """Render ``frames`` frames sampled at ``fps`` onto an ``H x W`` canvas.

    Frame ``k`` shows the scene at ``k / fps`` seconds. Edges are anti-aliased by
    box-filtering a supersampled coverage mask.
    """
    if frames < 1 or fps < 1:
        raise DataError(f"frames and fps must be positive, got {frames}, {fps}")
    scale = H / REFERENCE_HEIGHT
    width_ref = W / scale
    states = [spec.state_at(k / fps) for k in range(frames)]
    for k, (cx, cy, r, _) in enumerate(states):
        e = spec.extent(r)
        if cx - e < 0 or cx + e > width_ref or cy - e < 0 or cy + e > REFERENCE_HEIGHT:
            raise DataError(
                f"trajectory escapes the frame at frame {k} "
                f"(center=({cx:.1f}, {cy:.1f}), extent={e:.1f}) for {spec.caption!r}")

    ss = SUPERSAMPLE
    ys = (np.arange(H * ss) + 0.5) / (ss * scale)
    xs = (np.arange(W * ss) + 0.5) / (ss * scale)
    xs, ys = np.meshgrid(xs, ys)
    fg = np.array(PALETTE[spec.color], dtype=np.float64) / 127.5 - 1.0
    bg = np.array(BACKGROUNDS[spec.background], dtype=np.float64) / 127.5 - 1.0
    out = np.empty((frames, 3, H, W), dtype=np.float32)
    for k, (cx, cy, r, angle) in enumerate(states):
        mask = _shape_mask(spec, xs, ys, cx, cy, r, angle).astype(np.float64)
        cover = mask.reshape(H, ss, W, ss).mean(axis=(1, 3))
        out[k] = (bg[:, None, None] * (1 - cover) + fg[:, None, None] * cover)
    return VideoTensor(torch.from_numpy(out), fps), make_caption(spec)


def sample_scene(rng: np.random.Generator, *, max_seconds: float, native_fps: int = 8,
                 aspect: float = 1.0, seed: int = 0) -> SceneSpec:
    """Draw a random scene whose trajectory stays inside the frame for ``max_seconds``."""
    shape = SHAPES[rng.integers(len(SHAPES))]
    color = list(PALETTE)[rng.integers(len(PALETTE))]
    background = list(BACKGROUNDS)[rng.integers(len(BACKGROUNDS))]
    motion = MOTIONS[rng.integers(len(MOTIONS))]
    radius = float(rng.uniform(6.0, 10.0))
    speed = float(rng.choice([0.5, 1.0]))
    width_ref = REFERENCE_HEIGHT * aspect
    margin = 1.0
    units_per_second = speed * native_fps
    probe = SceneSpec(shape, color, motion, speed, background, seed, radius=radius,
                      native_fps=native_fps)
    if motion in _DIRECTIONS:
        travel = units_per_second * max_seconds
        e = probe.extent(radius)
        span = (width_ref if motion in ("left", "right") else REFERENCE_HEIGHT) - 2 * (e + margin)
        if travel > span:
            speed = span / (native_fps * max_seconds)
            travel = span
        lo = e + margin
        start = lo + rng.uniform(0, span - travel)
        other_span = (REFERENCE_HEIGHT if motion in ("left", "right") else width_ref)
        other = float(rng.uniform(lo, other_span - lo))
        if motion == "right":
            cx, cy = start, other
        elif motion == "left":
            cx, cy = start + travel, other
        elif motion == "down":
            cx, cy = other, start
        else:
            cx, cy = other, start + travel
    else:
        if motion == "grow":
            grown = radius + GROWTH_PER_UNIT * units_per_second * max_seconds
            limit = REFERENCE_HEIGHT / 2 - margin
            if grown > limit:
                radius = min(radius, limit / 2)
                speed = (limit - radius) / (GROWTH_PER_UNIT * native_fps * max_seconds)
                grown = limit
            e = probe.extent(grown)
        else:
            e = probe.extent(radius)
        cx = float(rng.uniform(e + margin, width_ref - e - margin))
        cy = float(rng.uniform(e + margin, REFERENCE_HEIGHT - e - margin))
    return SceneSpec(shape, color, motion, float(speed), background, int(seed), float(cx),
                     float(cy), float(radius), native_fps)


def sample_frames_fps(rng: np.random.Generator, frame_set=(1, 8, 16, 32), fps_set=(1, 4, 8, 16),
                      frame_ratios=(1, 1, 1, 5), fps_ratios=(1, 2, 4, 1)) -> tuple[int, int]:
    """Draw ``(frames, fps)``; an fps of 1 means a static image, forcing one frame."""
    fps_p = np.asarray(fps_ratios, dtype=float)
    frame_p = np.asarray(frame_ratios, dtype=float)
    fps = int(fps_set[rng.choice(len(fps_set), p=fps_p / fps_p.sum())])
    frames = int(frame_set[rng.choice(len(frame_set), p=frame_p / frame_p.sum())])
    if fps == 1:
        frames = 1
    return frames, fps


def center_crop(x, H: int, W: int):
    """Crop the trailing two axes to ``H x W`` around the center.

    An odd remainder leaves the extra pixel on the bottom/right side.
    """
    h, w = x.shape[-2:]
    if H > h or W > w:
        raise DataError(f"cannot crop {h}x{w} to larger target {H}x{W}")
    top, left = (h - H) // 2, (w - W) // 2
    return x[..., top:top + H, left:left + W]


def clip_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(frames) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_frames(video: VideoTensor, folder: Path) -> None:
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    pix = to_uint8(video.numpy()).transpose(0, 2, 3, 1)
    for k, frame in enumerate(pix):
        Image.fromarray(frame).save(folder / f"frame_{k:03d}.png", optimize=False)


def read_frames(folder, fps: int | None = None) -> VideoTensor:
    """Load ``frame_*.png`` from a folder (plus ``meta`` fps when present)."""
    folder = Path(folder)
    paths = sorted(folder.glob("frame_*.png"))
    if not paths:
        if folder.is_file():
            paths = [folder]
        else:
            raise DataError(f"no frame_*.png files in {folder}")
    try:
        arrs = [np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) for p in paths]
    except OSError as exc:
        raise DataError(f"cannot read frames from {folder}: {exc}") from exc
    if fps is None:
        meta = folder / "meta"
        fps = json.loads(meta.read_text())["fps"] if meta.is_file() else 8
    data = np.stack(arrs).transpose(0, 3, 1, 2) / 127.5 - 1.0
    return VideoTensor(torch.from_numpy(data), fps)


def read_image(path, H: int | None = None, W: int | None = None) -> VideoTensor:
    """Load a single image as a one-frame clip, center-cropped to ``H x W`` if given."""
    video = read_frames(path, fps=1)
    if H is not None:
        video = VideoTensor(center_crop(video.data[:1], H, W), 1)
    return video


def build_dataset(n: int, seed: int, out_dir, *, H: int = 64, W: int = 64, frames: int = 8,
                  native_fps: int = 8, max_seconds: float = 3.5) -> list[str]:
    """Render ``n`` clips into frame folders and write ``manifest.txt``.

    Clip ``i`` is fully determined by ``clip_seed(seed, i)``, so clips can be
    produced in any order (or regenerated alone) with identical bytes.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        names = []
        for i in range(int(n)):
            spec = scene_for_index(seed, i, max_seconds=max_seconds, native_fps=native_fps,
                                   aspect=W / H)
            name = f"clip_{i:05d}"
            write_clip(spec, out / name, frames=frames, H=H, W=W)
            names.append(name)
        (out / "manifest.txt").write_text("".join(f"{name}\n" for name in names))
    except OSError as exc:
        raise DataError(f"failed writing dataset under {out}: {exc}") from exc
    logger.info("wrote %d clips to %s", len(names), out)
    return names


def scene_for_index(master_seed: int, index: int, **kwargs) -> SceneSpec:
    s = clip_seed(master_seed, index)
    return sample_scene(np.random.default_rng(s), seed=s, **kwargs)


def write_clip(spec: SceneSpec, folder: Path, *, frames: int, H: int, W: int) -> None:
    video, caption = render_clip(spec, frames, spec.native_fps, H, W)
    write_frames(video, folder)
    meta = {"caption": caption, "fps": spec.native_fps, "frames": frames, "height": H,
            "width": W, "spec": asdict(spec)}
    (Path(folder) / "meta").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> list[Path]:
    path = Path(path)
    root = path.parent if path.is_file() else path
    manifest = path if path.is_file() else path / "manifest.txt"
    if not manifest.is_file():
        raise DataError(f"no manifest at {manifest}")
    return [root / line for line in manifest.read_text().splitlines() if line.strip()]


class MovingShapesDataset:
    """Indexable collection of scenes, rendered on demand at any (frames, fps)."""

    def __init__(self, specs, H: int = 64, W: int = 64):
        self.specs = list(specs)
        self.H, self.W = int(H), int(W)

    def __len__(self) -> int:
        return len(self.specs)

    def clip(self, index: int, frames: int, fps: int) -> torch.Tensor:
        return render_clip(self.specs[index], frames, fps, self.H, self.W)[0].data

    def caption(self, index: int) -> str:
        return make_caption(self.specs[index])

    def batch(self, indices, frames: int, fps: int) -> torch.Tensor:
        return torch.stack([self.clip(i, frames, fps) for i in indices])

    def at_resolution(self, H: int, W: int) -> "MovingShapesDataset":
        return MovingShapesDataset(self.specs, H, W)

    @classmethod
    def generate(cls, n: int, seed: int, *, H: int = 64, W: int = 64, native_fps: int = 8,
                 max_seconds: float = 3.5) -> "MovingShapesDataset":
        specs = [scene_for_index(seed, i, max_seconds=max_seconds, native_fps=native_fps,
                                 aspect=W / H) for i in range(n)]
        return cls(specs, H, W)

    @classmethod
    def from_manifest(cls, path, H: int | None = None, W: int | None = None):
        specs, dims = [], None
        for folder in read_manifest(path):
            try:
                meta = json.loads((folder / "meta").read_text())
            except (OSError, ValueError) as exc:
                raise DataError(f"unreadable clip metadata in {folder}: {exc}") from exc
            specs.append(SceneSpec(**meta["spec"]))
            dims = dims or (meta["height"], meta["width"])
        H = H or (dims[0] if dims else 64)
        W = W or (dims[1] if dims else 64)
        return cls(specs, H, W)
