"""Spatial and temporal frequency diagnostics for comparing two clips.

All spectra use orthonormal DFTs, so summed power equals summed squared signal.
Radial frequency is normalised so the per-axis Nyquist frequency is 1; corner
frequencies beyond 1 fall into the last radial bin and the high band. Band
energies exclude the DC term (it carries brightness, not structure).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import UsageError

REC601 = np.array([0.299, 0.587, 0.114])
BANDS = ("low", "mid", "high")


def _frames(video) -> np.ndarray:
    data = getattr(video, "data", video)
    arr = data.detach().cpu().numpy() if hasattr(data, "detach") else np.asarray(data)
    return arr.astype(np.float64)


def luminance(video, per_channel: bool = False) -> np.ndarray:
    """``(F, 3, H, W)`` -> ``(F, H, W)`` Rec. 601 luma, or ``(F*3, H, W)`` with ``per_channel``."""
    arr = _frames(video)
    if arr.ndim == 2:
        return arr[None]
    if arr.ndim != 4:
        raise UsageError(f"expected a clip (F, C, H, W), got shape {arr.shape}")
    if per_channel:
        return arr.reshape(-1, *arr.shape[-2:])
    if arr.shape[1] == 1:
        return arr[:, 0]
    return np.tensordot(arr, REC601, axes=([1], [0]))


def spatial_spectrogram(frame: np.ndarray, subtract_mean: bool = True) -> np.ndarray:
    """Centered ``log(1 + |DFT|)`` of a 2-D luminance frame."""
    frame = np.asarray(frame, dtype=np.float64)
    if subtract_mean:
        frame = frame - frame.mean()
    spec = np.fft.fftshift(np.fft.fft2(frame))
    return np.log1p(np.abs(spec))


def radial_frequency(h: int, w: int) -> np.ndarray:
    fy = np.fft.fftfreq(h)[:, None] / 0.5
    fx = np.fft.fftfreq(w)[None, :] / 0.5
    return np.sqrt(fy ** 2 + fx ** 2)


def _bin_index(r: np.ndarray, bins: int) -> np.ndarray:
    return np.minimum((r * bins).astype(int), bins - 1)


@dataclass
class RadialSpectrum:
    power: np.ndarray   # mean power per bin
    total: np.ndarray   # summed power per bin
    counts: np.ndarray
    edges: np.ndarray


def radial_power(video, bins: int = 24, per_channel: bool = False) -> RadialSpectrum:
    if bins < 3:
        raise UsageError(f"need at least 3 radial bins, got {bins}")
    lum = luminance(video, per_channel)
    h, w = lum.shape[-2:]
    power = np.abs(np.fft.fft2(lum, norm="ortho")) ** 2
    power = power.mean(axis=0)
    idx = _bin_index(radial_frequency(h, w), bins).ravel()
    total = np.bincount(idx, power.ravel(), minlength=bins)
    counts = np.bincount(idx, minlength=bins)
    mean = np.divide(total, counts, out=np.zeros(bins), where=counts > 0)
    return RadialSpectrum(mean, total, counts, np.linspace(0.0, 1.0, bins + 1))


def radial_spatial_distribution(video, bins: int = 24, per_channel: bool = False) -> np.ndarray:
    """Mean spatial power per annulus of normalised radial frequency, averaged over frames."""
    return radial_power(video, bins, per_channel).power


def temporal_section(video, row: int) -> np.ndarray:
    """Luminance x-t slice ``(F, W)`` at a fixed row."""
    lum = luminance(video)
    if not 0 <= row < lum.shape[1]:
        raise UsageError(f"row {row} outside [0, {lum.shape[1]})")
    return lum[:, row, :].copy()


def temporal_power(video, per_channel: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Per-frequency temporal power averaged over pixels; returns ``(freqs, power)``."""
    lum = luminance(video, per_channel) if not per_channel else _frames(video)
    if lum.shape[0] < 2:
        raise UsageError(f"temporal analysis needs at least 2 frames, got {lum.shape[0]}")
    spec = np.abs(np.fft.rfft(lum, axis=0, norm="ortho")) ** 2
    f = lum.shape[0]
    # one-sided spectrum: non-DC, non-Nyquist bins stand for two conjugate frequencies
    weights = np.full(spec.shape[0], 2.0)
    weights[0] = 1.0
    if f % 2 == 0:
        weights[-1] = 1.0
    spec = spec * weights.reshape(-1, *([1] * (spec.ndim - 1)))
    power = spec.reshape(spec.shape[0], -1).mean(axis=1)
    return np.fft.rfftfreq(f), power


def temporal_distribution(video, bins: int = 4, per_channel: bool = False) -> np.ndarray:
    """Mean temporal power per bin over ``[0, 0.5]`` cycles/frame (empty bins are 0)."""
    freqs, power = temporal_power(video, per_channel)
    idx = _bin_index(freqs / 0.5, bins)
    total = np.bincount(idx, power, minlength=bins)
    counts = np.bincount(idx, minlength=bins)
    return np.divide(total, counts, out=np.zeros(bins), where=counts > 0)


def _band_of(r: np.ndarray, edges) -> np.ndarray:
    return np.digitize(r, edges[1:-1])


def spatial_band_energies(video, edges=(0.0, 1 / 3, 2 / 3, 1.0), per_channel: bool = False) -> np.ndarray:
    lum = luminance(video, per_channel)
    h, w = lum.shape[-2:]
    power = (np.abs(np.fft.fft2(lum, norm="ortho")) ** 2).mean(axis=0)
    r = radial_frequency(h, w)
    band = _band_of(r, np.asarray(edges))
    mask = r > 0
    return np.array([power[(band == k) & mask].sum() for k in range(3)])


def temporal_band_energies(video, edges=(0.0, 1 / 3, 2 / 3, 1.0), per_channel: bool = False) -> np.ndarray:
    freqs, power = temporal_power(video, per_channel)
    r = freqs / 0.5
    band = _band_of(r, np.asarray(edges))
    mask = r > 0
    return np.array([power[(band == k) & mask].sum() for k in range(3)])


def _ratio(b: np.ndarray, a: np.ndarray) -> np.ndarray:
    out = np.ones_like(a, dtype=np.float64)
    nz = a != 0
    out[nz] = b[nz] / a[nz]
    out[~nz & (b != 0)] = np.inf
    return out


@dataclass
class SpectrumReport:
    radial_spatial: dict = field(default_factory=dict)   # "before"/"after" -> list per bin
    temporal_power: dict = field(default_factory=dict)
    band_energies: dict = field(default_factory=dict)    # "spatial"/"temporal" -> {"before", "after"}
    band_ratios: dict = field(default_factory=dict)      # "spatial"/"temporal" -> {low, mid, high}
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SpectrumReport":
        return cls(**json.loads(text))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def load(cls, path) -> "SpectrumReport":
        return cls.from_json(Path(path).read_text())

    def mid_band_direction(self, domain: str = "spatial") -> str:
        mid = self.band_ratios[domain]["mid"]
        return "reduced" if mid < 1 else ("unchanged" if mid == 1 else "increased")


def band_report(video_a, video_b, bins: int = 24, *, edges=(0.0, 1 / 3, 2 / 3, 1.0),
                per_channel: bool = False) -> SpectrumReport:
    """Compare a clip before (``video_a``) and after (``video_b``) some processing."""
    a, b = _frames(video_a), _frames(video_b)
    if a.shape != b.shape:
        raise UsageError(f"clips differ in shape: {a.shape} vs {b.shape}")
    report = SpectrumReport(meta={"bins": bins, "band_edges": list(edges), "shape": list(a.shape),
                                  "per_channel": per_channel})
    report.radial_spatial = {k: radial_spatial_distribution(v, bins, per_channel).tolist()
                             for k, v in (("before", a), ("after", b))}
    sa, sb = spatial_band_energies(a, edges, per_channel), spatial_band_energies(b, edges, per_channel)
    report.band_energies["spatial"] = {"before": sa.tolist(), "after": sb.tolist()}
    report.band_ratios["spatial"] = dict(zip(BANDS, _ratio(sb, sa).tolist()))
    if a.shape[0] >= 2:
        report.temporal_power = {k: temporal_power(v, per_channel)[1].tolist()
                                 for k, v in (("before", a), ("after", b))}
        ta = temporal_band_energies(a, edges, per_channel)
        tb = temporal_band_energies(b, edges, per_channel)
        report.band_energies["temporal"] = {"before": ta.tolist(), "after": tb.tolist()}
        report.band_ratios["temporal"] = dict(zip(BANDS, _ratio(tb, ta).tolist()))
    return report


def render_report(report: SpectrumReport, video_a, video_b, out_dir, row: int | None = None) -> list[Path]:
    """Write the four diagnostic figures (spectrograms, radial, x-t sections, temporal) as PNGs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    la, lb = luminance(video_a), luminance(video_b)
    row = la.shape[1] // 2 if row is None else row
    paths = []

    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    for ax, lum, title in zip(axes, (la, lb), ("before", "after")):
        ax.imshow(spatial_spectrogram(lum[0]), cmap="magma")
        ax.set_title(f"spatial spectrogram ({title})")
        ax.axis("off")
    paths.append(out / "spatial_spectrogram.png")
    fig.savefig(paths[-1], dpi=80)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 4))
    centers = np.linspace(0, 1, report.meta["bins"], endpoint=False) + 0.5 / report.meta["bins"]
    for key in ("before", "after"):
        ax.semilogy(centers, np.maximum(report.radial_spatial[key], 1e-12), label=key)
    ax.set_xlabel("normalised radial frequency")
    ax.set_ylabel("mean power")
    ax.legend()
    paths.append(out / "spatial_distribution.png")
    fig.savefig(paths[-1], dpi=80)
    plt.close(fig)

    fig, axes = plt.subplots(2, 1, figsize=(5, 4))
    for ax, lum, title in zip(axes, (la, lb), ("before", "after")):
        ax.imshow(lum[:, row, :], cmap="gray", aspect="auto")
        ax.set_title(f"temporal section row {row} ({title})")
    fig.tight_layout()
    paths.append(out / "temporal_section.png")
    fig.savefig(paths[-1], dpi=80)
    plt.close(fig)

    if report.temporal_power:
        fig, ax = plt.subplots(figsize=(5, 4))
        freqs = np.fft.rfftfreq(la.shape[0])
        for key in ("before", "after"):
            ax.semilogy(freqs, np.maximum(report.temporal_power[key], 1e-12), label=key)
        ax.set_xlabel("temporal frequency (cycles/frame)")
        ax.set_ylabel("mean power")
        ax.legend()
        paths.append(out / "temporal_distribution.png")
        fig.savefig(paths[-1], dpi=80)
        plt.close(fig)
    return paths
