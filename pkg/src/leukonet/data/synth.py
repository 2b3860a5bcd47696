"""Seeded two-class synthetic cell images for desk-scale runs.

Each image is an elliptical nucleus with a faint cytoplasm halo on a white
background, rendered in optical density space from per-pixel stain
quantities. The nucleus stain concentration is modulated by band-limited
noise: Normal cells get a low spatial-frequency band, Cancer cells a high
one. Colour mixture differs a little between classes too, but per-subject
jitter in stain strength, mixture and band edges swamps that difference,
so mean colour alone is a poor predictor.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..exceptions import ConfigError, DataError
from ..stain import WHITE, load_standard_stains
from ..tensor import Rng
from .manifest import CANCER, LABELS, NORMAL, DatasetManifest, Record, write_manifest, write_png

MIN_SIZE = 32

# Texture pass-bands in cycles per pixel, before per-subject jitter.
TEXTURE_BAND = {NORMAL: (0.02, 0.07), CANCER: (0.17, 0.24)}
EOSIN_SHARE = {NORMAL: 0.20, CANCER: 0.22}


@functools.lru_cache(maxsize=1)
def _stains() -> np.ndarray:
    return load_standard_stains()


@dataclass(frozen=True)
class SubjectStyle:
    hematoxylin: float
    eosin_share: float
    texture_amp: float
    band: tuple[float, float]
    size_scale: float


def subject_style(label: int, rng: Rng) -> SubjectStyle:
    u = rng.random(5)
    lo, hi = TEXTURE_BAND[label]
    stretch = 0.85 + 0.3 * u[3]
    return SubjectStyle(
        hematoxylin=0.7 + 0.7 * u[0],
        eosin_share=EOSIN_SHARE[label] + 0.16 * (u[1] - 0.5),
        texture_amp=0.5 + 0.3 * u[2],
        band=(lo * stretch, hi * stretch),
        size_scale=0.9 + 0.2 * u[4],
    )


def band_limited_noise(size: int, band: tuple[float, float], rng: Rng) -> np.ndarray:
    """Unit-variance noise whose spectrum is confined to the radial ``band``."""
    white = rng.normal(size=(size, size))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    radius = np.hypot(fy, fx)
    passband = (radius >= band[0]) & (radius <= band[1])
    field = np.fft.irfft2(np.fft.rfft2(white) * passband, s=(size, size))
    std = field.std()
    return field / std if std > 0 else field


def render_cell(label: int, style: SubjectStyle, size: int, rng: Rng) -> np.ndarray:
    """One (3, size, size) uint8 image."""
    u = rng.random(6)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = (size - 1) / 2 + size * 0.08 * (u[0] - 0.5)
    cx = (size - 1) / 2 + size * 0.08 * (u[1] - 0.5)
    a = size * style.size_scale * (0.26 + 0.08 * u[2])
    b = a * (0.75 + 0.2 * u[3])
    theta = np.pi * u[4]
    dy, dx = yy - cy, xx - cx
    ry = (dy * np.cos(theta) - dx * np.sin(theta)) / a
    rx = (dy * np.sin(theta) + dx * np.cos(theta)) / b
    r = np.hypot(ry, rx)
    nucleus = np.clip((1.0 - r) * 6.0, 0.0, 1.0)
    halo = np.clip((1.35 - r) * 4.0, 0.0, 1.0) - nucleus

    texture = band_limited_noise(size, style.band, rng.spawn(0))
    conc = style.hematoxylin * nucleus * np.clip(1.0 + style.texture_amp * texture, 0.1, None)
    eosin = style.hematoxylin * style.eosin_share * (nucleus + 0.6 * halo)

    stains = _stains()
    od = conc[..., None] * stains[0] + eosin[..., None] * stains[1]
    od += 0.01 * rng.spawn(1).normal(size=od.shape)
    rgb = WHITE * np.power(10.0, -np.clip(od, 0.0, None))
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8).transpose(2, 0, 1)


def subject_ids(n_per_class: int, n_test_per_class: int) -> list[tuple[str, int, bool]]:
    out = []
    for label in (NORMAL, CANCER):
        tag = LABELS[label][0]
        out += [(f"{tag}{i:02d}", label, False) for i in range(n_per_class)]
        out += [(f"{tag}T{i:02d}", label, True) for i in range(n_test_per_class)]
    return out


def synth_generate(
    out_dir,
    n_subjects_per_class: int = 8,
    cells_per_subject: int = 100,
    size: int = 96,
    rng: Rng | None = None,
    n_test_subjects_per_class: int = 1,
) -> DatasetManifest:
    """Write PNGs under ``out_dir/images`` and ``out_dir/manifest.csv``; return the manifest.

    Every subject and every cell draws from its own derived stream, so the
    output depends only on the seed and the arguments.
    """
    rng = rng or Rng(0)
    if size < MIN_SIZE:
        raise ConfigError(f"synthetic image size must be >= {MIN_SIZE}, got {size}")
    if n_subjects_per_class < 1 or cells_per_subject < 1 or n_test_subjects_per_class < 0:
        raise ConfigError("subject and cell counts must be positive")
    out_dir = Path(out_dir)
    records = []
    for s_idx, (sid, label, is_test) in enumerate(subject_ids(n_subjects_per_class, n_test_subjects_per_class)):
        srng = rng.spawn(s_idx)
        style = subject_style(label, srng.spawn(0))
        for k in range(cells_per_subject):
            rel = Path("images") / sid / f"{sid}_{k:04d}.png"
            img = render_cell(label, style, size, srng.spawn(1, k))
            try:
                write_png(img, out_dir / rel)
            except OSError as exc:
                raise DataError(f"cannot write {out_dir / rel}: {exc}") from exc
            records.append(Record(sid, label, rel.as_posix(), is_test))
    manifest = DatasetManifest(records, out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest
