"""Random geometric and blur augmentation of byte-range canvases.

Order per draw: rotation about the canvas centre, horizontal flip, vertical
flip, shear about the centre, Gaussian blur. Resampling is bilinear with
inverse mapping and white fill; blur is a separable Gaussian cut at 3 sigma.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..exceptions import ConfigError
from ..models import AUGMENTATION_MODES
from ..tensor import Rng
from .canvas import BLANK

BLUR_TRUNCATE = 3.0
MIN_SIGMA = 1e-6


@dataclass(frozen=True)
class AugmentConfig:
    rotation: bool = True
    hflip: float = 0.5
    vflip: float = 0.5
    shear_degrees: tuple[float, float] = (-20.0, 20.0)
    blur_sigma: tuple[float, float] = (0.0, 0.75)
    mode: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "shear_degrees", tuple(float(v) for v in self.shear_degrees))
        object.__setattr__(self, "blur_sigma", tuple(float(v) for v in self.blur_sigma))
        if self.mode not in AUGMENTATION_MODES:
            raise ConfigError(f"unknown augmentation mode {self.mode!r}; choose from {AUGMENTATION_MODES}")
        for name in ("hflip", "vflip"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} probability must lie in [0, 1], got {p}")
        lo, hi = self.shear_degrees
        if len(self.shear_degrees) != 2 or lo > hi:
            raise ConfigError(f"shear_degrees must be an ordered pair, got {self.shear_degrees}")
        if not -90.0 < lo <= hi < 90.0:
            raise ConfigError(f"shear_degrees must lie strictly inside (-90, 90), got {self.shear_degrees}")
        lo, hi = self.blur_sigma
        if len(self.blur_sigma) != 2 or lo > hi or lo < 0:
            raise ConfigError(f"blur_sigma must be an ordered pair with lower bound >= 0, got {self.blur_sigma}")

    @classmethod
    def identity(cls, mode: str = "full") -> "AugmentConfig":
        return cls(rotation=False, hflip=0.0, vflip=0.0, shear_degrees=(0.0, 0.0), blur_sigma=(0.0, 0.0), mode=mode)


@dataclass(frozen=True)
class AugmentParams:
    angle: float
    hflip: bool
    vflip: bool
    shear: float
    sigma: float


def sample_params(cfg: AugmentConfig, rng: Rng) -> AugmentParams:
    # Every field is drawn even when disabled, so the stream position never
    # depends on the config.
    u = rng.random(5)
    angle = 360.0 * u[0] if cfg.rotation else 0.0
    lo, hi = cfg.shear_degrees
    slo, shi = cfg.blur_sigma
    return AugmentParams(
        angle=float(angle),
        hflip=bool(u[1] < cfg.hflip),
        vflip=bool(u[2] < cfg.vflip),
        shear=float(lo + (hi - lo) * u[3]),
        sigma=float(slo + (shi - slo) * u[4]),
    )


def _resample(img: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Bilinear inverse mapping about the image centre: src = matrix @ (dst - c) + c."""
    h, w = img.shape[-2:]
    # Snap entries like cos(90 deg) = 6e-17 so quarter turns stay exact at the border.
    snapped = np.rint(matrix)
    matrix = np.where(np.abs(matrix - snapped) < 1e-12, snapped, matrix)
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - matrix @ centre
    out = np.empty_like(img)
    for ch in range(img.shape[0]):
        ndimage.affine_transform(img[ch], matrix, offset=offset, output=out[ch], order=1, mode="constant", cval=BLANK)
    return out


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Counter-clockwise rotation (as displayed, rows pointing down)."""
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    # Inverse of a CCW rotation in (row, col) coordinates.
    return _resample(img, np.array([[c, s], [-s, c]]))


def shear(img: np.ndarray, degrees: float) -> np.ndarray:
    """Horizontal shear: rows below the centre shift right by tan(angle) per row."""
    t = math.tan(math.radians(degrees))
    return _resample(img, np.array([[1.0, 0.0], [-t, 1.0]]))


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma < MIN_SIGMA:
        return img
    return ndimage.gaussian_filter(img, sigma=(0.0, sigma, sigma), truncate=BLUR_TRUNCATE, mode="nearest")


def apply_params(img: np.ndarray, p: AugmentParams) -> np.ndarray:
    out = np.asarray(img, dtype=np.float64)
    if p.angle != 0.0:
        out = rotate(out, p.angle)
    if p.hflip:
        out = out[:, :, ::-1]
    if p.vflip:
        out = out[:, ::-1, :]
    if p.shear != 0.0:
        out = shear(out, p.shear)
    out = gaussian_blur(out, p.sigma)
    return np.clip(np.ascontiguousarray(out), 0.0, float(BLANK))


def augment(img: np.ndarray, cfg: AugmentConfig, rng: Rng) -> np.ndarray:
    """One random augmentation of a (3, h, w) image; returns float64 in [0, 255]."""
    return apply_params(img, sample_params(cfg, rng))
