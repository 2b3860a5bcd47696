"""Optical-density conversion and the trainable stain-deconvolution layer.

RGB intensities are mapped to absorbance with a base-10 logarithm and a
white point of 255. The layer then unmixes each pixel's OD vector ``v``
into stain quantities ``q = v @ inv(M)``, where the rows of ``M`` are the
OD colour directions of the stains.

The ``standard`` initialization is the haematoxylin / eosin / DAB matrix of
Ruifrok & Johnston (Anal. Quant. Cytol. Histol. 23:291, 2001), each row
scaled to unit length. It ships as ``resources/standard_stain_od.txt``.
"""

from __future__ import annotations

from importlib import resources

import numpy as np

from .exceptions import ConfigError, RangeError, SingularMatrixError
from .nn import Module, Parameter
from .tensor import Rng, Tensor

WHITE = 255.0
MIN_ABS_DET = 1e-8
STAIN_SCHEMES = ("standard", "identity", "random")


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def rgb_to_od(x) -> Tensor:
    """OD = -log10(max(I, 1) / 255) per channel and pixel."""
    arr = _values(x)
    if arr.size and (arr.min() < 0 or arr.max() > WHITE):
        raise RangeError(f"intensities must lie in [0, 255], got [{arr.min()}, {arr.max()}]")
    dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else None
    od = -np.log10(np.maximum(arr, 1.0) / WHITE)
    return Tensor(od, dtype=dtype)


def od_to_rgb(od) -> Tensor:
    arr = _values(od)
    if arr.size and arr.min() < 0:
        raise RangeError(f"optical density must be non-negative, got min {arr.min()}")
    return Tensor(WHITE * np.power(10.0, -arr), dtype=arr.dtype)


def sd_forward(od: Tensor, stain: Tensor) -> Tensor:
    """Unmix an (n, 3, h, w) OD tensor into stain quantities with ``od @ inv(stain)``.

    Differentiable in both arguments; d inv(M) = -inv(M) dM inv(M).
    """
    m = stain.data
    det = np.linalg.det(m.astype(np.float64))
    if abs(det) < MIN_ABS_DET:
        raise SingularMatrixError(f"stain matrix is near-singular: |det| = {abs(det):.3e}")
    minv = np.linalg.inv(m)
    out = np.einsum("nihw,ij->njhw", od.data, minv, optimize=True)

    def backward(g):
        god = np.einsum("njhw,ij->nihw", g, minv, optimize=True) if od.requires_grad else None
        gm = None
        if stain.requires_grad:
            gminv = np.einsum("nihw,njhw->ij", od.data, g, optimize=True)
            gm = -minv.T @ gminv @ minv.T
        return god, gm

    return Tensor._make(out, (od, stain), backward, "sd_forward")


def load_standard_stains() -> np.ndarray:
    text = resources.files("leukonet.resources").joinpath("standard_stain_od.txt").read_text()
    values = np.array([float(tok) for tok in text.split()])
    if values.size != 9:
        raise ValueError(f"standard stain file must hold 9 numbers, found {values.size}")
    return values.reshape(3, 3)


def init_stain_matrix(scheme: str = "standard", rng: Rng | None = None) -> np.ndarray:
    scheme = scheme.lower()
    if scheme == "standard":
        return load_standard_stains()
    if scheme == "identity":
        return np.eye(3)
    if scheme == "random":
        rng = rng or Rng(0)
        while True:
            m = rng.uniform(0.05, 1.0, size=(3, 3))
            m /= np.linalg.norm(m, axis=1, keepdims=True)
            if abs(np.linalg.det(m)) >= 0.1:
                return m
    raise ConfigError(f"unknown stain scheme {scheme!r}; choose from {STAIN_SCHEMES}")


class StainDeconvolution(Module):
    """RGB -> OD -> stain quantities, with a learnable 3x3 stain matrix."""

    def __init__(self, scheme: str = "standard", rng: Rng | None = None, trainable: bool = True):
        super().__init__()
        self.stain = Parameter(init_stain_matrix(scheme, rng))
        self.stain.requires_grad = trainable

    def forward(self, rgb) -> Tensor:
        od = rgb_to_od(rgb)
        return sd_forward(od, self.stain)

    def post_step(self) -> None:
        # One nudge is not always enough (the zero matrix reaches only 1e-9),
        # so repeat until the determinant clears the bound.
        nudge = 1e-3 * np.eye(3, dtype=self.stain.data.dtype)
        for _ in range(10_000):
            if abs(np.linalg.det(self.stain.data.astype(np.float64))) >= MIN_ABS_DET:
                return
            self.stain.data += nudge
