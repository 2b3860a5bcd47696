"""Frequency-domain branch: orthonormal 2D DCT, energy thresholding and
signed log10 compression, each differentiable on its own.

The DCT is a separable matrix product with a cached orthonormal basis, so
its backward pass is the transposed (inverse) transform.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass

import numpy as np

from .nn import Module
from .tensor import Tensor

logger = logging.getLogger(__name__)

_LN10 = math.log(10.0)
# Relative slack when comparing cumulative energy against the target, so
# exact ties (e.g. N equal coefficients) are not lost to rounding.
_ENERGY_RTOL = 1e-12


@dataclass(frozen=True)
class DctConfig:
    energy_fraction: float = 0.95
    replacement_value: float = 1.0
    log_clamp_floor: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.energy_fraction <= 1.0:
            raise ValueError(f"energy_fraction must lie in (0, 1], got {self.energy_fraction}")
        if self.log_clamp_floor < 1.0:
            raise ValueError(f"log_clamp_floor must be >= 1, got {self.log_clamp_floor}")


@functools.lru_cache(maxsize=32)
def dct_basis(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix C with C[k, i] = a_k cos(pi (2i + 1) k / 2n)."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    basis = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    basis[0] /= np.sqrt(2.0)
    basis.setflags(write=False)
    return basis


def _separable(x: Tensor, left: np.ndarray, right: np.ndarray, op: str) -> Tensor:
    left = left.astype(x.dtype)
    right = right.astype(x.dtype)
    out = left @ x.data @ right.T
    return Tensor._make(out, (x,), lambda g: (left.T @ g @ right,), op)


def dct2d(x: Tensor) -> Tensor:
    """Type-II orthonormal DCT over the last two axes."""
    h, w = x.shape[-2:]
    return _separable(x, dct_basis(h), dct_basis(w), "dct2d")


def idct2d(c: Tensor) -> Tensor:
    """Type-III orthonormal DCT over the last two axes, the inverse of ``dct2d``."""
    h, w = c.shape[-2:]
    return _separable(c, dct_basis(h).T, dct_basis(w).T, "idct2d")


def energy_mask(coeffs: np.ndarray, energy_fraction: float = 0.95) -> np.ndarray:
    """Boolean mask of the smallest magnitude-ranked set holding ``energy_fraction`` of the energy.

    Works per plane over the last two axes; ties in magnitude are broken by
    row-major position. A 1-D input is treated as a single row.
    """
    if np.ndim(coeffs) == 1:
        return energy_mask(np.asarray(coeffs)[None], energy_fraction)[0]
    shape = coeffs.shape
    h, w = shape[-2:]
    planes = coeffs.reshape(-1, h * w).astype(np.float64)
    energy = planes * planes
    if energy_fraction >= 1.0:
        return np.ones(shape, dtype=bool)
    order = np.argsort(-energy, axis=1, kind="stable")
    cumulative = np.cumsum(np.take_along_axis(energy, order, axis=1), axis=1)
    total = cumulative[:, -1:]
    target = energy_fraction * total
    reached = cumulative >= target - _ENERGY_RTOL * total
    keep_count = reached.argmax(axis=1) + 1
    keep_count[total[:, 0] == 0] = 0
    if np.any(total == 0):
        logger.debug("energy_mask: %d all-zero planes, nothing kept", int((total == 0).sum()))
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(h * w)[None, :], axis=1)
    return (ranks < keep_count[:, None]).reshape(shape)


def energy_threshold(c: Tensor, cfg: DctConfig = DctConfig()) -> tuple[Tensor, np.ndarray]:
    """Keep the energy-dominant coefficients, replace the rest with ``cfg.replacement_value``.

    Gradient passes straight through kept positions and is zero elsewhere;
    the mask is fixed for the pass.
    """
    mask = energy_mask(c.data, cfg.energy_fraction)
    out = np.where(mask, c.data, cfg.replacement_value).astype(c.dtype)
    return Tensor._make(out, (c,), lambda g: (g * mask,), "energy_threshold"), mask


def signed_log_normalize(c: Tensor, cfg: DctConfig = DctConfig()) -> Tensor:
    """sign(c) * log10(max(|c|, floor)).

    The derivative is 1 / (|c| ln 10) where |c| exceeds the floor and 0 on
    clamped positions.
    """
    mag = np.abs(c.data)
    live = mag > cfg.log_clamp_floor
    out = np.sign(c.data) * np.log10(np.maximum(mag, cfg.log_clamp_floor))
    # +0.0 keeps the output free of negative zeros so the map is exactly odd.
    out = out + 0.0
    safe = np.where(live, mag, 1.0)
    return Tensor._make(out, (c,), lambda g: (np.where(live, g / (safe * _LN10), 0.0),), "signed_log")


def dct_layer_forward(x: Tensor, cfg: DctConfig = DctConfig()) -> Tensor:
    """DCT -> energy threshold -> signed log, per sample and per channel."""
    coeffs = dct2d(x)
    kept, _ = energy_threshold(coeffs, cfg)
    return signed_log_normalize(kept, cfg)


class DctLayer(Module):
    def __init__(self, cfg: DctConfig = DctConfig()):
        super().__init__()
        self.cfg = cfg

    def forward(self, x: Tensor) -> Tensor:
        return dct_layer_forward(x, self.cfg)
