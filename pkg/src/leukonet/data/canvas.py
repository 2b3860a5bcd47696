"""Paste segmented cells, unscaled, onto a white square canvas."""

from __future__ import annotations

import math

import numpy as np

from ..exceptions import DataError, ShapeError

CANVAS_SIZE = 350
BLANK = 255


def cell_centroid(cell: np.ndarray, mask: np.ndarray | None = None) -> tuple[float, float]:
    """(row, col) centroid weighted by darkness, or by ``mask`` when given.

    An entirely white cell without a mask falls back to its geometric centre.
    """
    h, w = cell.shape[-2:]
    if mask is not None:
        weight = np.asarray(mask, dtype=np.float64)
        if weight.shape != (h, w):
            raise ShapeError(f"mask shape {weight.shape} does not match cell {(h, w)}")
        if weight.sum() <= 0:
            raise DataError("mask selects no pixels")
    else:
        weight = BLANK - np.asarray(cell, dtype=np.float64).reshape(-1, h, w).mean(axis=0)
        weight = np.clip(weight, 0.0, None)
    total = weight.sum()
    if total <= 0:
        return (h - 1) / 2.0, (w - 1) / 2.0
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    return float(weight.sum(axis=1) @ rows / total), float(weight.sum(axis=0) @ cols / total)


def _round_half_down(x: float) -> int:
    return math.ceil(x - 0.5)


def center_on_canvas(cell: np.ndarray, mask: np.ndarray | None = None, size: int = CANVAS_SIZE) -> np.ndarray:
    """Return a (3, size, size) canvas with the cell centroid on pixel (size//2, size//2).

    Offsets are rounded to the nearest integer (halves round down). When the
    centroid sits so far off-centre that the cell would leave the canvas,
    the offset is clamped instead, so no cell pixel is ever clipped.
    """
    cell = np.asarray(cell)
    if cell.ndim == 2:
        cell = np.repeat(cell[None], 3, axis=0)
    if cell.ndim != 3 or cell.shape[0] != 3:
        raise ShapeError(f"cell must be (3, h, w), got {cell.shape}")
    _, h, w = cell.shape
    if h > size or w > size:
        raise ShapeError(f"cell of {h}x{w} does not fit a {size}x{size} canvas; cells are never downscaled")
    cy, cx = cell_centroid(cell, mask)
    centre = size // 2
    top = min(max(_round_half_down(centre - cy), 0), size - h)
    left = min(max(_round_half_down(centre - cx), 0), size - w)
    canvas = np.full((3, size, size), BLANK, dtype=cell.dtype)
    canvas[:, top : top + h, left : left + w] = cell
    return canvas
