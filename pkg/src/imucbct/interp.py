"""Shared image sampling helpers."""

from __future__ import annotations

import numpy as np

_SNAP = 1e-9


def _snap_to_grid(c):
    r = np.round(c)
    return np.where(np.abs(c - r) < _SNAP, r, c)


def bilinear_sample(img, x, y):
    """Bilinear readout of img[y, x] at fractional coordinates.

    Coordinates within 1e-9 of the pixel lattice are snapped so
    integer-aligned sampling reproduces pixel values exactly.  Reads
    outside the image contribute 0.
    """
    h, w = img.shape
    x = _snap_to_grid(np.asarray(x, dtype=float))
    y = _snap_to_grid(np.asarray(y, dtype=float))
    inside = (x >= 0.0) & (x <= w - 1.0) & (y >= 0.0) & (y <= h - 1.0)

    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    ix0 = np.clip(x0.astype(np.int64), 0, w - 1)
    iy0 = np.clip(y0.astype(np.int64), 0, h - 1)
    ix1 = np.minimum(ix0 + 1, w - 1)
    iy1 = np.minimum(iy0 + 1, h - 1)

    flat = img.ravel()
    row0 = iy0 * w
    row1 = iy1 * w
    gx = 1.0 - fx
    vals = (gx * (1.0 - fy) * flat[row0 + ix0]
            + fx * (1.0 - fy) * flat[row0 + ix1]
            + gx * fy * flat[row1 + ix0]
            + fx * fy * flat[row1 + ix1])
    vals[~inside] = 0.0
    return vals
