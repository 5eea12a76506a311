"""Dice coefficient and 95th-percentile Hausdorff distance on 2D masks.

Distances are in pixel units. The boundary of a mask is the set of mask
pixels with at least one 4-neighbour outside the mask (pixels on the image
border count as boundary).
"""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

_CROSS = ndimage.generate_binary_structure(2, 1)


def _pair(pred, gt):
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def dice(pred, gt) -> float:
    p, g = _pair(pred, gt)
    total = p.sum() + g.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / total)


def boundary(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    return m & ~ndimage.binary_erosion(m, structure=_CROSS, border_value=0)


def nearest_rank(values, q: float = 95.0) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    k = max(1, math.ceil(q / 100.0 * v.size))
    return float(v[k - 1])


def directed_distances(src, dst) -> np.ndarray:
    """Distance from every boundary pixel of ``src`` to the nearest boundary pixel of ``dst``."""
    bs, bd = boundary(src), boundary(dst)
    dt = ndimage.distance_transform_edt(~bd)
    return dt[bs]


def hd95(pred, gt):
    """HD95 in pixels, or None when either mask is empty (metric undefined)."""
    p, g = _pair(pred, gt)
    if not p.any() or not g.any():
        return None
    return max(nearest_rank(directed_distances(p, g)), nearest_rank(directed_distances(g, p)))
