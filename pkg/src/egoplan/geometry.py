"""Oriented rectangles and the separating-axis overlap test."""

from __future__ import annotations

import numpy as np


def rect_corners(x, y, ux, uy, length, width) -> np.ndarray:
    """Corners of a rectangle centred at ``(x, y)`` facing ``(ux, uy)``, shape (4, 2)."""
    hl, hw = 0.5 * length, 0.5 * width
    fwd = np.array([ux, uy]) * hl
    left = np.array([-uy, ux]) * hw
    c = np.array([x, y])
    return np.stack([c + fwd + left, c + fwd - left, c - fwd - left, c - fwd + left])


def rects_intersect(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex quads given as (4, 2) corner arrays.

    Touching edges count as intersecting.
    """
    for poly in (a, b):
        for i in range(4):
            edge = poly[(i + 1) % 4] - poly[i]
            axis = np.array([-edge[1], edge[0]])
            pa = a @ axis
            pb = b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def point_in_rect(points: np.ndarray, x, y, ux, uy, length, width) -> np.ndarray:
    """Boolean mask of which ``points`` (N, 2) lie inside the oriented rectangle."""
    d = points - np.array([x, y])
    lon = d[:, 0] * ux + d[:, 1] * uy
    lat = -d[:, 0] * uy + d[:, 1] * ux
    return (np.abs(lon) <= 0.5 * length) & (np.abs(lat) <= 0.5 * width)
