"""Pure numpy kernels: fallback used when the compiled grid extension is absent."""

from __future__ import annotations

import numpy as np


def min_dist_sq_scan(segments: np.ndarray, resolution: int) -> np.ndarray:
    """Exact squared distance from every pixel center to the nearest segment.

    Vectorized all-segments scan over the (resolution, resolution) grid of
    integer pixel centers; rows index y, columns index x.
    """
    xs = np.arange(resolution, dtype=np.float64)
    px = np.broadcast_to(xs[None, :], (resolution, resolution))
    py = np.broadcast_to(xs[:, None], (resolution, resolution))
    best = np.full((resolution, resolution), np.inf, dtype=np.float64)
    for ax, ay, bx, by in segments:
        dx, dy = bx - ax, by - ay
        l2 = dx * dx + dy * dy
        if l2 == 0.0:
            qx, qy = ax, ay
        else:
            t = ((px - ax) * dx + (py - ay) * dy) / l2
            np.clip(t, 0.0, 1.0, out=t)
            qx = ax + t * dx
            qy = ay + t * dy
        d2 = (px - qx) ** 2 + (py - qy) ** 2
        np.minimum(best, d2, out=best)
    return best
