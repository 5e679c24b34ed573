"""Rasterization, coordinate channels, and narrow-band stroke distance fields.

Pixel centers sit at integer coordinates (x, y); this convention is shared by
the rasterizer and the field evaluator.  Binary stroke images use 1-px
Bresenham polylines, no anti-aliasing.

The distance field of a stroke set assigns every pixel center p the value
``1 / (1 + k * exp(d(p)))`` where d is the exact Euclidean distance to the
nearest polyline; k controls the narrow-band width (half-value radius
ln(1/k)).  Two interchangeable implementations exist: a compiled spatial-grid
kernel (built from ``_gridcy.pyx``) and a vectorized numpy scan; whichever is
available is selected at import.  ``distance_field_naive`` is the deliberately
simple per-pixel reference both are checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .. import DataError
from ..data import Sketch, Stroke
from . import _pykernels

try:
    from . import _gridcy
except ImportError:  # extension not built; numpy fallback only
    _gridcy = None

HAS_COMPILED_KERNELS = _gridcy is not None
DEFAULT_K = 0.001
GRID_CELL = 16.0


def available_backends() -> tuple[str, ...]:
    return ("grid", "scan") if HAS_COMPILED_KERNELS else ("scan",)


@dataclass(frozen=True)
class DistanceFieldMap:
    """Dense narrow-band field over the canvas; max value 1/(1+k) on-stroke."""

    grid: np.ndarray
    k: float


# ---------------------------------------------------------------------------
# rasterization

def _bresenham(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    # canonical endpoint order makes the pixel set reversal-invariant
    if (x1, y1) < (x0, y0):
        x0, y0, x1, y1 = x1, y1, x0, y0
    dx = abs(x1 - x0)
    dy = abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx - dy
    pts = []
    x, y = x0, y0
    while True:
        pts.append((x, y))
        if x == x1 and y == y1:
            break
        e2 = 2 * err
        if e2 > -dy:
            err -= dy
            x += sx
        if e2 < dx:
            err += dx
            y += sy
    return pts


def _disc_offsets(thickness: int) -> list[tuple[int, int]]:
    r = thickness / 2.0
    rad = int(math.ceil(r))
    return [
        (dx, dy)
        for dy in range(-rad, rad + 1)
        for dx in range(-rad, rad + 1)
        if dx * dx + dy * dy <= r * r
    ]


def rasterize(strokes: Sequence[Stroke], resolution: int, thickness: int = 1) -> np.ndarray:
    """Binary (resolution, resolution) uint8 grid covering the given polylines.

    thickness > 1 stamps discs along the 1-px line and exists for
    visualization; the training pipeline always uses thickness 1.
    """
    grid = np.zeros((resolution, resolution), dtype=np.uint8)
    offsets = _disc_offsets(thickness) if thickness > 1 else [(0, 0)]
    for stroke in strokes:
        for p in stroke.points:
            if not (0 <= p.x < resolution and 0 <= p.y < resolution):
                raise DataError(
                    f"stroke {stroke.id} point {p} outside canvas [0, {resolution})"
                )
        px = [min(int(round(p.x)), resolution - 1) for p in stroke.points]
        py = [min(int(round(p.y)), resolution - 1) for p in stroke.points]
        pixels: set[tuple[int, int]] = set()
        if len(px) == 1:
            pixels.add((px[0], py[0]))
        for i in range(len(px) - 1):
            pixels.update(_bresenham(px[i], py[i], px[i + 1], py[i + 1]))
        for x, y in pixels:
            for dx, dy in offsets:
                xx, yy = x + dx, y + dy
                if 0 <= xx < resolution and 0 <= yy < resolution:
                    grid[yy, xx] = 1
    return grid


def compose_group_image(sketch: Sketch, member_ids: Iterable[int], resolution: int) -> np.ndarray:
    """Union of the member strokes' rasterizations; empty set gives a zero grid."""
    ids = sorted(set(member_ids))
    n = len(sketch.strokes)
    for i in ids:
        if not 0 <= i < n:
            raise DataError(f"invalid stroke id {i} for sketch with {n} strokes")
    if not ids:
        return np.zeros((resolution, resolution), dtype=np.uint8)
    return rasterize([sketch.strokes[i] for i in ids], resolution)


# ---------------------------------------------------------------------------
# coordinate channels

def coord_channels(resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """CoordConv-style channels, each spanning exactly [-1, 1] along its axis."""
    if resolution < 2:
        raise DataError("resolution must be >= 2")
    # integer numerator keeps the ramp exactly antisymmetric about the center
    cols = np.arange(resolution, dtype=np.float64)
    ramp = (2.0 * cols - (resolution - 1)) / (resolution - 1)
    xch = np.broadcast_to(ramp[None, :], (resolution, resolution)).copy()
    ych = np.broadcast_to(ramp[:, None], (resolution, resolution)).copy()
    return xch, ych


# ---------------------------------------------------------------------------
# distances and fields

def _point_segment_dist_sq(px, py, ax, ay, bx, by) -> float:
    dx, dy = bx - ax, by - ay
    l2 = dx * dx + dy * dy
    if l2 == 0.0:
        qx, qy = ax, ay
    else:
        t = ((px - ax) * dx + (py - ay) * dy) / l2
        t = 0.0 if t < 0.0 else (1.0 if t > 1.0 else t)
        qx, qy = ax + t * dx, ay + t * dy
    return (px - qx) ** 2 + (py - qy) ** 2


def polyline_distance(p, stroke: Stroke) -> float:
    """Exact Euclidean distance from point p=(x, y) to the stroke polyline."""
    px, py = float(p[0]), float(p[1])
    pts = stroke.points
    if len(pts) == 1:
        return math.hypot(px - pts[0].x, py - pts[0].y)
    best = math.inf
    for a, b in zip(pts, pts[1:]):
        d2 = _point_segment_dist_sq(px, py, a.x, a.y, b.x, b.y)
        if d2 < best:
            best = d2
    return math.sqrt(best)


def segments_of(strokes: Sequence[Stroke]) -> np.ndarray:
    """(M, 4) array of (ax, ay, bx, by) rows; single-point strokes degenerate."""
    rows = []
    for s in strokes:
        pts = s.points
        if len(pts) == 1:
            rows.append((pts[0].x, pts[0].y, pts[0].x, pts[0].y))
        else:
            for a, b in zip(pts, pts[1:]):
                rows.append((a.x, a.y, b.x, b.y))
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def field_value(distance: float, k: float) -> float:
    """Narrow-band transfer function; clamps to 0 once k*e^d overflows."""
    if distance > 700.0:  # exp overflow
        return 0.0
    return 1.0 / (1.0 + k * math.exp(distance))


def distance_field(
    strokes: Sequence[Stroke],
    resolution: int,
    k: float = DEFAULT_K,
    backend: str | None = None,
) -> DistanceFieldMap:
    """Narrow-band field of the stroke set over all pixel centers.

    backend: None picks the compiled grid kernel when built, else the numpy
    scan; pass "grid" or "scan" explicitly to force one.
    """
    if k <= 0:
        raise DataError(f"k must be positive, got {k}")
    if not strokes:
        raise DataError("distance field needs at least one stroke")
    segs = segments_of(strokes)
    if backend is None:
        backend = "grid" if HAS_COMPILED_KERNELS else "scan"
    if backend == "grid":
        if not HAS_COMPILED_KERNELS:
            raise DataError("compiled grid kernel is not available in this install")
        d2 = _gridcy.min_dist_sq_grid(np.ascontiguousarray(segs), resolution, GRID_CELL)
    elif backend == "scan":
        d2 = _pykernels.min_dist_sq_scan(segs, resolution)
    else:
        raise DataError(f"unknown distance-field backend {backend!r}")
    with np.errstate(over="ignore"):
        grid = 1.0 / (1.0 + k * np.exp(np.sqrt(d2)))
    return DistanceFieldMap(grid=grid, k=k)


def distance_field_naive(
    strokes: Sequence[Stroke], resolution: int, k: float = DEFAULT_K
) -> DistanceFieldMap:
    """Per-pixel, per-stroke brute force; the reference the fast paths must match."""
    if k <= 0:
        raise DataError(f"k must be positive, got {k}")
    if not strokes:
        raise DataError("distance field needs at least one stroke")
    grid = np.empty((resolution, resolution), dtype=np.float64)
    for y in range(resolution):
        for x in range(resolution):
            d = min(polyline_distance((x, y), s) for s in strokes)
            grid[y, x] = field_value(d, k)
    return DistanceFieldMap(grid=grid, k=k)


# ---------------------------------------------------------------------------
# debug dumps

def write_pgm(path, grid: np.ndarray) -> None:
    """Binary PGM (P5).  Binary {0,1} grids are scaled to {0, 255}."""
    arr = np.asarray(grid)
    if arr.dtype != np.uint8:
        arr = arr.astype(np.uint8)
    if arr.max(initial=0) <= 1:
        arr = arr * 255
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def field_to_u8(df: DistanceFieldMap) -> np.ndarray:
    """Visualization scaling only: 255*(1+k)*value, so on-stroke pixels hit 255."""
    scaled = np.clip(np.rint(df.grid * 255.0 * (1.0 + df.k)), 0, 255)
    return scaled.astype(np.uint8)
