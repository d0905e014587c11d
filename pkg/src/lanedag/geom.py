"""Pixel-space 2-D geometry.

Coordinates follow image indexing: ``x`` is the column, ``y`` is the row,
the origin sits at the top-left of the raster and ``y`` grows downward.
Angles are measured in this frame, so a heading of ``pi/2`` points toward
increasing row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

TWO_PI = 2.0 * math.pi


class GeometryError(ValueError):
    """Raised for invalid geometric parameters."""


class Point(NamedTuple):
    x: float
    y: float


def normalize_angle(a: float) -> float:
    """Wrap an angle into the canonical range (-pi, pi]."""
    r = math.remainder(float(a), TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    return r


def angle_diff(a: float, b: float) -> float:
    """Signed difference ``a - b`` wrapped into (-pi, pi]."""
    return normalize_angle(a - b)


def heading_between(a, b) -> float:
    dx = float(b[0]) - float(a[0])
    dy = float(b[1]) - float(a[1])
    if dx == 0.0 and dy == 0.0:
        raise GeometryError(f"heading undefined for coincident points {tuple(a)}")
    return normalize_angle(math.atan2(dy, dx))


@dataclass(frozen=True)
class Polyline:
    points: np.ndarray
    id: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if len(pts) < 2:
            raise GeometryError(f"polyline {self.id} needs at least 2 points, got {len(pts)}")
        if not np.all(np.isfinite(pts)):
            raise GeometryError(f"polyline {self.id} has non-finite coordinates")
        seg = np.diff(pts, axis=0)
        if np.any(np.all(seg == 0.0, axis=1)):
            raise GeometryError(f"polyline {self.id} has repeated consecutive points")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Polyline):
            return NotImplemented
        return self.id == other.id and np.array_equal(self.points, other.points)

    __hash__ = None  # type: ignore[assignment]

    @property
    def length(self) -> float:
        return float(np.sum(np.hypot(*np.diff(self.points, axis=0).T)))


@dataclass(frozen=True)
class RotatedRoi:
    """Rectangle of ``height_px`` rows by ``width_px`` columns centred on
    ``center``; its local +x axis (columns) points along ``heading``."""

    center: Point
    heading: float
    height_px: int
    width_px: int

    def __post_init__(self):
        if int(self.height_px) < 1 or int(self.width_px) < 1:
            raise GeometryError(f"RoI extent must be positive, got {self.height_px}x{self.width_px}")
        object.__setattr__(self, "center", Point(float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "heading", normalize_angle(self.heading))

    def local_offsets(self) -> tuple[np.ndarray, np.ndarray]:
        """Along-track (u) and cross-track (v) offsets of every cell.

        The cell at index ``(h // 2, w // 2)`` maps exactly onto the centre.
        """
        u = np.arange(self.width_px, dtype=float) - self.width_px // 2
        v = np.arange(self.height_px, dtype=float) - self.height_px // 2
        return np.meshgrid(u, v)

    def cell_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Global (x, y) of every cell, each of shape (height_px, width_px)."""
        uu, vv = self.local_offsets()
        return self.to_global(uu, vv)

    def to_global(self, u, v):
        c, s = _cos_sin(self.heading)
        cx, cy = self.center
        return cx + u * c - v * s, cy + u * s + v * c

    def to_local(self, x, y):
        c, s = _cos_sin(self.heading)
        dx = np.asarray(x, dtype=float) - self.center.x
        dy = np.asarray(y, dtype=float) - self.center.y
        return dx * c + dy * s, -dx * s + dy * c


def _cos_sin(theta: float) -> tuple[float, float]:
    # exact values on the axes keep axis-aligned crops bit-exact
    if theta == 0.0:
        return 1.0, 0.0
    return math.cos(theta), math.sin(theta)


def densify(p: Polyline, spacing: float) -> Polyline:
    """Insert evenly spaced points on every segment so no gap exceeds ``spacing``.

    Original vertices are kept; a segment of length L receives
    ``ceil(L / spacing) - 1`` interior points.
    """
    return Polyline(densify_points(p.points, spacing), p.id)


def densify_points(points: np.ndarray, spacing: float) -> np.ndarray:
    if not spacing > 0:
        raise GeometryError(f"spacing must be positive, got {spacing}")
    pts = np.asarray(points, dtype=float)
    counts = segment_subdivisions(pts, spacing)
    out = []
    for a, b, n in zip(pts[:-1], pts[1:], counts):
        t = np.arange(n, dtype=float)[:, None] / n
        out.append(a + (b - a) * t)
    out.append(pts[-1:])
    return np.concatenate(out)


def segment_subdivisions(points: np.ndarray, spacing: float) -> np.ndarray:
    """Number of pieces each segment is cut into by :func:`densify_points`."""
    seg = np.hypot(*np.diff(points, axis=0).T)
    # relative slack so segments already at the spacing are not split again
    return np.maximum(1, np.ceil(seg / spacing - 1e-9)).astype(int)


class BilinearSampler:
    """Bilinear sampling of a fixed raster with zero padding outside it.

    The raster is padded once with two rows/columns of zeros on every side,
    so a query only needs its coordinates clamped into the padded frame.
    """

    def __init__(self, raster: np.ndarray):
        self.raster = raster
        arr = np.asarray(raster, dtype=float)
        self.h, self.w = arr.shape
        self._pad = np.pad(arr, 2)
        self._flat = self._pad.ravel()
        self._stride = self._pad.shape[1]

    def __call__(self, x, y) -> np.ndarray:
        # past one pixel outside, every tap reads padding; clamping keeps indices valid
        x = np.clip(np.asarray(x, dtype=float), -1.5, self.w + 0.5)
        y = np.clip(np.asarray(y, dtype=float), -1.5, self.h + 0.5)
        x0 = np.floor(x)
        y0 = np.floor(y)
        fx = x - x0
        fy = y - y0
        i = (y0.astype(np.int64) + 2) * self._stride + (x0.astype(np.int64) + 2)
        f = self._flat
        top = f[i] * (1.0 - fx) + f[i + 1] * fx
        bot = f[i + self._stride] * (1.0 - fx) + f[i + self._stride + 1] * fx
        return top * (1.0 - fy) + bot * fy


def bilinear_at(raster: np.ndarray, x, y) -> np.ndarray:
    """Bilinear samples of ``raster`` at continuous (x, y); pixels outside read 0."""
    return BilinearSampler(raster)(x, y)


def sample_bilinear(raster, roi: RotatedRoi) -> np.ndarray:
    """Crop a rotated RoI out of ``raster`` (array or sampler) as a (height_px, width_px) grid."""
    xs, ys = roi.cell_coords()
    if isinstance(raster, BilinearSampler):
        return raster(xs, ys)
    return bilinear_at(raster, xs, ys)


def rasterize_segment(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Integer pixels (rows, cols) of a Bresenham line between two points."""
    x0, y0 = int(round(a[0])), int(round(a[1]))
    x1, y1 = int(round(b[0])), int(round(b[1]))
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    rows, cols = [], []
    while True:
        rows.append(y0)
        cols.append(x0)
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy
    return np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64)


def rasterize_polyline(points, shape) -> np.ndarray:
    """1-px 8-connected boolean stroke of a polyline, clipped to ``shape``."""
    mask = np.zeros(shape, dtype=bool)
    pts = densify_points(np.asarray(points, dtype=float), 0.7)
    # rounding points < 1/sqrt(2) px apart never skips a pixel
    cols = np.floor(pts[:, 0] + 0.5).astype(np.int64)
    rows = np.floor(pts[:, 1] + 0.5).astype(np.int64)
    h, w = shape
    ok = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    mask[rows[ok], cols[ok]] = True
    return mask


def point_segment_distances(points: np.ndarray, polyline_pts: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from each point to the nearest segment of a polyline."""
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    q = np.asarray(polyline_pts, dtype=float).reshape(-1, 2)
    a = q[:-1]
    ab = q[1:] - a
    ab2 = np.einsum("ij,ij->i", ab, ab)
    ab2 = np.where(ab2 == 0.0, 1.0, ab2)
    best = np.full(len(p), np.inf)
    # chunk over points to bound memory at (chunk x segments)
    chunk = max(1, 2_000_000 // max(1, len(a)))
    for s in range(0, len(p), chunk):
        pp = p[s : s + chunk, None, :]
        t = np.clip(np.einsum("pij,ij->pi", pp - a, ab) / ab2, 0.0, 1.0)
        proj = a + t[..., None] * ab
        d = np.hypot(*(pp - proj).transpose(2, 0, 1))
        best[s : s + chunk] = d.min(axis=1)
    return best
