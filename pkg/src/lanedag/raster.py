"""Intensity rasters, distance fields and binary skeletons."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geom import Point, rasterize_polyline

BOUNDARY_VALUE = 8.0
FIELD_MAX = 10.0
DT_THRESHOLD_PX = 32.0

MAX_WIDTH = 8000
MAX_HEIGHT = 1200


class RasterError(ValueError):
    pass


@dataclass(frozen=True)
class IntensityRaster:
    values: np.ndarray
    resolution_m_per_px: float = 0.05

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise RasterError(f"raster must be 2-D, got shape {v.shape}")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise RasterError("raster intensities must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def check_size(self, max_width: int = MAX_WIDTH, max_height: int = MAX_HEIGHT) -> None:
        if self.width > max_width or self.height > max_height:
            raise RasterError(
                f"raster {self.height}x{self.width} exceeds {max_height}x{max_width}"
            )


@dataclass(frozen=True)
class DistanceField:
    """Thresholded inverse distance transform, values in [0, 10]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise RasterError(f"field must be 2-D, got shape {v.shape}")
        if v.size and (v.min() < 0.0 or v.max() > FIELD_MAX):
            raise RasterError("field values must lie in [0, 10]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def contains(self, x: float, y: float) -> bool:
        h, w = self.values.shape
        return 0.0 <= x <= w - 1 and 0.0 <= y <= h - 1


def _grid(a) -> np.ndarray:
    return np.asarray(getattr(a, "values", a))


def exact_distance_transform(mask) -> np.ndarray:
    """Exact Euclidean distance from every cell to the nearest set cell."""
    m = _grid(mask).astype(bool)
    if not m.any():
        raise RasterError("distance transform of an empty mask is undefined")
    return ndimage.distance_transform_edt(~m)


def inverse_dt_values(distance: np.ndarray) -> np.ndarray:
    return np.clip(BOUNDARY_VALUE * (1.0 - distance / DT_THRESHOLD_PX), 0.0, FIELD_MAX)


def field_from_boundary_mask(mask) -> DistanceField:
    return DistanceField(inverse_dt_values(exact_distance_transform(mask)))


def boundary_mask(polylines, shape) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for p in polylines:
        mask |= rasterize_polyline(getattr(p, "points", p), shape)
    return mask


def inverse_threshold_dt(polylines, shape) -> DistanceField:
    """Field peaking at 8 on the rasterized boundaries and reaching 0 at 32 px."""
    polylines = list(polylines)
    if not polylines:
        raise RasterError("inverse_threshold_dt needs at least one polyline")
    mask = boundary_mask(polylines, shape)
    if not mask.any():
        raise RasterError("no polyline pixel falls inside the raster")
    return field_from_boundary_mask(mask)


def binarize(field, threshold: float) -> np.ndarray:
    if not 0.0 < threshold < FIELD_MAX:
        raise RasterError(f"binarize threshold must be in (0, 10), got {threshold}")
    return _grid(field) >= threshold


# Neighbour offsets in Zhang-Suen order P2..P9: N, NE, E, SE, S, SW, W, NW.
_ZS_OFFSETS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def _zhang_suen_luts() -> tuple[np.ndarray, np.ndarray]:
    first = np.zeros(256, dtype=bool)
    second = np.zeros(256, dtype=bool)
    for code in range(256):
        p = [(code >> k) & 1 for k in range(8)]
        b = sum(p)
        a = sum(1 for k in range(8) if p[k] == 0 and p[(k + 1) % 8] == 1)
        if not (2 <= b <= 6 and a == 1):
            continue
        p2, _, p4, _, p6, _, p8, _ = p
        first[code] = p2 * p4 * p6 == 0 and p4 * p6 * p8 == 0
        second[code] = p2 * p4 * p8 == 0 and p2 * p6 * p8 == 0
    return first, second


def _simple_corner_lut() -> np.ndarray:
    """Pixels whose removal keeps 8-connectivity (Yokoi number 1) and that are
    not curve ends; used to strip 4-connected staircase corners."""
    lut = np.zeros(256, dtype=bool)
    for code in range(256):
        p = [(code >> k) & 1 for k in range(8)]
        if sum(p) < 2:
            continue
        # Yokoi ordering x1..x8 = E, NE, N, NW, W, SW, S, SE
        x = [p[2], p[1], p[0], p[7], p[6], p[5], p[4], p[3]]
        xb = [1 - v for v in x] + [1 - x[0]]
        n8 = sum(xb[k] - xb[k] * xb[k + 1] * xb[k + 2] for k in (0, 2, 4, 6))
        lut[code] = n8 == 1
    return lut


_ZS_FIRST, _ZS_SECOND = _zhang_suen_luts()
_CORNER = _simple_corner_lut()


def _neighbour_codes(flat: np.ndarray, idx: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    code = np.zeros(len(idx), dtype=np.int64)
    for k, off in enumerate(offsets):
        code |= flat[idx + off].astype(np.int64) << k
    return code


def skeletonize(mask) -> np.ndarray:
    """Zhang-Suen thinning followed by removal of staircase corners.

    Only pixels next to a deletion are re-examined, so the cost scales with the
    contour rather than the area.
    """
    m = _grid(mask).astype(bool)
    if not m.any():
        return np.zeros_like(m)
    h, w = m.shape
    padded = np.zeros((h + 2, w + 2), dtype=np.uint8)
    padded[1:-1, 1:-1] = m
    stride = w + 2
    offsets = np.array([dr * stride + dc for dr, dc in _ZS_OFFSETS], dtype=np.int64)
    flat = padded.ravel()

    set_idx = np.flatnonzero(flat)
    code = _neighbour_codes(flat, set_idx, offsets)
    cand = set_idx[code != 255]
    idle = 0
    step = 0
    while idle < 2:
        lut = _ZS_FIRST if step % 2 == 0 else _ZS_SECOND
        step += 1
        code = _neighbour_codes(flat, cand, offsets)
        kill = lut[code]
        if not kill.any():
            idle += 1
            continue
        idle = 0
        dead = cand[kill]
        flat[dead] = 0
        touched = (dead[:, None] + offsets[None, :]).ravel()
        touched = touched[flat[touched] == 1]
        cand = np.unique(np.concatenate([cand[~kill], touched]))

    _strip_corners(flat, stride, offsets)
    _restore_ends(flat, np.pad(m, 1).ravel(), stride, offsets)
    return padded[1:-1, 1:-1].astype(bool)


def _strip_corners(flat: np.ndarray, stride: int, offsets: np.ndarray) -> None:
    # phase-wise removal: cells sharing (row % 2, col % 2) are never adjacent
    rows, cols = np.divmod(np.arange(flat.size), stride)
    phase = (rows % 2) * 2 + (cols % 2)
    changed = True
    while changed:
        changed = False
        for ph in range(4):
            idx = np.flatnonzero(flat)
            idx = idx[phase[idx] == ph]
            kill = _CORNER[_neighbour_codes(flat, idx, offsets)]
            if kill.any():
                flat[idx[kill]] = 0
                changed = True


def _restore_ends(flat: np.ndarray, original: np.ndarray, stride: int, offsets: np.ndarray) -> None:
    """Grow every curve end back by one pixel along its tangent.

    Thinning eats up to two pixels off the end of a stroke; one is given back
    when the pixel straight ahead lies in the original mask and touches no
    skeleton pixel but the end itself.
    """
    ends = [i for i in np.flatnonzero(flat) if sum(flat[i + o] for o in offsets) == 1]
    grown = []
    for e in ends:
        # two steps back along the curve give the tangent
        prev = [e]
        for _ in range(2):
            nxt = [prev[-1] + o for o in offsets if flat[prev[-1] + o] and prev[-1] + o not in prev]
            if len(nxt) != 1:
                break
            prev.append(nxt[0])
        if len(prev) < 2:
            continue
        er, ec = divmod(e, stride)
        br, bc = divmod(prev[-1], stride)
        dr, dc = er - br, ec - bc
        n = max(abs(dr), abs(dc))
        target = e + int(round(dr / n)) * stride + int(round(dc / n))
        if not original[target] or flat[target]:
            continue
        touching = [target + o for o in offsets if flat[target + o]]
        if touching == [e]:
            grown.append(target)
    for t in grown:
        # two ends growing into the same pixel would join curves
        if sum(flat[t + o] for o in offsets) == 1:
            flat[t] = 1


def neighbour_count(mask) -> np.ndarray:
    """Number of set 8-neighbours of every set pixel (0 elsewhere)."""
    m = _grid(mask).astype(bool)
    p = np.pad(m, 1).astype(np.uint8)
    h, w = m.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for dr in (0, 1, 2):
        for dc in (0, 1, 2):
            if dr != 1 or dc != 1:
                out += p[dr : dr + h, dc : dc + w]
    return np.where(m, out, 0).astype(np.int32)


def skeleton_endpoints(skeleton) -> list[Point]:
    """Skeleton pixels with exactly one 8-neighbour, ordered by (y, x)."""
    s = _grid(skeleton).astype(bool)
    rows, cols = np.nonzero(s & (neighbour_count(s) == 1))
    return [Point(float(c), float(r)) for r, c in zip(rows, cols)]


def _neighbours(s: np.ndarray, r: int, c: int):
    h, w = s.shape
    for dr, dc in _ZS_OFFSETS:
        rr, cc = r + dr, c + dc
        if 0 <= rr < h and 0 <= cc < w and s[rr, cc]:
            yield rr, cc


def walk_from(skeleton: np.ndarray, start: tuple[int, int], max_len: int) -> list[tuple[int, int]]:
    """Follow a unit-width curve from ``start`` until a junction, a dead end or
    ``max_len`` pixels. Junction pixels are not included."""
    s = skeleton
    path = [start]
    prev = None
    cur = start
    while len(path) < max_len:
        nxt = [p for p in _neighbours(s, *cur) if p != prev and p not in path[-3:]]
        if len(nxt) != 1:
            break
        cand = nxt[0]
        if sum(1 for _ in _neighbours(s, *cand)) > 2:
            break
        prev, cur = cur, cand
        path.append(cur)
    return path


def prune_spurs(skeleton, min_length: int) -> np.ndarray:
    """Remove dead-end branches shorter than ``min_length`` that hang off a
    junction. Branches reaching the raster border are kept."""
    s = _grid(skeleton).astype(bool).copy()
    h, w = s.shape
    for _ in range(3):
        removed = False
        for p in skeleton_endpoints(s):
            r, c = int(p.y), int(p.x)
            if r in (0, h - 1) or c in (0, w - 1):
                continue
            path = walk_from(s, (r, c), min_length + 1)
            if len(path) > min_length:
                continue
            tail = path[-1]
            if sum(1 for _ in _neighbours(s, *tail)) < 2:
                continue  # isolated short fragment, not a spur
            nxt = [q for q in _neighbours(s, *tail) if q not in path]
            if not nxt or max(sum(1 for _ in _neighbours(s, *q)) for q in nxt) < 3:
                continue
            for rr, cc in path:
                s[rr, cc] = False
            removed = True
        if not removed:
            break
        # the pixel that joined a removed spur to its junction may now be a stub
        padded = np.pad(s, 1).astype(np.uint8)
        stride = w + 2
        offsets = np.array([dr * stride + dc for dr, dc in _ZS_OFFSETS], dtype=np.int64)
        flat = padded.ravel()
        _strip_corners(flat, stride, offsets)
        s = padded[1:-1, 1:-1].astype(bool)
    return s


def field_from_raster(
    raster,
    stroke_threshold: float = 0.6,
    smooth_sigma: float = 1.0,
    min_component_px: int = 30,
) -> DistanceField:
    """Estimate a distance field from intensities alone.

    Bright strokes are isolated by smoothing and thresholding, thinned to
    centre lines, and the inverse distance transform of those lines is
    returned. This is the classical stand-in for a learned field predictor.
    """
    v = _grid(raster).astype(float)
    smooth = ndimage.gaussian_filter(v, smooth_sigma) if smooth_sigma > 0 else v
    strokes = smooth >= stroke_threshold
    labels, n = ndimage.label(strokes, structure=np.ones((3, 3)))
    if n:
        sizes = np.bincount(labels.ravel())
        keep = sizes >= min_component_px
        keep[0] = False
        strokes = keep[labels]
    skel = skeletonize(strokes)
    if not skel.any():
        return DistanceField(np.zeros(v.shape))
    return field_from_boundary_mask(skel)
