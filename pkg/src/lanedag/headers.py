"""Direction, position and state headers.

A header suite answers the three conditional queries the greedy tracer
needs: which way the next vertex lies, where exactly it sits inside the
rotated RoI along that direction, and whether the boundary continues, forks
or ends there. :class:`DistanceFieldOracle` answers them deterministically
from a distance field; a learned model can replace it behind the same
methods.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage

from .dag import STATE_ORDER, VertexState
from .geom import BilinearSampler, Point, RotatedRoi

STATE_EPS = 1e-6


class HeaderSignal(Exception):
    """Base for the non-error outcomes that end a traced chain."""


class LostTrack(HeaderSignal):
    pass


class ExitImage(HeaderSignal):
    pass


@dataclass(frozen=True)
class HeaderConfig:
    step_px: int = 50
    roi_h: int = 100
    roi_w: int = 100
    angle_samples: int = 181
    fork_sep_min_rad: float = 0.05
    merge_radius_px: float = 10.0
    # field level the state header binarizes at (7 = within 4 px of a ridge)
    state_threshold: float = 7.0
    # cells within this fraction of the RoI maximum count as on the ridge
    position_rel_tol: float = 0.05
    # peaks this close to the chosen one compete on how well they continue ahead
    position_cluster_px: int = 4
    # ray scores within this fraction of the best count as ties, resolved toward going straight
    direction_rel_tol: float = 0.02
    # on a fork's second branch, RoI cells this close to the sibling's trace are off limits
    sibling_mask_px: float = 4.0
    root_full_circle: bool = False

    def __post_init__(self):
        if not self.step_px < min(self.roi_h, self.roi_w):
            raise ValueError(f"step_px {self.step_px} must be below the RoI size {self.roi_h}x{self.roi_w}")
        if self.angle_samples < 3:
            raise ValueError("angle_samples must be >= 3")
        if self.step_px <= 0 or self.merge_radius_px <= 0 or self.fork_sep_min_rad < 0:
            raise ValueError("step, merge radius and fork separation must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "HeaderConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown header options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class HeaderContext:
    """Everything a header may condition on when predicting vertex i.

    ``claimed`` labels pixels of already traced segments with the id of the
    boundary that drew them (0 = free). ``label`` is the boundary currently
    being traced; ``ignore_labels`` are boundaries whose claims must not
    trigger a merge (the sibling right after a fork). ``excluded_angles``
    holds branch directions already consumed at a fork.
    """

    parent_position: Point
    parent_angle: float
    parent_state: VertexState
    field: np.ndarray
    claimed: np.ndarray | None = None
    label: int = 0
    ignore_labels: frozenset = frozenset()
    excluded_angles: tuple = ()
    is_root: bool = False


@dataclass(frozen=True)
class DirectionPrediction:
    angle: float
    log_prob: float


@dataclass(frozen=True)
class PositionPrediction:
    position: Point
    log_prob: float


@dataclass(frozen=True)
class StatePrediction:
    state: VertexState
    log_probs: tuple[float, float, float]  # normal, fork, terminate

    def log_prob(self, state: VertexState) -> float:
        return self.log_probs[STATE_ORDER.index(VertexState(state))]


class HeaderSuite(abc.ABC):
    config: HeaderConfig

    @abc.abstractmethod
    def predict_direction(self, ctx: HeaderContext) -> DirectionPrediction: ...

    @abc.abstractmethod
    def predict_position(self, ctx: HeaderContext, angle: float) -> PositionPrediction: ...

    @abc.abstractmethod
    def predict_state(self, ctx: HeaderContext, angle: float) -> StatePrediction: ...

    @abc.abstractmethod
    def direction_log_prob(self, ctx: HeaderContext, angle: float) -> float: ...

    @abc.abstractmethod
    def position_log_prob(self, ctx: HeaderContext, angle: float, position) -> float: ...

    def state_log_prob(self, ctx: HeaderContext, angle: float, state: VertexState) -> float:
        return self.predict_state(ctx, angle).log_prob(state)


def _wrap(a: np.ndarray) -> np.ndarray:
    """Vectorised angle wrap into (-pi, pi]."""
    w = np.remainder(a + math.pi, 2 * math.pi) - math.pi
    return np.where(w <= -math.pi, w + 2 * math.pi, w)


def _logsumexp(v: np.ndarray) -> float:
    m = float(v.max())
    return m + math.log(float(np.exp(v - m).sum()))


def _runs(col: np.ndarray) -> int:
    """Number of maximal runs of True in a 1-D boolean array."""
    c = col.astype(np.int8)
    return int(c[0] + np.count_nonzero(np.diff(c) == 1)) if len(c) else 0


_EIGHT_CONN = np.ones((3, 3), dtype=bool)


class DistanceFieldOracle(HeaderSuite):
    """Header suite reading a thresholded inverse distance field."""

    def __init__(self, config: HeaderConfig | None = None):
        self.config = config or HeaderConfig()
        self._roi_cache: tuple | None = None
        self._sampler: BilinearSampler | None = None

    def sampler(self, field: np.ndarray) -> BilinearSampler:
        if self._sampler is None or self._sampler.raster is not field:
            self._sampler = BilinearSampler(field)
            self._roi_cache = None
        return self._sampler

    # --- direction

    def _candidates(self, ctx: HeaderContext) -> tuple[np.ndarray, np.ndarray]:
        n = self.config.angle_samples
        if ctx.is_root and self.config.root_full_circle:
            offs = np.arange(n) * (2 * math.pi / n)
        else:
            offs = np.linspace(-math.pi / 2, math.pi / 2, n)
        angles = _wrap(ctx.parent_angle + offs)
        keep = np.ones(n, dtype=bool)
        for e in ctx.excluded_angles:
            keep &= np.abs(_wrap(angles - e)) > self.config.fork_sep_min_rad
        return angles, keep

    def _ray_scores(self, ctx: HeaderContext, angles: np.ndarray) -> np.ndarray:
        step = self.config.step_px
        t = np.arange(1, step + 1, dtype=float)
        px, py = ctx.parent_position
        xs = px + np.cos(angles)[:, None] * t[None, :]
        ys = py + np.sin(angles)[:, None] * t[None, :]
        return self.sampler(ctx.field)(xs, ys).sum(axis=1) / step

    def direction_scores(self, ctx: HeaderContext) -> tuple[np.ndarray, np.ndarray]:
        """Candidate angles and their mean field value along a step-long ray
        (excluded candidates score 0)."""
        angles, keep = self._candidates(ctx)
        scores = np.where(keep, self._ray_scores(ctx, angles), 0.0)
        return angles, scores

    def predict_direction(self, ctx: HeaderContext) -> DirectionPrediction:
        angles, scores = self.direction_scores(ctx)
        total = scores.sum()
        if not total > 0:
            raise LostTrack(f"no field support around {tuple(ctx.parent_position)}")
        k = self._select_angle(ctx, angles, scores)
        return DirectionPrediction(float(angles[k]), float(math.log(scores[k] / total)))

    def _select_angle(self, ctx: HeaderContext, angles: np.ndarray, scores: np.ndarray) -> int:
        """Mode of the direction distribution, resolved toward the least turn.

        Near a junction a ray along the union of two ridges can outscore the
        ridge being followed by a fraction of a percent; candidates within
        ``direction_rel_tol`` of the best are treated as tied and the one
        turning least from the parent heading wins (then the lower index).
        """
        near = np.flatnonzero(scores >= scores.max() * (1.0 - self.config.direction_rel_tol))
        turn = np.abs(_wrap(angles[near] - ctx.parent_angle))
        return int(near[np.lexsort((near, turn))[0]])

    def direction_log_prob(self, ctx: HeaderContext, angle: float) -> float:
        _, scores = self.direction_scores(ctx)
        total = scores.sum()
        r = float(self._ray_scores(ctx, np.array([angle]))[0])
        if not total > 0 or r <= 0:
            return -math.inf
        return math.log(r / total)

    # --- RoI shared by position and state

    def roi(self, ctx: HeaderContext, angle: float) -> RotatedRoi:
        s = self.config.step_px
        px, py = ctx.parent_position
        center = Point(px + s * math.cos(angle), py + s * math.sin(angle))
        return RotatedRoi(center, angle, self.config.roi_h, self.config.roi_w)

    def _roi_values(self, ctx: HeaderContext, angle: float) -> tuple[RotatedRoi, np.ndarray]:
        key = (id(ctx.field), tuple(ctx.parent_position), float(angle))
        if self._roi_cache is not None and self._roi_cache[0] == key:
            return self._roi_cache[1], self._roi_cache[2]
        roi = self.roi(ctx, angle)
        xs, ys = roi.cell_coords()
        vals = self.sampler(ctx.field)(xs, ys)
        self._roi_cache = (key, roi, vals, bool(self._inside(ctx.field, xs, ys).any()))
        return roi, vals

    @staticmethod
    def _inside(field: np.ndarray, x, y) -> np.ndarray:
        h, w = field.shape
        return (x > -1) & (x < w) & (y > -1) & (y < h)

    # --- position

    def predict_position(self, ctx: HeaderContext, angle: float) -> PositionPrediction:
        roi, vals = self._roi_values(ctx, angle)
        if not self._roi_cache[3]:
            raise ExitImage(f"RoI around {tuple(roi.center)} lies outside the field")
        logits = self._position_logits(ctx, roi, vals)
        r, c = self._select_cell(logits)
        u, v = c - roi.width_px // 2, r - roi.height_px // 2
        x, y = roi.to_global(float(u), float(v))
        return PositionPrediction(Point(float(x), float(y)), float(logits[r, c] - _logsumexp(logits)))

    def sibling_mask(self, ctx: HeaderContext, roi: RotatedRoi) -> np.ndarray | None:
        """RoI cells near the already traced sibling branch, or None.

        Only the first step of a fork's second branch (non-empty
        ``excluded_angles``) is masked: right at the fork both ridges sit in
        the RoI a few pixels apart and the branch must not land on the one
        already drawn.
        """
        if not ctx.excluded_angles or ctx.claimed is None or not ctx.ignore_labels:
            return None
        xs, ys = roi.cell_coords()
        h, w = ctx.claimed.shape
        cols = np.rint(xs).astype(np.int64)
        rows = np.rint(ys).astype(np.int64)
        ok = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        labels = np.where(ok, ctx.claimed[np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1)], 0)
        hit = np.isin(labels, list(ctx.ignore_labels))
        if not hit.any():
            return None
        return ndimage.distance_transform_edt(~hit) <= self.config.sibling_mask_px

    def _position_logits(self, ctx: HeaderContext, roi: RotatedRoi, vals: np.ndarray) -> np.ndarray:
        mask = self.sibling_mask(ctx, roi)
        if mask is None or mask.all():
            return vals
        return np.where(mask, -np.inf, vals)

    def _select_cell(self, vals: np.ndarray) -> tuple[int, int]:
        """Mode of the RoI softmax, resolved toward the RoI centre.

        Every cell within ``position_rel_tol`` of the maximum is a candidate
        (along a straight ridge there are many near-ties). The column closest
        to the centre column wins; within it, the local peak closest to the
        centre row wins; remaining ties go to the smaller index.

        Peaks within ``position_cluster_px`` of that one are ambiguous (two
        ridges just splitting apart); among them the row with the highest mean
        value from the chosen column to the far edge wins, i.e. the ridge
        that continues straight along the heading.
        """
        h, w = vals.shape
        rc, cc = h // 2, w // 2
        top = vals.max()
        near = vals >= top * (1.0 - self.config.position_rel_tol) if top > 0 else vals >= top
        near &= np.isfinite(vals)
        cols = np.flatnonzero(near.any(axis=0))
        col = int(cols[np.lexsort((cols, np.abs(cols - cc)))[0]])
        colv = vals[:, col]
        up = np.concatenate([[-np.inf], colv[:-1]])
        down = np.concatenate([colv[1:], [-np.inf]])
        peaks = np.flatnonzero(near[:, col] & (colv >= up) & (colv >= down))
        if len(peaks) == 0:
            peaks = np.flatnonzero(near[:, col])
        dist = np.abs(peaks - rc)
        row = int(peaks[np.lexsort((peaks, dist))[0]])
        close = peaks[np.abs(peaks - row) <= self.config.position_cluster_px]
        if len(close) > 1:
            ahead = np.where(np.isfinite(vals[close, col:]), vals[close, col:], 0.0).mean(axis=1)
            close = close[ahead >= ahead.max() - 1e-12]
            row = int(close[np.lexsort((close, np.abs(close - rc)))[0]])
        return row, col

    def position_log_prob(self, ctx: HeaderContext, angle: float, position) -> float:
        roi, vals = self._roi_values(ctx, angle)
        logits = self._position_logits(ctx, roi, vals)
        u, v = roi.to_local(position[0], position[1])
        c = int(np.clip(np.rint(u) + roi.width_px // 2, 0, roi.width_px - 1))
        r = int(np.clip(np.rint(v) + roi.height_px // 2, 0, roi.height_px - 1))
        return float(logits[r, c] - _logsumexp(logits))

    # --- state

    def merge_hit(self, ctx: HeaderContext, point) -> bool:
        """True when a claimed pixel of another boundary lies within the merge radius."""
        if ctx.claimed is None:
            return False
        rad = self.config.merge_radius_px
        h, w = ctx.claimed.shape
        x, y = point
        r0, r1 = max(0, int(math.floor(y - rad))), min(h, int(math.ceil(y + rad)) + 1)
        c0, c1 = max(0, int(math.floor(x - rad))), min(w, int(math.ceil(x + rad)) + 1)
        if r0 >= r1 or c0 >= c1:
            return False
        win = ctx.claimed[r0:r1, c0:c1]
        rr, cc = np.nonzero(win)
        if len(rr) == 0:
            return False
        near = np.hypot(rr + r0 - y, cc + c0 - x) <= rad
        labels = set(np.unique(win[rr[near], cc[near]]).tolist())
        return bool(labels - {0, ctx.label} - set(ctx.ignore_labels))

    def state_evidence(self, ctx: HeaderContext, angle: float) -> dict:
        """Branch counts and merge test behind :meth:`predict_state`."""
        roi, vals = self._roi_values(ctx, angle)
        h, w = vals.shape
        rc, cc = h // 2, w // 2
        center = roi.center
        out = {"inside": self._inside(ctx.field, center.x, center.y) and
               0 <= center.x <= ctx.field.shape[1] - 1 and 0 <= center.y <= ctx.field.shape[0] - 1}
        out["merge"] = self.merge_hit(ctx, center)
        binary = vals >= self.config.state_threshold
        col = binary[:, cc]
        hits = np.flatnonzero(col)
        if len(hits) == 0:
            out.update(anchored=False, far=0, mid=0, near=0, far_inside=True)
            return out
        anchor = int(hits[np.argmin(np.abs(hits - rc))])
        labels, _ = ndimage.label(binary, structure=_EIGHT_CONN)
        comp = labels == labels[anchor, cc]
        fx, fy = roi.to_global(float(w - 1 - cc), 0.0)
        out.update(
            anchored=True,
            far=_runs(comp[:, w - 1]),
            mid=_runs(comp[:, cc]),
            near=_runs(comp[:, 0]),
            far_inside=bool(0 <= fx <= ctx.field.shape[1] - 1 and 0 <= fy <= ctx.field.shape[0] - 1),
        )
        return out

    def predict_state(self, ctx: HeaderContext, angle: float) -> StatePrediction:
        ev = self.state_evidence(ctx, angle)
        if not ev["inside"]:
            state = VertexState.NORMAL  # leaving the image is not a topology event
        elif ev["merge"]:
            state = VertexState.TERMINATE
        elif not ev["anchored"]:
            state = VertexState.TERMINATE
        elif ev["far"] >= 2 and ev["near"] <= 1 and ctx.parent_state != VertexState.FORK:
            # one ridge enters and two leave; converging ridges enter separately
            state = VertexState.FORK
        elif ev["far"] == 0 and ev["far_inside"]:
            state = VertexState.TERMINATE
        else:
            state = VertexState.NORMAL
        return StatePrediction(state, _soft_one_hot(state))


def _soft_one_hot(state: VertexState) -> tuple[float, float, float]:
    hi = math.log(1.0 - 2 * STATE_EPS)
    lo = math.log(STATE_EPS)
    return tuple(hi if s == state else lo for s in STATE_ORDER)
