"""Greedy DAG topology discovery, skeleton initialisation and recovery."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .dag import STATE_ORDER, DagError, LaneDAG, VertexState, designate_primaries, to_polylines, validate
from .geom import Point, heading_between, rasterize_polyline, rasterize_segment
from .headers import ExitImage, HeaderContext, HeaderSuite, LostTrack
from .raster import (
    DistanceField,
    binarize,
    exact_distance_transform,
    neighbour_count,
    prune_spurs,
    skeletonize,
    walk_from,
)


@dataclass(frozen=True)
class InferenceConfig:
    max_steps_per_boundary: int = 400
    max_total_vertices: int = 20000
    recovery_cover_radius_px: float = 20.0
    recovery_min_component_px: int = 40
    lost_track_policy: str = "terminate"
    binarize_threshold: float = 4.0
    entry_margin_px: float = 200.0
    tangent_px: int = 15
    spur_px: int = 12
    # a step advancing less than this fraction of step_px closes the chain
    min_progress: float = 0.25

    def __post_init__(self):
        for name in ("max_steps_per_boundary", "max_total_vertices", "recovery_cover_radius_px",
                     "recovery_min_component_px", "tangent_px", "min_progress"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lost_track_policy != "terminate":
            raise ValueError(f"unsupported lost_track_policy {self.lost_track_policy!r}")
        if not 0 < self.binarize_threshold < 10:
            raise ValueError("binarize_threshold must lie in (0, 10)")

    @classmethod
    def from_dict(cls, d: dict) -> "InferenceConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown inference options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class InitVertex(NamedTuple):
    position: Point
    angle: float
    state: VertexState = VertexState.NORMAL


def _values(field) -> np.ndarray:
    return field.values if isinstance(field, DistanceField) else np.asarray(field, dtype=float)


# --- initialisation -----------------------------------------------------

_PAD = 40


def field_skeleton(field, threshold: float, spur_px: int = 12) -> np.ndarray:
    """Pruned skeleton of the binarised field.

    The mask is padded by edge replication before thinning so bands crossing
    the image border keep their full extent instead of shrinking away from it.
    """
    mask = binarize(_values(field), threshold)
    out = np.zeros_like(mask)
    if not mask.any():
        return out
    h, w = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    crop = mask[r0:r1, c0:c1]
    # replicate only across image borders the mask actually touches
    pads = [(_PAD if r0 == 0 else 0, _PAD if r1 == h else 0), (_PAD if c0 == 0 else 0, _PAD if c1 == w else 0)]
    padded = np.pad(crop, pads, mode="edge")
    skel = skeletonize(padded)
    out[r0:r1, c0:c1] = skel[pads[0][0] : pads[0][0] + crop.shape[0], pads[1][0] : pads[1][0] + crop.shape[1]]
    return prune_spurs(out, spur_px)


def _endpoint_inits(skel: np.ndarray, cfg: InferenceConfig, restrict: np.ndarray | None = None) -> list[InitVertex]:
    count = neighbour_count(skel)
    ends = skel & (count == 1)
    if restrict is not None:
        ends &= restrict
    out = []
    for r, c in zip(*np.nonzero(ends)):
        path = walk_from(skel, (int(r), int(c)), cfg.tangent_px)
        if len(path) < 2:
            continue
        (r0, c0), (r1, c1) = path[0], path[-1]
        out.append(InitVertex(Point(float(c0), float(r0)), heading_between((c0, r0), (c1, r1))))
    out.sort(key=lambda v: (v.position.y, v.position.x))
    return out


def _entry_filter(inits: list[InitVertex], cfg: InferenceConfig) -> list[InitVertex]:
    return [v for v in inits if v.position.x <= cfg.entry_margin_px or math.cos(v.angle) > 0]


def initial_vertices(field, binarize_threshold: float | None = None,
                     cfg: InferenceConfig | None = None) -> list[InitVertex]:
    """Skeleton endpoints that start a boundary, with their ridge tangents.

    Endpoints are kept when they lie within ``entry_margin_px`` of the left
    (entry) edge or when their tangent points along the travel direction
    (+x); ordering is by (y, x).
    """
    cfg = cfg or InferenceConfig()
    thr = cfg.binarize_threshold if binarize_threshold is None else binarize_threshold
    skel = field_skeleton(field, thr, cfg.spur_px)
    if not skel.any():
        return []
    return _entry_filter(_endpoint_inits(skel, cfg), cfg)


# --- discovery ----------------------------------------------------------


class ClaimMap:
    """Pixels of traced segments labelled with the boundary that drew them."""

    def __init__(self, shape):
        self.labels = np.zeros(shape, dtype=np.int32)

    def stamp(self, a, b, label: int) -> None:
        rows, cols = rasterize_segment(a, b)
        h, w = self.labels.shape
        ok = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        rows, cols = rows[ok], cols[ok]
        free = self.labels[rows, cols] == 0
        self.labels[rows[free], cols[free]] = label

    def near(self, point, radius: float, labels) -> bool:
        h, w = self.labels.shape
        x, y = point
        r0, r1 = max(0, int(math.floor(y - radius))), min(h, int(math.ceil(y + radius)) + 1)
        c0, c1 = max(0, int(math.floor(x - radius))), min(w, int(math.ceil(x + radius)) + 1)
        if r0 >= r1 or c0 >= c1:
            return False
        win = self.labels[r0:r1, c0:c1]
        rr, cc = np.nonzero(np.isin(win, list(labels)))
        return bool(np.any(np.hypot(rr + r0 - y, cc + c0 - x) <= radius))


class _Tracker:
    """Boundary labels and merge-ignore bookkeeping shared by discovery and replay.

    Right after a fork the two branches overlap, so the new branch ignores
    its sibling's claims until it has once been farther than the merge
    radius from them.
    """

    def __init__(self, shape, merge_radius: float):
        self.claims = ClaimMap(shape)
        self.radius = merge_radius
        self.label_of: dict[int, int] = {}
        self.ignore_of: dict[int, frozenset] = {}
        self._next = 1

    def new_label(self) -> int:
        lab = self._next
        self._next += 1
        return lab

    def start_root(self, vid: int) -> None:
        self.label_of[vid] = self.new_label()
        self.ignore_of[vid] = frozenset()

    def branch_label(self, fork_vid: int) -> tuple[int, frozenset]:
        return self.new_label(), frozenset({self.label_of[fork_vid]})

    def append(self, parent_pos, vid: int, pos, label: int, ignore: frozenset) -> None:
        self.claims.stamp(parent_pos, pos, label)
        self.label_of[vid] = label
        if ignore and not self.claims.near(pos, self.radius, ignore):
            ignore = frozenset()
        self.ignore_of[vid] = ignore


def _context(dag: LaneDAG, vid: int, field: np.ndarray, tracker: _Tracker, label: int,
             ignore: frozenset, excluded=(), parent_state=None) -> HeaderContext:
    v = dag[vid]
    return HeaderContext(
        parent_position=v.position,
        parent_angle=v.theta,
        parent_state=v.state if parent_state is None else parent_state,
        field=field,
        claimed=tracker.claims.labels,
        label=label,
        ignore_labels=ignore,
        excluded_angles=tuple(excluded),
        is_root=v.parent is None,
    )


def discover(field, headers: HeaderSuite, init, cfg: InferenceConfig | None = None,
             base: LaneDAG | None = None) -> LaneDAG:
    """Trace every initial vertex into a DAG with the greedy header loop.

    Each popped item is extended one vertex at a time (direction, then
    position, then state) until a Terminate state, leaving the image, lost
    track or the per-boundary step cap. A Fork vertex is queued and its second
    branch traced when popped, with the branch already taken excluded. When
    ``base`` is given the new chains are added to a copy of it and its
    segments count as claimed from the start.

    The returned DAG carries ``budget_exceeded = True`` when the vertex
    budget stopped the search early.
    """
    cfg = cfg or InferenceConfig()
    values = _values(field)
    hcfg = headers.config
    dag = base.copy() if base is not None else LaneDAG()
    tracker = replay_tracker(dag, values, hcfg.merge_radius_px)
    dag.budget_exceeded = False
    queue: deque = deque()

    for iv in init:
        if len(dag) >= cfg.max_total_vertices:
            dag.budget_exceeded = True
            break
        root = dag.add_vertex(iv.position, iv.angle, VertexState(iv.state))
        tracker.start_root(root.id)
        queue.append(("root", root.id))

    while queue:
        kind, vid = queue.popleft()
        if kind == "root":
            label, ignore, excluded = tracker.label_of[vid], frozenset(), ()
        else:
            label, ignore = tracker.branch_label(vid)
            kids = dag[vid].children
            excluded = (dag[min(kids)].theta,) if kids else ()
        ok = _trace(dag, vid, values, headers, tracker, cfg, label, ignore, excluded, queue)
        if kind == "root" and not dag[vid].children:
            dag.remove_vertex(vid)
        elif kind == "fork" and dag[vid].state == VertexState.FORK and len(dag[vid].children) < 2:
            dag[vid].state = VertexState.NORMAL  # the second branch never materialised
        if not ok:
            dag.budget_exceeded = True
            for kind2, vid2 in queue:
                if kind2 == "root" and not dag[vid2].children:
                    dag.remove_vertex(vid2)
                elif kind2 == "fork" and len(dag[vid2].children) < 2:
                    dag[vid2].state = VertexState.NORMAL
            break
    designate_primaries(dag)
    return dag


def _room_ahead(pos, angle: float, shape) -> float:
    """Distance from ``pos`` along ``angle`` to the image border."""
    h, w = shape
    t = math.inf
    for p, d, hi in ((pos[0], math.cos(angle), w - 1), (pos[1], math.sin(angle), h - 1)):
        if d > 1e-12:
            t = min(t, (hi - p) / d)
        elif d < -1e-12:
            t = min(t, -p / d)
    return max(t, 0.0)


def _trace(dag, start, values, headers, tracker, cfg, label, ignore, excluded, queue) -> bool:
    """Extend the chain at ``start``; False when the vertex budget ran out."""
    step = headers.config.step_px
    cursor = start
    first = True
    for _ in range(cfg.max_steps_per_boundary):
        parent = dag[cursor]
        if parent.state == VertexState.TERMINATE:
            break
        if _room_ahead(parent.position, parent.theta, values.shape) < cfg.min_progress * step:
            break  # already at the image border
        if len(dag) >= cfg.max_total_vertices:
            return False
        ctx = _context(dag, cursor, values, tracker, label, ignore, excluded if first else ())
        try:
            d = headers.predict_direction(ctx)
            p = headers.predict_position(ctx, d.angle)
        except LostTrack:
            if not parent.children and parent.parent is not None:
                parent.state = VertexState.TERMINATE
            break
        except ExitImage:
            break
        pos = p.position
        h, w = values.shape
        if not (0 <= pos.x <= w - 1 and 0 <= pos.y <= h - 1):
            break
        adv = (pos.x - parent.position.x) * math.cos(d.angle) + (pos.y - parent.position.y) * math.sin(d.angle)
        if adv < cfg.min_progress * step:
            break
        s = headers.predict_state(ctx, d.angle)
        v = dag.add_vertex(pos, d.angle, s.state, parent=cursor)
        leaving = _room_ahead(parent.position, d.angle, values.shape) < step
        tracker.append(parent.position, v.id, pos, label, ignore)
        ignore = tracker.ignore_of[v.id]
        if s.state == VertexState.FORK:
            queue.append(("fork", v.id))
        cursor = v.id
        first = False
        if leaving:
            break  # the lookahead left the image: this vertex is the exit point
    return True


# --- replay and scoring -------------------------------------------------


def _replay(dag: LaneDAG, values: np.ndarray, merge_radius: float, visit=None) -> _Tracker:
    """Rebuild claims and labels vertex by vertex in id order.

    ``visit(vid, make_ctx)`` is called for every non-root vertex before its
    segment is stamped; ``make_ctx(state=None)`` builds the header context,
    optionally with the parent's state overridden.
    """
    tracker = _Tracker(values.shape, merge_radius)
    for vid in sorted(dag.vertices):
        v = dag[vid]
        if v.parent is None:
            tracker.start_root(vid)
            continue
        pid = v.parent
        if pid not in tracker.label_of:
            raise ValueError(f"vertex {vid} precedes its parent {pid} in id order")
        p = dag[pid]
        excluded = ()
        # the branch traced first during discovery has the smallest id
        if p.state == VertexState.FORK and p.children and min(p.children) != vid:
            label, ignore = tracker.branch_label(pid)
            excluded = (dag[min(p.children)].theta,)
        else:
            label, ignore = tracker.label_of[pid], tracker.ignore_of[pid]
        if visit is not None:
            visit(vid, lambda state=None: _context(dag, pid, values, tracker, label, ignore, excluded, state))
        tracker.append(p.position, vid, v.position, label, ignore)
    return tracker


def replay_tracker(dag: LaneDAG, values: np.ndarray, merge_radius: float) -> _Tracker:
    return _replay(dag, values, merge_radius)


def _terms(headers: HeaderSuite, ctx: HeaderContext, v) -> tuple[float, float, float]:
    return (
        headers.direction_log_prob(ctx, v.theta),
        headers.position_log_prob(ctx, v.theta, v.position),
        headers.state_log_prob(ctx, v.theta, v.state),
    )


def replay_log_terms(dag: LaneDAG, headers: HeaderSuite, field) -> dict[int, tuple[float, float, float]]:
    """(direction, position, state) log-probabilities of every non-root vertex."""
    values = _values(field)
    out: dict[int, tuple[float, float, float]] = {}

    def visit(vid, make):
        out[vid] = _terms(headers, make(), dag[vid])

    _replay(dag, values, headers.config.merge_radius_px, visit)
    return out


def relabel_scores(dag: LaneDAG, headers: HeaderSuite, field) -> tuple[float, dict]:
    """Score of ``dag`` and of every single-vertex state relabelling.

    A non-fork vertex's state enters only its own state term and the contexts
    of its children, so its relabelled scores are the base score with those
    terms swapped. A fork's state also decides the label, exclusion and
    sibling mask of its second branch, which reach the whole subtree; its
    relabellings are rescored from scratch. Returns
    ``(base, {(vid, state): score})``.
    """
    values = _values(field)
    base_terms: dict[int, float] = {}
    own_state: dict[int, dict] = {}
    by_parent_state: dict[int, dict] = {}

    def visit(vid, make):
        v = dag[vid]
        ctx = make()
        base_terms[vid] = sum(_terms(headers, ctx, v))
        own_state[vid] = {s: headers.state_log_prob(ctx, v.theta, s) for s in STATE_ORDER}
        by_parent_state[vid] = {s: sum(_terms(headers, make(s), v)) for s in STATE_ORDER}

    _replay(dag, values, headers.config.merge_radius_px, visit)
    base = float(sum(base_terms.values()))
    out = {}
    for vid, v in dag.vertices.items():
        for s in STATE_ORDER:
            if s == v.state:
                continue
            if v.state == VertexState.FORK:
                flipped = dag.copy()
                flipped[vid].state = s
                out[(vid, s)] = float(sum(sum(t) for t in replay_log_terms(flipped, headers, values).values()))
                continue
            score = base
            if vid in own_state:
                score += own_state[vid][s] - own_state[vid][v.state]
            for c in v.children:
                score += by_parent_state[c][s] - base_terms[c]
            out[(vid, s)] = float(score)
    return base, out


# --- recovery -----------------------------------------------------------


def _stroke_mask(dag: LaneDAG, shape) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    if dag.vertices:
        for pl in to_polylines(dag):
            mask |= rasterize_polyline(pl.points, shape)
    return mask


def coverage_mask(dag: LaneDAG, shape, radius: float) -> np.ndarray:
    """Pixels within ``radius`` of the traced polylines."""
    mask = _stroke_mask(dag, shape)
    if not mask.any():
        return mask
    return exact_distance_transform(mask) <= radius


def _covered(points_rc: np.ndarray, stroke: np.ndarray, radius: float) -> np.ndarray:
    # same distance coverage_mask thresholds: nearest stroke pixel centre
    if not stroke.any() or len(points_rc) == 0:
        return np.zeros(len(points_rc), dtype=bool)
    tree = cKDTree(np.argwhere(stroke).astype(float))
    d, _ = tree.query(points_rc.astype(float), distance_upper_bound=radius + 1e-9)
    return d <= radius


def recover(field, headers: HeaderSuite, dag: LaneDAG, cfg: InferenceConfig | None = None,
            skeleton: np.ndarray | None = None) -> LaneDAG:
    """Re-seed tracing on skeleton pieces the DAG does not cover; return the union."""
    cfg = cfg or InferenceConfig()
    values = _values(field)
    skel = field_skeleton(values, cfg.binarize_threshold, cfg.spur_px) if skeleton is None else skeleton
    out = dag.copy()
    out.budget_exceeded = getattr(dag, "budget_exceeded", False)
    if not skel.any():
        return out
    pix = np.argwhere(skel)
    cov = _covered(pix, _stroke_mask(dag, values.shape), cfg.recovery_cover_radius_px)
    free = np.zeros_like(skel)
    free[tuple(pix[~cov].T)] = True
    labels, n = ndimage.label(free, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return out
    sizes = np.bincount(labels.ravel())
    inits: list[InitVertex] = []
    for k, box in enumerate(ndimage.find_objects(labels), start=1):
        if box is None or sizes[k] < cfg.recovery_min_component_px:
            continue
        comp = labels[box] == k
        dy, dx = box[0].start, box[1].start
        cands = [InitVertex(Point(v.position.x + dx, v.position.y + dy), v.angle)
                 for v in _endpoint_inits(comp, cfg)]
        if not cands:
            continue
        keep = _entry_filter(cands, cfg)
        inits.append(keep[0] if keep else min(cands, key=lambda v: (v.position.x, v.position.y)))
    if not inits:
        return out
    inits.sort(key=lambda v: (v.position.y, v.position.x))
    return discover(values, headers, inits, cfg, base=dag)


def infer_dag(field, headers: HeaderSuite, cfg: InferenceConfig | None = None, *,
              use_recovery: bool = True, drop_init=()) -> LaneDAG:
    """Initial vertices, discovery and optional recovery on one field.

    ``drop_init`` lists indices of initial vertices to suppress; the recovery
    ablation uses it to simulate a missed seed.
    """
    cfg = cfg or InferenceConfig()
    values = _values(field)
    skel = field_skeleton(values, cfg.binarize_threshold, cfg.spur_px)
    inits = _entry_filter(_endpoint_inits(skel, cfg), cfg) if skel.any() else []
    drop = set(drop_init)
    inits = [v for i, v in enumerate(inits) if i not in drop]
    dag = discover(values, headers, inits, cfg)
    if use_recovery and not dag.budget_exceeded:
        dag = recover(values, headers, dag, cfg, skeleton=skel)
    problems = validate(dag)
    if problems:
        raise DagError(f"inference produced an invalid DAG ({len(problems)} violations)", problems)
    return dag
