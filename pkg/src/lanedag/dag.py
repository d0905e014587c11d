"""Lane-boundary DAG: vertices with position, heading and topological state.

The graph is a forest of out-trees. A fork vertex has two children, a
terminate vertex none, and a normal vertex at most one (none only where the
boundary leaves the image).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import jsonfmt
from .geom import Point, Polyline, angle_diff, heading_between


class VertexState(str, enum.Enum):
    NORMAL = "normal"
    FORK = "fork"
    TERMINATE = "terminate"


STATE_ORDER = (VertexState.NORMAL, VertexState.FORK, VertexState.TERMINATE)


class DagError(ValueError):
    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class Violation(NamedTuple):
    vertex_id: int
    rule: str
    detail: str = ""


@dataclass
class DagVertex:
    id: int
    position: Point
    theta: float
    state: VertexState = VertexState.NORMAL
    parent: int | None = None
    children: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.position = Point(float(self.position[0]), float(self.position[1]))
        self.state = VertexState(self.state)


@dataclass
class LaneDAG:
    vertices: dict[int, DagVertex] = field(default_factory=dict)
    roots: list[int] = field(default_factory=list)
    # set by discovery when the vertex budget cut the search short
    budget_exceeded: bool = field(default=False, compare=False)

    def __len__(self) -> int:
        return len(self.vertices)

    def next_id(self) -> int:
        return max(self.vertices, default=-1) + 1

    def add_vertex(self, position, theta, state=VertexState.NORMAL, parent=None) -> DagVertex:
        vid = self.next_id()
        v = DagVertex(vid, position, float(theta), state, parent)
        self.vertices[vid] = v
        if parent is None:
            self.roots.append(vid)
        else:
            self.vertices[parent].children.append(vid)
        return v

    def remove_vertex(self, vid: int) -> None:
        """Drop a leaf vertex and unlink it from its parent."""
        v = self.vertices[vid]
        if v.children:
            raise DagError(f"vertex {vid} still has children {v.children}")
        del self.vertices[vid]
        if v.parent is None:
            self.roots.remove(vid)
        else:
            self.vertices[v.parent].children.remove(vid)

    def __getitem__(self, vid: int) -> DagVertex:
        return self.vertices[vid]

    def count_state(self, state: VertexState) -> int:
        return sum(1 for v in self.vertices.values() if v.state == state)

    def copy(self) -> "LaneDAG":
        return LaneDAG(
            {
                k: DagVertex(v.id, v.position, v.theta, v.state, v.parent, list(v.children))
                for k, v in self.vertices.items()
            },
            list(self.roots),
            self.budget_exceeded,
        )

    def merged(self, other: "LaneDAG") -> "LaneDAG":
        """Union with ``other``; its ids are shifted past this graph's ids."""
        out = self.copy()
        base = out.next_id()
        for v in sorted(other.vertices.values(), key=lambda v: v.id):
            out.vertices[v.id + base] = DagVertex(
                v.id + base,
                v.position,
                v.theta,
                v.state,
                None if v.parent is None else v.parent + base,
                [c + base for c in v.children],
            )
        out.roots.extend(r + base for r in other.roots)
        return out


def validate(dag: LaneDAG) -> list[Violation]:
    out: list[Violation] = []
    verts = dag.vertices
    roots = set(dag.roots)
    if len(roots) != len(dag.roots):
        out.append(Violation(-1, "duplicate-root"))
    for vid, v in sorted(verts.items()):
        if v.id != vid:
            out.append(Violation(vid, "id-mismatch", f"stored id {v.id}"))
        if not (math.isfinite(v.position.x) and math.isfinite(v.position.y) and math.isfinite(v.theta)):
            out.append(Violation(vid, "non-finite"))
        n = len(v.children)
        if v.state == VertexState.FORK and n != 2:
            out.append(Violation(vid, "fork-arity", f"{n} children"))
        elif v.state == VertexState.TERMINATE and n != 0:
            out.append(Violation(vid, "terminate-arity", f"{n} children"))
        elif v.state == VertexState.NORMAL and n > 1:
            out.append(Violation(vid, "normal-arity", f"{n} children"))
        if len(set(v.children)) != n:
            out.append(Violation(vid, "duplicate-child"))
        for c in v.children:
            if c not in verts:
                out.append(Violation(vid, "unknown-id", f"child {c}"))
            elif verts[c].parent != vid:
                out.append(Violation(vid, "link-consistency", f"child {c} has parent {verts[c].parent}"))
            elif verts[c].position == v.position:
                out.append(Violation(c, "zero-length-edge"))
        if v.parent is None:
            if vid not in roots:
                out.append(Violation(vid, "orphan"))
            elif n == 0:
                out.append(Violation(vid, "degenerate-chain", "root without children"))
        else:
            if vid in roots:
                out.append(Violation(vid, "root-parent", f"root has parent {v.parent}"))
            if v.parent not in verts:
                out.append(Violation(vid, "unknown-id", f"parent {v.parent}"))
            elif vid not in verts[v.parent].children:
                out.append(Violation(vid, "link-consistency", f"missing from parent {v.parent}"))
    for r in dag.roots:
        if r not in verts:
            out.append(Violation(r, "unknown-id", "root"))
    # every vertex must be reachable from exactly one root; anything left is on a cycle
    seen: set[int] = set()
    stack = [r for r in dag.roots if r in verts]
    while stack:
        vid = stack.pop()
        if vid in seen:
            out.append(Violation(vid, "cycle", "reached twice"))
            continue
        seen.add(vid)
        stack.extend(c for c in verts[vid].children if c in verts)
    for vid in sorted(set(verts) - seen):
        out.append(Violation(vid, "cycle", "unreachable from any root"))
    return out


def primary_child(dag: LaneDAG, vid: int) -> int:
    """The designated child continuing the boundary through a fork: the
    first entry of its children list."""
    return dag[vid].children[0]


# Ancestors (by depth above the fork) whose least-squares line stands for the
# incoming boundary. The closest steps are skipped: a tracer can drift onto
# the diverging ridge before the split is wide enough to be recognised.
CONTINUATION_BACK = (3, 8)
CONTINUATION_AHEAD = 4


def _chain_positions(dag: LaneDAG, vid: int, n: int) -> list[Point]:
    out = []
    while len(out) < n:
        v = dag[vid]
        out.append(v.position)
        if not v.children:
            break
        vid = v.children[0]
    return out


def _ancestor_positions(dag: LaneDAG, vid: int, n: int) -> list[Point]:
    out = []
    v = dag[vid]
    while v.parent is not None and len(out) < n:
        v = dag[v.parent]
        out.append(v.position)
    return out


def continuation_child(dag: LaneDAG, vid: int) -> int:
    """Child whose chain best continues the boundary entering a fork.

    A line is fitted to the ancestors ``CONTINUATION_BACK`` steps above the
    fork; each child's chain is followed for ``CONTINUATION_AHEAD`` vertices
    and the one ending laterally closest to the line wins. With too little
    history the child whose first segment turns least from the incoming
    segment (or from the heading of a root) wins. Ties go to the smaller id.
    """
    v = dag[vid]
    near, far = CONTINUATION_BACK
    anc = _ancestor_positions(dag, vid, far)
    if len(anc) >= near + 2:
        fit = np.array([(p[0], p[1]) for p in anc[near - 1 :]])
        chord = fit[0] - fit[-1]
        norm = float(np.hypot(*chord))
        if norm > 0:
            ux, uy = chord / norm
            o = fit[-1]

            def frame(p):
                dx, dy = p[0] - o[0], p[1] - o[1]
                return ux * dx + uy * dy, ux * dy - uy * dx

            s, t = np.array([frame(p) for p in fit]).T
            coef = np.polyfit(s, t, 1)
            chains = {c: _chain_positions(dag, c, CONTINUATION_AHEAD) for c in v.children}
            depth = min(len(ch) for ch in chains.values())

            def lateral(c: int) -> float:
                a, b = frame(chains[c][depth - 1])
                return abs(b - np.polyval(coef, a))

            return min(v.children, key=lambda c: (lateral(c), c))
    if v.parent is not None:
        incoming = heading_between(dag[v.parent].position, v.position)
    else:
        incoming = v.theta
    return min(
        v.children,
        key=lambda c: (abs(angle_diff(heading_between(v.position, dag[c].position), incoming)), c),
    )


def designate_primaries(dag: LaneDAG) -> None:
    """Reorder every fork's children so the continuation child comes first."""
    for v in dag.vertices.values():
        if v.state == VertexState.FORK and len(v.children) > 1:
            first = continuation_child(dag, v.id)
            v.children.sort(key=lambda c: (c != first, c))


def to_polylines(dag: LaneDAG) -> list[Polyline]:
    """One polyline per maximal chain; a fork's secondary child starts a new
    polyline at the fork position. Output order: roots first, then branches
    in the order their forks are reached."""
    problems = validate(dag)
    if problems:
        raise DagError(f"invalid DAG: {len(problems)} violation(s)", problems)
    starts: list[tuple[int | None, int]] = [(None, r) for r in dag.roots]
    out: list[Polyline] = []
    i = 0
    while i < len(starts):
        fork, vid = starts[i]
        i += 1
        pts = [dag[fork].position] if fork is not None else []
        while True:
            v = dag[vid]
            pts.append(v.position)
            if not v.children:
                break
            if v.state == VertexState.FORK:
                first = primary_child(dag, vid)
                starts.extend((vid, c) for c in v.children if c != first)
                vid = first
            else:
                vid = v.children[0]
        out.append(Polyline(np.array(pts, dtype=float), len(out)))
    return out


def dag_log_score(dag: LaneDAG, headers, field) -> float:
    """Sum of direction, position and state log-probabilities of every
    non-root vertex under ``headers``, replaying the DAG in id order.

    Raises ValueError when a vertex lies outside the field's pixel footprint.
    """
    from .inference import replay_log_terms

    values = np.asarray(getattr(field, "values", field))
    h, w = values.shape
    for v in dag.vertices.values():
        x, y = v.position
        if not (-0.5 <= x <= w - 0.5 and -0.5 <= y <= h - 0.5):
            raise ValueError(f"vertex {v.id} at ({x}, {y}) lies outside the {h}x{w} field")

    return float(sum(sum(t) for t in replay_log_terms(dag, headers, field).values()))


# --- JSON ---------------------------------------------------------------


def to_dict(dag: LaneDAG, polylines: list[Polyline] | None = None) -> dict:
    if polylines is None:
        polylines = to_polylines(dag) if dag.vertices else []
    return {
        "roots": list(dag.roots),
        "vertices": [
            {
                "id": v.id,
                "x": float(v.position.x),
                "y": float(v.position.y),
                "theta": float(v.theta),
                "state": v.state.value,
                "parent": v.parent,
                "children": list(v.children),
            }
            for v in sorted(dag.vertices.values(), key=lambda v: v.id)
        ],
        "polylines": [
            {"id": p.id, "points": [[float(x), float(y)] for x, y in p.points]} for p in polylines
        ],
    }


def from_dict(data: dict) -> tuple[LaneDAG, list[Polyline]]:
    dag = LaneDAG()
    for item in data["vertices"]:
        vid = int(item["id"])
        dag.vertices[vid] = DagVertex(
            vid,
            Point(item["x"], item["y"]),
            float(item["theta"]),
            VertexState(item["state"]),
            None if item["parent"] is None else int(item["parent"]),
            [int(c) for c in item["children"]],
        )
    dag.roots = [int(r) for r in data["roots"]]
    polylines = [Polyline(np.array(p["points"], dtype=float), int(p["id"])) for p in data.get("polylines", [])]
    return dag, polylines


def dumps(dag: LaneDAG, polylines: list[Polyline] | None = None) -> str:
    return jsonfmt.dumps(to_dict(dag, polylines))


def loads(text: str) -> tuple[LaneDAG, list[Polyline]]:
    return from_dict(json.loads(text))
