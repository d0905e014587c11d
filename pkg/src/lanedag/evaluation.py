"""Polyline precision/recall/F1 at pixel thresholds and topology correctness.

Both sides are densified at 1 px. A predicted point counts toward precision
at threshold t when its exact distance to some GT polyline is at most t;
recall swaps the roles. Counts are pooled over all images before dividing.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .geom import Polyline, densify_points, point_segment_distances

DEFAULT_THRESHOLDS = (2.0, 3.0, 5.0, 10.0)
TOPOLOGY_RADIUS_PX = 20.0


def parse_thresholds(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ValueError(f"bad threshold list {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise ValueError(f"thresholds must be non-negative, got {text!r}")
    return vals


def _pts(p) -> np.ndarray:
    return p.points if isinstance(p, Polyline) else np.asarray(p, dtype=float)


def _dense(polys) -> list[np.ndarray]:
    return [densify_points(_pts(p), 1.0) for p in polys]


def distance_table(src_dense: list[np.ndarray], dst_polys) -> np.ndarray:
    """Distances from every densified source point to every destination
    polyline: shape (total source points, number of destination polylines)."""
    n = sum(len(d) for d in src_dense)
    out = np.full((n, len(dst_polys)), np.inf)
    if n == 0:
        return out
    allp = np.concatenate(src_dense)
    for j, q in enumerate(dst_polys):
        out[:, j] = point_segment_distances(allp, _pts(q))
    return out


@dataclass
class ImageTerms:
    pred_points: int
    gt_points: int
    pred_hits: dict[float, int]
    gt_hits: dict[float, int]
    gt_count: int
    correct_count: int
    assignments: list[int]  # GT index per predicted polyline (-1: nothing within radius)

    def to_dict(self) -> dict:
        return {
            "pred_points": self.pred_points,
            "gt_points": self.gt_points,
            "pred_hits": {_key(t): v for t, v in self.pred_hits.items()},
            "gt_hits": {_key(t): v for t, v in self.gt_hits.items()},
            "gt_count": self.gt_count,
            "correct_count": self.correct_count,
            "assignments": list(self.assignments),
        }


def _key(t: float) -> str:
    return f"{t:g}"


def _assign(table: np.ndarray, sizes: list[int], radius: float) -> list[int]:
    """GT index with the most of a prediction's points within ``radius``
    (ties to the smaller index; -1 when no point is that close)."""
    out = []
    start = 0
    for n in sizes:
        block = table[start : start + n]
        start += n
        if block.shape[1] == 0:
            out.append(-1)
            continue
        counts = np.count_nonzero(block <= radius, axis=0)
        out.append(int(np.argmax(counts)) if counts.max() > 0 else -1)
    return out


def image_terms(preds, gts, thresholds=DEFAULT_THRESHOLDS, min_cover: float | None = None) -> ImageTerms:
    pd = _dense(preds)
    gd = _dense(gts)
    p2g = distance_table(pd, gts)
    g2p = distance_table(gd, preds)
    pmin = p2g.min(axis=1) if p2g.shape[1] else np.full(len(p2g), np.inf)
    gmin = g2p.min(axis=1) if g2p.shape[1] else np.full(len(g2p), np.inf)
    assignments = _assign(p2g, [len(d) for d in pd], TOPOLOGY_RADIUS_PX)
    correct = 0
    g_offsets = np.cumsum([0] + [len(d) for d in gd])
    for j in range(len(gts)):
        mine = [i for i, a in enumerate(assignments) if a == j]
        if len(mine) != 1:
            continue
        if min_cover is not None:
            rows = g2p[g_offsets[j] : g_offsets[j + 1], mine[0]]
            if np.mean(rows <= TOPOLOGY_RADIUS_PX) < min_cover:
                continue
        correct += 1
    return ImageTerms(
        pred_points=len(pmin),
        gt_points=len(gmin),
        pred_hits={float(t): int(np.count_nonzero(pmin <= t)) for t in thresholds},
        gt_hits={float(t): int(np.count_nonzero(gmin <= t)) for t in thresholds},
        gt_count=len(gts),
        correct_count=correct,
        assignments=assignments,
    )


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    precision: dict[float, float]
    recall: dict[float, float]
    f1: dict[float, float]
    gt_count: int
    correct_count: int
    per_image: list[ImageTerms] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    @property
    def topology(self) -> float:
        return self.correct_count / self.gt_count if self.gt_count else 0.0

    def to_dict(self) -> dict:
        return {
            "thresholds": [float(t) for t in self.thresholds],
            "precision": {_key(t): v for t, v in self.precision.items()},
            "recall": {_key(t): v for t, v in self.recall.items()},
            "f1": {_key(t): v for t, v in self.f1.items()},
            "topology": {
                "gt_count": self.gt_count,
                "correct_count": self.correct_count,
                "fraction": self.topology,
            },
            "per_image": [t.to_dict() for t in self.per_image],
            "flags": list(self.flags),
        }

    def to_csv(self, method: str = "ours") -> str:
        """One row in the layout precision@t..., recall@t..., F1@t..., topology (percent)."""
        ts = self.thresholds
        head = ["method"] + [f"P@{_key(t)}" for t in ts] + [f"R@{_key(t)}" for t in ts]
        head += [f"F1@{_key(t)}" for t in ts] + ["topology"]
        row = [method]
        for d in (self.precision, self.recall, self.f1):
            row += [f"{100 * d[t]:.1f}" for t in ts]
        row.append(f"{100 * self.topology:.1f}")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(head)
        w.writerow(row)
        return buf.getvalue()


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def aggregate(terms: list[ImageTerms], thresholds) -> EvalReport:
    ts = tuple(float(t) for t in thresholds)
    pp = sum(t.pred_points for t in terms)
    gp = sum(t.gt_points for t in terms)
    flags = []
    if pp == 0:
        flags.append("precision-undefined")
    if gp == 0:
        flags.append("recall-undefined")
    prec = {t: (sum(x.pred_hits[t] for x in terms) / pp if pp else 0.0) for t in ts}
    rec = {t: (sum(x.gt_hits[t] for x in terms) / gp if gp else 0.0) for t in ts}
    return EvalReport(
        thresholds=ts,
        precision=prec,
        recall=rec,
        f1={t: _f1(prec[t], rec[t]) for t in ts},
        gt_count=sum(t.gt_count for t in terms),
        correct_count=sum(t.correct_count for t in terms),
        per_image=list(terms),
        flags=flags,
    )


def precision_recall(preds, gts, thresholds=DEFAULT_THRESHOLDS, min_cover: float | None = None) -> EvalReport:
    """Evaluate aligned per-image lists of predicted and GT polyline sets."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction sets for {len(gts)} GT sets")
    terms = [image_terms(p, g, thresholds, min_cover) for p, g in zip(preds, gts)]
    return aggregate(terms, thresholds)


def topology_correctness(preds, gts, min_cover: float | None = None) -> tuple[float, list[list[int]]]:
    """Fraction of GT boundaries with exactly one assigned prediction, and
    the per-image assignment of every predicted polyline."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction sets for {len(gts)} GT sets")
    terms = [image_terms(p, g, (), min_cover) for p, g in zip(preds, gts)]
    total = sum(t.gt_count for t in terms)
    frac = sum(t.correct_count for t in terms) / total if total else 0.0
    return frac, [t.assignments for t in terms]
