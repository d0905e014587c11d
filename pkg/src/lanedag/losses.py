"""Training objectives with hand-derived gradients.

Nothing here is optimised inside the package; the functions pin down the
loss contracts (and their gradients, checked against finite differences) so
a learned header suite can later be trained against the same definitions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geom import Polyline, segment_subdivisions

PROB_SUM_TOL = 1e-6
PROB_FLOOR = 1e-12
TERMS = ("chamfer", "cosine", "focal", "dt")


class LossError(ValueError):
    """Invalid loss inputs."""


@dataclass
class LossValue:
    value: float
    grad: np.ndarray
    flags: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class LossWeights:
    lambda_chamfer: float = 1.0
    lambda_cosine: float = 100.0
    lambda_focal: float = 10.0
    lambda_dt: float = 10.0
    focal_gamma: float = 2.0

    def __post_init__(self):
        for name in ("lambda_chamfer", "lambda_cosine", "lambda_focal", "lambda_dt", "focal_gamma"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise LossError(f"{name} must be a finite non-negative number, got {v}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.lambda_chamfer, self.lambda_cosine, self.lambda_focal, self.lambda_dt)


# --- Chamfer -----------------------------------------------------------------


def _vertices(p) -> np.ndarray:
    pts = p.points if isinstance(p, Polyline) else np.asarray(p, dtype=float).reshape(-1, 2)
    if len(pts) < 2:
        raise LossError(f"chamfer needs polylines with at least 2 points, got {len(pts)}")
    if np.any(np.all(np.diff(pts, axis=0) == 0.0, axis=1)):
        raise LossError("chamfer polyline has a zero-length segment")
    return pts


def densify_weights(points: np.ndarray, spacing: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dense samples as convex combinations of the original vertices.

    Returns ``(dense, idx, t)`` with ``dense[k] = (1 - t[k]) * points[idx[k]]
    + t[k] * points[idx[k] + 1]``; the same points ``densify_points`` yields.
    The subdivision counts are piecewise constant in the vertices, so the
    weights are fixed under small perturbations away from count changes.
    """
    if not spacing > 0:
        raise LossError(f"spacing must be positive, got {spacing}")
    counts = segment_subdivisions(points, spacing)
    idx = np.repeat(np.arange(len(counts)), counts)
    t = np.concatenate([np.arange(n, dtype=float) / n for n in counts])
    idx = np.append(idx, len(points) - 2)
    t = np.append(t, 1.0)
    a, b = points[idx], points[idx + 1]
    return a + (b - a) * t[:, None], idx, t


def _nearest(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of, and offset to, the nearest ``dst`` point for every ``src``
    point; exact ties go to the lower index."""
    diff = src[:, None, :] - dst[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    j = np.argmin(d2, axis=1)
    return j, diff[np.arange(len(src)), j]


def _unit(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = np.hypot(v[:, 0], v[:, 1])
    safe = np.where(n > 0, n, 1.0)
    return n, np.where(n[:, None] > 0, v / safe[:, None], 0.0)


def chamfer(P, Q, spacing: float = 1.0) -> LossValue:
    """Symmetric Chamfer sum between densified polylines.

    ``value = sum_i min_q |p_i - q| + sum_j min_p |p - q_j|``. ``grad`` is the
    (sub)gradient with respect to P's original vertices, with zero-length
    offsets contributing nothing.
    """
    p_pts, q_pts = _vertices(P), _vertices(Q)
    pd, pidx, pt = densify_weights(p_pts, spacing)
    qd, _, _ = densify_weights(q_pts, spacing)

    _, off_pq = _nearest(pd, qd)  # p_i - q*(i)
    jq, off_qp = _nearest(qd, pd)  # q_j - p*(j)
    n_pq, u_pq = _unit(off_pq)
    n_qp, u_qp = _unit(off_qp)
    value = float(n_pq.sum() + n_qp.sum())

    g_dense = u_pq.copy()
    # the second sum pulls its nearest dense P point toward q_j
    np.add.at(g_dense, jq, -u_qp)
    grad = np.zeros_like(p_pts)
    np.add.at(grad, pidx, g_dense * (1.0 - pt)[:, None])
    np.add.at(grad, pidx + 1, g_dense * pt[:, None])
    return LossValue(value, grad)


# --- cosine ------------------------------------------------------------------


def cosine_loss(pred, gt) -> LossValue:
    """``1 - <pred/|pred|, gt/|gt|>`` with the gradient w.r.t. ``pred``."""
    p = np.asarray(pred, dtype=float).reshape(2)
    g = np.asarray(gt, dtype=float).reshape(2)
    np_, ng = float(np.hypot(*p)), float(np.hypot(*g))
    if np_ == 0.0 or ng == 0.0:
        raise LossError("cosine loss of a zero vector is undefined")
    ph, gh = p / np_, g / ng
    c = float(ph @ gh)
    grad = -(gh - ph * c) / np_
    return LossValue(1.0 - c, grad)


# --- focal -------------------------------------------------------------------


def focal_normalized(probs, targets, gamma: float = 2.0) -> LossValue:
    """Focal loss normalised by the sum of focal weights.

    With ``p_k`` the probability of sample k's target class,
    ``w_k = (1 - p_k)^gamma`` and ``l_k = -w_k log p_k``, the value is
    ``sum l_k / sum w_k``. ``grad`` is taken w.r.t. the logits behind
    ``probs`` (softmax), differentiating through the denominator too. When
    every weight is zero the loss is 0 with a zero gradient. Target
    probabilities of 0 are floored at 1e-12 and flagged.
    """
    p = np.asarray(probs, dtype=float)
    y = np.asarray(targets)
    if p.ndim != 2 or y.shape != (p.shape[0],):
        raise LossError(f"probs must be (n, classes) with n targets, got {p.shape} and {y.shape}")
    if gamma < 0:
        raise LossError(f"gamma must be non-negative, got {gamma}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > PROB_SUM_TOL):
        raise LossError("every probability row must be non-negative and sum to 1")
    if not np.issubdtype(y.dtype, np.integer) or np.any((y < 0) | (y >= p.shape[1])):
        raise LossError("targets must be class indices")
    rows = np.arange(len(y))
    pt = p[rows, y]
    flags = []
    if np.any(pt <= 0):
        flags.append("target-probability-clamped")
    pt = np.maximum(pt, PROB_FLOOR)
    q = 1.0 - pt
    w = q**gamma
    W = float(w.sum())
    if W == 0.0:
        return LossValue(0.0, np.zeros_like(p), flags)
    logp = np.log(pt)
    L = float(-(w * logp).sum())
    value = L / W

    # dw/dp = -gamma q^(gamma-1); guarded so q = 0 gives 0 for every gamma
    if gamma == 0:
        dw = np.zeros_like(q)
    else:
        dw = np.where(q > 0, -gamma * np.power(np.where(q > 0, q, 1.0), gamma - 1.0), 0.0)
    dl = -dw * logp - w / pt
    g_p = (dl - value * dw) / W  # dV/dp_k
    # softmax Jacobian: dp_t/dz_j = p_t (delta_tj - p_j)
    grad = -(g_p * pt)[:, None] * p
    grad[rows, y] += g_p * pt
    return LossValue(value, grad, flags)


# --- distance-transform regression -------------------------------------------


def dt_l2(pred, gt) -> LossValue:
    """Mean squared error over all pixels and its gradient ``2 (pred - gt) / N``."""
    a = np.asarray(getattr(pred, "values", pred), dtype=float)
    b = np.asarray(getattr(gt, "values", gt), dtype=float)
    if a.shape != b.shape:
        raise LossError(f"field shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise LossError("dt_l2 of empty fields is undefined")
    d = a - b
    return LossValue(float(np.mean(d * d)), 2.0 * d / d.size)


# --- weighted sum ------------------------------------------------------------


def total_loss(parts, weights: LossWeights | None = None) -> float:
    """``l1*chamfer + l2*cosine + l3*focal + l4*dt``.

    ``parts`` is a mapping with keys chamfer, cosine, focal and dt, or a
    sequence in that order; entries may be numbers or :class:`LossValue`.
    """
    weights = weights or LossWeights()
    if isinstance(parts, Mapping):
        missing = [k for k in TERMS if k not in parts]
        if missing:
            raise LossError(f"missing loss terms: {missing}")
        vals = [parts[k] for k in TERMS]
    elif isinstance(parts, Sequence) and len(parts) == len(TERMS):
        vals = list(parts)
    else:
        raise LossError(f"expected the four terms {TERMS}")
    total = 0.0
    for name, v, lam in zip(TERMS, vals, weights.as_tuple()):
        x = float(v.value if isinstance(v, LossValue) else v)
        if not np.isfinite(x):
            raise FloatingPointError(f"loss term {name!r} is not finite ({x})")
        total += lam * x
    return total
