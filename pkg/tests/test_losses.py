from __future__ import annotations

import math

import numpy as np
import pytest

from lanedag.geom import densify_points
from lanedag.losses import (
    LossError,
    LossValue,
    LossWeights,
    chamfer,
    cosine_loss,
    densify_weights,
    dt_l2,
    focal_normalized,
    total_loss,
)


def brute_chamfer(P, Q, spacing=1.0):
    a, b = densify_points(P, spacing), densify_points(Q, spacing)
    d = np.hypot(*(a[:, None] - b[None]).transpose(2, 0, 1))
    return d.min(axis=1).sum() + d.min(axis=0).sum()


def softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def central_diff(fn, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def test_chamfer_identity():
    P = np.array([(0.0, 0.0), (4.0, 3.0), (9.0, 3.0)])
    out = chamfer(P, P)
    assert out.value == 0.0 and not out.grad.any()


def test_chamfer_parallel_segments():
    P = np.array([(0.0, 0.0), (10.0, 0.0)])
    Q = P + (0.0, 3.0)
    assert chamfer(P, Q).value == pytest.approx(66.0)


def test_chamfer_symmetric_and_matches_brute_force(rng):
    for _ in range(10):
        P = np.cumsum(rng.uniform(1, 6, size=(4, 2)), axis=0)
        Q = np.cumsum(rng.uniform(1, 6, size=(5, 2)), axis=0)
        assert chamfer(P, Q).value == pytest.approx(brute_chamfer(P, Q), rel=1e-12)
        assert chamfer(P, Q).value == chamfer(Q, P).value


def test_chamfer_gradient_matches_finite_differences(rng):
    P = np.array([(0.3, 0.2), (7.1, 2.4), (12.2, 1.3)])
    Q = np.array([(0.0, 2.7), (6.6, 5.9), (13.0, 4.2)])
    g = chamfer(P, Q).grad
    num = central_diff(lambda x: chamfer(x, Q).value, P)
    np.testing.assert_allclose(g, num, rtol=1e-4, atol=1e-6)


def test_chamfer_rejects_degenerate():
    with pytest.raises(LossError):
        chamfer(np.array([(0.0, 0.0)]), np.array([(0.0, 0.0), (1.0, 0.0)]))
    with pytest.raises(LossError):
        chamfer(np.array([(0.0, 0.0), (1.0, 0.0)]), np.array([(0.0, 0.0), (1.0, 0.0)]), spacing=0)


def test_densify_weights_reproduce_densify(rng):
    pts = np.cumsum(rng.uniform(0.5, 4, size=(5, 2)), axis=0)
    dense, idx, t = densify_weights(pts, 0.7)
    np.testing.assert_allclose(dense, densify_points(pts, 0.7), atol=1e-12)
    np.testing.assert_allclose(dense, (1 - t)[:, None] * pts[idx] + t[:, None] * pts[idx + 1])


def test_cosine_examples_and_gradient(rng):
    assert cosine_loss((1, 0), (2, 0)).value == pytest.approx(0.0)
    assert cosine_loss((1, 0), (-3, 0)).value == pytest.approx(2.0)
    for _ in range(10):
        p = rng.normal(size=2)
        g = rng.normal(size=2)
        num = central_diff(lambda x: cosine_loss(x, g).value, p)
        np.testing.assert_allclose(cosine_loss(p, g).grad, num, atol=1e-6)
    with pytest.raises(LossError):
        cosine_loss((0, 0), (1, 0))


def test_focal_examples():
    probs = np.array([[1.0, 0.0], [1.0, 0.0], [0.5, 0.5]])
    assert focal_normalized(probs, np.array([0, 0, 0])).value == pytest.approx(math.log(2))
    uniform = np.full((4, 3), 1 / 3)
    assert focal_normalized(uniform, np.array([0, 1, 2, 0]), gamma=0).value == pytest.approx(math.log(3))


def test_focal_gamma_zero_is_mean_cross_entropy(rng):
    p = softmax(rng.normal(size=(6, 3)))
    y = rng.integers(0, 3, size=6)
    ce = -np.log(p[np.arange(6), y]).mean()
    assert focal_normalized(p, y, gamma=0).value == pytest.approx(ce)


@pytest.mark.parametrize("gamma", [0.0, 0.5, 2.0, 3.0])
def test_focal_logit_gradient(rng, gamma):
    z = rng.normal(size=(5, 3))
    y = rng.integers(0, 3, size=5)
    g = focal_normalized(softmax(z), y, gamma).grad
    num = central_diff(lambda x: focal_normalized(softmax(x), y, gamma).value, z)
    np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-8)


def test_focal_clamps_zero_target():
    out = focal_normalized(np.array([[1.0, 0.0]]), np.array([1]))
    assert "target-probability-clamped" in out.flags
    assert math.isfinite(out.value)


def test_focal_all_perfect_is_zero():
    out = focal_normalized(np.array([[1.0, 0.0]]), np.array([0]))
    assert out.value == 0.0 and not out.grad.any()


def test_focal_rejects_bad_rows():
    with pytest.raises(LossError):
        focal_normalized(np.array([[0.7, 0.7]]), np.array([0]))
    with pytest.raises(LossError):
        focal_normalized(np.array([[0.5, 0.5]]), np.array([2]))


def test_dt_l2(rng):
    a = rng.random((6, 7))
    assert dt_l2(a, a).value == 0.0
    assert dt_l2(a + 1, a).value == pytest.approx(1.0)
    b = rng.random((6, 7))
    num = central_diff(lambda x: dt_l2(x, b).value, a)
    np.testing.assert_allclose(dt_l2(a, b).grad, num, atol=1e-6)
    with pytest.raises(LossError):
        dt_l2(a, b[:, :3])


def test_total_loss():
    assert total_loss((0, 0, 0, 0)) == 0.0
    assert total_loss((1, 1, 1, 1)) == 121.0
    parts = {"chamfer": 2.0, "cosine": 0.5, "focal": LossValue(1.0, np.zeros(1)), "dt": 0.1}
    base = total_loss(parts)
    assert total_loss({**parts, "cosine": 1.5}) - base == pytest.approx(100.0)
    with pytest.raises(FloatingPointError, match="focal"):
        total_loss((1, 1, math.inf, 1))
    with pytest.raises(LossError):
        total_loss({"chamfer": 1})


def test_weights_validation():
    assert LossWeights().as_tuple() == (1.0, 100.0, 10.0, 10.0)
    with pytest.raises(LossError):
        LossWeights(lambda_dt=-1)
