"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``[criterion N] PASS|FAIL`` line with the measured
numbers (shown even under output capture) before asserting. Run alone with
``pytest tests/test_acceptance.py -v``.
"""

from __future__ import annotations

import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

from lanedag.cli import main as cli_main
from lanedag.dag import VertexState, to_polylines
from lanedag.evaluation import precision_recall
from lanedag.geom import point_segment_distances, rasterize_polyline
from lanedag.headers import DistanceFieldOracle
from lanedag.inference import infer_dag, relabel_scores
from lanedag.losses import chamfer, cosine_loss, densify_weights, dt_l2, focal_normalized
from lanedag.raster import (
    boundary_mask,
    exact_distance_transform,
    field_from_raster,
    inverse_threshold_dt,
    skeleton_endpoints,
    skeletonize,
)
from lanedag.synth import Noise, benchmark_specs, generate

SUITE_SIZE = 100
SUITE_SEED = 0


@pytest.fixture
def report(capsys):
    def emit(n: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {title}: {detail}")

    return emit


def _pred_polylines(dag):
    return to_polylines(dag) if dag.vertices else []


@pytest.fixture(scope="module")
def oracle_suite():
    """The noiseless 100-scene suite with oracle fields and inferred DAGs.

    Only ``infer_dag`` is timed; scene generation and the GT field are
    inputs to oracle-mode inference, not part of it.
    """
    scenes = [generate(s) for s in benchmark_specs(SUITE_SIZE, SUITE_SEED)]
    fields = [inverse_threshold_dt(sc.gt_polylines, sc.raster.values.shape) for sc in scenes]
    headers = DistanceFieldOracle()
    dags = []
    t0 = time.perf_counter()
    for f in fields:
        dags.append(infer_dag(f, headers))
    seconds = time.perf_counter() - t0
    return scenes, fields, dags, seconds


# --- 1 ---------------------------------------------------------------------


def _brute_dt(mask: np.ndarray) -> np.ndarray:
    pts = np.argwhere(mask)
    rr, cc = np.indices(mask.shape)
    best = np.full(mask.shape, np.inf)
    for r, c in pts:
        np.minimum(best, (rr - r) ** 2 + (cc - c) ** 2, out=best)
    return np.sqrt(best)


def test_criterion_1_dt_matches_brute_force(report):
    rng = np.random.default_rng(101)
    mismatches = 0
    t0 = time.perf_counter()
    for _ in range(200):
        h, w = (int(v) for v in rng.integers(1, 65, size=2))
        mask = rng.random((h, w)) < rng.uniform(0.002, 0.2)
        mask[rng.integers(h), rng.integers(w)] = True
        if not np.array_equal(exact_distance_transform(mask), _brute_dt(mask)):
            mismatches += 1
    seconds = time.perf_counter() - t0
    ok = mismatches == 0 and seconds < 10
    report(1, "DT oracle equivalence", ok, f"{mismatches} mismatching masks of 200, {seconds:.2f} s (incl. brute force)")
    assert ok


# --- 2 ---------------------------------------------------------------------


def test_criterion_2_inverse_dt_contract(report):
    rng = np.random.default_rng(202)
    worst_boundary = 0.0
    far_nonzero = 0
    shape = (96, 128)
    for _ in range(50):
        polys = []
        for _ in range(int(rng.integers(1, 4))):
            n = int(rng.integers(2, 6))
            pts = np.column_stack([rng.uniform(0, shape[1] - 1, n), rng.uniform(0, shape[0] - 1, n)])
            polys.append(pts)
        field = inverse_threshold_dt(polys, shape).values
        mask = boundary_mask(polys, shape)
        worst_boundary = max(worst_boundary, float(np.abs(field[mask] - 8.0).max()))
        far = _brute_dt(mask) >= 32
        far_nonzero += int(np.count_nonzero(field[far]))
    ok = worst_boundary <= 1e-9 and far_nonzero == 0
    report(2, "inverse-DT contract", ok, f"max |boundary - 8| = {worst_boundary:.2e}, nonzero pixels >= 32 px: {far_nonzero}")
    assert ok


# --- 3 ---------------------------------------------------------------------


def _random_tree(rng, size=128):
    """Mask of a random tree of straight strokes and its number of leaves.

    Strokes that do not share a node are kept at least 8 px apart so the
    drawn shape really is a tree.
    """
    while True:
        nodes = [np.array([size / 2, size / 2])]
        heading = [rng.uniform(0, 2 * math.pi)]
        edges = []
        frontier = [0]
        while frontier and len(nodes) < 9:
            i = frontier.pop(0)
            k = int(rng.integers(1, 3)) if i else int(rng.integers(2, 4))
            spread = rng.uniform(0.7, 1.2) * (1.0 if i else 2.0)
            for o in rng.choice([-1.0, 0.0, 1.0], size=k, replace=False):
                a = heading[i] + o * spread
                nodes.append(nodes[i] + rng.uniform(22, 34) * np.array([math.cos(a), math.sin(a)]))
                heading.append(a)
                edges.append((i, len(nodes) - 1))
                if rng.random() < 0.85:
                    frontier.append(len(nodes) - 1)
        pts = np.array(nodes)
        if pts.min() < 6 or pts.max() > size - 7:
            continue
        apart = all(
            point_segment_distances(np.linspace(*pts[list(eb)], 60), pts[list(ea)]).min() >= 8
            for a, ea in enumerate(edges)
            for eb in edges[a + 1 :]
            if not set(ea) & set(eb)
        )
        if not apart:
            continue
        degree = np.bincount(np.array(edges).ravel(), minlength=len(nodes))
        mask = np.zeros((size, size), bool)
        for i, j in edges:
            mask |= rasterize_polyline(pts[[i, j]], (size, size))
        mask = ndimage.binary_dilation(mask, iterations=int(rng.integers(1, 3)))
        return mask, int(np.count_nonzero(degree == 1))


def _has_full_block(s: np.ndarray) -> bool:
    h, w = s.shape
    p = np.pad(s, 1)
    full = np.ones((h, w), bool)
    for dr in range(3):
        for dc in range(3):
            full &= p[dr : dr + h, dc : dc + w]
    return bool(full.any())


def test_criterion_3_skeleton_properties(report):
    rng = np.random.default_rng(303)
    width_violations = leaf_violations = 0
    for _ in range(100):
        mask, leaves = _random_tree(rng)
        skel = skeletonize(mask)
        width_violations += _has_full_block(skel)
        leaf_violations += len(skeleton_endpoints(skel)) != leaves
    ok = width_violations == 0 and leaf_violations == 0
    report(3, "skeleton properties", ok, f"unit-width violations {width_violations}, endpoint/leaf mismatches {leaf_violations} (100 trees)")
    assert ok


# --- 4, 5 ------------------------------------------------------------------


def test_criterion_4_topology_fidelity(report, oracle_suite):
    scenes, _, dags, seconds = oracle_suite
    rep = precision_recall([_pred_polylines(d) for d in dags], [s.gt_polylines for s in scenes])
    mismatched = [
        i
        for i, (s, d) in enumerate(zip(scenes, dags))
        if (d.count_state(VertexState.FORK), d.count_state(VertexState.TERMINATE))
        != (s.gt_dag.count_state(VertexState.FORK), s.gt_dag.count_state(VertexState.TERMINATE))
    ]
    ok = rep.topology == 1.0 and not mismatched and seconds < 60
    report(4, "greedy discovery topology", ok,
           f"topology {rep.topology:.4f}, Fork/Terminate count mismatches {len(mismatched)} {mismatched[:5]}, "
           f"inference {seconds:.1f} s")
    assert ok


def test_criterion_5_geometry_fidelity(report, oracle_suite):
    scenes, _, dags, _ = oracle_suite
    rep = precision_recall([_pred_polylines(d) for d in dags], [s.gt_polylines for s in scenes])
    ok = rep.f1[2.0] >= 0.95 and rep.f1[5.0] >= 0.99
    report(5, "greedy discovery geometry", ok, f"F1@2 {rep.f1[2.0]:.4f}, F1@5 {rep.f1[5.0]:.4f}")
    assert ok


# --- 6 ---------------------------------------------------------------------


def test_criterion_6_noise_robustness(report):
    headers = DistanceFieldOracle()
    preds, gts = [], []
    for spec in benchmark_specs(SUITE_SIZE, SUITE_SEED, Noise(0.05, 0.02)):
        scene = generate(spec)
        preds.append(_pred_polylines(infer_dag(field_from_raster(scene.raster), headers)))
        gts.append(scene.gt_polylines)
    rep = precision_recall(preds, gts)
    ok = rep.f1[5.0] >= 0.90 and rep.topology >= 0.90
    report(6, "noise robustness", ok, f"F1@5 {rep.f1[5.0]:.4f}, topology {rep.topology:.4f}")
    assert ok


# --- 7 ---------------------------------------------------------------------


def test_criterion_7_recovery_ablation(report, oracle_suite):
    scenes, fields, _, _ = oracle_suite
    headers = DistanceFieldOracle()
    with_r, without_r = [], []
    for i, (scene, field) in enumerate(zip(scenes, fields)):
        drop = (i % scene.spec.num_lanes,)  # suppress one entry seed, rotating across lanes
        with_r.append(_pred_polylines(infer_dag(field, headers, use_recovery=True, drop_init=drop)))
        without_r.append(_pred_polylines(infer_dag(field, headers, use_recovery=False, drop_init=drop)))
    gts = [s.gt_polylines for s in scenes]
    on, off = precision_recall(with_r, gts), precision_recall(without_r, gts)
    d_recall = 100 * (on.recall[5.0] - off.recall[5.0])
    d_prec = 100 * abs(on.precision[5.0] - off.precision[5.0])
    ok = d_recall >= 10 and d_prec < 3
    report(7, "recovery ablation", ok,
           f"R@5 {100 * on.recall[5.0]:.1f} -> {100 * off.recall[5.0]:.1f} without recovery (drop {d_recall:.1f} pts), "
           f"|dP@5| {d_prec:.2f} pts")
    assert ok


# --- 8 ---------------------------------------------------------------------


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(numeric)), float(np.linalg.norm(analytic)), 1e-8)
    return float(np.linalg.norm(analytic - numeric)) / scale


def _central(fn, x: np.ndarray, h: float) -> np.ndarray:
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _nearest_margin(a: np.ndarray, b: np.ndarray) -> float:
    d = np.sort(np.hypot(*(a[:, None] - b[None]).transpose(2, 0, 1)), axis=1)
    return float((d[:, 1] - d[:, 0]).min()) if d.shape[1] > 1 else math.inf


def _chamfer_input(rng):
    """Random polylines away from nearest-point ties and subdivision-count
    changes, where the Chamfer sum is differentiable."""
    while True:
        P = np.cumsum(rng.uniform(0.5, 3.0, size=(int(rng.integers(2, 5)), 2)), axis=0)
        Q = np.cumsum(rng.uniform(0.5, 3.0, size=(int(rng.integers(2, 5)), 2)), axis=0) + rng.normal(0, 1.5, 2)
        pd, qd = densify_weights(P, 1.0)[0], densify_weights(Q, 1.0)[0]
        seg = np.hypot(*np.diff(P, axis=0).T)
        frac = np.abs(seg - np.round(seg))
        if _nearest_margin(pd, qd) > 1e-3 and _nearest_margin(qd, pd) > 1e-3 and frac.min() > 1e-3:
            if np.hypot(*(pd[:, None] - qd[None]).transpose(2, 0, 1)).min() > 1e-3:
                return P, Q


def test_criterion_8_gradient_checks(report):
    rng = np.random.default_rng(808)
    worst = {"chamfer": 0.0, "cosine": 0.0, "focal_normalized": 0.0, "dt_l2": 0.0}
    for _ in range(100):
        P, Q = _chamfer_input(rng)
        worst["chamfer"] = max(worst["chamfer"], _rel_err(chamfer(P, Q).grad, _central(lambda x: chamfer(x, Q).value, P, 1e-6)))

        p, g = rng.normal(size=2), rng.normal(size=2)
        worst["cosine"] = max(worst["cosine"], _rel_err(cosine_loss(p, g).grad, _central(lambda x: cosine_loss(x, g).value, p, 1e-6)))

        n, k = int(rng.integers(1, 7)), int(rng.integers(2, 5))
        z = rng.normal(0, 2, size=(n, k))
        y = rng.integers(0, k, size=n)
        gamma = float(rng.uniform(0, 3))
        analytic = focal_normalized(_softmax(z), y, gamma).grad
        numeric = _central(lambda x: focal_normalized(_softmax(x), y, gamma).value, z, 1e-6)
        worst["focal_normalized"] = max(worst["focal_normalized"], _rel_err(analytic, numeric))

        a, b = rng.uniform(0, 10, size=(5, 6)), rng.uniform(0, 10, size=(5, 6))
        worst["dt_l2"] = max(worst["dt_l2"], _rel_err(dt_l2(a, b).grad, _central(lambda x: dt_l2(x, b).value, a, 1e-4)))
    ok = all(v <= 1e-4 for v in worst.values())
    report(8, "loss gradient checks", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (worst relative error of 100)")
    assert ok


# --- 9 ---------------------------------------------------------------------


def _hand_fixtures():
    def line(y, x0=0.0, x1=100.0):
        return np.array([(x0, y), (x1, y)])

    return [
        ([[line(4.0)]], [[line(0.0)]]),
        ([[line(1.0), line(40.0, 10, 60)]], [[line(0.0), line(42.0)]]),
        ([[line(2.5, 0, 50), line(9.0, 50, 100)], [line(30.0)]], [[line(0.0)], [line(31.0), line(80.0)]]),
        ([[np.array([(0, 0), (50, 6), (100, 0)])]], [[line(0.0)]]),
        ([[]], [[line(0.0)]]),
    ]


def test_criterion_9_metric_self_consistency(report, oracle_suite):
    scenes, _, dags, _ = oracle_suite
    fixtures = _hand_fixtures() + [([_pred_polylines(d)], [s.gt_polylines]) for s, d in zip(scenes, dags)]
    thresholds = (0.5, 1.0, 2.0, 3.0, 5.0, 10.0, 20.0)
    monotone_fail = swap_fail = 0
    for preds, gts in fixtures:
        a = precision_recall(preds, gts, thresholds)
        b = precision_recall(gts, preds, thresholds)
        for d in (a.precision, a.recall):
            vals = [d[t] for t in thresholds]
            monotone_fail += vals != sorted(vals)
        swap_fail += a.precision != b.recall or a.recall != b.precision
    chamfer_self = max(
        abs(chamfer(p.points, p.points).value) for s in scenes[:20] for p in s.gt_polylines
    )
    ok = monotone_fail == 0 and swap_fail == 0 and chamfer_self == 0.0
    report(9, "metric self-consistency", ok,
           f"{len(fixtures)} fixtures: monotonicity failures {monotone_fail}, swap failures {swap_fail}, "
           f"max chamfer(P,P) {chamfer_self}")
    assert ok


# --- 10 --------------------------------------------------------------------


def test_criterion_10_greedy_certificate(report, oracle_suite):
    _, fields, dags, _ = oracle_suite
    headers = DistanceFieldOracle()
    violations = relabellings = 0
    worst_gap = math.inf
    for field, dag in zip(fields, dags):
        base, scores = relabel_scores(dag, headers, field)
        relabellings += len(scores)
        for s in scores.values():
            worst_gap = min(worst_gap, base - s)
            violations += s > base
    ok = violations == 0
    report(10, "greedy certificate", ok,
           f"{relabellings} single-vertex relabellings over {len(dags)} DAGs, violations {violations}, "
           f"smallest margin {worst_gap:.3g}")
    assert ok


# --- 11 --------------------------------------------------------------------


def _pipeline(root: Path) -> None:
    scene = root / "scene"
    scene.mkdir(parents=True)
    steps = [
        ["synth", "--seed", "21", "--lanes", "3", "--events", "fork@12:40,merge@60:40", "--length-m", "110",
         "--noise-sigma", "0.05", "--dropout", "0.02", "--out", str(scene)],
        ["infer", "--raster", str(scene / "raster.png"), "--from-gt-dt", "--out", str(root / "oracle.json")],
        ["infer", "--raster", str(scene / "raster.png"), "--out", str(root / "noisy.json")],
        ["eval", "--pred", str(root / "oracle.json"), "--gt", str(scene / "gt.json"), "--out", str(root / "report.json")],
        ["render", "--raster", str(scene / "raster.png"), "--pred", str(root / "oracle.json"),
         "--gt", str(scene / "gt.json"), "--layout", "side-by-side", "--out", str(root / "figure.png")],
    ]
    for argv in steps:
        assert cli_main(argv) == 0, argv


def test_criterion_11_reproducibility(report, tmp_path, capsys):
    _pipeline(tmp_path / "a")
    _pipeline(tmp_path / "b")
    capsys.readouterr()

    def outputs(root):
        # run manifests record wall-clock time and absolute paths by design
        return sorted(
            p.relative_to(root)
            for p in root.rglob("*")
            if p.is_file() and p.suffix in (".json", ".png", ".csv") and "manifest" not in p.name
        )

    files_a, files_b = outputs(tmp_path / "a"), outputs(tmp_path / "b")
    differing = [str(p) for p in files_a if (tmp_path / "a" / p).read_bytes() != (tmp_path / "b" / p).read_bytes()]
    ok = files_a == files_b and not differing and len(files_a) >= 8
    report(11, "reproducibility", ok, f"{len(files_a)} JSON/PNG/CSV outputs compared, differing: {differing or 'none'}")
    assert ok
