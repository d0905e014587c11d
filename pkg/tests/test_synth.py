from __future__ import annotations

import re

import numpy as np
import pytest
from scipy import ndimage

from lanedag.dag import VertexState, to_polylines, validate
from lanedag.raster import boundary_mask, exact_distance_transform
from lanedag.synth import (
    BACKGROUND_INTENSITY,
    Event,
    Noise,
    SceneSpec,
    SpecError,
    benchmark_specs,
    generate,
    parse_events,
    scene_from_disk,
    scene_to_disk,
)

from conftest import short_scene


def test_three_lanes_give_four_ridges_74px_apart(straight_scene):
    col = straight_scene.raster.values[:, 300]
    labels, n = ndimage.label(col >= 0.8)
    assert n == 4
    centres = ndimage.center_of_mass(col >= 0.8, labels, range(1, n + 1))
    np.testing.assert_allclose(np.diff([c[0] for c in centres]), 74.0, atol=0.5)


def test_fork_scene_has_one_fork_with_two_children(fork_scene):
    forks = [v for v in fork_scene.gt_dag.vertices.values() if v.state == VertexState.FORK]
    assert len(forks) == 1 and len(forks[0].children) == 2
    assert fork_scene.gt_dag.count_state(VertexState.TERMINATE) == 0


def test_merge_scene_has_one_terminate(merge_scene):
    assert merge_scene.gt_dag.count_state(VertexState.TERMINATE) == 1
    assert merge_scene.gt_dag.count_state(VertexState.FORK) == 0


def test_generation_is_deterministic():
    spec = SceneSpec(seed=11, num_lanes=2, length_m=60.0, events=(Event("fork", 10.0, 40.0),),
                     noise=Noise(0.05, 0.02))
    a, b = generate(spec), generate(spec)
    np.testing.assert_array_equal(a.raster.values, b.raster.values)
    assert a.gt_dag == b.gt_dag
    assert not np.array_equal(a.raster.values, generate(SceneSpec(**{**spec.__dict__, "seed": 12})).raster.values)


def test_generated_dag_validates_and_matches_polylines(fork_scene, merge_scene):
    for scene in (fork_scene, merge_scene):
        assert validate(scene.gt_dag) == []
        assert to_polylines(scene.gt_dag) == scene.gt_polylines
        for v in scene.gt_dag.vertices.values():
            n = {VertexState.FORK: 2, VertexState.TERMINATE: 0}.get(v.state)
            assert n is None or len(v.children) == n
            assert v.state != VertexState.NORMAL or len(v.children) <= 1


def test_noiseless_intensity_bounds(fork_scene):
    v = fork_scene.raster.values
    mask = boundary_mask(fork_scene.gt_polylines, v.shape)
    assert v[mask].min() >= 0.8
    far = exact_distance_transform(mask) > 2
    road_or_bg = v[far]
    assert set(np.unique(road_or_bg)) <= {BACKGROUND_INTENSITY, 0.35}
    assert v[:5].max() <= 0.1  # rows above the road are background


def test_curvature_bound(fork_scene):
    for p in fork_scene.gt_polylines:
        pts = p.points
        if len(pts) < 3:
            continue
        h = np.unwrap(np.arctan2(*np.diff(pts, axis=0)[:, ::-1].T))
        seg = np.hypot(*np.diff(pts, axis=0).T)
        assert np.max(np.abs(np.diff(h)) / seg[1:]) < 0.02


def test_parse_events():
    assert parse_events("fork@150,merge@300:60") == (Event("fork", 150.0), Event("merge", 300.0, 60.0))
    assert parse_events("") == ()


@pytest.mark.parametrize("bad", ["fork150", "split@20", "fork@-3", "merge@10:"])
def test_malformed_event_names_token(bad):
    with pytest.raises(SpecError, match=re.escape(bad)):
        parse_events(f"fork@10,{bad}")


def test_infeasible_event_reports_index():
    spec = SceneSpec(num_lanes=2, length_m=60.0,
                     events=(Event("fork", 5.0, 20.0), Event("merge", 10.0, 20.0)))
    with pytest.raises(SpecError) as err:
        generate(spec)
    assert err.value.event_index == 1
    with pytest.raises(SpecError) as err:
        generate(SceneSpec(num_lanes=2, length_m=60.0, events=(Event("fork", 50.0, 40.0),)))
    assert err.value.event_index == 0


def test_merge_cannot_remove_last_lane():
    spec = SceneSpec(num_lanes=2, length_m=200.0,
                     events=(Event("merge", 10.0, 40.0), Event("merge", 60.0, 40.0)))
    with pytest.raises(SpecError) as err:
        generate(spec)
    assert err.value.event_index == 1


def test_invalid_sinusoid_rejected():
    with pytest.raises(SpecError):
        generate(SceneSpec(length_m=60.0, wavelength_m=100.0))
    with pytest.raises(SpecError):
        generate(SceneSpec(length_m=60.0, amplitude_m=11.0))


def test_disk_round_trip(tmp_path, fork_scene):
    files = scene_to_disk(fork_scene, tmp_path)
    assert sorted(p.name for p in files) == ["gt.json", "manifest.json", "raster.json", "raster.png"]
    back = scene_from_disk(tmp_path)
    assert np.abs(back.raster.values - fork_scene.raster.values).max() <= 1 / 65535
    assert back.gt_dag == fork_scene.gt_dag
    assert back.gt_polylines == fork_scene.gt_polylines
    assert back.spec == fork_scene.spec


def test_manifest_lists_three_files(tmp_path, merge_scene):
    import json

    scene_to_disk(merge_scene, tmp_path)
    assert len(json.loads((tmp_path / "manifest.json").read_text())["files"]) == 3


def test_missing_directory_named(tmp_path, fork_scene):
    missing = tmp_path / "nope"
    with pytest.raises(FileNotFoundError, match="nope"):
        scene_to_disk(fork_scene, missing)


def test_benchmark_specs_shape():
    specs = benchmark_specs(30, seed=2)
    assert specs == benchmark_specs(30, seed=2)
    assert [len(s.events) for s in specs[:6]] == [0, 1, 2, 0, 1, 2]
    assert all(s.num_lanes in (2, 3) for s in specs)
    for s in specs[:9]:
        generate(s)  # every spec is feasible


def test_short_scene_helper_is_feasible():
    assert short_scene(lanes=2).gt_dag.roots
