from __future__ import annotations

import numpy as np
import pytest

from lanedag.raster import inverse_threshold_dt
from lanedag.synth import Event, SceneSpec, generate


def short_scene(events=(), lanes=3, seed=3, length_m=60.0, **kw):
    spec = SceneSpec(seed=seed, num_lanes=lanes, length_m=length_m, events=tuple(events), **kw)
    return generate(spec)


def oracle_field(scene):
    return inverse_threshold_dt(scene.gt_polylines, scene.raster.values.shape)


@pytest.fixture(scope="session")
def straight_scene():
    return short_scene(amplitude_m=0.0)


@pytest.fixture(scope="session")
def fork_scene():
    return short_scene([Event("fork", 10.0, 40.0)], lanes=2, seed=5)


@pytest.fixture(scope="session")
def merge_scene():
    return short_scene([Event("merge", 10.0, 40.0)], lanes=2, seed=6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
