"""Procedural highway scenes with forks and merges.

Boundaries run left to right (+x is the direction of travel). All boundaries
share one low-frequency lateral sinusoid, so they stay parallel except where
an event ramps one of them. Events always act on the bottom-most boundary:

* ``fork``: the bottom boundary splits; the new branch moves one lane width
  further down along a smoothstep ramp and carries on from there.
* ``merge``: the bottom boundary ramps up onto the one above and ends there.

Random streams: ``SeedSequence(seed).spawn(2)`` gives one generator for the
geometry draws (amplitude, wavelength, phase, in that order) and one for the
sensor noise (gaussian field, then dropout field). Both are PCG64.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dag as dagmod
from .dag import LaneDAG, VertexState
from .geom import Polyline
from .io import read_json, read_raster, write_json, write_raster, atomic_write_text
from .raster import IntensityRaster, boundary_mask, exact_distance_transform

STROKE_INTENSITY = 0.9
ROAD_INTENSITY = 0.35
BACKGROUND_INTENSITY = 0.05
STROKE_HALF_WIDTH_PX = 1.0
MAX_CURVATURE = 0.02


class SpecError(ValueError):
    def __init__(self, message: str, event_index: int | None = None):
        super().__init__(message)
        self.event_index = event_index


@dataclass(frozen=True)
class Event:
    kind: str
    position_m: float
    ramp_length_m: float = 80.0

    def __post_init__(self):
        if self.kind not in ("fork", "merge"):
            raise SpecError(f"unknown event kind {self.kind!r}")


@dataclass(frozen=True)
class Noise:
    gaussian_sigma: float = 0.0
    dropout_prob: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    num_lanes: int = 3
    length_m: float = 400.0
    lane_width_m: float = 3.7
    events: tuple[Event, ...] = ()
    noise: Noise = Noise()
    resolution_m_per_px: float = 0.05
    amplitude_m: float | None = None  # drawn from U(0, 0.8) when None
    wavelength_m: float | None = None  # drawn from U(250, 400) when None
    margin_px: int = 60
    vertex_spacing_px: int = 50

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "num_lanes": self.num_lanes,
            "length_m": self.length_m,
            "lane_width_m": self.lane_width_m,
            "events": [
                {"kind": e.kind, "position_m": e.position_m, "ramp_length_m": e.ramp_length_m}
                for e in self.events
            ],
            "noise": {"gaussian_sigma": self.noise.gaussian_sigma, "dropout_prob": self.noise.dropout_prob},
            "resolution_m_per_px": self.resolution_m_per_px,
            "amplitude_m": self.amplitude_m,
            "wavelength_m": self.wavelength_m,
            "margin_px": self.margin_px,
            "vertex_spacing_px": self.vertex_spacing_px,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["events"] = tuple(Event(**e) for e in d.get("events", ()))
        d["noise"] = Noise(**d.get("noise", {}))
        return cls(**d)


@dataclass
class GroundTruthScene:
    raster: IntensityRaster
    gt_dag: LaneDAG
    gt_polylines: list[Polyline]
    spec: SceneSpec | None = None
    params: dict = field(default_factory=dict)


_EVENT_RE = re.compile(r"^(fork|merge)@(\d+(?:\.\d+)?)(?::(\d+(?:\.\d+)?))?$")


def parse_events(text: str) -> tuple[Event, ...]:
    """Parse ``fork@150,merge@300:60`` (optional ``:ramp_m``)."""
    events = []
    for tok in filter(None, (t.strip() for t in text.split(","))):
        m = _EVENT_RE.match(tok)
        if not m:
            raise SpecError(f"malformed event token {tok!r}; expected kind@meters[:ramp]")
        kind, pos, ramp = m.groups()
        events.append(Event(kind, float(pos), float(ramp) if ramp else 80.0))
    return tuple(events)


def smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


@dataclass
class _Boundary:
    start_x: float
    end_x: float
    offsets: list  # [(x_from, callable(x) -> lateral px)]
    fork_x: list = field(default_factory=list)
    parent: int | None = None
    terminates: bool = False

    def offset(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for x_from, fn in self.offsets:
            sel = x >= x_from
            out = np.where(sel, fn(x), out)
        return out

    def offset_at(self, x: float) -> float:
        return float(self.offset(np.array([x]))[0])


def _validate(spec: SceneSpec) -> None:
    if spec.num_lanes < 2:
        raise SpecError(f"num_lanes must be >= 2, got {spec.num_lanes}")
    if spec.length_m <= 0 or spec.lane_width_m <= 0 or spec.resolution_m_per_px <= 0:
        raise SpecError("length, lane width and resolution must be positive")
    if spec.amplitude_m is not None and not 0 <= spec.amplitude_m <= 10.0:
        raise SpecError(f"sinusoid amplitude must be in [0, 10] m, got {spec.amplitude_m}")
    if spec.wavelength_m is not None and spec.wavelength_m < 200.0:
        raise SpecError(f"sinusoid wavelength must be >= 200 m, got {spec.wavelength_m}")
    boundaries = spec.num_lanes + 1
    prev_end = 0.0
    for i, e in enumerate(spec.events):
        if e.ramp_length_m <= 0:
            raise SpecError(f"event {i}: ramp length must be positive", i)
        if e.position_m < prev_end:
            raise SpecError(f"event {i}: starts at {e.position_m} m, before the previous ramp ends at {prev_end} m", i)
        end = e.position_m + e.ramp_length_m
        if e.position_m <= 0 or end > spec.length_m - 1.0:
            raise SpecError(f"event {i}: ramp [{e.position_m}, {end}] m leaves the scene", i)
        lane_px = spec.lane_width_m / spec.resolution_m_per_px
        ramp_px = e.ramp_length_m / spec.resolution_m_per_px
        if 6.0 * lane_px / ramp_px**2 > MAX_CURVATURE:
            raise SpecError(f"event {i}: ramp too short for the curvature bound", i)
        boundaries += 1 if e.kind == "fork" else -1
        if boundaries < 2:
            raise SpecError(f"event {i}: merge would leave fewer than one lane", i)
        prev_end = end


def generate(spec: SceneSpec) -> GroundTruthScene:
    _validate(spec)
    geo_seq, noise_seq = np.random.SeedSequence(spec.seed).spawn(2)
    geo = np.random.Generator(np.random.PCG64(geo_seq))
    res = spec.resolution_m_per_px
    amp_m = geo.uniform(0.0, 0.8)
    wav_m = geo.uniform(250.0, 400.0)
    phase = geo.uniform(0.0, 2.0 * math.pi)
    amp_m = amp_m if spec.amplitude_m is None else spec.amplitude_m
    wav_m = wav_m if spec.wavelength_m is None else spec.wavelength_m
    amp = amp_m / res
    wav = wav_m / res
    lane = spec.lane_width_m / res
    width = int(round(spec.length_m / res))
    x_end = float(width - 1)
    if amp * (2 * math.pi / wav) ** 2 > MAX_CURVATURE:
        raise SpecError("sinusoid curvature exceeds bound")

    bounds: list[_Boundary] = []
    for k in range(spec.num_lanes + 1):
        bounds.append(_Boundary(0.0, x_end, [(0.0, lambda x, k=k: np.full_like(x, k * lane))]))
    alive = list(range(len(bounds)))
    max_alive = len(alive)
    for i, e in enumerate(spec.events):
        x0 = e.position_m / res
        ramp = e.ramp_length_m / res
        bottom = alive[-1]
        base = bounds[bottom].offset_at(x0)
        if e.kind == "fork":
            fn = lambda x, b=base, x0=x0, r=ramp: b + lane * smoothstep((x - x0) / r)
            bounds[bottom].fork_x.append(x0)
            bounds.append(_Boundary(x0, x_end, [(x0, fn)], parent=bottom))
            alive.append(len(bounds) - 1)
        else:
            above = alive[-2]
            top = bounds[above].offset_at(x0)
            gap = base - top
            fn = lambda x, t=top, g=gap, x0=x0, r=ramp: t + g * (1.0 - smoothstep((x - x0) / r))
            b = bounds[bottom]
            b.offsets.append((x0, fn))
            b.end_x = x0 + ramp
            b.terminates = True
            alive.pop()
        max_alive = max(max_alive, len(alive))

    y0 = spec.margin_px + amp
    height = int(math.ceil(2 * spec.margin_px + 2 * amp + (max_alive - 1) * lane)) + 1

    def lateral(x):
        return y0 + amp * np.sin(2 * math.pi * x / wav + phase)

    def ypos(b: _Boundary, x):
        return lateral(x) + b.offset(x)

    # ----- ground-truth DAG
    step = spec.vertex_spacing_px
    grid = np.arange(0.0, x_end, step)
    gt = LaneDAG()
    first_vertex: dict[int, int] = {}
    order = list(range(spec.num_lanes + 1)) + list(range(spec.num_lanes + 1, len(bounds)))
    pending_forks: dict[tuple[int, float], int] = {}

    def chain(bi: int, parent_vid: int | None):
        b = bounds[bi]
        xs = grid[(grid > b.start_x) & (grid < b.end_x)] if parent_vid is not None else grid[grid < b.end_x]
        xs = np.union1d(xs, [b.end_x] + [fx for fx in b.fork_x])
        if parent_vid is not None:
            # a branch vertex right next to the fork would barely leave the parent line
            xs = xs[xs > b.start_x + step / 2]
        ys = ypos(b, xs)
        prev = parent_vid
        for x, y in zip(xs, ys):
            if prev is None:
                theta = math.atan2(ypos(b, x + 1.0) - y, 1.0)
            else:
                p = gt[prev].position
                theta = math.atan2(y - p.y, x - p.x)
            v = gt.add_vertex((float(x), float(y)), theta, parent=prev)
            if x in b.fork_x:
                v.state = VertexState.FORK
                pending_forks[(bi, float(x))] = v.id
            prev = v.id
        if b.terminates:
            gt[prev].state = VertexState.TERMINATE

    for bi in order:
        b = bounds[bi]
        if b.parent is None:
            chain(bi, None)
        else:
            chain(bi, pending_forks[(b.parent, b.start_x)])

    problems = dagmod.validate(gt)
    if problems:
        raise SpecError(f"generated DAG invalid: {problems[:3]}")
    polylines = dagmod.to_polylines(gt)
    values = render(polylines, bounds, ypos, (height, width))
    values = apply_noise(values, spec.noise, np.random.Generator(np.random.PCG64(noise_seq)))
    params = {"amplitude_m": amp_m, "wavelength_m": wav_m, "phase": phase}
    return GroundTruthScene(IntensityRaster(values, res), gt, polylines, spec, params)


def render(polylines, bounds, ypos, shape) -> np.ndarray:
    h, w = shape
    xs = np.arange(w, dtype=float)
    top = np.full(w, np.inf)
    bot = np.full(w, -np.inf)
    for b in bounds:
        sel = (xs >= b.start_x) & (xs <= b.end_x)
        y = ypos(b, xs[sel])
        top[sel] = np.minimum(top[sel], y)
        bot[sel] = np.maximum(bot[sel], y)
    rows = np.arange(h, dtype=float)[:, None]
    values = np.full(shape, BACKGROUND_INTENSITY)
    values[(rows >= top[None, :]) & (rows <= bot[None, :])] = ROAD_INTENSITY
    strokes = exact_distance_transform(boundary_mask(polylines, shape)) <= STROKE_HALF_WIDTH_PX
    values[strokes] = STROKE_INTENSITY
    return values


def apply_noise(values: np.ndarray, noise: Noise, rng: np.random.Generator) -> np.ndarray:
    out = values.copy()
    if noise.gaussian_sigma > 0:
        out += rng.normal(0.0, noise.gaussian_sigma, size=out.shape)
    if noise.dropout_prob > 0:
        out[rng.random(out.shape) < noise.dropout_prob] = 0.0
    return np.clip(out, 0.0, 1.0)


# ----- persistence

RASTER_FILE = "raster.png"
SIDECAR_FILE = "raster.json"
GT_FILE = "gt.json"
MANIFEST_FILE = "manifest.json"


def scene_to_disk(scene: GroundTruthScene, directory, extra_manifest: dict | None = None) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"scene directory does not exist: {directory}")
    files = write_raster(directory / RASTER_FILE, scene.raster)
    files.append(atomic_write_text(directory / GT_FILE, dagmod.dumps(scene.gt_dag, scene.gt_polylines)))
    manifest = {
        "files": [p.name for p in files],
        "spec": scene.spec.to_dict() if scene.spec else None,
        "params": scene.params,
    }
    manifest.update(extra_manifest or {})
    files.append(write_json(directory / MANIFEST_FILE, manifest))
    return files


def scene_from_disk(directory) -> GroundTruthScene:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"scene directory does not exist: {directory}")
    raster = read_raster(directory / RASTER_FILE)
    gt, polylines = dagmod.loads((directory / GT_FILE).read_text(encoding="utf-8"))
    manifest = read_json(directory / MANIFEST_FILE)
    spec = SceneSpec.from_dict(manifest["spec"]) if manifest.get("spec") else None
    return GroundTruthScene(raster, gt, polylines, spec, manifest.get("params", {}))


def benchmark_specs(count: int = 100, seed: int = 0, noise: Noise = Noise(), length_m: float = 150.0,
                    ramp_m: float = 60.0) -> list[SceneSpec]:
    """Seeded suite of scenes with 0, 1 or 2 fork/merge events (cycling).

    Lane count is drawn from {2, 3} and event kinds uniformly (a merge that
    would leave no lane becomes a fork); the first ramp starts 8-15 m in and a second one 3-10 m after the first ends.
    """
    rng = np.random.default_rng(seed)
    specs = []
    for i in range(count):
        lanes = int(rng.integers(2, 4))
        n_events = i % 3
        events = []
        boundaries = lanes + 1
        pos = float(rng.uniform(8.0, 15.0))
        for _ in range(n_events):
            kind = "fork" if rng.random() < 0.5 else "merge"
            if kind == "merge" and boundaries <= 2:
                kind = "fork"  # keep at least one lane
            boundaries += 1 if kind == "fork" else -1
            events.append(Event(kind, round(pos, 3), ramp_m))
            pos += ramp_m + float(rng.uniform(3.0, 10.0))
        specs.append(SceneSpec(seed=int(rng.integers(0, 2**31 - 1)), num_lanes=lanes, length_m=length_m,
                               events=tuple(events), noise=noise))
    return specs
