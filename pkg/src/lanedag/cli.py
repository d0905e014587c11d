"""Command-line entry point: synth, infer, eval and render.

Exit codes: 0 on success, 2 for usage or input errors, 3 when an internal
invariant is violated. ``TOOL_CONFIG`` may point at a JSON file of per-command
argument defaults, e.g. ``{"infer": {"recover": "false"}}``.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from . import dag as dagmod
from .dag import DagError, VertexState
from .evaluation import DEFAULT_THRESHOLDS, parse_thresholds, precision_recall
from .headers import DistanceFieldOracle, HeaderConfig
from .inference import InferenceConfig, infer_dag
from .io import atomic_write_bytes, atomic_write_text, read_field, read_json, read_raster, write_json
from .raster import RasterError, field_from_raster, inverse_threshold_dt
from .synth import GT_FILE, Event, Noise, SceneSpec, SpecError, benchmark_specs, generate, parse_events, scene_to_disk

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INTERNAL = 3
CONFIG_ENV = "TOOL_CONFIG"


class InputError(Exception):
    """Bad arguments or unreadable inputs (exit code 2)."""


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _thresholds(text: str) -> tuple[float, ...]:
    try:
        return parse_thresholds(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _roi(text: str) -> tuple[int, int]:
    try:
        h, w = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW like 100x100, got {text!r}") from None
    return h, w


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.stem + ".manifest.json")


def _run_manifest(command: str, argv, config: dict, inputs, outputs, seconds: float, seed=None,
                  flags=()) -> dict:
    return {
        "command": command,
        "argv": list(argv),
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "wall_clock_seconds": round(seconds, 6),
        "seed": seed,
        "flags": list(flags),
    }


def _pool_map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# --- synth -------------------------------------------------------------------


def _synth_one(job) -> list[str]:
    spec, directory, run = job
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    scene = generate(spec)
    run = dict(run, wall_clock_seconds=round(time.perf_counter() - t0, 6))
    return [str(p) for p in scene_to_disk(scene, directory, {"run": run})]


def cmd_synth(args) -> int:
    out = Path(args.out)
    noise = Noise(args.noise_sigma, args.dropout)
    if args.suite:
        args.length_m = 150.0 if args.length_m is None else args.length_m
        specs = benchmark_specs(args.suite, args.seed, noise, args.length_m,
                                60.0 if args.ramp_m is None else args.ramp_m)
        dirs = [out / f"scene_{i:03d}" for i in range(len(specs))]
        config = {"suite": args.suite, "seed": args.seed, "length_m": args.length_m,
                  "noise": {"gaussian_sigma": noise.gaussian_sigma, "dropout_prob": noise.dropout_prob}}
    else:
        args.length_m = 400.0 if args.length_m is None else args.length_m
        events = parse_events(args.events or "")
        if args.ramp_m is not None:
            events = tuple(Event(e.kind, e.position_m, args.ramp_m) for e in events)
        specs = [SceneSpec(seed=args.seed, num_lanes=args.lanes, length_m=args.length_m,
                           lane_width_m=args.lane_width_m, events=events, noise=noise)]
        dirs = [out]
        config = specs[0].to_dict()
    run = _run_manifest("synth", args.argv, config, [], [out], 0.0, seed=args.seed)
    jobs = [(spec, d, run) for spec, d in zip(specs, dirs)]
    out.mkdir(parents=True, exist_ok=True)
    written = _pool_map(_synth_one, jobs, args.jobs)
    for files in written:
        print("\n".join(files))
    return EXIT_OK


# --- infer -------------------------------------------------------------------


def _load_configs(path) -> tuple[HeaderConfig, InferenceConfig]:
    if not path:
        return HeaderConfig(), InferenceConfig()
    data = read_json(path)
    unknown = set(data) - {"headers", "inference"}
    if unknown:
        raise InputError(f"{path}: unknown config sections {sorted(unknown)}")
    try:
        return HeaderConfig.from_dict(data.get("headers", {})), InferenceConfig.from_dict(data.get("inference", {}))
    except (TypeError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from None


def _load_polylines(path) -> tuple[dagmod.LaneDAG, list]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such polyline file: {path}")
    try:
        dag, polylines = dagmod.loads(path.read_text(encoding="utf-8"))
        if not polylines and dag.vertices:
            polylines = dagmod.to_polylines(dag)
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: not a valid DAG/polyline file ({exc})") from None
    return dag, polylines


def _field_for(raster_path: Path, raster, mode: str, source) -> object:
    if mode == "gt":
        gt_path = Path(source) if source else raster_path.parent / GT_FILE
        _, polylines = _load_polylines(gt_path)
        if not polylines:
            raise InputError(f"{gt_path}: no GT polylines to build a field from")
        return inverse_threshold_dt(polylines, raster.values.shape)
    if mode == "dt":
        field = read_field(source)
        if field.shape != raster.values.shape:
            raise InputError(f"field {source} has shape {field.shape}, raster has {raster.values.shape}")
        return field
    return field_from_raster(raster)


def _infer_one(job) -> tuple[str, list[str]]:
    raster_path, out_path, mode, source, hcfg, icfg, recover, drop = job
    raster_path = Path(raster_path)
    try:
        raster = read_raster(raster_path)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from None
    raster.check_size()
    field = _field_for(raster_path, raster, mode, source)
    dag = infer_dag(field, DistanceFieldOracle(hcfg), icfg, use_recovery=recover, drop_init=drop)
    polylines = dagmod.to_polylines(dag) if dag.vertices else []
    atomic_write_text(out_path, dagmod.dumps(dag, polylines))
    flags = ["budget-exceeded"] if dag.budget_exceeded else []
    return str(out_path), flags


def cmd_infer(args) -> int:
    t0 = time.perf_counter()
    hcfg, icfg = _load_configs(args.config)
    if args.binarize_threshold is not None:
        icfg = InferenceConfig.from_dict({**icfg.to_dict(), "binarize_threshold": args.binarize_threshold})
    overrides = {k: v for k, v in (("step_px", args.step_px), ("angle_samples", args.angle_samples),
                                   ("merge_radius_px", args.merge_radius_px),
                                   ("state_threshold", args.state_threshold)) if v is not None}
    if args.roi is not None:
        overrides["roi_h"], overrides["roi_w"] = args.roi
    if overrides:
        try:
            hcfg = HeaderConfig.from_dict({**hcfg.to_dict(), **overrides})
        except (TypeError, ValueError) as exc:
            raise InputError(f"header settings: {exc}") from None
    rasters = [Path(p) for p in args.raster]
    for p in rasters:
        if not p.is_file():
            raise InputError(f"no such raster: {p}")
    out = Path(args.out)
    if len(rasters) > 1:
        out.mkdir(parents=True, exist_ok=True)
        outs = [out / f"{p.parent.name}_{p.stem}.json" for p in rasters]
        if len(set(outs)) != len(outs):
            raise InputError("raster names collide in the output directory")
    else:
        if not out.parent.is_dir():
            raise InputError(f"output directory does not exist: {out.parent}")
        outs = [out]
    if args.dt is not None:
        mode, source = "dt", args.dt
        if len(rasters) > 1:
            raise InputError("--dt takes a single raster")
    elif args.from_gt_dt is not None:
        mode, source = "gt", args.from_gt_dt or None
    else:
        mode, source = "raster", None
    drop = tuple(int(t) for t in args.drop_init.split(",") if t.strip()) if args.drop_init else ()
    jobs = [(r, o, mode, source, hcfg, icfg, args.recover, drop) for r, o in zip(rasters, outs)]
    results = _pool_map(_infer_one, jobs, args.jobs)
    flags = sorted({f for _, fl in results for f in fl})
    config = {"headers": hcfg.to_dict(), "inference": icfg.to_dict(), "recover": args.recover,
              "field": mode, "drop_init": list(drop)}
    manifest = _run_manifest("infer", args.argv, config, rasters, [r for r, _ in results],
                             time.perf_counter() - t0, flags=flags)
    write_json(_manifest_path(out), manifest)
    for r, fl in results:
        print(r + ("  [" + ", ".join(fl) + "]" if fl else ""))
    return EXIT_OK


# --- eval --------------------------------------------------------------------


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    if len(args.pred) != len(args.gt):
        raise InputError(f"{len(args.pred)} prediction files for {len(args.gt)} GT files")
    preds = [_load_polylines(p)[1] for p in args.pred]
    gts = [_load_polylines(p)[1] for p in args.gt]
    report = precision_recall(preds, gts, args.thresholds, args.min_cover)
    out = Path(args.out)
    if not out.parent.is_dir():
        raise InputError(f"output directory does not exist: {out.parent}")
    csv_path = Path(args.csv) if args.csv else out.with_suffix(".csv")
    write_json(out, report.to_dict())
    atomic_write_text(csv_path, report.to_csv(args.method))
    config = {"thresholds": list(args.thresholds), "min_cover": args.min_cover, "method": args.method}
    write_json(_manifest_path(out), _run_manifest("eval", args.argv, config, args.pred + args.gt,
                                                  [out, csv_path], time.perf_counter() - t0,
                                                  flags=report.flags))
    print(report.to_csv(args.method), end="")
    return EXIT_OK


# --- render ------------------------------------------------------------------

PRED_COLORS = ((230, 40, 40), (255, 140, 0), (200, 0, 120), (255, 90, 90))
GT_COLORS = ((0, 190, 70), (0, 150, 230), (80, 230, 200), (30, 110, 255))
PRED_VERTEX = (255, 255, 0)
GT_VERTEX = (255, 255, 255)
FORK_MARKER = (255, 0, 255)


def _gray_rgb(values: np.ndarray) -> np.ndarray:
    g = np.round(np.clip(values, 0.0, 1.0) * 255).astype(np.uint8)
    return np.repeat(g[:, :, None], 3, axis=2)


def _paint(img: np.ndarray, rows, cols, color) -> None:
    h, w = img.shape[:2]
    rows, cols = np.asarray(rows, dtype=int), np.asarray(cols, dtype=int)
    ok = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    img[rows[ok], cols[ok]] = color


def draw_layer(img: np.ndarray, dag, polylines, colors, vertex_color) -> None:
    """Polylines in a repeating palette, their vertices as single pixels and
    fork vertices as 5-pixel plus markers. Drawing order is fixed, so the
    same inputs always give the same pixels."""
    from .geom import rasterize_polyline

    h, w = img.shape[:2]
    for i, p in enumerate(polylines):
        mask = rasterize_polyline(p.points, (h, w))
        img[mask] = colors[i % len(colors)]
    for p in polylines:
        pts = np.round(p.points).astype(int)
        _paint(img, pts[:, 1], pts[:, 0], vertex_color)
    if dag is not None:
        for v in sorted(dag.vertices.values(), key=lambda v: v.id):
            if v.state == VertexState.FORK:
                r, c = int(round(v.position.y)), int(round(v.position.x))
                _paint(img, [r, r - 1, r + 1, r, r], [c, c, c, c - 1, c + 1], FORK_MARKER)


def render_image(values: np.ndarray, pred=None, gt=None, layout: str = "overlay") -> np.ndarray:
    """RGB figure: ``overlay`` draws GT then predictions on one copy of the
    raster; ``side-by-side`` stacks predictions (top) over GT (bottom),
    giving a 2H x W image."""
    base = _gray_rgb(values)
    if layout == "overlay":
        img = base.copy()
        if gt is not None:
            draw_layer(img, *gt, GT_COLORS, GT_VERTEX)
        if pred is not None:
            draw_layer(img, *pred, PRED_COLORS, PRED_VERTEX)
        return img
    if layout != "side-by-side":
        raise ValueError(f"unknown layout {layout!r}")
    top, bottom = base.copy(), base.copy()
    if pred is not None:
        draw_layer(top, *pred, PRED_COLORS, PRED_VERTEX)
    if gt is not None:
        draw_layer(bottom, *gt, GT_COLORS, GT_VERTEX)
    return np.concatenate([top, bottom], axis=0)


def encode_rgb_png(img: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8)).save(buf, format="PNG", compress_level=6,
                                                                      optimize=False)
    return buf.getvalue()


def cmd_render(args) -> int:
    t0 = time.perf_counter()
    if args.pred is None and args.gt is None:
        raise InputError("render needs at least one of --pred or --gt")
    try:
        raster = read_raster(args.raster)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from None
    pred = _load_polylines(args.pred) if args.pred else None
    gt = _load_polylines(args.gt) if args.gt else None
    img = render_image(raster.values, pred, gt, args.layout)
    out = Path(args.out)
    if not out.parent.is_dir():
        raise InputError(f"output directory does not exist: {out.parent}")
    atomic_write_bytes(out, encode_rgb_png(img))
    inputs = [args.raster] + [p for p in (args.pred, args.gt) if p]
    write_json(_manifest_path(out), _run_manifest("render", args.argv, {"layout": args.layout}, inputs, [out],
                                                  time.perf_counter() - t0))
    print(out)
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lanedag", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene (raster, GT DAG, manifest)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lanes", type=int, default=3)
    s.add_argument("--events", default="", help="comma list like fork@150,merge@300:60 (meters, optional ramp)")
    s.add_argument("--length-m", type=float, default=None, help="scene length (default 400, 150 with --suite)")
    s.add_argument("--lane-width-m", type=float, default=3.7)
    s.add_argument("--ramp-m", type=float, default=None, help="ramp length for every event")
    s.add_argument("--noise-sigma", type=float, default=0.0)
    s.add_argument("--dropout", type=float, default=0.0)
    s.add_argument("--suite", type=int, default=0, metavar="N",
                   help="write N benchmark scenes (150 m, 0-2 events) into scene_XXX subdirectories")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    i = sub.add_parser("infer", help="extract a lane-boundary DAG from a raster")
    i.add_argument("--raster", nargs="+", required=True)
    i.add_argument("--out", required=True, help="prediction JSON (a directory for several rasters)")
    src = i.add_mutually_exclusive_group()
    src.add_argument("--from-gt-dt", nargs="?", const="", default=None, metavar="GT_JSON",
                     help="oracle mode: field from GT polylines (default: gt.json beside the raster)")
    src.add_argument("--dt", default=None, metavar="FIELD_PNG", help="precomputed distance field")
    i.add_argument("--config", default=None, help='JSON with optional "headers" and "inference" sections')
    i.add_argument("--recover", type=_bool, default=True, metavar="{true,false}")
    i.add_argument("--binarize-threshold", type=float, default=None)
    i.add_argument("--step-px", type=int, default=None)
    i.add_argument("--roi", type=_roi, default=None, metavar="HxW", help="RoI rows x columns, e.g. 100x100")
    i.add_argument("--angle-samples", type=int, default=None)
    i.add_argument("--merge-radius-px", type=float, default=None)
    i.add_argument("--state-threshold", type=float, default=None)
    i.add_argument("--drop-init", default="", help="comma list of initial-vertex indices to suppress")
    i.add_argument("--jobs", type=int, default=1)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="precision/recall/F1 and topology against GT")
    e.add_argument("--pred", nargs="+", required=True)
    e.add_argument("--gt", nargs="+", required=True)
    e.add_argument("--thresholds", type=_thresholds, default=DEFAULT_THRESHOLDS)
    e.add_argument("--min-cover", type=float, default=None)
    e.add_argument("--method", default="ours", help="row label in the CSV")
    e.add_argument("--csv", default=None, help="CSV path (default: --out with .csv suffix)")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="draw predictions and/or GT over the raster")
    r.add_argument("--raster", required=True)
    r.add_argument("--pred", default=None)
    r.add_argument("--gt", default=None)
    r.add_argument("--layout", choices=("overlay", "side-by-side"), default="overlay")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return ap


def _apply_env_defaults(ap: argparse.ArgumentParser) -> None:
    path = os.environ.get(CONFIG_ENV)
    if not path:
        return
    try:
        data = read_json(path)
    except (FileNotFoundError, ValueError) as exc:
        raise InputError(f"{CONFIG_ENV}: {exc}") from None
    subs = next(a for a in ap._actions if isinstance(a, argparse._SubParsersAction)).choices
    for name, defaults in data.items():
        if name not in subs or not isinstance(defaults, dict):
            raise InputError(f"{CONFIG_ENV}: unknown command section {name!r}")
        known = {a.dest: a for a in subs[name]._actions}
        conv = {}
        for key, value in defaults.items():
            dest = key.replace("-", "_")
            if dest not in known:
                raise InputError(f"{CONFIG_ENV}: {name} has no option {key!r}")
            action = known[dest]
            if action.type is not None and isinstance(value, str):
                try:
                    value = action.type(value)
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    raise InputError(f"{CONFIG_ENV}: {name}.{key}: {exc}") from None
            conv[dest] = value
        subs[name].set_defaults(**conv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        _apply_env_defaults(ap)
        args = ap.parse_args(argv)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    args.argv = argv
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except DagError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        for v in getattr(exc, "violations", ())[:10]:
            print(f"  {v}", file=sys.stderr)
        return EXIT_INTERNAL
    except (InputError, SpecError, RasterError, FileNotFoundError, NotADirectoryError,
            PermissionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    raise SystemExit(main())
