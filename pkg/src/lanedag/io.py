"""On-disk formats: 16-bit PNG rasters with JSON sidecars, atomic writes."""

from __future__ import annotations

import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from . import jsonfmt
from .raster import FIELD_MAX, DistanceField, IntensityRaster

PNG_SCALE = 65535


def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {path.parent}")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    return jsonfmt.dumps(obj, indent=1)


def write_json(path, obj) -> Path:
    return atomic_write_text(path, dump_json(obj))


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"no such file: {path}") from None


def encode_png16(values01: np.ndarray) -> bytes:
    q = np.round(np.clip(values01, 0.0, 1.0) * PNG_SCALE).astype("<u2")
    buf = io.BytesIO()
    # pinned encoder settings keep the bytes reproducible
    img = Image.fromarray(q)  # uint16 maps to mode I;16
    img.save(buf, format="PNG", compress_level=6, optimize=False)
    return buf.getvalue()


def decode_png16(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such raster: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint8:
        return arr.astype(float) / 255.0
    return arr.astype(float) / PNG_SCALE


def sidecar_path(png_path) -> Path:
    return Path(png_path).with_suffix(".json")


def write_raster(path, raster: IntensityRaster) -> list[Path]:
    path = Path(path)
    atomic_write_bytes(path, encode_png16(raster.values))
    side = write_json(
        sidecar_path(path),
        {
            "resolution_m_per_px": raster.resolution_m_per_px,
            "height": raster.height,
            "width": raster.width,
        },
    )
    return [path, side]


def read_raster(path) -> IntensityRaster:
    values = decode_png16(path)
    side = sidecar_path(path)
    res = 0.05
    if side.is_file():
        meta = read_json(side)
        res = float(meta.get("resolution_m_per_px", res))
        if (meta.get("height"), meta.get("width")) != values.shape:
            raise ValueError(f"{side}: sidecar shape disagrees with {path}")
    return IntensityRaster(values, res)


def write_field(path, field: DistanceField) -> list[Path]:
    path = Path(path)
    atomic_write_bytes(path, encode_png16(field.values / FIELD_MAX))
    h, w = field.shape
    side = write_json(sidecar_path(path), {"resolution_m_per_px": 0.05, "height": h, "width": w})
    return [path, side]


def read_field(path) -> DistanceField:
    return DistanceField(decode_png16(path) * FIELD_MAX)
