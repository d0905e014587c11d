"""Diff-stable JSON: sorted keys and floats printed with 17 significant digits."""

from __future__ import annotations

import json
import math

import numpy as np


def format_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"cannot write non-finite float {x} as JSON")
    s = f"{x:.17g}"
    if not any(c in s for c in ".en"):
        s += ".0"  # keep floats distinguishable from integers on reload
    return s


def _encode(obj, indent: int | None, level: int, out: list[str]) -> None:
    if obj is None or isinstance(obj, (bool, np.bool_)):
        out.append("null" if obj is None else ("true" if obj else "false"))
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(format_float(float(obj)))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, dict):
        items = sorted(obj.items(), key=lambda kv: str(kv[0]))
        _container("{", "}", [(json.dumps(str(k), ensure_ascii=False) + ": ", v) for k, v in items],
                   indent, level, out)
    elif isinstance(obj, (list, tuple, np.ndarray)):
        _container("[", "]", [("", v) for v in obj], indent, level, out)
    else:
        raise TypeError(f"cannot serialise {type(obj).__name__} to JSON")


def _container(open_: str, close: str, entries, indent, level, out) -> None:
    if not entries:
        out.append(open_ + close)
        return
    out.append(open_)
    pad = "" if indent is None else "\n" + " " * (indent * (level + 1))
    for i, (prefix, value) in enumerate(entries):
        if i:
            out.append("," if indent is not None else ", ")
        out.append(pad + prefix)
        _encode(value, indent, level + 1, out)
    out.append("" if indent is None else "\n" + " " * (indent * level))
    out.append(close)


def dumps(obj, indent: int | None = None) -> str:
    """Serialise ``obj``; the output is a pure function of its value."""
    out: list[str] = []
    _encode(obj, indent, 0, out)
    return "".join(out) + "\n"
