"""Deterministic report serialization.

Reports must be byte-identical across runs with the same seed, so JSON is
emitted by a small canonical writer: dict keys keep insertion order (callers
build them in the documented order) and every float is printed with 17
significant digits, which round-trips float64 exactly.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .evaluation import CutoffCurve


def format_float(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        raise ValueError(f"report: non-finite value {x}")
    return f"{x:.17g}"


def canonical_json(value, indent: int = 0) -> str:
    pad = "  " * indent
    inner = "  " * (indent + 1)
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format_float(float(value))
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [f'{inner}"{k}": {canonical_json(v, indent + 1)}' for k, v in value.items()]
        return "{\n" + ",\n".join(items) + f"\n{pad}}}"
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        items = [f"{inner}{canonical_json(v, indent + 1)}" for v in value]
        return "[\n" + ",\n".join(items) + f"\n{pad}]"
    raise TypeError(f"report: cannot serialize {type(value)}")


def write_json(path: str | Path, value: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(canonical_json(value) + "\n", encoding="utf-8")


def write_curve_csv(path: str | Path, curve: CutoffCurve) -> None:
    lines = ["fraction,remaining_mean_error_m"]
    for f, m in zip(curve.fractions, curve.remaining_mean):
        lines.append(f"{format_float(float(f))},{format_float(float(m))}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
