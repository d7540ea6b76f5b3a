"""Deterministic JSON reports: sorted keys, 9 significant digits, no NaN."""
from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import numpy as np

from . import __version__


class ReportError(ValueError):
    pass


def _normalize(obj, where: str = "$"):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        obj = obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj)
    if isinstance(obj, dict):
        return {str(k): _normalize(v, f"{where}.{k}") for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_normalize(v, f"{where}[{i}]") for i, v in enumerate(obj)]
    if isinstance(obj, np.ndarray):
        return _normalize(obj.tolist(), where)
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise ReportError(f"non-finite value {x} at {where}")
        return float(f"{x:.9g}")
    if obj is None or isinstance(obj, str):
        return obj
    raise ReportError(f"cannot serialize {type(obj).__name__} at {where}")


def render_report(report, config: dict | None = None, seed: int | None = None) -> str:
    body = dict(_normalize(report))
    body["code_version"] = __version__
    if config is not None:
        body["config"] = _normalize(config)
    if seed is not None:
        body["seed"] = int(seed)
    return json.dumps(body, sort_keys=True, indent=2, allow_nan=False) + "\n"


def emit_report(report, path: str | Path, config: dict | None = None, seed: int | None = None) -> Path:
    """Write ``report`` with provenance fields; identical input gives identical bytes."""
    text = render_report(report, config, seed)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def read_report(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
