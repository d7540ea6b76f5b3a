"""Multilabel f-scores and the gate-activation analysis.

Conventions where the formulas divide by zero:

* a sample with no predicted and no true labels scores f1 = 1;
* a label whose precision and recall are both 0 (or undefined) scores f1 = 0.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class LabelMatrix:
    values: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"label matrix must be 2-D, got shape {v.shape}")
        bad = np.argwhere((v != 0) & (v != 1))
        if bad.size:
            r, c = bad[0]
            raise ValueError(f"non-binary label {v[r, c]!r} at row {r}, column {c}")
        v = v.astype(np.int64)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        names = tuple(self.names) or tuple(f"label{j}" for j in range(v.shape[1]))
        if len(names) != v.shape[1]:
            raise ValueError(f"{len(names)} label names for {v.shape[1]} columns")
        object.__setattr__(self, "names", names)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _is_default(names) -> bool:
    return names == tuple(f"label{j}" for j in range(len(names)))


def _as_labels(x) -> LabelMatrix:
    return x if isinstance(x, LabelMatrix) else LabelMatrix(np.asarray(x))


def threshold_probs(probs, threshold: float = 0.5, names: Sequence[str] = ()) -> LabelMatrix:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError(f"probabilities must be [N x Q], got {probs.shape}")
    if not np.all((probs >= 0.0) & (probs <= 1.0)):
        raise ValueError("probabilities must lie in [0, 1]")
    return LabelMatrix((probs >= threshold).astype(np.int64), tuple(names))


@dataclass(frozen=True)
class MetricsReport:
    f1_samples: float
    f1_micro: float
    f1_macro: float
    f1_weighted: float
    n_samples: int
    n_labels: int
    labels: tuple[str, ...]
    tp: tuple[int, ...]
    fp: tuple[int, ...]
    fn: tuple[int, ...]
    support: tuple[int, ...]
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    weighted_mode: str = "support"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_label"] = {
            name: {k: d[k][j] for k in ("tp", "fp", "fn", "support", "precision", "recall", "f1")}
            for j, name in enumerate(self.labels)
        }
        for k in ("labels", "tp", "fp", "fn", "support", "precision", "recall", "f1"):
            del d[k]
        return d


def _safe_div(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.divide(a, b, out=np.zeros(np.broadcast(a, b).shape), where=b > 0)


def multilabel_f1(pred, truth, weighted_mode: str = "support") -> MetricsReport:
    """All four f-score averages plus per-label counts and scores.

    ``weighted_mode="support"`` normalizes the weighted average by the total
    support; ``"literal"`` uses the 1/Q^2 prefactor as it is usually printed.
    """
    pred, truth = _as_labels(pred), _as_labels(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.names != truth.names and not (_is_default(pred.names) or _is_default(truth.names)):
        raise ValueError(f"label order differs: {pred.names} vs {truth.names}")
    if weighted_mode not in ("support", "literal"):
        raise ValueError(f"weighted_mode must be 'support' or 'literal', got {weighted_mode!r}")
    P, Y = pred.values, truth.values
    n, q = P.shape

    inter = (P & Y).sum(axis=1)
    sizes = P.sum(axis=1) + Y.sum(axis=1)
    per_sample = np.where(sizes == 0, 1.0, _safe_div(2.0 * inter, sizes))
    f1_samples = float(per_sample.mean()) if n else 0.0

    tp = (P & Y).sum(axis=0)
    fp = (P & (1 - Y)).sum(axis=0)
    fn = ((1 - P) & Y).sum(axis=0)
    support = Y.sum(axis=0)
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2.0 * precision * recall, precision + recall)
    f1_macro = float(f1.mean()) if q else 0.0
    if weighted_mode == "support":
        f1_weighted = float(_safe_div((support * f1).sum(), support.sum()))
    else:
        f1_weighted = float((support * f1).sum() / q**2) if q else 0.0

    p_micro = float(_safe_div(tp.sum(), tp.sum() + fp.sum()))
    r_micro = float(_safe_div(tp.sum(), tp.sum() + fn.sum()))
    f1_micro = float(_safe_div(2.0 * p_micro * r_micro, p_micro + r_micro))

    return MetricsReport(
        f1_samples, f1_micro, f1_macro, f1_weighted, n, q, truth.names,
        tuple(int(v) for v in tp), tuple(int(v) for v in fp), tuple(int(v) for v in fn),
        tuple(int(v) for v in support), tuple(float(v) for v in precision),
        tuple(float(v) for v in recall), tuple(float(v) for v in f1), weighted_mode,
    )


def macro_f1(pred, truth) -> float:
    return multilabel_f1(pred, truth).f1_macro


# ---------------------------------------------------------------------------
# gate analysis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GateFraction:
    label: str
    n_predicted: int
    visual_pct: float | None
    textual_pct: float | None

    @property
    def defined(self) -> bool:
        return self.n_predicted > 0


def gate_activation_fractions(z_units, pred, selected_units: Sequence[int]) -> list[GateFraction]:
    """Per label, share of predicted-positive samples leaning visual vs textual.

    A sample's lean is the mean of the selected gate units: above 0.5 counts
    as visual, 0.5 or below as textual. Labels nobody was assigned come back
    with ``None`` percentages.
    """
    z = np.asarray(z_units, dtype=np.float64)
    pred = _as_labels(pred)
    if not len(selected_units):
        raise ValueError("select at least one gate unit")
    if z.ndim != 2 or z.shape[0] != pred.shape[0]:
        raise ValueError(f"gates {z.shape} do not match predictions {pred.shape}")
    if np.any((z < 0.0) | (z > 1.0)):
        raise ValueError("gate activations must lie in [0, 1]")
    lean = z[:, list(selected_units)].mean(axis=1)
    out = []
    for j, name in enumerate(pred.names):
        mask = pred.values[:, j] == 1
        n = int(mask.sum())
        if n == 0:
            out.append(GateFraction(name, 0, None, None))
            continue
        visual = int((lean[mask] > 0.5).sum())
        out.append(GateFraction(name, n, 100.0 * visual / n, 100.0 * (n - visual) / n))
    return out


def mutual_information(a, b) -> float:
    """MI in nats between two binary vectors, from their joint counts."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    n = a.size
    joint = np.zeros((2, 2))
    np.add.at(joint, (a, b), 1.0)
    joint /= n
    pa, pb = joint.sum(axis=1), joint.sum(axis=0)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / np.outer(pa, pb)[nz])).sum())


def unit_scores(z_units, pred) -> np.ndarray:
    z = np.asarray(z_units, dtype=np.float64)
    pred = _as_labels(pred)
    binary = (z > 0.5).astype(np.int64)
    return np.array([
        max(mutual_information(binary[:, u], pred.values[:, j]) for j in range(pred.shape[1]))
        for u in range(z.shape[1])
    ])


def select_units_by_mutual_information(z_units, pred, top_k: int = 16) -> list[int]:
    """Gate units whose binarized activation tells most about some label."""
    z = np.asarray(z_units)
    if not 1 <= top_k <= z.shape[1]:
        raise ValueError(f"top_k must lie in [1, {z.shape[1]}], got {top_k}")
    scores = unit_scores(z, pred)
    order = sorted(range(len(scores)), key=lambda u: (-scores[u], u))
    return order[:top_k]
