"""Accuracy metrics, parameter-change norms and run aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .autodiff import ParamSet, ShapeError

SPARSITY_TOL = 1e-6


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    balanced_accuracy: float
    per_class_accuracy: tuple
    class_counts: tuple


def metrics_report(predictions, labels, num_classes: Optional[int] = None) -> MetricsReport:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 0
    counts = np.bincount(labels, minlength=num_classes)[:num_classes]
    missing = np.flatnonzero(counts == 0)
    if num_classes == 0 or missing.size:
        raise ValueError(f"classes {missing.tolist()} have no samples")
    hits = np.bincount(labels[predictions == labels], minlength=num_classes)[:num_classes]
    per_class = hits / counts
    return MetricsReport(
        accuracy=float(np.mean(predictions == labels)),
        balanced_accuracy=float(np.mean(per_class)),
        per_class_accuracy=tuple(float(a) for a in per_class),
        class_counts=tuple(int(c) for c in counts),
    )


def balanced_accuracy(predictions, labels, num_classes: Optional[int] = None) -> float:
    """Mean of per-class recall; every class in ``range(num_classes)`` must occur."""
    return metrics_report(predictions, labels, num_classes).balanced_accuracy


def accuracy(predictions, labels) -> float:
    return float(np.mean(np.asarray(predictions) == np.asarray(labels)))


@dataclass(frozen=True)
class NormReport:
    delta_l1: float
    delta_l2: float
    norm_diff: float
    sparsity_frac: float


def _flat(p) -> np.ndarray:
    if isinstance(p, ParamSet):
        return p.flat()
    if isinstance(p, Mapping):
        return np.concatenate([np.asarray(v, dtype=np.float64).reshape(-1) for v in p.values()]) if p else np.zeros(0)
    return np.asarray(p, dtype=np.float64).reshape(-1)


def norm_report(base, delta) -> NormReport:
    """Norms of the change and ||base||_2 - ||base + delta||_2 over all entries."""
    if isinstance(base, ParamSet) and isinstance(delta, ParamSet) and base.shapes() != delta.shapes():
        raise ShapeError("norm_report: base and delta entries differ")
    b, d = _flat(base), _flat(delta)
    if b.shape != d.shape:
        raise ShapeError(f"norm_report: base has {b.size} entries, delta has {d.size}")
    return NormReport(
        delta_l1=float(np.abs(d).sum()),
        delta_l2=float(np.linalg.norm(d)),
        norm_diff=float(np.linalg.norm(b) - np.linalg.norm(b + d)),
        sparsity_frac=float(np.mean(np.abs(d) < SPARSITY_TOL)) if d.size else 1.0,
    )


@dataclass
class AggregateResult:
    key: tuple
    n: int
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)


def aggregate(rows: Sequence[Mapping], key: Sequence[str], metrics: Sequence[str]) -> list[AggregateResult]:
    """Group ``rows`` by the ``key`` columns; mean and sample std (n-1) per metric.

    Groups come back sorted by key; std is 0 for singleton groups.
    """
    if not rows:
        raise ValueError("aggregate: no rows")
    groups: dict[tuple, list] = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in key), []).append(row)
    out = []
    for k in sorted(groups, key=_sort_key):
        members = groups[k]
        res = AggregateResult(k, len(members))
        for m in metrics:
            # sort before summing so the result does not depend on row order
            vals = np.sort(np.array([float(r[m]) for r in members]))
            res.mean[m] = float(np.mean(vals))
            res.std[m] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out.append(res)
    return out


def _sort_key(k: tuple):
    return tuple((0, v, "") if isinstance(v, (int, float)) else (1, 0, str(v)) for v in k)
