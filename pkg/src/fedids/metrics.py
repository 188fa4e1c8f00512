"""Binary classification metrics with malicious as the positive class.

Zero-denominator cases (no predicted positives, no actual positives,
P + R = 0) are pinned to 0 so degenerate rounds still produce finite
reports.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError

WINDOW = "window"
TRACE = "trace"


@dataclass(frozen=True)
class MetricSet:
    accuracy: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    level: str

    def to_dict(self, threshold: float = 0.5) -> dict:
        return {
            "level": self.level,
            "threshold": threshold,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "confusion": {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn},
        }


def evaluate(probs: Sequence[float], labels: Sequence[int],
             threshold: float = 0.5, level: str = WINDOW) -> MetricSet:
    """Score probabilities against {0,1} labels at the given threshold.

    Predictions are probs >= threshold.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValidationError(f"evaluate: probs shape {p.shape} != labels shape {y.shape}")
    if p.size == 0:
        raise ValidationError("evaluate: empty input")
    preds = p >= threshold
    actual = y == 1
    tp = int(np.sum(preds & actual))
    fp = int(np.sum(preds & ~actual))
    fn = int(np.sum(~preds & actual))
    tn = int(np.sum(~preds & ~actual))
    total = tp + fp + fn + tn
    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
    return MetricSet(
        accuracy=(tp + tn) / total,
        precision=precision,
        recall=recall,
        f1=f1,
        tp=tp, fp=fp, fn=fn, tn=tn,
        level=level,
    )


def aggregate_trace_level(
    window_probs: Sequence[float],
    window_trace_ids: Sequence[str],
    trace_labels: Mapping[str, int],
) -> tuple[np.ndarray, np.ndarray]:
    """Mean of each trace's window probabilities, paired with its label.

    Output order is first appearance of each trace id. Every labeled trace
    must have at least one window and vice versa.
    """
    probs = np.asarray(window_probs, dtype=np.float64)
    if probs.shape[0] != len(window_trace_ids):
        raise ValidationError("aggregate_trace_level: probs/ids length mismatch")
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    order: list[str] = []
    for p, tid in zip(probs, window_trace_ids):
        if tid not in sums:
            if tid not in trace_labels:
                raise ValidationError(f"aggregate_trace_level: no label for trace {tid!r}")
            sums[tid] = 0.0
            counts[tid] = 0
            order.append(tid)
        sums[tid] += float(p)
        counts[tid] += 1
    missing = set(trace_labels) - set(sums)
    if missing:
        raise ValidationError(
            f"aggregate_trace_level: traces with no windows: {sorted(missing)[:5]}")
    trace_probs = np.array([sums[t] / counts[t] for t in order], dtype=np.float64)
    labels = np.array([trace_labels[t] for t in order], dtype=np.int8)
    return trace_probs, labels
