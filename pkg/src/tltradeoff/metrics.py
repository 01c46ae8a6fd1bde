"""Accuracy and comparison metrics. Percentages are plain floats, rounded only when printed."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import MetricError


@dataclass(frozen=True)
class CurvePoint:
    ic: int
    rel_diff_mean: float
    rel_diff_min: float
    rel_diff_max: float
    per_subset: tuple


def balanced_accuracy(y_true, y_pred, n_classes):
    """Mean per-class recall in %, over the classes present in ``y_true``."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise MetricError("balanced accuracy of an empty set")
    if y_true.shape != y_pred.shape:
        raise MetricError("y_true and y_pred differ in length")
    for arr in (y_true, y_pred):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise MetricError(f"class index outside [0, {n_classes})")
    support = np.bincount(y_true, minlength=n_classes)
    hits = np.bincount(y_true[y_true == y_pred], minlength=n_classes)
    present = support > 0
    return float(np.mean(hits[present] / support[present]) * 100.0)


def relative_difference(ft_acc, fe_acc):
    if fe_acc == 0:
        raise MetricError("relative difference undefined for a zero FE accuracy")
    return 100.0 * (ft_acc - fe_acc) / fe_acc


def compute_drop(best_for_subset_vacc, original_config_vacc):
    return best_for_subset_vacc - original_config_vacc


def _get(rec, name):
    return rec[name] if isinstance(rec, dict) else getattr(rec, name)


def fewshot_curve(records, metric="t_acc"):
    """Pair FE and FT records by (ic, subset) and summarize per ic.

    ``records`` are ExperimentRecords or dicts with ``approach``, ``ic``,
    ``subset`` and the metric field.
    """
    cells = defaultdict(dict)
    for rec in records:
        key = (int(_get(rec, "ic")), int(_get(rec, "subset")))
        approach = _get(rec, "approach")
        if approach in cells[key]:
            raise MetricError(f"duplicate {approach} record for ic={key[0]} subset={key[1]}")
        cells[key][approach] = _get(rec, metric)
    by_ic = defaultdict(list)
    for (ic, subset), pair in sorted(cells.items()):
        if set(pair) != {"FE", "FT"}:
            raise MetricError(f"ic={ic} subset={subset} lacks a paired FE/FT record")
        by_ic[ic].append(relative_difference(pair["FT"], pair["FE"]))
    points = []
    for ic in sorted(by_ic):
        vals = by_ic[ic]
        points.append(CurvePoint(ic, float(np.mean(vals)), float(min(vals)), float(max(vals)), tuple(vals)))
    return points
