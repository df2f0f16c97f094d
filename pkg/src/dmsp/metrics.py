"""Regression metrics and the held-out evaluation harness.

All variances are population (1/n) variances.  When the targets have zero
variance, EVS / CoD / Pearson are undefined; they are reported as ``None`` and
listed in ``undefined`` instead of propagating NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import GroundTruth, MultiSourceDataset, Split, TruthGrid, truth_grid_from
from .model import ModelError, ModelParams, forward_plans
from .training import PlanCache


class EvaluationError(ValueError):
    pass


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    evs: float | None
    cod: float | None
    pearson: float | None
    n: int
    undefined: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "evs": self.evs, "cod": self.cod,
                "pearson": self.pearson, "n": self.n, "undefined": list(self.undefined)}


def evaluate(predictions, targets) -> MetricsReport:
    pred = np.asarray(predictions, dtype=float).ravel()
    y = np.asarray(targets, dtype=float).ravel()
    if pred.size == 0 or pred.shape != y.shape:
        raise EvaluationError(f"invalid evaluation set: {pred.size} predictions vs {y.size} targets")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(y))):
        raise EvaluationError("invalid evaluation set: non-finite values")
    err = pred - y
    mae = float(np.mean(np.abs(err)))
    rmse = float(math.sqrt(np.mean(err * err)))
    var_y = float(np.var(y))
    undefined = []
    evs = cod = pearson = None
    if var_y > 0:
        evs = 1.0 - float(np.var(err)) / var_y
        cod = 1.0 - float(np.mean(err * err)) / var_y
    else:
        undefined += ["evs", "cod"]
    var_p = float(np.var(pred))
    if var_y > 0 and var_p > 0:
        cov = float(np.mean((pred - pred.mean()) * (y - y.mean())))
        pearson = float(np.clip(cov / math.sqrt(var_p * var_y), -1.0, 1.0))
    else:
        undefined.append("pearson")
    return MetricsReport(mae, rmse, evs, cod, pearson, int(y.size), undefined)


@dataclass
class EvaluationRows:
    """Per-sample outputs of :func:`predict_split`."""

    source: np.ndarray
    index: np.ndarray
    locations: np.ndarray
    per_source: np.ndarray
    fused: np.ndarray
    reference: np.ndarray


def predict_split(params: ModelParams, dataset: MultiSourceDataset, split: Split, reference,
                  part: str = "test", plans: PlanCache | None = None) -> EvaluationRows:
    """Masked forward on every sample of ``part`` and the matching reference values.

    ``reference`` is a source id (score that source's own held-out observations)
    or a truth grid / :class:`GroundTruth` (score the samples of every source
    against the nearest grid node).
    """
    plans = plans or PlanCache(params, dataset)
    indices = split.part(part)
    if isinstance(reference, GroundTruth):
        reference = truth_grid_from(reference)
    if isinstance(reference, TruthGrid):
        pairs = [(i, int(j)) for i, idx in enumerate(indices) for j in idx]
    else:
        ref_src = int(reference)
        if not 0 <= ref_src < dataset.N:
            raise EvaluationError(f"reference source {ref_src} out of range")
        pairs = [(ref_src, int(j)) for j in indices[ref_src]]
    rows = []
    for i, j in pairs:
        try:
            pred, _ = forward_plans(params, plans.get(i, j))
        except ModelError:
            continue
        rows.append((i, j, pred))
    if not rows:
        raise EvaluationError("no evaluable samples")
    src = np.array([r[0] for r in rows])
    idx = np.array([r[1] for r in rows])
    locs = np.array([dataset[i].locations[j] for i, j, _ in rows])
    per_source = np.vstack([r[2].per_source for r in rows])
    fused = np.array([r[2].fused for r in rows])
    if isinstance(reference, TruthGrid):
        ref = reference.nearest(locs)
    else:
        ref = np.array([dataset[i].targets[j] for i, j, _ in rows])
    return EvaluationRows(src, idx, locs, per_source, fused, ref)


def evaluate_model(params: ModelParams, dataset: MultiSourceDataset, split: Split, reference,
                   part: str = "test", plans: PlanCache | None = None) -> MetricsReport:
    rows = predict_split(params, dataset, split, reference, part, plans)
    return evaluate(rows.fused, rows.reference)
