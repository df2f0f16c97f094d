"""Fidelity scores: per-source simplex weights parameterised by free logits.

Scores are the softmax of the logits, so any real logit vector maps into the
open probability simplex and every interior point has a preimage (the log of
the scores).  The weighted loss ``sum_i C_i * L_i`` can therefore be minimised
over the logits with plain gradient steps.
"""

from __future__ import annotations

import numpy as np


class FidelityError(ValueError):
    pass


def _as_vector(values, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise FidelityError(f"dimension error: {what} must be a nonempty vector")
    return arr


def scores_from_logits(logits) -> np.ndarray:
    z = _as_vector(logits, "logits")
    if not np.all(np.isfinite(z)):
        raise FidelityError("invalid logits: non-finite entry")
    e = np.exp(z - z.max())
    return e / e.sum()


def logits_from_scores(scores) -> np.ndarray:
    """Canonical preimage ``log(scores)`` of a point in the simplex interior."""
    c = _as_vector(scores, "scores")
    if not np.all(np.isfinite(c)) or np.any(c <= 0):
        raise FidelityError("not in simplex interior: scores must be strictly positive")
    if abs(c.sum() - 1.0) > 1e-9:
        raise FidelityError(f"not in simplex interior: scores sum to {c.sum()!r}")
    return np.log(c)


def fidelity_gradient(logits, per_source_losses) -> np.ndarray:
    """Gradient of ``sum_i C_i L_i`` w.r.t. the logits: ``C_j (L_j - sum_i C_i L_i)``."""
    z = _as_vector(logits, "logits")
    losses = _as_vector(per_source_losses, "losses")
    if z.shape != losses.shape:
        raise FidelityError(f"dimension error: {z.size} logits vs {losses.size} losses")
    c = scores_from_logits(z)
    return c * (losses - c @ losses)


def renormalized(scores: np.ndarray, present: np.ndarray) -> np.ndarray:
    """Scores restricted to the ``present`` sources and rescaled to sum to one."""
    w = np.where(present, scores, 0.0)
    total = w.sum()
    if total <= 0:
        raise FidelityError("no usable source")
    return w / total
