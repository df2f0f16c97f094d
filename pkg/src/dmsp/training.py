"""Self-consistent masked training.

Each step hides one observed target, predicts it from everything else (all
sources, including the rest of its own source), and takes an Adam step on the
fidelity-weighted squared error.  The fidelity logits receive gradient through
both the loss weight of the sample's source and the fusion weights inside the
prediction.

Modes
-----
``full``             weight ``C_s`` for a sample of source ``s``, logits learned.
``single-source=i``  only source ``i`` supervises, weight 1, logits learned
                     through the fusion only.
``frozen-fidelity``  logits pinned at zero (uniform scores), weight ``1/N``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import fidelity
from .data import MaskedView, MultiSourceDataset, Split, mask_target, split as make_split
from .model import (ModelError, ModelParams, PredictionContext, backward_plans, build_plans,
                    forward_plans, init_params, load_checkpoint, save_checkpoint)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class SampleSkipped(Exception):
    """Forward pass infeasible for this sample (no usable source)."""


FULL = "full"
FROZEN = "frozen-fidelity"
SINGLE = "single-source"


def parse_mode(mode: str) -> tuple[str, int | None]:
    """``'full'`` / ``'frozen-fidelity'`` / ``'single-source=<i>'`` -> (kind, source)."""
    if mode == FULL or mode == FROZEN:
        return mode, None
    if mode.startswith(SINGLE + "="):
        try:
            return SINGLE, int(mode.split("=", 1)[1])
        except ValueError:
            pass
    raise ValueError(f"unknown training mode {mode!r}; use full, frozen-fidelity or single-source=<i>")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 500
    patience: int = 20
    k_neighbors: int = 3
    hidden_dim: int = 16
    num_layers: int = 2
    seed: int = 0
    mode: str = FULL
    strict_order: bool = False
    batch_size: int = 1
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    activation: str = "tanh"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 0 or self.batch_size < 1:
            raise ValueError("max_epochs must be >= 0 and batch_size >= 1")
        parse_mode(self.mode)

    def to_json(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["split_fractions"] = tuple(d["split_fractions"])
        return cls(**d)


def loss(prediction: float, target: float) -> float:
    """Per-sample squared error."""
    return (prediction - target) ** 2


# ---------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls({n: np.zeros_like(a) for n, a in params.blocks.items()},
                   {n: np.zeros_like(a) for n, a in params.blocks.items()})


def adam_step(params: ModelParams, state: AdamState, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if g.shape != params.blocks[name].shape:
            raise ValueError(f"dimension error: gradient {name} shape {g.shape} "
                             f"!= parameter shape {params.blocks[name].shape}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params.blocks[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ----------------------------------------------------------------- gradients

def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {n: np.zeros_like(a) for n, a in params.blocks.items()}


@dataclass
class StepResult:
    objective: float
    squared_error: float
    prediction: float
    grads: dict[str, np.ndarray]


def gradients_from_plans(params: ModelParams, plans: list, source: int, target: float,
                         mode: str = FULL) -> StepResult:
    """Objective and exact gradients for one masked sample of ``source``.

    Objective ``J = w * (y_hat - y)^2`` with ``w`` set by the mode (see module doc).
    """
    kind, _ = parse_mode(mode)
    try:
        pred, cache = forward_plans(params, plans)
    except ModelError as exc:
        raise SampleSkipped(str(exc)) from None
    scores = params.scores
    resid = pred.fused - target
    if kind == SINGLE:
        w = 1.0
    else:
        w = float(scores[source])
    J = w * resid * resid

    grads = zero_grads(params)
    dfused = 2.0 * w * resid
    present = cache.present
    weights = cache.weights
    dy = np.zeros(params.N)
    dy[present] = dfused * weights[present]
    backward_plans(params, cache, dy, grads)

    if kind != FROZEN:
        g = np.zeros(params.N)
        # Fusion path: d y_hat / d logit_m = w~_m (y_m - y_hat) over present sources.
        g[present] = dfused * weights[present] * (pred.per_source[present] - pred.fused)
        if kind == FULL:
            # Loss-weight path: d C_s / d logit_m = C_s (delta_sm - C_m).
            onehot = np.zeros(params.N)
            onehot[source] = 1.0
            g += resid * resid * scores[source] * (onehot - scores)
        grads["fidelity.logits"] = g
    return StepResult(J, resid * resid, pred.fused, grads)


def compute_gradients(params: ModelParams, view: MaskedView, mode: str = FULL,
                      context: PredictionContext | None = None):
    """Gradients of the weighted loss for the sample hidden by ``view``."""
    plans = build_plans(params, view, context=context)
    target = float(view.base[view.masked_source].targets[view.masked_index])
    return gradients_from_plans(params, plans, view.masked_source, target, mode)


# -------------------------------------------------------------- training loop

@dataclass
class TrainState:
    params: ModelParams
    adam: AdamState
    epoch: int = 0
    best_val: float = math.inf
    best_params: ModelParams | None = None
    best_epoch: int = 0
    since_improvement: int = 0
    history: list[dict] = field(default_factory=list)
    stopped_early: bool = False


class PlanCache:
    """Masked-query plans per (source, sample), built once per dataset."""

    def __init__(self, params: ModelParams, dataset: MultiSourceDataset) -> None:
        self.params = params
        self.dataset = dataset
        self.context = PredictionContext(dataset)
        self._plans: dict[tuple[int, int], list] = {}

    def get(self, source: int, index: int) -> list:
        key = (source, index)
        if key not in self._plans:
            view = mask_target(self.dataset, source, index)
            try:
                self._plans[key] = build_plans(self.params, view, context=self.context)
            except ModelError:
                self._plans[key] = [None] * self.dataset.N
        return self._plans[key]


def _supervised_pairs(dataset: MultiSourceDataset, indices: list[np.ndarray], mode: str) -> list[tuple[int, int]]:
    kind, only = parse_mode(mode)
    pairs = []
    for i, idx in enumerate(indices):
        if kind == SINGLE and i != only:
            continue
        pairs.extend((i, int(j)) for j in idx)
    return pairs


def _epoch_order(pairs: list, config: TrainConfig, epoch: int) -> list:
    if config.strict_order:
        return pairs
    rng = np.random.default_rng([config.seed, epoch])
    return [pairs[p] for p in rng.permutation(len(pairs))]


def train_epoch(state: TrainState, dataset: MultiSourceDataset, split: Split, config: TrainConfig,
                plans: PlanCache | None = None,
                grad_fn: Callable = gradients_from_plans) -> TrainState:
    """One pass over the supervised training samples with per-step Adam updates."""
    params = state.params
    plans = plans or PlanCache(params, dataset)
    kind, _ = parse_mode(config.mode)
    pairs = _epoch_order(_supervised_pairs(dataset, split.train, config.mode), config, state.epoch)
    sq_err = np.zeros(dataset.N)
    counts = np.zeros(dataset.N, dtype=int)
    objective, used = 0.0, 0
    batch: dict[str, np.ndarray] | None = None
    in_batch = 0

    def flush():
        nonlocal batch, in_batch
        if batch is None:
            return
        if in_batch > 1:
            for g in batch.values():
                g /= in_batch
        if kind == FROZEN:
            batch["fidelity.logits"][:] = 0.0
        adam_step(params, state.adam, batch, config.learning_rate, config.beta1, config.beta2, config.eps)
        batch, in_batch = None, 0

    for source, j in pairs:
        target = float(dataset[source].targets[j])
        try:
            step = grad_fn(params, plans.get(source, j), source, target, config.mode)
        except SampleSkipped:
            continue
        grads = step.grads
        sq_err[source] += step.squared_error
        counts[source] += 1
        objective += step.objective
        used += 1
        if batch is None:
            batch = grads
        else:
            for name, g in grads.items():
                batch[name] += g
        in_batch += 1
        if in_batch >= config.batch_size:
            flush()
    flush()
    if used == 0:
        raise TrainingError("no usable source: every training sample was skipped")

    state.epoch += 1
    per_source = [float(sq_err[i] / counts[i]) if counts[i] else None for i in range(dataset.N)]
    state.history.append({"epoch": state.epoch, "train_loss_per_source": per_source,
                          "train_objective": objective / used})
    return state


def validation_loss(params: ModelParams, dataset: MultiSourceDataset, split: Split, config: TrainConfig,
                    plans: PlanCache | None = None) -> float:
    """Mean fidelity-weighted squared error of fused predictions on the validation split."""
    plans = plans or PlanCache(params, dataset)
    kind, _ = parse_mode(config.mode)
    scores = params.scores
    total, used = 0.0, 0
    for source, j in _supervised_pairs(dataset, split.validation, config.mode):
        p = plans.get(source, j)
        try:
            pred, _ = forward_plans(params, p)
        except ModelError:
            continue
        w = 1.0 if kind == SINGLE else float(scores[source])
        total += w * loss(pred.fused, float(dataset[source].targets[j]))
        used += 1
    return total / used if used else math.inf


def new_state(dataset: MultiSourceDataset, config: TrainConfig) -> TrainState:
    params = init_params(dataset.feature_dims, config.hidden_dim, config.num_layers,
                         config.k_neighbors, seed=config.seed, activation=config.activation)
    return TrainState(params, AdamState.zeros_like(params))


def fit(dataset: MultiSourceDataset, config: TrainConfig, split: Split | None = None,
        state: TrainState | None = None, plans: PlanCache | None = None,
        on_epoch: Callable[[TrainState], None] | None = None) -> tuple[ModelParams, dict]:
    """Train with early stopping; returns the best-validation parameters and a report."""
    config.validate()
    if split is None:
        split = make_split(dataset, config.split_fractions, config.seed)
    kind, only = parse_mode(config.mode)
    if kind == SINGLE and not 0 <= only < dataset.N:
        raise ValueError(f"single-source index {only} out of range for {dataset.N} sources")
    state = state or new_state(dataset, config)
    if plans is None or plans.params.k != state.params.k or plans.dataset is not dataset:
        plans = PlanCache(state.params, dataset)
    # Plans only depend on k and the layer count; the cache can outlive params.
    plans.params = state.params

    while state.epoch < config.max_epochs and not state.stopped_early:
        train_epoch(state, dataset, split, config, plans)
        val = validation_loss(state.params, dataset, split, config, plans)
        rec = state.history[-1]
        rec["val_loss"] = val
        rec["fidelity_scores"] = state.params.scores.tolist()
        rec["fidelity_logits"] = state.params.logits.tolist()
        if not np.all(np.isfinite(state.params.logits)):
            raise TrainingError("numeric failure: non-finite fidelity logits")
        if val < state.best_val:
            state.best_val = val
            state.best_params = state.params.copy()
            state.best_epoch = state.epoch
            state.since_improvement = 0
        else:
            state.since_improvement += 1
        rec["best_val_loss"] = state.best_val
        log.info("epoch %d val %.6f scores %s", state.epoch, val, rec["fidelity_scores"])
        if on_epoch is not None:
            on_epoch(state)
        if state.since_improvement >= config.patience:
            state.stopped_early = True

    best = state.best_params or state.params
    report = {
        "config": config.to_json(),
        "epochs_run": state.epoch,
        "best_epoch": state.best_epoch,
        "best_val_loss": state.best_val if math.isfinite(state.best_val) else None,
        "stopped_early": state.stopped_early,
        "final_fidelity_scores": best.scores.tolist(),
        "final_fidelity_logits": best.logits.tolist(),
        "history": state.history,
    }
    return best, report


# ------------------------------------------------------------------ persistence

def save_training_checkpoint(path, state: TrainState, config: TrainConfig, split: Split) -> None:
    """Best params as the model, plus everything needed to resume bit-exactly."""
    best = state.best_params or state.params
    extra = {}
    for name, arr in state.params.blocks.items():
        extra[f"current.{name}"] = arr
        extra[f"adam.m.{name}"] = state.adam.m[name]
        extra[f"adam.v.{name}"] = state.adam.v[name]
    meta = {
        "config": config.to_json(),
        "split": {"seed": split.seed, "fractions": list(split.fractions)},
        "train": {"epoch": state.epoch, "adam_t": state.adam.t,
                  "best_val": state.best_val if math.isfinite(state.best_val) else None,
                  "best_epoch": state.best_epoch, "since_improvement": state.since_improvement,
                  "stopped_early": state.stopped_early, "has_best": state.best_params is not None,
                  "history": state.history},
    }
    save_checkpoint(path, best, extra, meta)


def load_training_checkpoint(path) -> tuple[TrainState, TrainConfig, dict]:
    best, extra, meta = load_checkpoint(path)
    names = list(best.blocks)
    tr = meta.get("train")
    if tr is None or not all(f"current.{n}" in extra for n in names):
        raise ValueError(f"{path}: checkpoint has no resumable training state")
    current = best.copy()
    for n in names:
        current.blocks[n] = extra[f"current.{n}"].copy()
    adam = AdamState({n: extra[f"adam.m.{n}"].copy() for n in names},
                     {n: extra[f"adam.v.{n}"].copy() for n in names}, tr["adam_t"])
    state = TrainState(current, adam, tr["epoch"],
                       tr["best_val"] if tr["best_val"] is not None else math.inf,
                       best if tr["has_best"] else None, tr["best_epoch"], tr["since_improvement"],
                       tr["history"], tr["stopped_early"])
    return state, TrainConfig.from_json(meta["config"]), meta
