import math

import numpy as np
import pytest

from dmsp.data import ScrConfig, Split, generate_scr, mask_target, split
from dmsp.model import build_plans, init_params
from dmsp.training import (AdamState, FROZEN, FULL, PlanCache, SampleSkipped, TrainConfig, TrainingError,
                           adam_step, compute_gradients, fit, gradients_from_plans, load_training_checkpoint,
                           loss, new_state, parse_mode, save_training_checkpoint, train_epoch)

from conftest import random_dataset


def fd_check(params, plans, source, target, mode, h=1e-5):
    step = gradients_from_plans(params, plans, source, target, mode)
    flat = params.flat()
    analytic = np.concatenate([step.grads[n].ravel() for n in params.blocks])
    numeric = np.empty_like(flat)
    for c in range(flat.size):
        saved = flat[c]
        flat[c] = saved + h
        params.set_flat(flat)
        up = gradients_from_plans(params, plans, source, target, mode).objective
        flat[c] = saved - h
        params.set_flat(flat)
        down = gradients_from_plans(params, plans, source, target, mode).objective
        flat[c] = saved
        numeric[c] = (up - down) / (2 * h)
    params.set_flat(flat)
    if mode == FROZEN:
        # Frozen logits are excluded from the update, not from the objective.
        n = params.N
        numeric[-n:] = 0.0
        analytic[-n:] = 0.0
    return analytic, numeric


def assert_grads_close(analytic, numeric):
    tol = np.maximum(1e-5 * np.abs(numeric), 1e-8)
    bad = np.abs(analytic - numeric) > tol
    assert not bad.any(), f"{bad.sum()} coordinates off, worst {np.max(np.abs(analytic - numeric))}"


@pytest.mark.parametrize("mode", [FULL, "single-source=0", "single-source=1", FROZEN])
@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(mode, seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(seed, sizes=(6, 6), feature_dims=(2, 1))
    params = init_params(ds.feature_dims, hidden_dim=4, num_layers=2, k=2, seed=seed)
    params.logits[:] = rng.normal(size=2)
    i, j = int(rng.integers(2)), int(rng.integers(6))
    plans = build_plans(params, mask_target(ds, i, j))
    assert_grads_close(*fd_check(params, plans, i, float(ds[i].targets[j]), mode))


def test_gradients_identity_activation_and_partial_sources():
    ds = random_dataset(4, sizes=(2, 8), feature_dims=(1, 2))
    params = init_params(ds.feature_dims, hidden_dim=3, num_layers=2, k=2, seed=1, activation="identity")
    plans = build_plans(params, mask_target(ds, 1, 3))
    assert plans[0] is not None
    assert_grads_close(*fd_check(params, plans, 1, float(ds[1].targets[3]), FULL))
    plans = build_plans(params, mask_target(ds, 0, 0))
    assert plans[0] is None
    step = gradients_from_plans(params, plans, 0, float(ds[0].targets[0]), FULL)
    assert not np.any(step.grads["conv.0.0.msg_W"])


def test_logit_gradient_sign_follows_loss_weight_path():
    ds = random_dataset(2, sizes=(6, 6), feature_dims=(2, 1))
    params = init_params(ds.feature_dims, hidden_dim=4, k=2, seed=0)
    view = mask_target(ds, 0, 2)
    step = compute_gradients(params, view, FULL)
    fusion_only = compute_gradients(params, view, "single-source=0")
    # Subtracting the fusion path (weight 1 instead of C_0) isolates d C_0 / d z:
    # raising the sampled source's own logit raises its weight and the objective.
    c = params.scores
    path = step.grads["fidelity.logits"] - c[0] * fusion_only.grads["fidelity.logits"]
    assert path[0] > 0 > path[1]
    np.testing.assert_allclose(path, step.squared_error * c[0] * (np.array([1.0, 0.0]) - c), rtol=1e-12)


def test_compute_gradients_skip_signal():
    ds = random_dataset(0, sizes=(2, 2), feature_dims=(1, 1))
    params = init_params(ds.feature_dims, hidden_dim=3, k=3, seed=0)
    with pytest.raises(SampleSkipped):
        compute_gradients(params, mask_target(ds, 0, 0))


def test_loss_examples():
    assert loss(3.0, 5.0) == 4.0
    assert loss(2.5, 2.5) == 0.0
    assert 0.5 * loss(3.0, 5.0) == 2.0


def test_parse_mode():
    assert parse_mode("full") == (FULL, None)
    assert parse_mode("single-source=3") == ("single-source", 3)
    for bad in ("single-source", "single-source=x", "half"):
        with pytest.raises(ValueError):
            parse_mode(bad)


def one_block_params(value=0.0, shape=(3,)):
    params = init_params([1], hidden_dim=2, seed=0)
    params.blocks = {"w": np.full(shape, value)}
    return params


def test_adam_zero_gradient_keeps_params():
    params = one_block_params(1.5)
    state = AdamState.zeros_like(params)
    adam_step(params, state, {"w": np.zeros(3)}, 1e-3)
    np.testing.assert_array_equal(params.blocks["w"], np.full(3, 1.5))


def test_adam_first_step_is_lr_sign():
    params = one_block_params()
    state = AdamState.zeros_like(params)
    g = np.array([3.0, -0.02, 1e4])
    adam_step(params, state, {"w": g}, 1e-3)
    np.testing.assert_allclose(params.blocks["w"], -1e-3 * np.sign(g), rtol=1e-5)


def test_adam_constant_gradient_unit_step():
    params = one_block_params()
    state = AdamState.zeros_like(params)
    g = np.array([0.5, -7.0, 1e-3])
    prev = params.blocks["w"].copy()
    for _ in range(1000):
        adam_step(params, state, {"w": g}, 1e-3)
        step = params.blocks["w"] - prev
        prev = params.blocks["w"].copy()
    np.testing.assert_allclose(np.abs(step), 1e-3, rtol=0.05)


def test_adam_shape_mismatch():
    params = one_block_params()
    with pytest.raises(ValueError, match="dimension error"):
        adam_step(params, AdamState.zeros_like(params), {"w": np.zeros(4)}, 1e-3)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(patience=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(mode="bogus").validate()
    cfg = TrainConfig(seed=4, mode="single-source=1", split_fractions=(0.5, 0.25, 0.25))
    assert TrainConfig.from_json(cfg.to_json()) == cfg


def all_train_split(ds):
    return Split([np.arange(s.n) for s in ds.sources], [np.arange(s.n) for s in ds.sources],
                 [np.arange(s.n) for s in ds.sources])


def test_epoch_on_two_sample_toy_updates_every_block():
    ds = random_dataset(3, sizes=(2, 2), feature_dims=(1, 2))
    cfg = TrainConfig(k_neighbors=1, hidden_dim=3, seed=0)
    state = new_state(ds, cfg)
    before = state.params.copy()
    train_epoch(state, ds, all_train_split(ds), cfg)
    for name, arr in state.params.blocks.items():
        assert not np.array_equal(arr, before.blocks[name]), name
    rec = state.history[-1]
    assert rec["epoch"] == 1 and len(rec["train_loss_per_source"]) == 2
    assert all(v is not None and v >= 0 for v in rec["train_loss_per_source"])


def test_frozen_mode_keeps_logits():
    ds = random_dataset(5, sizes=(8, 8), feature_dims=(1, 1))
    cfg = TrainConfig(k_neighbors=2, hidden_dim=3, seed=0, mode=FROZEN, max_epochs=3, patience=5)
    _, report = fit(ds, cfg)
    for rec in report["history"]:
        assert rec["fidelity_scores"] == [0.5, 0.5]
        assert rec["fidelity_logits"] == [0.0, 0.0]


def test_frozen_equals_full_with_logit_gradient_zeroed():
    ds = random_dataset(6, sizes=(8, 10), feature_dims=(2, 1))
    sp = split(ds, seed=0)
    base = TrainConfig(k_neighbors=2, hidden_dim=3, seed=1)

    def zeroed(*args):
        step = gradients_from_plans(*args)
        step.grads["fidelity.logits"][:] = 0.0
        return step

    a = new_state(ds, base)
    b = new_state(ds, TrainConfig(**{**base.__dict__, "mode": FROZEN}))
    for _ in range(2):
        train_epoch(a, ds, sp, base, grad_fn=zeroed)
        train_epoch(b, ds, sp, TrainConfig(**{**base.__dict__, "mode": FROZEN}))
    for name in a.params.blocks:
        assert a.params.blocks[name].tobytes() == b.params.blocks[name].tobytes()


def test_single_source_supervises_only_that_source():
    ds = random_dataset(7, sizes=(8, 10), feature_dims=(2, 1))
    cfg = TrainConfig(k_neighbors=2, hidden_dim=3, seed=0, mode="single-source=1")
    seen = []

    def spy(params, plans, source, target, mode):
        seen.append(source)
        return gradients_from_plans(params, plans, source, target, mode)

    state = new_state(ds, cfg)
    train_epoch(state, ds, split(ds, seed=0), cfg, grad_fn=spy)
    assert seen and set(seen) == {1}
    assert state.history[-1]["train_loss_per_source"][0] is None


def test_single_source_out_of_range():
    ds = random_dataset(7, sizes=(8, 10), feature_dims=(2, 1))
    with pytest.raises(ValueError):
        fit(ds, TrainConfig(mode="single-source=5", max_epochs=1))


def test_every_sample_skipped_aborts():
    ds = random_dataset(0, sizes=(3, 3), feature_dims=(1, 1))
    cfg = TrainConfig(k_neighbors=5, hidden_dim=3, seed=0)
    with pytest.raises(TrainingError, match="no usable source"):
        train_epoch(new_state(ds, cfg), ds, split(ds, seed=0), cfg)


def test_strict_order_is_sources_then_samples():
    ds = random_dataset(7, sizes=(5, 5), feature_dims=(1, 1))
    cfg = TrainConfig(k_neighbors=2, hidden_dim=3, seed=0, strict_order=True)
    order = []

    def spy(params, plans, source, target, mode):
        order.append((source, target))
        return gradients_from_plans(params, plans, source, target, mode)

    train_epoch(new_state(ds, cfg), ds, all_train_split(ds), cfg, grad_fn=spy)
    assert order == [(i, float(ds[i].targets[j])) for i in range(2) for j in range(5)]


def test_batch_size_knob_changes_step_count():
    ds = random_dataset(7, sizes=(6, 6), feature_dims=(1, 1))
    sp = all_train_split(ds)
    for bs, steps in ((1, 12), (4, 3), (5, 3)):
        cfg = TrainConfig(k_neighbors=2, hidden_dim=3, seed=0, batch_size=bs)
        state = new_state(ds, cfg)
        train_epoch(state, ds, sp, cfg)
        assert state.adam.t == steps


def test_identity_network_training_loss_decreases():
    ds = random_dataset(11, sizes=(12, 12), feature_dims=(1, 1), scale=3.0)
    cfg = TrainConfig(k_neighbors=2, hidden_dim=3, seed=0, activation="identity", learning_rate=1e-3,
                      strict_order=True)
    state = new_state(ds, cfg)
    sp = all_train_split(ds)
    plans = PlanCache(state.params, ds)
    losses = []
    for _ in range(10):
        train_epoch(state, ds, sp, cfg, plans)
        losses.append(state.history[-1]["train_objective"])
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_fit_is_deterministic():
    ds = random_dataset(9, sizes=(10, 12), feature_dims=(2, 1))
    cfg = TrainConfig(k_neighbors=2, hidden_dim=3, seed=5, max_epochs=3)
    p1, r1 = fit(ds, cfg)
    p2, r2 = fit(ds, cfg)
    assert p1.flat().tobytes() == p2.flat().tobytes()
    assert r1 == r2


def test_early_stopping_returns_best_epoch_params():
    ds = random_dataset(12, sizes=(10, 12), feature_dims=(2, 1))
    cfg = TrainConfig(k_neighbors=2, hidden_dim=3, seed=0, max_epochs=60, patience=1, learning_rate=0.05)
    snapshots = {}
    best, report = fit(ds, cfg, on_epoch=lambda s: snapshots.__setitem__(s.epoch, s.params.copy()))
    assert report["stopped_early"]
    assert report["epochs_run"] == report["best_epoch"] + 1
    assert best.flat().tobytes() == snapshots[report["best_epoch"]].flat().tobytes()
    vals = [r["best_val_loss"] for r in report["history"]]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert report["best_val_loss"] == min(r["val_loss"] for r in report["history"])


def test_resume_matches_uninterrupted_run(tmp_path):
    ds = random_dataset(13, sizes=(10, 12), feature_dims=(2, 1))
    cfg4 = TrainConfig(k_neighbors=2, hidden_dim=3, seed=2, max_epochs=4, patience=10)
    sp = split(ds, seed=2)
    full_state = new_state(ds, cfg4)
    fit(ds, cfg4, sp, full_state)

    cfg2 = TrainConfig(**{**cfg4.__dict__, "max_epochs": 2})
    half = new_state(ds, cfg2)
    fit(ds, cfg2, sp, half)
    save_training_checkpoint(tmp_path / "half.ckpt", half, cfg2, sp)
    state, cfg, meta = load_training_checkpoint(tmp_path / "half.ckpt")
    assert cfg == cfg2 and meta["split"]["seed"] == 2
    cfg.max_epochs = 4
    fit(ds, cfg, sp, state)
    save_training_checkpoint(tmp_path / "a.ckpt", state, cfg, sp)
    save_training_checkpoint(tmp_path / "b.ckpt", full_state, cfg4, sp)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_identical_sources_get_near_equal_scores():
    ds, _ = generate_scr(ScrConfig(n_high=150, n_low=150, noise_sigma=0.0, identical_sources=True), seed=0)
    cfg = TrainConfig(seed=0, max_epochs=25, patience=5)
    best, report = fit(ds, cfg)
    c = best.scores
    assert abs(c[0] - c[1]) < 0.15, c
    assert all(math.isfinite(z) for z in best.logits)
