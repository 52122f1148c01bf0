import math

import numpy as np
import pytest

from conftest import tiny_backbone
from src.logic.trainer import (AdamW, MultiTaskTrainer, TaskGradState, aggregate_shared, common_scale,
                               compute_task_gradients, cosine_lr, global_norm, normalize_shared,
                               relative_weights, stack_views, step)
from src.models.config import GradNormConfig, OptimizerConfig
from src.models.network import ModelBundle
from src.utils.errors import TrainingError


def _state(task, grad, prev=None):
    return TaskGradState(task, prev_shared_norm=prev, shared_grads={"w": np.asarray(grad, dtype=np.float64)})


def test_worked_example():
    states = [_state("a", [2.0, 0.0], prev=2.0), _state("b", [0.0, 8.0], prev=4.0)]
    weights = relative_weights(states)
    np.testing.assert_allclose(weights, [1.0 / 3.0, 2.0 / 3.0])
    scale = common_scale(states, weights)
    assert scale == pytest.approx(6.0)
    normalized = [normalize_shared(s, scale) for s in states]
    np.testing.assert_allclose(normalized[0]["w"], [6.0, 0.0])
    np.testing.assert_allclose(normalized[1]["w"], [0.0, 6.0])
    # per-task scale factors D / |G|
    assert scale / states[0].shared_norm == pytest.approx(3.0)
    assert scale / states[1].shared_norm == pytest.approx(0.75)


def test_first_iteration_weights_are_uniform():
    states = [_state(t, np.ones(3) * (i + 1)) for i, t in enumerate("abc")]
    np.testing.assert_allclose(relative_weights(states), [1.0 / 3.0] * 3)


@pytest.mark.parametrize("n", [2, 3, 5])
def test_normalized_norms_equal_the_common_scale(n, rng):
    for _ in range(20):
        states = [TaskGradState(f"t{i}", prev_shared_norm=float(rng.uniform(0.1, 5.0)),
                                shared_grads={"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4)})
                  for i in range(n)]
        weights = relative_weights(states)
        assert sum(weights[:-1]) + weights[-1] == 1.0
        scale = common_scale(states, weights)
        for state in states:
            assert global_norm(normalize_shared(state, scale)) == pytest.approx(scale, rel=1e-12)


def test_zero_norm_task_contributes_nothing():
    zero = _state("a", [0.0, 0.0], prev=1.0)
    other = _state("b", [3.0, 4.0], prev=5.0)
    weights = relative_weights([zero, other])
    np.testing.assert_allclose(weights, [0.0, 1.0])
    scale = common_scale([zero, other], weights)
    np.testing.assert_array_equal(normalize_shared(zero, scale)["w"], [0.0, 0.0])
    zero.roll()
    assert zero.ratio() == 1.0


def test_all_zero_ratios_are_degenerate():
    states = [_state("a", [0.0], prev=1.0), _state("b", [0.0], prev=2.0)]
    with pytest.raises(TrainingError):
        relative_weights(states)


def test_roll_with_moving_average():
    state = _state("a", [3.0, 4.0])
    state.roll(0.9)
    assert state.prev_shared_norm == 5.0
    state.shared_grads = {"w": np.array([0.0, 0.0])}
    state.roll(0.9)
    assert state.prev_shared_norm == pytest.approx(4.5)


def test_aggregate_checks_parameter_sets():
    assert aggregate_shared([{"w": np.ones(2)}, {"w": 3.0 * np.ones(2)}])["w"].tolist() == [2.0, 2.0]
    with pytest.raises(TrainingError):
        aggregate_shared([{"w": np.ones(2)}, {"v": np.ones(2)}])
    with pytest.raises(TrainingError):
        aggregate_shared([])


def test_cosine_schedule_endpoints():
    config = OptimizerConfig(lr=1e-3, iterations=100, lr_min=1e-5)
    assert cosine_lr(config, 0) == pytest.approx(1e-3)
    assert cosine_lr(config, 99) == pytest.approx(1e-5)
    assert cosine_lr(config, 50) < cosine_lr(config, 10)
    warm = OptimizerConfig(lr=1e-3, iterations=100, warmup_iters=10)
    assert cosine_lr(warm, 0) == pytest.approx(1e-4)


def test_weight_decay_skips_scores_and_biases():
    optimizer = AdamW(OptimizerConfig(weight_decay=0.5))
    zero = np.zeros(2)
    decayed, *_ = optimizer.propose("block1.conv1.weight@a", np.ones(2), zero, 0.1)
    kept, *_ = optimizer.propose("block1.conv1.score", np.ones(2), zero, 0.1)
    bias, *_ = optimizer.propose("block1.conv1.bias", np.ones(2), zero, 0.1)
    np.testing.assert_allclose(decayed, [0.95, 0.95])
    np.testing.assert_array_equal(kept, [1.0, 1.0])
    np.testing.assert_array_equal(bias, [1.0, 1.0])


def _task_gradients(bundle, views, task="scene_a"):
    batch = stack_views(views[:2])
    return compute_task_gradients(bundle, task, batch, beta=0.25)


def test_task_gradients_split_by_ownership(tiny_views):
    bundle, views = tiny_views
    state = _task_gradients(bundle, views)
    assert math.isfinite(state.loss)
    assert all("@" not in key for key in state.shared_grads)
    assert all(key.endswith("@scene_a") for key in state.specific_grads)
    assert set(bundle.score_names()) <= set(state.shared_grads)
    assert state.penalty == pytest.approx(1.0)


def test_step_is_atomic_on_non_finite_gradients(tiny_views):
    bundle, views = tiny_views
    state = _task_gradients(bundle, views)
    optimizer = AdamW(OptimizerConfig())
    before = bundle.shared_hash()
    bad = dict(state.specific_grads)
    key = sorted(bad)[0]
    bad[key] = np.full_like(bad[key], np.nan)
    with pytest.raises(TrainingError):
        step(bundle, state.shared_grads, {"scene_a": bad}, optimizer, 0)
    assert bundle.shared_hash() == before
    assert optimizer.t == {}

    step(bundle, state.shared_grads, {"scene_a": state.specific_grads}, optimizer, 0)
    assert bundle.shared_hash() != before


def test_frozen_shared_parameters_do_not_move(tiny_views):
    bundle, views = tiny_views
    state = _task_gradients(bundle, views)
    bundle.frozen_shared = True
    before = bundle.shared_hash()
    head_before = bundle.head.per_task["scene_a"]["conv2.bias"].copy()
    step(bundle, state.shared_grads, {"scene_a": state.specific_grads}, AdamW(OptimizerConfig()), 0)
    assert bundle.shared_hash() == before
    assert not np.array_equal(bundle.head.per_task["scene_a"]["conv2.bias"], head_before)


def _trainer(views, seed=0, **options):
    bundle = ModelBundle(tiny_backbone())
    bundle.register_task("scene_a")
    bundle.register_task("scene_b")
    config = OptimizerConfig(iterations=3, batch_size=2, log_every=1, **options)
    return MultiTaskTrainer(bundle, {"scene_a": views, "scene_b": views}, config, seed)


def test_training_is_deterministic(tiny_views, tmp_path):
    _, views = tiny_views
    first = _trainer(views).train()
    second = _trainer(views).train()
    assert len(first) == 3
    assert first.equals(second)
    assert {"iteration", "lr", "D", "loss_scene_a", "W_scene_b", "gnorm_scene_a"} <= set(first.columns)
    np.testing.assert_allclose(first[["W_scene_a", "W_scene_b"]].sum(axis=1), 1.0)


def test_training_without_gradnorm_uses_uniform_weights(tiny_views):
    _, views = tiny_views
    trainer = _trainer(views, gradnorm=GradNormConfig(enabled=False))
    table = trainer.train(2)
    assert table["W_scene_a"].tolist() == [0.5, 0.5]


def test_training_log_and_checkpoint_callback(tiny_views, tmp_path):
    _, views = tiny_views
    trainer = _trainer(views)
    seen = []
    trainer.train(checkpoint_fn=seen.append, checkpoint_every=2)
    assert seen == [1]
    path = trainer.write_log(tmp_path / "train_log.csv")
    assert open(path).readline().startswith("iteration")


def test_trainer_needs_data():
    bundle = ModelBundle(tiny_backbone())
    bundle.register_task("scene_a")
    with pytest.raises(TrainingError):
        MultiTaskTrainer(bundle, {}, OptimizerConfig())


@pytest.fixture
def tiny_views(small_views):
    _, (train, _) = small_views
    bundle = ModelBundle(tiny_backbone())
    bundle.register_task("scene_a")
    return bundle, train


def _random_states(rng, n):
    return [TaskGradState(f"t{i}", prev_shared_norm=float(rng.uniform(0.1, 5.0)),
                          shared_grads={"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4)})
            for i in range(n)]


def _balanced(states):
    weights = relative_weights(states)
    scale = common_scale(states, weights)
    return weights, scale, [normalize_shared(s, scale) for s in states]


@pytest.mark.parametrize("factor", [1e-3, 0.5, 7.0, 1e4])
def test_balancing_is_scale_equivariant(factor, rng):
    states = _random_states(rng, 3)
    scaled = [TaskGradState(s.task, prev_shared_norm=s.prev_shared_norm * factor,
                            shared_grads={k: v * factor for k, v in s.shared_grads.items()}) for s in states]
    weights, scale, normalized = _balanced(states)
    scaled_weights, scaled_scale, scaled_normalized = _balanced(scaled)
    np.testing.assert_allclose(scaled_weights, weights, rtol=1e-12)
    assert scaled_scale == pytest.approx(factor * scale, rel=1e-12)
    for ours, theirs in zip(normalized, scaled_normalized):
        for key in ours:
            np.testing.assert_allclose(theirs[key], factor * ours[key], rtol=1e-10)


def test_balancing_preserves_directions(rng):
    for _ in range(20):
        states = _random_states(rng, 4)
        _, scale, normalized = _balanced(states)
        assert scale > 0
        for state, grads in zip(states, normalized):
            for key, g in state.shared_grads.items():
                np.testing.assert_allclose(grads[key], g * (scale / state.shared_norm), rtol=1e-12)
            flat = np.concatenate([grads[k].reshape(-1) for k in sorted(grads)])
            original = np.concatenate([state.shared_grads[k].reshape(-1) for k in sorted(grads)])
            cosine = flat @ original / (np.linalg.norm(flat) * np.linalg.norm(original))
            assert cosine == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("n", [2, 3, 6])
def test_aggregated_gradient_is_bounded_by_the_common_scale(n, rng):
    for _ in range(20):
        states = _random_states(rng, n)
        _, scale, normalized = _balanced(states)
        assert global_norm(aggregate_shared(normalized)) <= scale * (1.0 + 1e-12)
    # identical directions reach the bound
    same = [TaskGradState(f"t{i}", prev_shared_norm=1.0, shared_grads={"w": (i + 1.0) * np.ones(3)})
            for i in range(n)]
    _, scale, normalized = _balanced(same)
    assert global_norm(aggregate_shared(normalized)) == pytest.approx(scale, rel=1e-12)


def test_single_task_gradient_passes_through(rng):
    for prev in (None, 0.3, 12.0):
        state = TaskGradState("only", prev_shared_norm=prev,
                              shared_grads={"w": rng.normal(size=(2, 3)), "b": rng.normal(size=3)})
        weights, scale, normalized = _balanced([state])
        assert weights.tolist() == [1.0]
        assert scale == state.shared_norm
        aggregated = aggregate_shared(normalized)
        for key, g in state.shared_grads.items():
            np.testing.assert_array_equal(aggregated[key], g)
