import numpy as np
import pytest

from conftest import small_backbone, tiny_backbone
from src.models.network import (OUTPUT_STRIDE, UNCERTAINTY_FLOOR, BackboneConfig, ModelBundle, add_task,
                                cell_anchors, forward, param_partition)
from src.models.sharing import sharing_report
from src.utils.errors import ModelError


def test_backbone_config_validation():
    with pytest.raises(ModelError):
        BackboneConfig(widths=(16, 16, 32))
    with pytest.raises(ModelError):
        BackboneConfig(strides=(1, 1, 1, 2))
    with pytest.raises(ModelError):
        BackboneConfig(strategy="sometimes-shared")
    with pytest.raises(ModelError):
        BackboneConfig(kernel=4)
    with pytest.raises(ModelError):
        BackboneConfig.from_dict({"depth": 50})
    config = small_backbone()
    assert BackboneConfig.from_dict(config.to_dict()).to_dict() == config.to_dict()


def test_cell_anchors_are_stride_eight_centers():
    anchors = cell_anchors(16, 16)
    np.testing.assert_array_equal(anchors, [[4, 4], [12, 4], [4, 12], [12, 12]])


def test_forward_shapes_and_positive_uncertainty(rng):
    bundle = ModelBundle(small_backbone())
    bundle.register_task("a")
    pred = forward(bundle, "a", rng.normal(size=(32, 32, 3)))
    q = (32 // OUTPUT_STRIDE) ** 2
    assert pred.coords.shape == (q, 3)
    assert pred.uncertainty.shape == (q, 1)
    assert pred.anchors.shape == (q, 2)
    assert np.all(pred.uncertainty >= UNCERTAINTY_FLOOR)

    batch = forward(bundle, "a", rng.normal(size=(3, 32, 32, 3)))
    assert len(batch) == 3


def test_head_starts_at_the_scene_mean(rng):
    bundle = ModelBundle(small_backbone())
    mean = np.array([2.0, 2.0, 0.1])
    bundle.register_task("a", coord_mean=mean)
    pred = forward(bundle, "a", rng.normal(size=(32, 32, 3)))
    np.testing.assert_allclose(pred.coords.mean(axis=0), mean, atol=0.5)


def test_bad_inputs_are_rejected(rng):
    bundle = ModelBundle(tiny_backbone())
    bundle.register_task("a")
    with pytest.raises(ModelError):
        bundle.register_task("a")
    with pytest.raises(ModelError):
        bundle.forward("missing", rng.normal(size=(16, 16, 3)))
    with pytest.raises(ModelError):
        bundle.forward("a", rng.normal(size=(20, 20, 3)))
    with pytest.raises(ModelError):
        bundle.forward("a", rng.normal(size=(16, 16, 1)))


def test_param_partition_follows_the_gates(tiny_bundle):
    shared, specific = param_partition(tiny_bundle, "scene_a")
    # scores start at 1.0, above the threshold
    assert all("@" not in key and key.endswith(".score") for key in shared)
    assert "pre.conv.weight@scene_a" in specific

    for layer in tiny_bundle.gated_layers():
        layer.score = np.array(-0.2)
    shared, specific = param_partition(tiny_bundle, "scene_a")
    assert "pre.conv.weight" in shared
    assert all(key.endswith("@scene_a") for key in specific)
    assert all(tiny_bundle.is_shared_key(key) for key in shared)
    assert not any(tiny_bundle.is_shared_key(key) for key in specific)


def test_tasks_differ_only_in_their_own_parameters(tiny_bundle, rng):
    for layer in tiny_bundle.gated_layers():
        layer.score = np.array(0.0)
    image = rng.normal(size=(16, 16, 3))
    a = forward(tiny_bundle, "scene_a", image)
    b = forward(tiny_bundle, "scene_b", image)
    assert not np.array_equal(a.coords, b.coords)
    _, spec_a = tiny_bundle.visible_parameters("scene_a")
    _, spec_b = tiny_bundle.visible_parameters("scene_b")
    assert not set(spec_a) & set(spec_b)


def test_training_forward_updates_running_statistics(tiny_bundle, rng):
    norm = tiny_bundle.norms["pre.norm"]
    before = norm.running["scene_a"]["mean"].copy()
    tiny_bundle.forward("scene_a", rng.normal(size=(2, 16, 16, 3)), training=False)
    np.testing.assert_array_equal(norm.running["scene_a"]["mean"], before)
    tiny_bundle.forward("scene_a", rng.normal(size=(2, 16, 16, 3)), training=True)
    assert not np.array_equal(norm.running["scene_a"]["mean"], before)
    np.testing.assert_array_equal(norm.running["scene_b"]["mean"], before)


def test_construction_is_deterministic():
    first = ModelBundle(small_backbone(seed=3))
    second = ModelBundle(small_backbone(seed=3))
    other = ModelBundle(small_backbone(seed=4))
    assert first.shared_hash() == second.shared_hash()
    assert first.shared_hash() != other.shared_hash()


def test_add_task_can_freeze_shared(tiny_bundle):
    add_task(tiny_bundle, "scene_c", freeze_shared=True, coord_mean=[1.0, 1.0, 0.0])
    assert tiny_bundle.frozen_shared
    assert tiny_bundle.tasks[-1] == "scene_c"
    assert tiny_bundle.task_private_count("scene_c") == tiny_bundle.task_private_count("scene_a")


def test_no_attention_drops_gates():
    bundle = ModelBundle(tiny_backbone(attention=False))
    bundle.register_task("a")
    assert bundle.gates == {}
    with_gates = ModelBundle(tiny_backbone())
    with_gates.register_task("a")
    assert bundle.task_private_count("a") < with_gates.task_private_count("a")


def test_param_partition_does_not_materialize(tiny_bundle):
    # a fresh task on layers that just turned specific
    before = sharing_report(tiny_bundle).specific_params
    shared, specific = param_partition(tiny_bundle, "scene_b")
    assert "pre.conv.weight@scene_b" in specific
    assert all(layer.specific == {} for layer in tiny_bundle.adaptive_layers())
    assert sharing_report(tiny_bundle).specific_params == before


def test_param_partition_holds_for_random_scores(tiny_bundle):
    rng = np.random.default_rng(7)
    layers = tiny_bundle.gated_layers()
    for _ in range(100):
        for layer in layers:
            layer.score = np.array(rng.uniform(-1.5, 1.5))
        for task in tiny_bundle.tasks:
            shared, specific = param_partition(tiny_bundle, task)
            assert not shared & specific
            assert all("@" not in key for key in shared)
            assert all(key.endswith(f"@{task}") for key in specific)
            assert set(tiny_bundle.score_names()) <= shared
            for layer in layers:
                uses_shared = f"{layer.name}.weight" in shared
                assert uses_shared == (float(layer.score) < layer.threshold)
                assert uses_shared != (f"{layer.name}.weight@{task}" in specific)
    assert all(layer.specific == {} for layer in layers)


def test_add_task_leaves_old_tasks_untouched(tiny_bundle, rng):
    for layer in list(tiny_bundle.gated_layers())[::2]:
        layer.score = np.array(0.1)
    image = rng.normal(size=(16, 16, 3))
    before = {task: forward(tiny_bundle, task, image) for task in tiny_bundle.tasks}
    shared_hash = tiny_bundle.shared_hash()

    add_task(tiny_bundle, "scene_c", coord_mean=[2.0, -1.0, 0.5])
    forward(tiny_bundle, "scene_c", image, training=True)
    assert tiny_bundle.shared_hash() == shared_hash
    for task, prediction in before.items():
        after = forward(tiny_bundle, task, image)
        np.testing.assert_array_equal(after.coords, prediction.coords)
        np.testing.assert_array_equal(after.uncertainty, prediction.uncertainty)


def test_other_tasks_private_parameters_do_not_leak(tiny_bundle, rng):
    for layer in list(tiny_bundle.gated_layers())[1::2]:
        layer.score = np.array(-0.3)
    image = rng.normal(size=(16, 16, 3))
    forward(tiny_bundle, "scene_b", image, training=True)
    reference = forward(tiny_bundle, "scene_a", image)

    for module in tiny_bundle.task_private_modules():
        branch = module.per_task["scene_b"]
        for pname in branch:
            branch[pname] = branch[pname] + rng.normal(size=branch[pname].shape)
    for layer in tiny_bundle.adaptive_layers():
        branch = layer.specific.get("scene_b", {})
        for pname in branch:
            branch[pname] = branch[pname] + rng.normal(size=branch[pname].shape)
    for stats in (norm.running["scene_b"] for norm in tiny_bundle.norms.values()):
        stats["mean"] = stats["mean"] + 1.0

    after = forward(tiny_bundle, "scene_a", image)
    np.testing.assert_array_equal(after.coords, reference.coords)
    np.testing.assert_array_equal(after.uncertainty, reference.uncertainty)
