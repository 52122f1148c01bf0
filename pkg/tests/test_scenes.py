import numpy as np
import pytest

from src.data.dataset_manager import DatasetManager
from src.data.scenes import (cast_rays, coord_mean, generate_scene, make_dataset, related_scene, render_view,
                             supervision_consistent)
from src.models.geometry import CameraIntrinsics, Pose
from src.utils.errors import SceneError


def test_views_have_consistent_supervision(small_views):
    scene, (train, test) = small_views
    for view in train + test:
        assert view.image.shape == (32, 32, 3)
        assert view.gt_coords.shape == (4, 4, 3)
        assert view.valid.any()
        assert supervision_consistent(view)


def test_ground_truth_lies_on_the_surface(small_views):
    scene, (train, _) = small_views
    for view in train:
        pts = view.coords_flat[view.valid_flat]
        np.testing.assert_allclose(pts[:, 2], scene.height(pts[:, 0], pts[:, 1]), atol=1e-8)
        assert np.all(np.isnan(view.coords_flat[~view.valid_flat]))


def test_frame_ids_and_split_offsets(small_views):
    _, (train, test) = small_views
    assert [v.frame_id for v in train] == ["train_0000", "train_0001", "train_0002", "train_0003"]
    assert [v.frame_id for v in test] == ["test_0000", "test_0001"]
    centers = np.array([v.pose.center for v in train])
    for view in test:
        assert np.min(np.linalg.norm(centers - view.pose.center, axis=1)) > 1e-6


def test_cameras_stay_above_the_surface(small_views):
    scene, (train, test) = small_views
    for view in train + test:
        c = view.pose.center
        gap = c[2] - float(scene.height(c[0], c[1]))
        assert 0.9 <= gap <= 2.1
        # optical axis within the tilt limit of straight down
        tilt = np.degrees(np.arccos(-view.pose.R[2, 2]))
        assert tilt <= 20.0 + 1e-9


def test_rendering_is_deterministic():
    scene = generate_scene(5)
    K = CameraIntrinsics.default(16, 16)
    pose = Pose.look_at((2.0, 2.0, 1.8), (2.1, 2.0, 0.0))
    first = render_view(scene, pose, K, 16, 16, noise_seed=1)
    second = render_view(generate_scene(5), pose, K, 16, 16, noise_seed=1)
    np.testing.assert_array_equal(first.image, second.image)
    np.testing.assert_array_equal(first.valid, second.valid)


def test_camera_inside_geometry_is_rejected():
    scene = generate_scene(5)
    z = float(scene.height(2.0, 2.0)) - 0.1
    pose = Pose.look_at((2.0, 2.0, z), (2.0, 2.0, z - 1.0))
    with pytest.raises(SceneError):
        render_view(scene, pose, CameraIntrinsics.default(16, 16), 16, 16)


def test_rays_that_leave_the_scene_miss():
    scene = generate_scene(5)
    points, hits = cast_rays(scene, np.array([2.0, 2.0, 1.5]), np.array([[0.0, 0.0, -1.0], [1.0, 0.0, 0.3]]))
    assert hits.tolist() == [True, False]
    assert points[0, 2] == pytest.approx(float(scene.height(2.0, 2.0)), abs=1e-9)


def test_related_scenes_share_surface_not_texture():
    scene = generate_scene(5)
    other = related_scene(scene, 6)
    xs = np.linspace(0.0, 4.0, 7)
    np.testing.assert_array_equal(scene.height(xs, xs), other.height(xs, xs))
    pts = np.stack([xs, xs, np.zeros(7)], axis=1)
    assert not np.allclose(scene.texture(pts), other.texture(pts))


def test_coordinate_scale_changes_units_not_images():
    base = generate_scene(5)
    scaled = generate_scene(5, coord_scale=2.0)
    train, _ = make_dataset(base, 2, 1, height=16, width=16)
    train_s, _ = make_dataset(scaled, 2, 1, height=16, width=16)
    for a, b in zip(train, train_s):
        assert np.mean(np.isclose(a.image, b.image, atol=1e-6)) > 0.99
        both = a.valid_flat & b.valid_flat
        np.testing.assert_allclose(2.0 * a.coords_flat[both], b.coords_flat[both], rtol=1e-6, atol=1e-6)


def test_invalid_scenes_are_rejected():
    with pytest.raises(SceneError):
        generate_scene(1, extent=(0.0, 4.0))
    with pytest.raises(SceneError):
        make_dataset(generate_scene(1, extent=(2.0, 2.0)), 2, 1)
    with pytest.raises(SceneError):
        make_dataset(generate_scene(1), 0, 1)


def test_coord_mean_is_finite(small_views):
    _, (train, _) = small_views
    assert np.all(np.isfinite(coord_mean(train)))


def test_dataset_manager_round_trip(tmp_path, small_views):
    scene, (train, test) = small_views
    manager = DatasetManager(tmp_path / "data")
    manager.save("scene_x", scene, {"train": train, "test": test})
    assert manager.exists("scene_x")
    loaded_scene, splits = manager.load("scene_x")
    assert loaded_scene.to_dict() == scene.to_dict()
    for original, loaded in zip(train, splits["train"]):
        np.testing.assert_array_equal(original.image, loaded.image)
        np.testing.assert_array_equal(original.valid, loaded.valid)
        np.testing.assert_array_equal(original.gt_coords, loaded.gt_coords)
        np.testing.assert_allclose(original.pose.as_matrix(), loaded.pose.as_matrix())
        assert original.frame_id == loaded.frame_id


def test_missing_dataset_is_an_error(tmp_path):
    manager = DatasetManager(tmp_path)
    assert not manager.exists("nothing")
    with pytest.raises(SceneError):
        manager.load("nothing")


def test_scenes_are_told_apart_by_appearance(small_views):
    scene, (train, _) = small_views
    twins = [related_scene(scene, seed) for seed in (11, 12)]
    for view in train:
        again = render_view(scene, view.pose, view.K, 32, 32, noise_seed=99)
        hits = view.valid_flat
        assert hits.any()
        noise_gap = np.abs(view.image - again.image).mean()
        for twin in twins:
            other = render_view(twin, view.pose, view.K, 32, 32, noise_seed=99)
            # identical geometry, so only the texture can separate the scenes
            np.testing.assert_array_equal(other.gt_coords[other.valid], view.gt_coords[view.valid])
            assert np.abs(view.image - other.image).mean() > 5.0 * noise_gap
            own = np.linalg.norm(view.image - again.image, axis=-1)
            cross = np.linalg.norm(view.image - other.image, axis=-1)
            assert np.mean(own < cross) > 0.75


def test_unrelated_scenes_differ_in_geometry_and_texture():
    first, second = generate_scene(21), generate_scene(22)
    xs = np.linspace(0.5, 3.5, 9)
    x, y = np.meshgrid(xs, xs)
    assert np.abs(first.height(x, y) - second.height(x, y)).max() > 0.05
    pts = np.stack([x.reshape(-1), y.reshape(-1), first.height(x, y).reshape(-1)], axis=1)
    assert np.abs(first.texture(pts) - second.texture(pts)).mean() > 0.05
