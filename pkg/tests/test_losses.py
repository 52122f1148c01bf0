import numpy as np
import pandas as pd
import pytest
from scipy.spatial.transform import Rotation

from src.models.autodiff import Graph, backward, evaluate
from src.models.geometry import Pose
from src.models.losses import (PoseError, accuracy_5cm5deg, cumulative_accuracy, frame_table, median_errors,
                               metrics_table, optimal_uncertainty, pose_error, rotation_error, scene_coord_loss,
                               scene_coord_loss_graph, summary_row, total_loss, write_csv)
from src.models.network import CoordPrediction
from src.utils.errors import LossError


def _prediction(coords, uncertainty):
    coords = np.asarray(coords, dtype=np.float64)
    return CoordPrediction(coords, np.asarray(uncertainty, dtype=np.float64).reshape(-1, 1),
                           np.zeros((coords.shape[0], 2)))


def test_scene_coord_loss_oracle():
    pred = _prediction(np.zeros((2, 3)), [1.0, 1.0])
    gt = np.ones((2, 3))
    # 3 log 1 + 3 / 2
    assert scene_coord_loss(pred, gt, np.array([True, True])) == pytest.approx(1.5)


def test_masked_cells_are_ignored():
    pred = _prediction(np.zeros((2, 3)), [1.0, 2.0])
    gt = np.array([[0.0, 0.0, 0.0], [np.nan, np.nan, np.nan]])
    assert scene_coord_loss(pred, gt, np.array([True, False])) == pytest.approx(0.0)
    with pytest.raises(LossError):
        scene_coord_loss(pred, gt, np.array([False, False]))


def test_non_positive_uncertainty_is_rejected():
    pred = _prediction(np.zeros((1, 3)), [0.0])
    with pytest.raises(LossError):
        scene_coord_loss(pred, np.zeros((1, 3)), np.array([True]))


def test_optimal_uncertainty_minimizes_the_loss():
    r = 0.3
    u_star = optimal_uncertainty(r)

    def loss(u):
        return scene_coord_loss(_prediction([[r, 0.0, 0.0]], [u]), np.zeros((1, 3)), np.array([True]))

    assert loss(u_star) < loss(0.95 * u_star)
    assert loss(u_star) < loss(1.05 * u_star)


def test_graph_loss_matches_per_image_average(rng):
    coords = rng.normal(size=(2, 4, 3))
    uncertainty = rng.uniform(0.5, 2.0, size=(2, 4, 1))
    gt = rng.normal(size=(2, 4, 3))
    valid = np.array([[True, True, False, True], [False, True, False, False]])
    g = Graph()
    node = scene_coord_loss_graph(g, g.input("c"), g.input("u"), gt, valid)
    value = float(evaluate(g, {"c": coords, "u": uncertainty}).value(node))
    expected = np.mean([scene_coord_loss(_prediction(coords[i], uncertainty[i]), gt[i], valid[i])
                        for i in range(2)])
    assert value == pytest.approx(expected, rel=1e-12)


def test_total_loss():
    assert total_loss(1.0, 0.4) == pytest.approx(1.1)
    with pytest.raises(LossError):
        total_loss(1.0, 0.4, beta=-1.0)


def test_pose_error_of_known_offsets():
    gt = Pose.identity()
    assert pose_error(gt, gt) == PoseError(0.0, 0.0)
    est = Pose(Rotation.from_euler("z", 90, degrees=True).as_matrix(), [0.03, 0.04, 0.0])
    err = pose_error(est, gt)
    assert err.translation_error == pytest.approx(0.05)
    assert err.rotation_error == pytest.approx(90.0)


def test_rotation_error_rejects_non_rotations():
    with pytest.raises(LossError):
        rotation_error(2.0 * np.eye(3), np.eye(3))
    with pytest.raises(LossError):
        rotation_error(np.diag([1.0, 1.0, -1.0]), np.eye(3))


def test_pose_error_validation():
    with pytest.raises(LossError):
        PoseError(-0.1, 1.0)
    with pytest.raises(LossError):
        PoseError(0.1, 181.0)


def test_accuracy_four_frame_example():
    errors = [PoseError(0.01, 1.0), PoseError(0.04, 4.9), PoseError(0.06, 1.0), PoseError(0.01, 6.0)]
    assert accuracy_5cm5deg(errors) == 50.0


def test_accuracy_thresholds_are_strict():
    assert accuracy_5cm5deg([PoseError(0.05, 1.0)]) == 0.0
    assert accuracy_5cm5deg([PoseError(0.01, 5.0)]) == 0.0
    with pytest.raises(LossError):
        accuracy_5cm5deg([])


def test_median_of_even_length_takes_midpoint():
    errors = [PoseError(t, r) for t, r in [(0.1, 4.0), (0.3, 1.0), (0.2, 3.0), (0.4, 2.0)]]
    assert median_errors(errors) == (pytest.approx(0.25), pytest.approx(2.5))
    with pytest.raises(LossError):
        median_errors([])


def test_metrics_match_brute_force(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        t = rng.uniform(0.0, 0.1, size=n)
        r = rng.uniform(0.0, 10.0, size=n)
        errors = [PoseError(float(a), float(b)) for a, b in zip(t, r)]
        hits = sum(1 for a, b in zip(t, r) if a < 0.05 and b < 5.0)
        assert accuracy_5cm5deg(errors) == pytest.approx(100.0 * hits / n)
        med_t, med_r = median_errors(errors)
        assert med_t == pytest.approx(np.median(t))
        assert med_r == pytest.approx(np.median(r))


def test_cumulative_accuracy_is_monotone(rng):
    errors = [PoseError(float(a), float(b)) for a, b in zip(rng.uniform(0, 0.2, 50), rng.uniform(0, 20, 50))]
    curve = cumulative_accuracy(errors, [(0.01 * k, 1.0 * k) for k in range(1, 21)])
    assert curve == sorted(curve)
    assert cumulative_accuracy(errors, [(0.05, 5.0)]) == [accuracy_5cm5deg(errors)]


def test_frame_table_ends_with_summary(tmp_path):
    errors = [PoseError(0.01, 1.0), PoseError(0.2, 10.0)]
    table = frame_table("scene_a", errors, ["f0", "f1"], "abc")
    assert list(table["frame"]) == ["f0", "f1", "summary"]
    assert table.iloc[-1]["acc_5cm5deg"] == 50.0

    path = write_csv(table, tmp_path / "frames.csv")
    text = open(path).read()
    assert "0.010000" in text
    assert pd.read_csv(path)["config_hash"].tolist() == ["abc"] * 3


def test_metrics_table_columns():
    row = summary_row("scene_a", [PoseError(0.01, 1.0)], "abc")
    table = metrics_table([row])
    assert list(table.columns) == ["scene", "median_trans_m", "median_rot_deg", "acc_5cm5deg", "n_frames",
                                   "config_hash"]
    assert table.iloc[0]["n_frames"] == 1


def test_rotation_error_is_symmetric(rng):
    for _ in range(20):
        a, b = Rotation.random(2, random_state=int(rng.integers(1 << 31))).as_matrix()
        assert rotation_error(a, b) == pytest.approx(rotation_error(b, a), abs=1e-9)
        assert rotation_error(a, a) == pytest.approx(0.0, abs=1e-5)


@pytest.mark.parametrize("axis", [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [1.0, 2.0, -2.0]])
def test_half_turn_is_one_eighty_degrees(axis):
    axis = np.asarray(axis) / np.linalg.norm(axis)
    half_turn = Rotation.from_rotvec(np.pi * axis).as_matrix()
    assert rotation_error(half_turn, np.eye(3)) == pytest.approx(180.0, abs=1e-5)
    assert rotation_error(np.eye(3), half_turn) == pytest.approx(180.0, abs=1e-5)


def test_uncertainty_gradient_vanishes_at_the_optimum(rng):
    gt = rng.normal(size=(1, 5, 3))
    residuals = rng.normal(size=(1, 5, 3))
    r = np.linalg.norm(residuals, axis=-1, keepdims=True)
    valid = np.ones((1, 5), dtype=bool)
    g = Graph()
    node = scene_coord_loss_graph(g, g.input("c"), g.param("u"), gt, valid)
    g.output("loss", node)

    def u_grad(u):
        return backward(evaluate(g, {"c": gt + residuals, "u": u}), "loss")["u"]

    u_star = np.vectorize(optimal_uncertainty)(r)
    np.testing.assert_allclose(u_grad(u_star), 0.0, atol=1e-10)
    assert (u_grad(0.8 * u_star) < 0).all()
    assert (u_grad(1.25 * u_star) > 0).all()
