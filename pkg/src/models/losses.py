"""Scene-coordinate likelihood loss and pose evaluation metrics"""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
import pandas as pd

from ..utils.errors import LossError
from .autodiff import Graph

DEFAULT_BETA = 0.25
TRANSLATION_THRESHOLD_M = 0.05
ROTATION_THRESHOLD_DEG = 5.0
CSV_FLOAT_FORMAT = "%.6f"


@dataclass(frozen=True)
class PoseError:
    translation_error: float  # meters
    rotation_error: float     # degrees

    def __post_init__(self):
        if self.translation_error < 0 or not 0 <= self.rotation_error <= 180.0 + 1e-9:
            raise LossError(f"invalid pose error ({self.translation_error}, {self.rotation_error})")


def _valid_weights(valid_mask: np.ndarray) -> np.ndarray:
    """Per-cell weights 1/Q_v per image, averaged over images with any valid cell"""
    valid = np.asarray(valid_mask, dtype=bool)
    if valid.ndim == 1:
        valid = valid[None]
    counts = valid.sum(axis=1)
    usable = counts > 0
    if not usable.any():
        raise LossError("scene coordinate loss needs at least one valid cell")
    weights = np.zeros(valid.shape)
    weights[usable] = valid[usable] / counts[usable, None]
    return weights / usable.sum()


def scene_coord_loss(pred, gt_coords: np.ndarray, valid_mask: np.ndarray) -> float:
    """Uncertainty-weighted coordinate loss on one prediction: mean over valid cells of 3 log u + |d - d_hat|^2 / (2 u^2)"""
    coords = np.asarray(pred.coords, dtype=np.float64)
    uncertainty = np.asarray(pred.uncertainty, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt_coords, dtype=np.float64).reshape(coords.shape)
    valid = np.asarray(valid_mask, dtype=bool).reshape(-1)
    if valid.size != coords.shape[0]:
        raise LossError(f"mask of {valid.size} cells for {coords.shape[0]} predictions")
    if not valid.any():
        raise LossError("scene coordinate loss needs at least one valid cell")
    u = uncertainty[valid]
    if np.any(u <= 0):
        raise LossError("uncertainty must be strictly positive")
    sq = np.sum((gt[valid] - coords[valid]) ** 2, axis=1)
    return float(np.mean(3.0 * np.log(u) + sq / (2.0 * u * u)))


def scene_coord_loss_graph(graph: Graph, coords: int, uncertainty: int, gt_coords: np.ndarray,
                           valid_mask: np.ndarray) -> int:
    """Coordinate loss as graph nodes for a batch: coords (N, Q, 3), uncertainty (N, Q, 1).

    Each image contributes the mean over its valid cells; images are averaged.
    """
    gt = np.nan_to_num(np.asarray(gt_coords, dtype=np.float64))
    weights = _valid_weights(valid_mask)
    g = graph
    residual = g.sub(coords, g.const(gt.reshape(weights.shape + (3,))))
    sq = g.sum(g.square(residual), axis=-1, keepdims=True)
    log_term = g.mul(g.const(3.0), g.log(uncertainty))
    fit_term = g.div(sq, g.mul(g.const(2.0), g.square(uncertainty)))
    per_cell = g.add(log_term, fit_term)
    return g.sum(g.mul(per_cell, g.const(weights[..., None])))


def optimal_uncertainty(residual_norm: float) -> float:
    """Minimizer of 3 log u + r^2 / (2 u^2) over u"""
    return residual_norm / np.sqrt(3.0)


def total_loss(sc_loss: float, penalty: float, beta: float = DEFAULT_BETA) -> float:
    """Coordinate loss plus beta-weighted sparsity penalty"""
    if beta < 0:
        raise LossError("beta must be non-negative")
    return sc_loss + beta * penalty


def _check_rotation(R: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise LossError(f"rotation must be 3x3, got {R.shape}")
    if not np.allclose(R.T @ R, np.eye(3), atol=tol) or abs(np.linalg.det(R) - 1.0) > tol:
        raise LossError("input is not a rotation matrix")
    return R


def rotation_error(R_est: np.ndarray, R_gt: np.ndarray) -> float:
    """Geodesic angle between two rotations, degrees"""
    R_est = _check_rotation(R_est)
    R_gt = _check_rotation(R_gt)
    cos = np.clip((np.trace(R_est.T @ R_gt) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


def translation_error(t_est: np.ndarray, t_gt: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(t_est, dtype=np.float64).reshape(3) - np.asarray(t_gt).reshape(3)))


def pose_error(est, gt) -> PoseError:
    """Errors between two camera-to-world poses (objects with R and t)"""
    return PoseError(translation_error(est.t, gt.t), rotation_error(est.R, gt.R))


def accuracy_5cm5deg(errors: Sequence[PoseError]) -> float:
    """Percentage of frames strictly under 5 cm and 5 degrees"""
    if not errors:
        raise LossError("accuracy needs at least one pose error")
    hits = sum(1 for e in errors
               if e.translation_error < TRANSLATION_THRESHOLD_M and e.rotation_error < ROTATION_THRESHOLD_DEG)
    return 100.0 * hits / len(errors)


def _median(values: List[float]) -> float:
    ordered = sorted(values)
    mid = len(ordered) // 2
    if len(ordered) % 2:
        return ordered[mid]
    return 0.5 * (ordered[mid - 1] + ordered[mid])


def median_errors(errors: Sequence[PoseError]) -> Tuple[float, float]:
    """Component-wise medians; even lengths take the midpoint of the two central values"""
    if not errors:
        raise LossError("median needs at least one pose error")
    return (_median([e.translation_error for e in errors]),
            _median([e.rotation_error for e in errors]))


def cumulative_accuracy(errors: Sequence[PoseError],
                        thresholds: Iterable[Tuple[float, float]]) -> List[float]:
    """Percentage under each (meters, degrees) threshold pair"""
    if not errors:
        raise LossError("accuracy needs at least one pose error")
    out = []
    for t_thr, r_thr in thresholds:
        hits = sum(1 for e in errors if e.translation_error < t_thr and e.rotation_error < r_thr)
        out.append(100.0 * hits / len(errors))
    return out


def summary_row(scene: str, errors: Sequence[PoseError], config_hash: str = "") -> Dict[str, object]:
    med_t, med_r = median_errors(errors)
    return {
        "scene": scene,
        "median_trans_m": med_t,
        "median_rot_deg": med_r,
        "acc_5cm5deg": accuracy_5cm5deg(errors),
        "n_frames": len(errors),
        "config_hash": config_hash,
    }


def metrics_table(rows: Sequence[Dict[str, object]]) -> pd.DataFrame:
    columns = ["scene", "median_trans_m", "median_rot_deg", "acc_5cm5deg", "n_frames", "config_hash"]
    return pd.DataFrame(list(rows), columns=columns)


def frame_table(scene: str, errors: Sequence[PoseError], frame_ids: Sequence[str],
                config_hash: str = "") -> pd.DataFrame:
    """Per-frame errors followed by one summary row"""
    rows = [{"scene": scene, "frame": fid, "trans_err_m": e.translation_error,
             "rot_err_deg": e.rotation_error, "acc_5cm5deg": np.nan, "config_hash": config_hash}
            for fid, e in zip(frame_ids, errors)]
    summary = summary_row(scene, errors, config_hash)
    rows.append({"scene": scene, "frame": "summary", "trans_err_m": summary["median_trans_m"],
                 "rot_err_deg": summary["median_rot_deg"], "acc_5cm5deg": summary["acc_5cm5deg"],
                 "config_hash": config_hash})
    return pd.DataFrame(rows, columns=["scene", "frame", "trans_err_m", "rot_err_deg", "acc_5cm5deg", "config_hash"])


def write_csv(table: pd.DataFrame, path) -> str:
    table.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    return str(path)
