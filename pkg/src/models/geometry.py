"""Camera model, projection and RANSAC-PnP pose recovery.

Poses are camera-to-world. Internally the solvers work on the world-to-camera
transform (R_cw, t_cw) so that X_c = R_cw X_w + t_cw. Camera axes follow the
pinhole convention: x right, y down, z forward.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import pandas as pd
from scipy.spatial.transform import Rotation

from ..utils.errors import DegenerateConfigurationError, GeometryError, NoConsensusError
from ..utils.logger import log

Z_MIN = 1e-6
ORTHO_TOL = 1e-9
STEP_TOL = 1e-10
# smallest / largest singular value of the reprojection Jacobian below which
# the pose is unobservable
RANK_TOL = 1e-8


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    return R


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")

    @classmethod
    def default(cls, height: int = 64, width: int = 64) -> "CameraIntrinsics":
        """Roughly 53 degrees horizontal field of view"""
        return cls(float(width), float(width), width / 2.0, height / 2.0)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, data: dict) -> "CameraIntrinsics":
        return cls(float(data["fx"]), float(data["fy"]), float(data["cx"]), float(data["cy"]))


class Pose:
    """Rigid camera-to-world transform [R|t], meters"""

    __slots__ = ("R", "t")

    def __init__(self, R: np.ndarray, t: np.ndarray):
        R = np.asarray(R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(t, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise GeometryError("pose has non-finite entries")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or np.linalg.det(R) <= 0:
            raise GeometryError("pose rotation is not in SO(3)")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            R = _orthonormalize(R)
        self.R = R
        self.t = t

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_world_to_camera(cls, R_cw: np.ndarray, t_cw: np.ndarray) -> "Pose":
        R_cw = np.asarray(R_cw, dtype=np.float64)
        return cls(R_cw.T, -R_cw.T @ np.asarray(t_cw, dtype=np.float64).reshape(3))

    @classmethod
    def look_at(cls, eye: Sequence[float], target: Sequence[float],
                up: Sequence[float] = (0.0, 0.0, 1.0)) -> "Pose":
        """Camera at ``eye`` whose optical axis passes through ``target``"""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        norm = np.linalg.norm(forward)
        if norm < Z_MIN:
            raise GeometryError("look_at target coincides with the eye")
        forward /= norm
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            # optical axis parallel to up: fall back to world y as up
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return cls(np.stack([right, down, forward], axis=1), eye)

    @property
    def center(self) -> np.ndarray:
        return self.t.copy()

    def world_to_camera(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.R.T, -self.R.T @ self.t

    def inverse(self) -> "Pose":
        R_cw, t_cw = self.world_to_camera()
        return Pose(R_cw, t_cw)

    def compose(self, other: "Pose") -> "Pose":
        """self * other"""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def to_dict(self) -> dict:
        return {"R": self.R.reshape(-1).tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Pose":
        return cls(np.asarray(data["R"], dtype=np.float64).reshape(3, 3), data["t"])

    def __repr__(self) -> str:
        return f"Pose(center={np.round(self.t, 4).tolist()})"


class RansacConfig:
    """RANSAC-PnP settings.

    ``uncertainty_percentile`` keeps cells at or below that percentile of
    predicted uncertainty; ``None`` disables the filter.
    """

    def __init__(self, max_iterations: int = 256, threshold_px: float = 8.0, sample_size: int = 4,
                 confidence: float = 0.999, refine_iterations: int = 50,
                 uncertainty_percentile: Optional[float] = 80.0):
        self.max_iterations = int(max_iterations)
        self.threshold_px = float(threshold_px)
        self.sample_size = int(sample_size)
        self.confidence = float(confidence)
        self.refine_iterations = int(refine_iterations)
        self.uncertainty_percentile = None if uncertainty_percentile is None else float(uncertainty_percentile)
        self.validate()

    def validate(self):
        if self.sample_size < 4:
            raise GeometryError("RANSAC sample size must be at least 4")
        if self.threshold_px <= 0:
            raise GeometryError("inlier threshold must be positive")
        if self.max_iterations <= 0 or self.refine_iterations <= 0:
            raise GeometryError("iteration counts must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise GeometryError("confidence must lie in (0, 1)")
        if self.uncertainty_percentile is not None and not 0.0 < self.uncertainty_percentile <= 100.0:
            raise GeometryError("uncertainty percentile must lie in (0, 100]")

    def to_dict(self) -> dict:
        return {
            "max_iterations": self.max_iterations,
            "threshold_px": self.threshold_px,
            "sample_size": self.sample_size,
            "confidence": self.confidence,
            "refine_iterations": self.refine_iterations,
            "uncertainty_percentile": self.uncertainty_percentile,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RansacConfig":
        unknown = set(data) - set(cls().to_dict())
        if unknown:
            raise GeometryError(f"unknown ransac keys: {sorted(unknown)}")
        return cls(**data)


def _to_camera(R_cw: np.ndarray, t_cw: np.ndarray, points: np.ndarray) -> np.ndarray:
    return points @ R_cw.T + t_cw


def _pinhole(K: CameraIntrinsics, X_c: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    z = X_c[:, 2]
    visible = z > Z_MIN
    uv = np.full((X_c.shape[0], 2), np.nan)
    zv = z[visible]
    uv[visible, 0] = K.fx * X_c[visible, 0] / zv + K.cx
    uv[visible, 1] = K.fy * X_c[visible, 1] / zv + K.cy
    return uv, visible


def project(pose: Pose, K: CameraIntrinsics, points_world: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Pixels (NaN where invisible) and visibility flags for world points"""
    points = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)
    R_cw, t_cw = pose.world_to_camera()
    return _pinhole(K, _to_camera(R_cw, t_cw, points))


def _check_correspondences(pixels: np.ndarray, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pixels.shape[0] != points.shape[0]:
        raise GeometryError(f"{pixels.shape[0]} pixels for {points.shape[0]} points")
    return pixels, points


def _residuals(R_cw, t_cw, pixels, points, K) -> Tuple[np.ndarray, np.ndarray]:
    X_c = _to_camera(R_cw, t_cw, points)
    z = np.where(np.abs(X_c[:, 2]) < Z_MIN, Z_MIN, X_c[:, 2])
    u = K.fx * X_c[:, 0] / z + K.cx
    v = K.fy * X_c[:, 1] / z + K.cy
    return np.stack([u - pixels[:, 0], v - pixels[:, 1]], axis=1).reshape(-1), X_c


def _jacobian(X_c: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """d(residual)/d(omega, delta_t) for the left perturbation X_c' = exp(omega) X_c + delta_t"""
    x, y, z = X_c[:, 0], X_c[:, 1], np.where(np.abs(X_c[:, 2]) < Z_MIN, Z_MIN, X_c[:, 2])
    m = X_c.shape[0]
    d_proj = np.zeros((m, 2, 3))
    d_proj[:, 0, 0] = K.fx / z
    d_proj[:, 0, 2] = -K.fx * x / (z * z)
    d_proj[:, 1, 1] = K.fy / z
    d_proj[:, 1, 2] = -K.fy * y / (z * z)
    # d X_c' / d omega = -[X_c]_x
    skew = np.zeros((m, 3, 3))
    skew[:, 0, 1], skew[:, 0, 2] = -X_c[:, 2], X_c[:, 1]
    skew[:, 1, 0], skew[:, 1, 2] = X_c[:, 2], -X_c[:, 0]
    skew[:, 2, 0], skew[:, 2, 1] = -X_c[:, 1], X_c[:, 0]
    J = np.concatenate([d_proj @ -skew, d_proj], axis=2)
    return J.reshape(2 * m, 6)


def _apply_update(R_cw, t_cw, delta):
    dR = Rotation.from_rotvec(delta[:3]).as_matrix()
    return dR @ R_cw, dR @ t_cw + delta[3:]


def pnp_refine(pixels: np.ndarray, points: np.ndarray, K: CameraIntrinsics, initial_pose: Pose,
               max_iterations: int = 50) -> Pose:
    """Gauss-Newton on squared pixel reprojection error.

    Args:
        pixels: (M, 2) observed pixel positions
        points: (M, 3) world points
        K: intrinsics
        initial_pose: camera-to-world starting point
        max_iterations: iteration cap

    Returns:
        Refined camera-to-world pose

    Raises:
        DegenerateConfigurationError: the reprojection Jacobian is rank deficient
    """
    pixels, points = _check_correspondences(pixels, points)
    if pixels.shape[0] < 4:
        raise GeometryError("pose refinement needs at least 4 correspondences")
    R_cw, t_cw = initial_pose.world_to_camera()
    r, X_c = _residuals(R_cw, t_cw, pixels, points, K)
    cost = float(r @ r)
    damping = 0.0
    for _ in range(max_iterations):
        J = _jacobian(X_c, K)
        s = np.linalg.svd(J, compute_uv=False)
        if s[0] == 0.0 or s[-1] < RANK_TOL * s[0]:
            raise DegenerateConfigurationError()
        H = J.T @ J
        g = J.T @ r
        delta = -np.linalg.solve(H + damping * np.eye(6), g)
        R_new, t_new = _apply_update(R_cw, t_cw, delta)
        r_new, X_new = _residuals(R_new, t_new, pixels, points, K)
        cost_new = float(r_new @ r_new)
        if cost_new <= cost:
            R_cw, t_cw, r, X_c, cost = R_new, t_new, r_new, X_new, cost_new
            damping = 0.0
            if np.linalg.norm(delta) < STEP_TOL:
                break
        else:
            # additive damping fallback
            damping = max(10.0 * damping, 1e-6 * float(np.trace(H)) / 6.0)
            if np.linalg.norm(delta) < STEP_TOL:
                break
    return Pose.from_world_to_camera(_orthonormalize(R_cw), t_cw)


def dlt_pose(pixels: np.ndarray, points: np.ndarray, K: CameraIntrinsics) -> Pose:
    """Linear pose from six or more non-coplanar correspondences"""
    pixels, points = _check_correspondences(pixels, points)
    m = pixels.shape[0]
    if m < 6:
        raise GeometryError("DLT needs at least 6 correspondences")
    x = (pixels[:, 0] - K.cx) / K.fx
    y = (pixels[:, 1] - K.cy) / K.fy
    Xh = np.hstack([points, np.ones((m, 1))])
    A = np.zeros((2 * m, 12))
    A[0::2, 0:4] = -Xh
    A[0::2, 8:12] = x[:, None] * Xh
    A[1::2, 4:8] = -Xh
    A[1::2, 8:12] = y[:, None] * Xh
    _, s, Vt = np.linalg.svd(A)
    if s[-2] < RANK_TOL * s[0]:
        raise DegenerateConfigurationError()
    P = Vt[-1].reshape(3, 4)
    P *= np.sign(np.linalg.det(P[:, :3]))
    scale = np.linalg.svd(P[:, :3], compute_uv=False).mean()
    R_cw = _orthonormalize(P[:, :3])
    t_cw = P[:, 3] / scale
    return Pose.from_world_to_camera(R_cw, t_cw)


def p3p_poses(pixels: np.ndarray, points: np.ndarray, K: CameraIntrinsics) -> List[Pose]:
    """All P3P solutions for exactly three correspondences"""
    try:
        count, rvecs, tvecs = cv2.solveP3P(
            np.ascontiguousarray(points, dtype=np.float64).reshape(3, 1, 3),
            np.ascontiguousarray(pixels, dtype=np.float64).reshape(3, 1, 2),
            K.matrix(), None, flags=cv2.SOLVEPNP_P3P)
    except cv2.error:
        return []
    poses = []
    for rvec, tvec in zip(rvecs if count else [], tvecs if count else []):
        R_cw, _ = cv2.Rodrigues(np.asarray(rvec, dtype=np.float64).reshape(3, 1))
        t_cw = np.asarray(tvec, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R_cw)) and np.all(np.isfinite(t_cw))):
            continue
        try:
            poses.append(Pose.from_world_to_camera(R_cw, t_cw))
        except GeometryError:
            continue
    return poses


def count_inliers(pose: Pose, pixels: np.ndarray, points: np.ndarray, K: CameraIntrinsics,
                  threshold_px: float) -> Tuple[np.ndarray, np.ndarray]:
    """Inlier mask and per-point reprojection error (inf when not visible)"""
    pixels, points = _check_correspondences(pixels, points)
    uv, visible = project(pose, K, points)
    errors = np.full(pixels.shape[0], np.inf)
    errors[visible] = np.linalg.norm(uv[visible] - pixels[visible], axis=1)
    return errors < threshold_px, errors


def _minimal_solve(pixels: np.ndarray, points: np.ndarray, K: CameraIntrinsics,
                   config: RansacConfig) -> List[Pose]:
    if pixels.shape[0] >= 6:
        try:
            seeds = [dlt_pose(pixels, points, K)]
        except GeometryError:
            seeds = []
    else:
        candidates = p3p_poses(pixels[:3], points[:3], K)
        if not candidates:
            return []
        # remaining sample points pick the P3P root
        errors = [np.nan_to_num(count_inliers(p, pixels[3:], points[3:], K, np.inf)[1], nan=np.inf).sum()
                  for p in candidates]
        seeds = [candidates[int(np.argmin(errors))]]
    hypotheses = []
    for seed in seeds:
        try:
            hypotheses.append(pnp_refine(pixels, points, K, seed, config.refine_iterations))
        except GeometryError:
            continue
    return hypotheses


def _required_iterations(inlier_ratio: float, sample_size: int, confidence: float) -> float:
    if inlier_ratio <= 0.0:
        return math.inf
    p_good = inlier_ratio ** sample_size
    if p_good >= 1.0:
        return 1.0
    return math.log(1.0 - confidence) / math.log(1.0 - p_good)


def ransac_pnp(pixels: np.ndarray, points: np.ndarray, K: CameraIntrinsics,
               config: Optional[RansacConfig] = None, seed: int = 0) -> Tuple[Pose, np.ndarray]:
    """Best pose by inlier count (ties: lower inlier RMS), refined on all inliers"""
    config = config or RansacConfig()
    pixels, points = _check_correspondences(pixels, points)
    m = pixels.shape[0]
    if m < config.sample_size:
        raise GeometryError(f"{m} correspondences, RANSAC needs at least {config.sample_size}")
    rng = np.random.default_rng(seed)

    best_pose: Optional[Pose] = None
    best_count, best_rms = 0, math.inf
    budget = float(config.max_iterations)
    iteration = 0
    while iteration < budget:
        iteration += 1
        sample = rng.choice(m, size=config.sample_size, replace=False)
        for pose in _minimal_solve(pixels[sample], points[sample], K, config):
            mask, errors = count_inliers(pose, pixels, points, K, config.threshold_px)
            count = int(mask.sum())
            if count == 0:
                continue
            rms = float(np.sqrt(np.mean(errors[mask] ** 2)))
            if count > best_count or (count == best_count and rms < best_rms):
                best_pose, best_count, best_rms = pose, count, rms
                budget = min(budget, _required_iterations(count / m, config.sample_size, config.confidence))
    if best_pose is None:
        raise NoConsensusError()

    # 1. refine on the consensus set, keep the refinement only if it does not lose inliers
    mask, _ = count_inliers(best_pose, pixels, points, K, config.threshold_px)
    for _ in range(2):
        if mask.sum() < 4:
            break
        try:
            refined = pnp_refine(pixels[mask], points[mask], K, best_pose, config.refine_iterations)
        except GeometryError:
            break
        new_mask, _ = count_inliers(refined, pixels, points, K, config.threshold_px)
        if new_mask.sum() < mask.sum():
            break
        best_pose, mask = refined, new_mask
    log.debug(f"RANSAC: {int(mask.sum())}/{m} inliers after {iteration} iterations")
    return best_pose, mask


def filter_by_uncertainty(uncertainty: np.ndarray, percentile: Optional[float]) -> np.ndarray:
    """Keep mask dropping the ceil((100 - q)% * Q) most uncertain cells; ties drop higher indices"""
    u = np.asarray(uncertainty, dtype=np.float64).reshape(-1)
    keep = np.ones(u.size, dtype=bool)
    if percentile is None:
        return keep
    n_drop = int(math.ceil((100.0 - percentile) * u.size / 100.0))
    if n_drop <= 0:
        return keep
    order = np.argsort(u, kind="stable")
    keep[order[u.size - n_drop:]] = False
    return keep


def pose_from_prediction(pred, K: CameraIntrinsics, config: Optional[RansacConfig] = None,
                         seed: int = 0) -> Tuple[Pose, Dict[str, int]]:
    """RANSAC-PnP over a prediction's (anchor, coordinate) pairs"""
    config = config or RansacConfig()
    coords = np.asarray(pred.coords, dtype=np.float64).reshape(-1, 3)
    anchors = np.asarray(pred.anchors, dtype=np.float64).reshape(-1, 2)
    keep = filter_by_uncertainty(pred.uncertainty, config.uncertainty_percentile)
    keep &= np.all(np.isfinite(coords), axis=1)
    if keep.sum() < config.sample_size:
        raise GeometryError(f"only {int(keep.sum())} cells survive filtering, need {config.sample_size}")
    pose, mask = ransac_pnp(anchors[keep], coords[keep], K, config, seed)
    diagnostics = {"inliers": int(mask.sum()), "dropped": int((~keep).sum()), "used": int(keep.sum())}
    return pose, diagnostics


def dump_correspondences(path, pixels: np.ndarray, points: np.ndarray, uncertainty: np.ndarray,
                         inliers: np.ndarray) -> str:
    pixels, points = _check_correspondences(pixels, points)
    table = pd.DataFrame({
        "u": pixels[:, 0], "v": pixels[:, 1],
        "x": points[:, 0], "y": points[:, 1], "z": points[:, 2],
        "uncertainty": np.asarray(uncertainty, dtype=np.float64).reshape(-1),
        "inlier_flag": np.asarray(inliers, dtype=bool).astype(int),
    })
    table.to_csv(path, index=False, float_format="%.6f")
    return str(path)
