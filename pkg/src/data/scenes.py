"""
Procedural desk-scale scenes: a textured height field, camera trajectories
above it, and ray-cast views with per-cell ground-truth scene coordinates.
"""

import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from ..models.geometry import CameraIntrinsics, Pose, project
from ..models.network import OUTPUT_STRIDE, cell_anchors
from ..utils.errors import SceneError
from ..utils.logger import log

IMAGE_NOISE = 0.01
# Ray march step (unscaled meters) before bisection
MARCH_STEP = 0.02
BISECTION_STEPS = 40
CAMERA_HEIGHT = (1.0, 2.0)
MAX_TILT_DEG = 20.0
EDGE_MARGIN = 1.2


def _waves(rng: np.random.Generator, count: int, dims: int, cycles: Tuple[float, float]):
    """Random sinusoid frequencies (cycles per unit), phases and unit-sum amplitudes"""
    directions = rng.normal(size=(count, dims))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    freqs = directions * rng.uniform(*cycles, size=(count, 1))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=count)
    amps = rng.uniform(0.5, 1.0, size=count)
    return freqs, phases, amps / amps.sum()


@dataclass
class SceneSpec:
    """A height field z = h(x, y) over [0, ex] x [0, ey] with a smooth 3D texture.

    ``seed`` drives the texture, ``terrain_seed`` the height field (defaults to
    ``seed``); two scenes with the same terrain seed are "related".
    ``coord_scale`` multiplies every world length without changing the images.
    """
    seed: int
    extent: Tuple[float, float] = (4.0, 4.0)
    terrain_seed: Optional[int] = None
    channels: int = 3
    relief: float = 0.4
    n_height_waves: int = 6
    n_texture_waves: int = 10
    coord_scale: float = 1.0
    noise_sigma: float = IMAGE_NOISE
    _height: tuple = field(init=False, repr=False, compare=False)
    _texture: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.extent = (float(self.extent[0]), float(self.extent[1]))
        if min(self.extent) <= 0:
            raise SceneError(f"scene extent must be positive, got {self.extent}")
        if self.coord_scale <= 0:
            raise SceneError("coord_scale must be positive")
        if self.terrain_seed is None:
            self.terrain_seed = self.seed
        terrain_rng = np.random.default_rng([int(self.terrain_seed), 0])
        freqs, phases, amps = _waves(terrain_rng, self.n_height_waves, 2, (0.5, 1.5))
        # cycles over the extent -> cycles per meter
        self._height = (freqs / np.asarray(self.extent), phases, amps * self.relief)
        texture_rng = np.random.default_rng([int(self.seed), 1])
        self._texture = [_waves(texture_rng, self.n_texture_waves, 3, (0.25, 1.0)) for _ in range(self.channels)]

    # --- geometry in scaled world units
    @property
    def world_extent(self) -> Tuple[float, float]:
        return self.extent[0] * self.coord_scale, self.extent[1] * self.coord_scale

    def height(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        s = self.coord_scale
        freqs, phases, amps = self._height
        xy = np.stack([np.asarray(x, dtype=np.float64) / s, np.asarray(y, dtype=np.float64) / s], axis=-1)
        angles = 2.0 * np.pi * (xy @ freqs.T) + phases
        return s * (np.sin(angles) @ amps)

    def inside(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        ex, ey = self.world_extent
        return (x >= 0.0) & (x <= ex) & (y >= 0.0) & (y <= ey)

    def texture(self, points: np.ndarray) -> np.ndarray:
        """Per-point feature vector in [-1, 1]^C"""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3) / self.coord_scale
        channels = []
        for freqs, phases, amps in self._texture:
            channels.append(np.sin(2.0 * np.pi * (p @ freqs.T) + phases) @ amps)
        return np.stack(channels, axis=-1)

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "extent": list(self.extent),
            "terrain_seed": int(self.terrain_seed),
            "channels": self.channels,
            "relief": self.relief,
            "n_height_waves": self.n_height_waves,
            "n_texture_waves": self.n_texture_waves,
            "coord_scale": self.coord_scale,
            "noise_sigma": self.noise_sigma,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        data = dict(data)
        data["extent"] = tuple(data.get("extent", (4.0, 4.0)))
        return cls(**data)


@dataclass
class RenderedView:
    image: np.ndarray      # H x W x C
    gt_coords: np.ndarray  # H/8 x W/8 x 3, NaN where invalid
    valid: np.ndarray      # H/8 x W/8
    pose: Pose
    K: CameraIntrinsics
    frame_id: str = ""

    @property
    def coords_flat(self) -> np.ndarray:
        return self.gt_coords.reshape(-1, 3)

    @property
    def valid_flat(self) -> np.ndarray:
        return self.valid.reshape(-1)


def generate_scene(seed: int, extent: Tuple[float, float] = (4.0, 4.0), **options) -> SceneSpec:
    return SceneSpec(seed=int(seed), extent=tuple(extent), **options)


def related_scene(scene: SceneSpec, texture_seed: int) -> SceneSpec:
    """Same surface, different appearance"""
    return replace(scene, seed=int(texture_seed), terrain_seed=scene.terrain_seed)


def cast_rays(scene: SceneSpec, origin: np.ndarray, directions: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """First surface hit per ray; returns (points M x 3, hit mask)"""
    origin = np.asarray(origin, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    m = d.shape[0]
    ex, ey = scene.world_extent
    step = MARCH_STEP * scene.coord_scale
    t_max = 2.0 * math.hypot(ex, ey) + 2.0 * scene.relief * scene.coord_scale

    def gap(t: np.ndarray, rays: np.ndarray) -> np.ndarray:
        p = origin + t[..., None] * d[rays]
        return p[..., 2] - scene.height(p[..., 0], p[..., 1])

    hit_t = np.full(m, np.nan)
    active = np.arange(m)
    lo = np.zeros(m)
    chunk = 64
    # 1. march in chunks until every ray has crossed the surface or left the scene
    while active.size and lo[active[0]] < t_max:
        ts = lo[active, None] + step * np.arange(1, chunk + 1)[None, :]
        p = origin + ts[..., None] * d[active, None, :]
        below = p[..., 2] <= scene.height(p[..., 0], p[..., 1])
        outside = ~scene.inside(p[..., 0], p[..., 1])
        first_below = np.where(below.any(axis=1), below.argmax(axis=1), chunk)
        first_out = np.where(outside.any(axis=1), outside.argmax(axis=1), chunk)
        crossed = first_below < np.minimum(first_out, chunk)
        left = first_out < first_below
        rows = active[crossed]
        upper = ts[crossed, first_below[crossed]]
        # 2. bisection on [upper - step, upper]
        a, b = upper - step, upper
        for _ in range(BISECTION_STEPS):
            mid = 0.5 * (a + b)
            above = gap(mid, rows) > 0.0
            a = np.where(above, mid, a)
            b = np.where(above, b, mid)
        hit_t[rows] = 0.5 * (a + b)
        lo[active] += chunk * step
        active = active[~crossed & ~left]
        active = active[lo[active] < t_max]
    hits = np.isfinite(hit_t)
    points = np.full((m, 3), np.nan)
    points[hits] = origin + hit_t[hits, None] * d[hits]
    return points, hits


def _pixel_rays(pose: Pose, K: CameraIntrinsics, uv: np.ndarray) -> np.ndarray:
    rays_c = np.stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy, np.ones(uv.shape[0])], axis=1)
    return rays_c @ pose.R.T


def render_view(scene: SceneSpec, pose: Pose, K: CameraIntrinsics, height: int = 64, width: int = 64,
                noise_seed: Optional[int] = None, frame_id: str = "") -> RenderedView:
    """Ray-cast one view; pixel (r, c) samples the ray through (c + 0.5, r + 0.5)"""
    if height % OUTPUT_STRIDE or width % OUTPUT_STRIDE:
        raise SceneError(f"view size {height}x{width} not divisible by {OUTPUT_STRIDE}")
    eye = pose.center
    if scene.inside(eye[0], eye[1]) and eye[2] <= float(scene.height(eye[0], eye[1])):
        raise SceneError("camera is inside the scene geometry")

    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    uv = np.stack([cols.reshape(-1) + 0.5, rows.reshape(-1) + 0.5], axis=1)
    points, hits = cast_rays(scene, eye, _pixel_rays(pose, K, uv))
    image = np.zeros((height * width, scene.channels))
    image[hits] = scene.texture(points[hits])
    rng = np.random.default_rng(noise_seed)
    image += rng.normal(0.0, scene.noise_sigma, size=image.shape)

    anchors = cell_anchors(height, width)
    cell_points, cell_hits = cast_rays(scene, eye, _pixel_rays(pose, K, anchors))
    q_rows, q_cols = height // OUTPUT_STRIDE, width // OUTPUT_STRIDE
    return RenderedView(
        image=image.reshape(height, width, scene.channels),
        gt_coords=cell_points.reshape(q_rows, q_cols, 3),
        valid=cell_hits.reshape(q_rows, q_cols),
        pose=pose,
        K=K,
        frame_id=frame_id,
    )


def _trajectory(scene: SceneSpec, count: int, rng: np.random.Generator, phase: float,
                yaw_offset: float) -> List[Pose]:
    """Smooth closed Lissajous-style path inside the margin, gently tilted cameras"""
    ex, ey = scene.world_extent
    margin = EDGE_MARGIN * scene.coord_scale
    if ex <= 2 * margin or ey <= 2 * margin:
        raise SceneError(f"extent {scene.world_extent} leaves no room for a trajectory")
    half = np.array([ex / 2 - margin, ey / 2 - margin])
    center = np.array([ex / 2, ey / 2])
    freq = rng.integers(1, 3, size=2)
    shift = rng.uniform(0.0, 2.0 * np.pi, size=2)
    tau = (np.arange(count) + 0.5) / count + phase
    poses = []
    for k, s in enumerate(tau):
        angle = 2.0 * np.pi * s
        xy = center + half * np.sin(freq * angle + shift)
        lo, hi = CAMERA_HEIGHT
        base = float(scene.height(xy[0], xy[1])) / scene.coord_scale
        z = (base + lo + 0.5 * (hi - lo) * (1.0 + np.sin(angle + shift[0]))) * scene.coord_scale
        yaw = angle + yaw_offset
        tilt = np.radians(MAX_TILT_DEG) * np.sin(2.0 * angle + shift[1])
        forward = np.array([np.sin(tilt) * np.cos(yaw), np.sin(tilt) * np.sin(yaw), -np.cos(tilt)])
        eye = np.array([xy[0], xy[1], z])
        poses.append(Pose.look_at(eye, eye + forward, up=(np.cos(yaw), np.sin(yaw), 0.0)))
    return poses


def make_dataset(scene: SceneSpec, n_train: int, n_test: int, trajectory_seed: int = 0,
                 height: int = 64, width: int = 64,
                 K: Optional[CameraIntrinsics] = None) -> Tuple[List[RenderedView], List[RenderedView]]:
    """Train views along one trajectory, test views along a phase/yaw-offset one"""
    if n_train <= 0 or n_test <= 0:
        raise SceneError("view counts must be positive")
    K = K or CameraIntrinsics.default(height, width)
    rng = np.random.default_rng([int(scene.seed), int(trajectory_seed)])
    train_poses = _trajectory(scene, n_train, rng, phase=0.0, yaw_offset=0.0)
    test_poses = _trajectory(scene, n_test, rng, phase=0.5 / n_test + 0.013, yaw_offset=np.radians(25.0))

    def render(poses: List[Pose], split: int, prefix: str) -> List[RenderedView]:
        return [render_view(scene, pose, K, height, width,
                            noise_seed=[int(scene.seed), int(trajectory_seed), split, i],
                            frame_id=f"{prefix}_{i:04d}")
                for i, pose in enumerate(poses)]

    train = render(train_poses, 0, "train")
    test = render(test_poses, 1, "test")
    log.debug(f"Rendered scene {scene.seed}: {len(train)} train / {len(test)} test views")
    return train, test


def coord_mean(views: List[RenderedView]) -> np.ndarray:
    """Mean valid ground-truth coordinate over a set of views"""
    stacked = np.concatenate([v.coords_flat[v.valid_flat] for v in views], axis=0)
    if stacked.size == 0:
        raise SceneError("no valid cells in views")
    return stacked.mean(axis=0)


def supervision_consistent(view: RenderedView) -> bool:
    """Every valid cell reprojects inside its own stride-8 cell"""
    coords = view.coords_flat[view.valid_flat]
    if coords.size == 0:
        return True
    uv, visible = project(view.pose, view.K, coords)
    cells = np.argwhere(view.valid)
    ok = visible & (np.floor(uv[:, 0] / OUTPUT_STRIDE) == cells[:, 1]) & (np.floor(uv[:, 1] / OUTPUT_STRIDE) == cells[:, 0])
    return bool(np.all(ok))
