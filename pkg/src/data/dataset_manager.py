"""
Stores rendered datasets on disk: one directory per scene, per-view .npy
tensors plus a JSON sidecar, and a manifest listing the splits.
"""
import os
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..models.geometry import CameraIntrinsics, Pose
from ..utils.errors import SceneError
from ..utils.helpers import ensure_dir, read_json, write_json_atomic
from ..utils.logger import log
from .scenes import RenderedView, SceneSpec

MANIFEST = "manifest.json"
FORMAT_VERSION = 1


def _save_npy(path: Path, array: np.ndarray):
    temp_path = f"{path}.tmp"
    try:
        with open(temp_path, "wb") as f:
            np.save(f, np.ascontiguousarray(array))
        os.replace(temp_path, path)
    except (IOError, OSError):
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise


class DatasetManager:
    """Reads and writes scene datasets under ``root``"""

    def __init__(self, root="data"):
        self.root = Path(root)

    def scene_dir(self, name: str) -> Path:
        return self.root / name

    def exists(self, name: str) -> bool:
        return (self.scene_dir(name) / MANIFEST).exists()

    def save(self, name: str, scene: SceneSpec, splits: Dict[str, List[RenderedView]],
             meta: Optional[dict] = None) -> Path:
        directory = ensure_dir(self.scene_dir(name))
        manifest = {"format_version": FORMAT_VERSION, "scene": scene.to_dict(), "meta": dict(meta or {}),
                    "splits": {}}
        for split, views in splits.items():
            split_dir = ensure_dir(directory / split)
            manifest["splits"][split] = []
            for view in views:
                stem = view.frame_id
                _save_npy(split_dir / f"{stem}_image.npy", view.image)
                # xyz + valid flag in the last channel
                coords = np.concatenate([view.gt_coords, view.valid[..., None].astype(np.float64)], axis=-1)
                _save_npy(split_dir / f"{stem}_coords.npy", coords)
                write_json_atomic(split_dir / f"{stem}.json", {"pose": view.pose.to_dict(),
                                                                "intrinsics": view.K.to_dict()})
                manifest["splits"][split].append(stem)
        write_json_atomic(directory / MANIFEST, manifest)
        log.info(f"Saved dataset '{name}' to {directory}")
        return directory

    def load_manifest(self, name: str) -> dict:
        path = self.scene_dir(name) / MANIFEST
        if not path.exists():
            raise SceneError(f"no dataset '{name}' under {self.root}")
        try:
            return read_json(path)
        except (ValueError, OSError) as e:
            raise SceneError(f"unreadable manifest for '{name}': {e}")

    def load_split(self, name: str, split: str) -> List[RenderedView]:
        manifest = self.load_manifest(name)
        if split not in manifest["splits"]:
            raise SceneError(f"dataset '{name}' has no split '{split}'")
        split_dir = self.scene_dir(name) / split
        views = []
        for stem in manifest["splits"][split]:
            try:
                image = np.load(split_dir / f"{stem}_image.npy")
                coords = np.load(split_dir / f"{stem}_coords.npy")
                sidecar = read_json(split_dir / f"{stem}.json")
            except (ValueError, OSError) as e:
                raise SceneError(f"corrupt view {stem} in '{name}': {e}")
            views.append(RenderedView(
                image=image,
                gt_coords=coords[..., :3],
                valid=coords[..., 3] > 0.5,
                pose=Pose.from_dict(sidecar["pose"]),
                K=CameraIntrinsics.from_dict(sidecar["intrinsics"]),
                frame_id=stem,
            ))
        return views

    def load(self, name: str) -> Tuple[SceneSpec, Dict[str, List[RenderedView]]]:
        manifest = self.load_manifest(name)
        scene = SceneSpec.from_dict(manifest["scene"])
        return scene, {split: self.load_split(name, split) for split in manifest["splits"]}
