"""Checkpoint persistence for model bundles.

A checkpoint is one ``.npz`` archive. ``__header__`` holds a JSON document;
arrays live under ``shared/``, ``score/``, ``task/`` (specific branches and
task-private modules, key carries ``@task``) and ``stats/`` (running
normalization statistics, not counted as parameters).
"""

import json
import os
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from ..utils.errors import CheckpointError
from ..utils.logger import log
from .network import BackboneConfig, ModelBundle
from .sharing import score_key, shared_key

FORMAT_VERSION = 1
PARAM_PREFIXES = ("shared/", "score/", "task/")


def bundle_arrays(bundle: ModelBundle) -> Dict[str, np.ndarray]:
    """Every stored array, keyed by archive name"""
    arrays: Dict[str, np.ndarray] = {}
    for layer in bundle.adaptive_layers():
        for pname, array in layer.shared.items():
            arrays[f"shared/{shared_key(layer.name, pname)}"] = array
        if layer.gated:
            arrays[f"score/{score_key(layer.name)}"] = layer.score
    for task in bundle.tasks:
        for key, array in bundle.task_parameters(task).items():
            arrays[f"task/{key}"] = array
    for key, array in bundle.running_stats().items():
        arrays[f"stats/{key}"] = array
    return arrays


def parameter_elements(arrays: Dict[str, np.ndarray]) -> int:
    return int(sum(np.asarray(a).size for k, a in arrays.items() if k.startswith(PARAM_PREFIXES)))


class CheckpointManager:
    """Saves and restores ModelBundles"""

    def __init__(self, directory="checkpoints"):
        self.directory = Path(directory)

    def path_for(self, name: str) -> Path:
        return self.directory / f"{name}.npz"

    def save(self, bundle: ModelBundle, name: str = "model", config_hash: str = "",
             extra: Optional[dict] = None) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.path_for(name)
        header = {
            "format_version": FORMAT_VERSION,
            "tasks": list(bundle.tasks),
            "threshold": bundle.config.threshold,
            "config_hash": config_hash,
            "model_hash": bundle.config_hash,
            "backbone": bundle.config.to_dict(),
            "frozen_shared": bundle.frozen_shared,
            "extra": extra or {},
        }
        # scores must stay 0-d; ascontiguousarray would promote them to (1,)
        arrays = {k: np.asarray(v) for k, v in bundle_arrays(bundle).items()}
        arrays["__header__"] = np.array(json.dumps(header, sort_keys=True))
        temp_path = f"{path}.tmp"
        try:
            with open(temp_path, "wb") as f:
                np.savez(f, **arrays)
            os.replace(temp_path, path)
        except (IOError, OSError) as e:
            if os.path.exists(temp_path):
                os.remove(temp_path)
            raise CheckpointError(f"could not write checkpoint {path}: {e}")
        log.info(f"Saved checkpoint {path} ({parameter_elements(arrays)} parameters)")
        return path

    @staticmethod
    def read(path) -> tuple:
        """(header, arrays) without building a bundle"""
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"checkpoint not found: {path}")
        try:
            with np.load(path, allow_pickle=False) as archive:
                arrays = {k: archive[k] for k in archive.files}
            header = json.loads(str(arrays.pop("__header__")))
        except (KeyError, ValueError, OSError) as e:
            raise CheckpointError(f"corrupt checkpoint {path}: {e}")
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
        return header, arrays

    def load(self, path) -> ModelBundle:
        header, arrays = self.read(path)
        bundle = ModelBundle(BackboneConfig.from_dict(header["backbone"]))
        for task in header["tasks"]:
            bundle.register_task(task)
        bundle.frozen_shared = bool(header.get("frozen_shared", False))
        consumed = set()

        def take(key: str, shape) -> np.ndarray:
            if key not in arrays:
                raise CheckpointError(f"checkpoint is missing '{key}'")
            array = np.array(arrays[key], dtype=np.float64)
            if array.shape != tuple(shape):
                raise CheckpointError(f"'{key}' has shape {array.shape}, expected {tuple(shape)}")
            consumed.add(key)
            return array

        # 1. shared branches and scores
        for layer in bundle.adaptive_layers():
            for pname in layer.param_names:
                layer.shared[pname] = take(f"shared/{shared_key(layer.name, pname)}", layer.shared[pname].shape)
            if layer.gated:
                layer.score = take(f"score/{score_key(layer.name)}", ())

        # 2. materialized specific branches
        for layer in bundle.adaptive_layers():
            for task in bundle.tasks:
                keys = [f"task/{layer.name}.{p}@{task}" for p in layer.param_names]
                if keys[0] in arrays:
                    layer.specific[task] = {p: take(k, layer.shared[p].shape)
                                            for p, k in zip(layer.param_names, keys)}

        # 3. task-private modules and running statistics
        for module in bundle.task_private_modules():
            for task in bundle.tasks:
                for pname, (key, array) in module.select(task).items():
                    module.per_task[task][pname] = take(f"task/{key}", array.shape)
        for norm in bundle.norms.values():
            for task in bundle.tasks:
                for stat in ("mean", "var"):
                    norm.running[task][stat] = take(f"stats/{norm.name}.{stat}@{task}", (norm.channels,))

        leftover = sorted(set(arrays) - consumed)
        if leftover:
            raise CheckpointError(f"checkpoint has unexpected arrays: {leftover[:5]}")
        log.info(f"Loaded checkpoint {path} with tasks {bundle.tasks}")
        return bundle
