"""Experiment configuration and its JSON file format"""

from pathlib import Path
from typing import List, Optional

from ..utils.errors import ConfigError, RelocError
from ..utils.helpers import read_json, short_hash, write_json_atomic
from .geometry import RansacConfig
from .network import BackboneConfig
from .sharing import STRATEGIES

SECTIONS = ("scenes", "model", "optimizer", "ransac", "experiment")
ABLATION_VARIANTS = ("full", "no-attention", "no-gradnorm", "no-penalty")


def _reject_unknown(section: str, data: dict, known):
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")


class SceneConfig:
    """One synthetic scene and its split sizes"""

    def __init__(self, name: str, seed: int, extent=(4.0, 4.0), terrain_seed: Optional[int] = None,
                 coord_scale: float = 1.0, n_train: int = 60, n_test: int = 20, trajectory_seed: int = 0):
        self.name = name
        self.seed = int(seed)
        self.extent = (float(extent[0]), float(extent[1]))
        self.terrain_seed = None if terrain_seed is None else int(terrain_seed)
        self.coord_scale = float(coord_scale)
        self.n_train = int(n_train)
        self.n_test = int(n_test)
        self.trajectory_seed = int(trajectory_seed)
        if not name or "@" in name or "/" in name:
            raise ConfigError(f"invalid scene name '{name}'")
        if self.n_train <= 0 or self.n_test <= 0:
            raise ConfigError(f"scene '{name}' needs positive split sizes")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "extent": list(self.extent),
            "terrain_seed": self.terrain_seed,
            "coord_scale": self.coord_scale,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "trajectory_seed": self.trajectory_seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        _reject_unknown("scenes", data, cls("x", 0).to_dict())
        if "name" not in data or "seed" not in data:
            raise ConfigError("every scene needs a name and a seed")
        return cls(**data)


class GradNormConfig:
    """``enabled=False`` replaces the normalization with plain averaging.

    ``ema`` smooths the previous shared-gradient norm; ``None`` uses the raw
    previous iteration.
    """

    def __init__(self, enabled: bool = True, ema: Optional[float] = None):
        self.enabled = bool(enabled)
        self.ema = None if ema is None else float(ema)
        if self.ema is not None and not 0.0 <= self.ema < 1.0:
            raise ConfigError("gradnorm ema factor must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {"enabled": self.enabled, "ema": self.ema}

    @classmethod
    def from_dict(cls, data: dict) -> "GradNormConfig":
        _reject_unknown("optimizer.gradnorm", data, cls().to_dict())
        return cls(**data)


class OptimizerConfig:
    """AdamW with cosine annealing"""

    def __init__(self, lr: float = 1e-3, weight_decay: float = 0.05, iterations: int = 10000,
                 batch_size: int = 4, beta: float = 0.25, warmup_iters: int = 0, lr_min: float = 0.0,
                 adam_betas=(0.9, 0.999), adam_eps: float = 1e-8, workers_per_task: int = 1,
                 log_every: int = 100, gradnorm: Optional[GradNormConfig] = None):
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.iterations = int(iterations)
        self.batch_size = int(batch_size)
        self.beta = float(beta)
        self.warmup_iters = int(warmup_iters)
        self.lr_min = float(lr_min)
        self.adam_betas = (float(adam_betas[0]), float(adam_betas[1]))
        self.adam_eps = float(adam_eps)
        self.workers_per_task = int(workers_per_task)
        self.log_every = int(log_every)
        self.gradnorm = gradnorm or GradNormConfig()
        self.validate()

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch size must be positive")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.workers_per_task < 1 or self.workers_per_task > self.batch_size:
            raise ConfigError("workers_per_task must lie in [1, batch_size]")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be non-negative")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "beta": self.beta,
            "warmup_iters": self.warmup_iters,
            "lr_min": self.lr_min,
            "adam_betas": list(self.adam_betas),
            "adam_eps": self.adam_eps,
            "workers_per_task": self.workers_per_task,
            "log_every": self.log_every,
            "gradnorm": self.gradnorm.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OptimizerConfig":
        _reject_unknown("optimizer", data, cls().to_dict())
        data = dict(data)
        data["gradnorm"] = GradNormConfig.from_dict(data.get("gradnorm", {}))
        return cls(**data)


class ExperimentConfig:
    """Everything a run depends on; its hash stamps every output"""

    def __init__(self, scenes: Optional[List[SceneConfig]] = None, model: Optional[BackboneConfig] = None,
                 optimizer: Optional[OptimizerConfig] = None, ransac: Optional[RansacConfig] = None,
                 out_dir: str = "runs", seed: int = 0, height: int = 64, width: int = 64,
                 eval_seed: int = 0):
        self.scenes = scenes if scenes is not None else default_scenes()
        self.model = model or BackboneConfig()
        self.optimizer = optimizer or OptimizerConfig()
        self.ransac = ransac or RansacConfig()
        self.out_dir = out_dir
        self.seed = int(seed)
        self.height = int(height)
        self.width = int(width)
        self.eval_seed = int(eval_seed)
        self.validate()

    def validate(self):
        if not self.scenes:
            raise ConfigError("experiment needs at least one scene")
        names = [s.name for s in self.scenes]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate scene names in {names}")
        if self.model.strategy not in STRATEGIES:
            raise ConfigError(f"unknown sharing strategy '{self.model.strategy}'")
        if self.height % 8 or self.width % 8:
            raise ConfigError("image size must be divisible by 8")

    # --- clamped/validated setters
    @property
    def strategy(self) -> str:
        return self.model.strategy

    def set_strategy(self, strategy: str):
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown sharing strategy '{strategy}', expected one of {STRATEGIES}")
        self.model.strategy = strategy

    @property
    def beta(self) -> float:
        return self.optimizer.beta

    def set_beta(self, beta: float):
        self.optimizer.beta = max(0.0, float(beta))

    @property
    def threshold(self) -> float:
        return self.model.threshold

    def set_threshold(self, threshold: float):
        self.model.threshold = float(threshold)

    def set_seed(self, seed: int):
        self.seed = int(seed)

    def scene(self, name: str) -> SceneConfig:
        for scene in self.scenes:
            if scene.name == name:
                return scene
        raise ConfigError(f"scene '{name}' is not defined")

    def backbone(self) -> BackboneConfig:
        """Model layout seeded by the global seed"""
        data = self.model.to_dict()
        data["seed"] = self.seed
        return BackboneConfig.from_dict(data)

    def copy(self) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(self.to_dict())

    def to_dict(self) -> dict:
        return {
            "scenes": [s.to_dict() for s in self.scenes],
            "model": self.model.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "ransac": self.ransac.to_dict(),
            "experiment": {
                "out_dir": self.out_dir,
                "seed": self.seed,
                "height": self.height,
                "width": self.width,
                "eval_seed": self.eval_seed,
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        _reject_unknown("config", data, SECTIONS)
        experiment = dict(data.get("experiment", {}))
        _reject_unknown("experiment", experiment, ("out_dir", "seed", "height", "width", "eval_seed"))
        try:
            scenes = [SceneConfig.from_dict(s) for s in data["scenes"]] if "scenes" in data else None
            model = BackboneConfig.from_dict(data["model"]) if "model" in data else None
            ransac = RansacConfig.from_dict(data["ransac"]) if "ransac" in data else None
        except RelocError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e))
        optimizer = OptimizerConfig.from_dict(data["optimizer"]) if "optimizer" in data else None
        return cls(scenes=scenes, model=model, optimizer=optimizer, ransac=ransac, **experiment)

    def config_hash(self) -> str:
        """First 16 hex chars of SHA-256 over the canonical JSON (out_dir excluded)"""
        data = self.to_dict()
        data["experiment"].pop("out_dir")
        return short_hash(data)

    def save(self, path) -> Path:
        return write_json_atomic(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = read_json(path)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except (ValueError, OSError) as e:
            raise ConfigError(f"unreadable config {path}: {e}")
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)


def default_scenes() -> List[SceneConfig]:
    return [SceneConfig("scene_a", 7), SceneConfig("scene_b", 8), SceneConfig("scene_c", 9)]
