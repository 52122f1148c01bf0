"""
Experiment recipes: joint and separate training, generalization to a new
scene, evaluation of a checkpoint, module ablations and run reports.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from ..data.dataset_manager import DatasetManager
from ..data.scenes import RenderedView, SceneSpec, coord_mean, generate_scene, make_dataset
from ..models.checkpoint import CheckpointManager, bundle_arrays, parameter_elements
from ..models.config import ABLATION_VARIANTS, ExperimentConfig, SceneConfig
from ..models.geometry import RansacConfig, pose_from_prediction
from ..models.losses import PoseError, frame_table, metrics_table, pose_error, summary_row, write_csv
from ..models.network import ModelBundle, add_task
from ..models.sharing import SharingReport, sharing_report
from ..utils.errors import CheckpointError, ConfigError, GeometryError, ModelError, RelocError, SceneError
from ..utils.helpers import ensure_dir, read_json, write_json_atomic
from ..utils.logger import log
from .trainer import MultiTaskTrainer

EVAL_CHUNK = 8
# Errors recorded for frames where no pose could be recovered
FAILED_POSE = PoseError(float("inf"), 180.0)

Datasets = Dict[str, Tuple[SceneSpec, List[RenderedView], List[RenderedView]]]


@dataclass
class RunRecord:
    kind: str
    config_hash: str
    metrics: List[dict] = field(default_factory=list)
    shared_params: int = 0
    specific_params: Dict[str, int] = field(default_factory=dict)
    total_params: int = 0
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)

    def check_accounting(self):
        if self.total_params != self.shared_params + sum(self.specific_params.values()):
            raise ModelError(f"parameter accounting does not close for run '{self.kind}'")

    def mean_accuracy(self) -> float:
        return float(np.mean([row["acc_5cm5deg"] for row in self.metrics]))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "config_hash": self.config_hash,
            "metrics": [dict(row) for row in self.metrics],
            "shared_params": self.shared_params,
            "specific_params": dict(self.specific_params),
            "total_params": self.total_params,
            "wall_clock": self.wall_clock,
            "extra": dict(self.extra),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        return cls(
            kind=data.get("kind", ""),
            config_hash=data.get("config_hash", ""),
            metrics=list(data.get("metrics", [])),
            shared_params=int(data.get("shared_params", 0)),
            specific_params=dict(data.get("specific_params", {})),
            total_params=int(data.get("total_params", 0)),
            wall_clock=float(data.get("wall_clock", 0.0)),
            extra=dict(data.get("extra", {})),
        )

    def comparable(self) -> dict:
        """Everything except wall-clock, for determinism checks"""
        data = self.to_dict()
        data.pop("wall_clock")
        return data

    def save(self, path) -> Path:
        return write_json_atomic(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(read_json(path))


# --- data

def scene_spec(scene: SceneConfig) -> SceneSpec:
    return generate_scene(scene.seed, scene.extent, terrain_seed=scene.terrain_seed, coord_scale=scene.coord_scale)


def dataset_meta(config: ExperimentConfig, scene: SceneConfig) -> dict:
    """Render settings a stored dataset must agree with besides its scene spec"""
    return {"trajectory_seed": scene.trajectory_seed, "height": config.height, "width": config.width}


def check_stored_dataset(manager: DatasetManager, config: ExperimentConfig, scene: SceneConfig):
    """SceneError unless the dataset on disk was rendered from this exact scene config"""
    manifest = manager.load_manifest(scene.name)
    stale = []
    if manifest.get("scene") != scene_spec(scene).to_dict():
        stale.append("scene spec")
    meta = manifest.get("meta", {})
    stale += [key for key, value in dataset_meta(config, scene).items() if meta.get(key) != value]
    counts = {split: len(stems) for split, stems in manifest.get("splits", {}).items()}
    if counts.get("train") != scene.n_train or counts.get("test") != scene.n_test:
        stale.append(f"split sizes {counts}")
    if stale:
        raise SceneError(f"dataset '{scene.name}' under {manager.root} does not match the config "
                         f"({', '.join(stale)}); rerun gen-data")


def prepare_datasets(config: ExperimentConfig, scenes: Optional[List[SceneConfig]] = None,
                     data_dir=None) -> Datasets:
    """Load each scene from ``data_dir`` if present there, otherwise render it"""
    manager = DatasetManager(data_dir) if data_dir else None
    datasets: Datasets = {}
    for scene in scenes if scenes is not None else config.scenes:
        if manager is not None and manager.exists(scene.name):
            check_stored_dataset(manager, config, scene)
            spec, splits = manager.load(scene.name)
            datasets[scene.name] = (spec, splits["train"], splits["test"])
            continue
        spec = scene_spec(scene)
        train, test = make_dataset(spec, scene.n_train, scene.n_test, scene.trajectory_seed,
                                   config.height, config.width)
        datasets[scene.name] = (spec, train, test)
    return datasets


def generate_data(config: ExperimentConfig, data_dir) -> Dict[str, Path]:
    manager = DatasetManager(data_dir)
    written = {}
    for name, (spec, train, test) in prepare_datasets(config).items():
        meta = dataset_meta(config, config.scene(name))
        written[name] = manager.save(name, spec, {"train": train, "test": test}, meta)
    return written


# --- evaluation

def evaluate_views(bundle: ModelBundle, task: str, views: List[RenderedView], ransac: RansacConfig,
                   seed: int = 0) -> Tuple[List[PoseError], List[dict]]:
    """Pose errors per view; RANSAC runs in parallel over frames"""
    if not views:
        raise ConfigError(f"no views to evaluate for scene '{task}'")
    predictions = []
    for start in range(0, len(views), EVAL_CHUNK):
        chunk = views[start:start + EVAL_CHUNK]
        predictions += bundle.forward(task, np.stack([v.image for v in chunk]), training=False).predictions()

    def solve(i: int):
        try:
            pose, diagnostics = pose_from_prediction(predictions[i], views[i].K, ransac, seed + i)
        except GeometryError as e:
            log.warning(f"Pose failed for {task}/{views[i].frame_id}: {e.one_line()}")
            return FAILED_POSE, {"inliers": 0, "dropped": 0, "used": 0}
        return pose_error(pose, views[i].pose), diagnostics

    with ThreadPoolExecutor() as pool:
        results = list(pool.map(solve, range(len(views))))
    return [r[0] for r in results], [r[1] for r in results]


def _evaluate_scenes(bundle: ModelBundle, config: ExperimentConfig, datasets: Datasets, out: Optional[Path],
                     split: str = "test") -> List[dict]:
    rows = []
    for name in bundle.tasks:
        if name not in datasets:
            continue
        _, train, test = datasets[name]
        views = test if split == "test" else train
        errors, _ = evaluate_views(bundle, name, views, config.ransac, config.eval_seed)
        rows.append(summary_row(name, errors, config.config_hash()))
        if out is not None:
            write_csv(frame_table(name, errors, [v.frame_id for v in views], config.config_hash()),
                      out / f"frames_{name}_{split}.csv")
        log.info(f"{name}/{split}: median {rows[-1]['median_trans_m']:.4f} m, "
                 f"{rows[-1]['median_rot_deg']:.3f} deg, acc {rows[-1]['acc_5cm5deg']:.1f}%")
    return rows


# --- training

def build_bundle(config: ExperimentConfig, datasets: Datasets) -> ModelBundle:
    bundle = ModelBundle(config.backbone())
    for name, (_, train, _) in datasets.items():
        bundle.register_task(name, coord_mean(train))
    return bundle


def _train(bundle: ModelBundle, config: ExperimentConfig, datasets: Datasets, out: Path,
           checkpoints: CheckpointManager):
    trainer = MultiTaskTrainer(bundle, {n: d[1] for n, d in datasets.items()}, config.optimizer, config.seed)

    def keep_last_good(iteration: int):
        checkpoints.save(bundle, "last_good", config.config_hash(), {"iteration": iteration})

    try:
        trainer.train(checkpoint_fn=keep_last_good, checkpoint_every=max(config.optimizer.iterations // 10, 1))
    finally:
        trainer.write_log(out / "train_log.csv")
    return trainer


def _accounting(bundle: ModelBundle) -> SharingReport:
    report = sharing_report(bundle)
    on_disk = parameter_elements(bundle_arrays(bundle))
    if on_disk != report.total_params:
        raise ModelError(f"sharing report counts {report.total_params} parameters, checkpoint holds {on_disk}")
    return report


def _train_and_evaluate(config: ExperimentConfig, datasets: Datasets, out: Path, kind: str) -> RunRecord:
    started = time.perf_counter()
    ensure_dir(out)
    checkpoints = CheckpointManager(out)
    bundle = build_bundle(config, datasets)
    log.info(f"Run '{kind}' with config {config.config_hash()} on scenes {bundle.tasks}")
    _train(bundle, config, datasets, out, checkpoints)
    checkpoints.save(bundle, "model", config.config_hash())

    report = _accounting(bundle)
    report.config_hash = config.config_hash()
    write_json_atomic(out / "sharing_report.json", report.to_dict())
    rows = _evaluate_scenes(bundle, config, datasets, out)
    write_csv(metrics_table(rows), out / "metrics.csv")

    record = RunRecord(kind=kind, config_hash=config.config_hash(), metrics=rows,
                       shared_params=report.shared_params, specific_params=dict(report.specific_params),
                       total_params=report.total_params, wall_clock=time.perf_counter() - started,
                       extra={"shared_fraction": report.shared_fraction})
    record.check_accounting()
    record.save(out / "run_record.json")
    return record


def _with_context(kind: str, fn, *args):
    try:
        return fn(*args)
    except RelocError as e:
        log.error(f"Experiment '{kind}' failed: {e.one_line()}")
        raise


def run_joint(config: ExperimentConfig, datasets: Optional[Datasets] = None, out=None,
              kind: str = "joint") -> RunRecord:
    """One bundle over every scene"""
    datasets = datasets or prepare_datasets(config)
    out = Path(out or Path(config.out_dir) / kind)
    return _with_context(kind, _train_and_evaluate, config, datasets, out, kind)


def run_separate(config: ExperimentConfig, datasets: Optional[Datasets] = None, out=None) -> RunRecord:
    """One single-task bundle per scene; metrics and parameters are pooled"""
    started = time.perf_counter()
    datasets = datasets or prepare_datasets(config)
    out = Path(out or Path(config.out_dir) / "separate")
    record = RunRecord(kind="separate", config_hash=config.config_hash())
    for scene in config.scenes:
        single = config.copy()
        single.scenes = [scene]
        sub = _with_context("separate", _train_and_evaluate, single, {scene.name: datasets[scene.name]},
                            out / scene.name, f"separate:{scene.name}")
        record.metrics += [dict(row, config_hash=config.config_hash()) for row in sub.metrics]
        record.shared_params += sub.shared_params
        record.specific_params.update(sub.specific_params)
        record.total_params += sub.total_params
    record.check_accounting()
    record.wall_clock = time.perf_counter() - started
    write_csv(metrics_table(record.metrics), ensure_dir(out) / "metrics.csv")
    record.save(out / "run_record.json")
    return record


def single_task_params(config: ExperimentConfig) -> int:
    """Parameters of one plain single-scene model (no scores, no duplicated branches)"""
    single = ModelBundle(config.backbone())
    single.register_task("single")
    convs = sum(v.size for layer in single.adaptive_layers() for v in layer.shared.values())
    return convs + single.task_private_count("single")


def run_generalize(base_checkpoint, new_scene: SceneConfig, config: ExperimentConfig,
                   datasets: Optional[Datasets] = None, out=None) -> RunRecord:
    """Add a scene to a trained bundle with shared parameters frozen"""
    started = time.perf_counter()
    out = ensure_dir(out or Path(config.out_dir) / "generalize")
    checkpoints = CheckpointManager(out)
    bundle = CheckpointManager().load(base_checkpoint)
    if new_scene.name in bundle.tasks:
        raise ConfigError(f"scene id '{new_scene.name}' already exists in {base_checkpoint}")

    old_scenes = [s for s in config.scenes if s.name in bundle.tasks]
    datasets = dict(datasets or {})
    missing = [s for s in old_scenes + [new_scene] if s.name not in datasets]
    datasets.update(prepare_datasets(config, missing))

    old_data = {s.name: datasets[s.name] for s in old_scenes}
    old_before = _evaluate_scenes(bundle, config, old_data, None)
    report_before = sharing_report(bundle)
    hash_before = bundle.shared_hash()

    add_task(bundle, new_scene.name, freeze_shared=True, coord_mean=coord_mean(datasets[new_scene.name][1]))
    new_data = {new_scene.name: datasets[new_scene.name]}
    try:
        _train(bundle, config, new_data, out, checkpoints)
    except RelocError as e:
        log.error(f"Experiment 'generalize' failed: {e.one_line()}")
        raise
    checkpoints.save(bundle, "model", config.config_hash())

    hash_after = bundle.shared_hash()
    report = _accounting(bundle)
    old_after = _evaluate_scenes(bundle, config, old_data, None)
    new_rows = _evaluate_scenes(bundle, config, new_data, out)
    added = report.diff(report_before)
    write_json_atomic(out / "sharing_report.json", report.to_dict())
    write_csv(metrics_table(old_after + new_rows), out / "metrics.csv")

    record = RunRecord(
        kind="generalize", config_hash=config.config_hash(), metrics=old_after + new_rows,
        shared_params=report.shared_params, specific_params=dict(report.specific_params),
        total_params=report.total_params, wall_clock=time.perf_counter() - started,
        extra={
            "new_scene": new_scene.name,
            "shared_frozen_intact": hash_before == hash_after,
            "old_metrics_unchanged": old_before == old_after,
            "increased_params": added[new_scene.name],
            "single_task_params": single_task_params(config),
        })
    record.check_accounting()
    record.save(out / "run_record.json")
    log.info(f"Generalized to {new_scene.name}: +{added[new_scene.name]} parameters, "
             f"shared intact={hash_before == hash_after}")
    return record


def evaluate(checkpoint, scene: str, split: str, config: ExperimentConfig, force: bool = False,
             datasets: Optional[Datasets] = None, out=None) -> pd.DataFrame:
    """Per-frame errors plus a summary row for one scene split of a checkpoint"""
    header, _ = CheckpointManager.read(checkpoint)
    if header.get("config_hash") != config.config_hash() and not force:
        raise CheckpointError(f"checkpoint config {header.get('config_hash')} does not match "
                              f"{config.config_hash()} (use --force)")
    if split not in ("train", "test"):
        raise ConfigError(f"unknown split '{split}'")
    bundle = CheckpointManager().load(checkpoint)
    if scene not in bundle.tasks:
        raise ConfigError(f"scene '{scene}' is not in checkpoint {checkpoint}")
    datasets = datasets or prepare_datasets(config, [config.scene(scene)])
    _, train, test = datasets[scene]
    views = train if split == "train" else test
    errors, _ = evaluate_views(bundle, scene, views, config.ransac, config.eval_seed)
    table = frame_table(scene, errors, [v.frame_id for v in views], config.config_hash())
    if out is not None:
        write_csv(table, Path(ensure_dir(out)) / f"eval_{scene}_{split}.csv")
    return table


def ablate(config: ExperimentConfig, variant: str, datasets: Optional[Datasets] = None, out=None) -> RunRecord:
    """run_joint with one component switched off"""
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown ablation variant '{variant}', expected one of {ABLATION_VARIANTS}")
    variant_config = config.copy()
    if variant == "no-attention":
        variant_config.model.attention = False
    elif variant == "no-gradnorm":
        variant_config.optimizer.gradnorm.enabled = False
    elif variant == "no-penalty":
        variant_config.set_beta(0.0)
    out = out or Path(config.out_dir) / f"ablate_{variant}"
    record = run_joint(variant_config, datasets, out, kind="joint" if variant == "full" else f"ablate:{variant}")
    record.extra["variant"] = variant
    record.save(Path(out) / "run_record.json")
    return record


def report(root, out=None) -> pd.DataFrame:
    """One row per run record found under ``root``"""
    root = Path(root)
    rows = []
    for path in sorted(root.rglob("run_record.json")):
        record = RunRecord.load(path)
        rows.append({
            "run": str(path.parent.relative_to(root)),
            "kind": record.kind,
            "config_hash": record.config_hash,
            "scenes": len(record.metrics),
            "mean_acc_5cm5deg": record.mean_accuracy() if record.metrics else float("nan"),
            "worst_median_trans_m": max((r["median_trans_m"] for r in record.metrics), default=float("nan")),
            "shared_params": record.shared_params,
            "total_params": record.total_params,
        })
    if not rows:
        raise ConfigError(f"no run records under {root}")
    table = pd.DataFrame(rows)
    write_csv(table, Path(out) if out else root / "report.csv")
    return table
