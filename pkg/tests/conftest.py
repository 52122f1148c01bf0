import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure the project root is in the Python path
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.data.scenes import generate_scene, make_dataset  # noqa: E402
from src.models.config import ExperimentConfig, OptimizerConfig, SceneConfig  # noqa: E402
from src.models.geometry import RansacConfig  # noqa: E402
from src.models.network import BackboneConfig, ModelBundle  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run end-to-end experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end training runs (need --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_backbone(**overrides) -> BackboneConfig:
    """A few hundred parameters; small enough for finite differences"""
    options = dict(pre_channels=2, widths=(2, 2, 2, 2), head_hidden=2, se_reduction=2, seed=0)
    options.update(overrides)
    return BackboneConfig(**options)


def small_backbone(**overrides) -> BackboneConfig:
    options = dict(pre_channels=4, widths=(4, 4, 8, 8), head_hidden=8, se_reduction=2, seed=0)
    options.update(overrides)
    return BackboneConfig(**options)


def tiny_experiment(tmp_path, iterations: int = 3, **overrides) -> ExperimentConfig:
    scenes = [
        SceneConfig("scene_a", 7, n_train=4, n_test=3),
        SceneConfig("scene_b", 8, n_train=4, n_test=3),
    ]
    options = dict(
        scenes=scenes,
        model=small_backbone(),
        optimizer=OptimizerConfig(iterations=iterations, batch_size=2, log_every=1),
        ransac=RansacConfig(max_iterations=16),
        out_dir=str(tmp_path / "runs"),
        height=32,
        width=32,
    )
    options.update(overrides)
    return ExperimentConfig(**options)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_bundle():
    bundle = ModelBundle(tiny_backbone())
    bundle.register_task("scene_a")
    bundle.register_task("scene_b")
    return bundle


@pytest.fixture(scope="session")
def small_views():
    scene = generate_scene(3)
    return scene, make_dataset(scene, 4, 2, height=32, width=32)
