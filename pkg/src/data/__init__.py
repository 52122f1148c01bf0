"""Data package"""

from .scenes import SceneSpec, RenderedView, generate_scene, make_dataset, render_view
from .dataset_manager import DatasetManager

__all__ = ["SceneSpec", "RenderedView", "generate_scene", "make_dataset", "render_view", "DatasetManager"]
