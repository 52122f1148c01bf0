"""Error types shared across the toolkit.

Every error carries a short ``category`` so the command line can print a
single machine-parsable line (``error: <category>: <message>``).
"""


class RelocError(Exception):
    """Base class for all toolkit errors"""

    category = "error"

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context

    def one_line(self) -> str:
        return f"{self.category}: {self}"


class AutodiffError(RelocError):
    category = "autodiff"

    def __init__(self, message: str, node: str = None, **context):
        if node is not None:
            message = f"{message} (node '{node}')"
        super().__init__(message, node=node, **context)
        self.node = node


class SharingError(RelocError):
    category = "sharing"


class ModelError(RelocError):
    category = "model"


class LossError(RelocError):
    category = "loss"


class TrainingError(RelocError):
    category = "training"


class GeometryError(RelocError):
    category = "geometry"


class DegenerateConfigurationError(GeometryError):
    category = "degenerate"

    def __init__(self, message: str = "degenerate configuration", **context):
        super().__init__(message, **context)


class NoConsensusError(GeometryError):
    category = "no-consensus"

    def __init__(self, message: str = "no consensus", **context):
        super().__init__(message, **context)


class SceneError(RelocError):
    category = "scene"


class ConfigError(RelocError):
    category = "config"


class CheckpointError(RelocError):
    category = "checkpoint"
