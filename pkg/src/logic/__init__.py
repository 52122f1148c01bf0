"""Logic package for handling training and experiment flow"""

from .trainer import MultiTaskTrainer
from .experiments import RunRecord, run_joint, run_separate, run_generalize, evaluate, ablate, report

__all__ = ["MultiTaskTrainer", "RunRecord", "run_joint", "run_separate", "run_generalize", "evaluate",
           "ablate", "report"]
