"""Layer-adaptive sharing policy.

Each gated layer owns one shared branch, lazily created per-task branches and a
single score shared by all tasks. The score is thresholded into a 0/1 gate
that picks the branch used in the current iteration.
"""

import json
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..utils.errors import SharingError
from ..utils.logger import log
from .autodiff import Graph

DEFAULT_THRESHOLD = 0.5
DEFAULT_SCORE_INIT = 1.0
# Half-width of the straight-through band around the threshold
STE_BAND = 0.5

STRATEGIES = ("all-shared", "gated-all", "gated-conv-specific-norm")


def gate(s: float, threshold: float = DEFAULT_THRESHOLD) -> int:
    """0 selects the task-specific branch (s >= threshold), 1 the shared one"""
    s = float(s)
    if not np.isfinite(s):
        raise SharingError(f"non-finite score {s}")
    return 0 if s >= threshold else 1


def shared_key(layer: str, pname: str) -> str:
    return f"{layer}.{pname}"


def specific_key(layer: str, pname: str, task: str) -> str:
    return f"{layer}.{pname}@{task}"


def score_key(layer: str) -> str:
    return f"{layer}.score"


class AdaptiveLayer:
    """Shared weights, per-task weights and one score.

    ``params`` maps parameter names (``weight``/``bias`` for convolutions,
    ``gamma``/``beta`` for gated normalizations) to their shared arrays.
    With ``gated=False`` the layer is plain shared structure with no score.
    """

    def __init__(self, name: str, params: Mapping[str, np.ndarray], gated: bool = True,
                 threshold: float = DEFAULT_THRESHOLD, score_init: float = DEFAULT_SCORE_INIT):
        self.name = name
        self.param_names: Tuple[str, ...] = tuple(params)
        self.shared: Dict[str, np.ndarray] = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        self.specific: Dict[str, Dict[str, np.ndarray]] = {}
        self.gated = gated
        self.threshold = float(threshold)
        self.score: Optional[np.ndarray] = np.array(float(score_init)) if gated else None
        self.tasks: List[str] = []
        self._lock = threading.Lock()

    def register_task(self, task: str):
        if task in self.tasks:
            raise SharingError(f"task '{task}' already registered on layer '{self.name}'")
        self.tasks.append(task)

    def gate_value(self) -> int:
        if not self.gated:
            return 1
        return gate(float(self.score), self.threshold)

    @property
    def is_shared(self) -> bool:
        return self.gate_value() == 1

    def materialize(self, task: str) -> Dict[str, np.ndarray]:
        """Create the task branch as a copy of the current shared branch"""
        with self._lock:
            if task not in self.specific:
                self.specific[task] = {k: v.copy() for k, v in self.shared.items()}
                log.debug(f"Materialized task-specific branch of {self.name} for {task}")
            return self.specific[task]

    def select(self, task: str) -> Dict[str, Tuple[str, np.ndarray]]:
        """Selected branch for this iteration as {pname: (binding key, array)}"""
        if task not in self.tasks:
            raise SharingError(f"task '{task}' not registered on layer '{self.name}'")
        if self.gate_value() == 1:
            return {p: (shared_key(self.name, p), self.shared[p]) for p in self.param_names}
        branch = self.materialize(task)
        return {p: (specific_key(self.name, p, task), branch[p]) for p in self.param_names}

    def peek(self, task: str) -> Dict[str, Tuple[str, np.ndarray]]:
        """Like :meth:`select` but never materializes a branch.

        An unmaterialized specific branch is reported under its specific key
        with the shared arrays it would be copied from. Read-only.
        """
        if task not in self.tasks:
            raise SharingError(f"task '{task}' not registered on layer '{self.name}'")
        if self.gate_value() == 1:
            return {p: (shared_key(self.name, p), self.shared[p]) for p in self.param_names}
        branch = self.specific.get(task, self.shared)
        return {p: (specific_key(self.name, p, task), branch[p]) for p in self.param_names}

    def shared_count(self) -> int:
        count = sum(v.size for v in self.shared.values())
        return count + (1 if self.gated else 0)

    def specific_count(self, task: str) -> int:
        return sum(v.size for v in self.specific.get(task, {}).values())


def select_weights(layer: AdaptiveLayer, task: str) -> Tuple[np.ndarray, ...]:
    """Gated weight selection: (w_bar, b_bar) in the layer's parameter order"""
    selected = layer.select(task)
    return tuple(selected[p][1] for p in layer.param_names)


def score_backward(upstream: Union[np.ndarray, Mapping[str, np.ndarray]], layer: AdaptiveLayer,
                   task: str) -> float:
    """Straight-through score gradient from the gradient w.r.t. the selected weights.

    dTheta/ds is replaced by -1 inside a band of half-width STE_BAND around the
    threshold, and dw_bar/dTheta = w - w_task.
    """
    if not layer.gated:
        return 0.0
    s = float(layer.score)
    if abs(s - layer.threshold) > STE_BAND:
        return 0.0
    if not isinstance(upstream, Mapping):
        upstream = {layer.param_names[0]: upstream}
    branch = layer.specific.get(task)
    if branch is None:
        return 0.0
    total = 0.0
    for pname, grad in upstream.items():
        if grad is None:
            continue
        total += float(np.sum(np.asarray(grad) * (layer.shared[pname] - branch[pname])))
    return -total


def penalty_loss(scores: Sequence[float]) -> float:
    """Sparsity penalty: mean absolute score"""
    scores = [float(s) for s in scores]
    if not scores:
        raise SharingError("penalty loss needs at least one score")
    return float(np.mean(np.abs(scores)))


def penalty_graph(graph: Graph, score_names: Sequence[str]) -> int:
    """Sparsity penalty as graph nodes over score parameters, so it joins the task loss"""
    if not score_names:
        raise SharingError("penalty loss needs at least one score")
    total = None
    for name in score_names:
        term = graph.abs(graph.param(name))
        total = term if total is None else graph.add(total, term)
    return graph.mul(total, graph.const(1.0 / len(score_names)))


@dataclass
class LayerShare:
    name: str
    score: Optional[float]
    gate: int
    shared: bool
    params: int


@dataclass
class SharingReport:
    layers: List[LayerShare] = field(default_factory=list)
    shared_params: int = 0
    specific_params: Dict[str, int] = field(default_factory=dict)
    config_hash: str = ""

    @property
    def total_params(self) -> int:
        return self.shared_params + sum(self.specific_params.values())

    @property
    def shared_fraction(self) -> float:
        gated = [layer for layer in self.layers if layer.score is not None]
        if not gated:
            return 1.0
        return sum(layer.shared for layer in gated) / len(gated)

    def to_dict(self) -> dict:
        return {
            "layers": [{"name": l.name, "score": l.score, "shared": l.shared} for l in self.layers],
            "shared_params": self.shared_params,
            "specific_params": dict(self.specific_params),
            "total_params": self.total_params,
            "config_hash": self.config_hash,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def diff(self, before: "SharingReport") -> Dict[str, int]:
        """Parameters added since ``before``, per task plus the shared delta"""
        added = {task: count - before.specific_params.get(task, 0)
                 for task, count in self.specific_params.items()}
        added["__shared__"] = self.shared_params - before.shared_params
        return added


def sharing_report(model) -> SharingReport:
    """Count every storable parameter exactly once.

    Shared: shared branches of every adaptive layer plus scores. Specific:
    materialized task branches plus the task-private modules (normalization,
    attention gates, heads).
    """
    report = SharingReport(config_hash=getattr(model, "config_hash", ""))
    for layer in model.adaptive_layers():
        report.layers.append(LayerShare(
            name=layer.name,
            score=float(layer.score) if layer.gated else None,
            gate=layer.gate_value(),
            shared=layer.is_shared,
            params=sum(v.size for v in layer.shared.values()),
        ))
        report.shared_params += layer.shared_count()
    for task in model.tasks:
        specific = sum(layer.specific_count(task) for layer in model.adaptive_layers())
        report.specific_params[task] = specific + model.task_private_count(task)
    return report
