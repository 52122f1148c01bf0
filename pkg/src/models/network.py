"""Multi-scene coordinate regression network.

A stride-8 backbone of adaptive convolutions with task-specific normalization
and per-block channel attention, followed by a per-task fully convolutional
head that emits 3D scene coordinates and a positive uncertainty per cell.
"""

import hashlib
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from ..utils.errors import ModelError
from ..utils.helpers import short_hash
from ..utils.logger import log
from .autodiff import Evaluation, Graph, evaluate
from .sharing import (DEFAULT_SCORE_INIT, DEFAULT_THRESHOLD, STRATEGIES, AdaptiveLayer,
                      score_key, shared_key)

OUTPUT_STRIDE = 8
UNCERTAINTY_FLOOR = 1e-3
# softplus(0.5413) ~= 1.0 m: untrained uncertainty starts near scene scale
UNCERTAINTY_BIAS_INIT = 0.5413


class BackboneConfig:
    """Desk-scale backbone layout"""

    def __init__(self, in_channels: int = 3, pre_channels: int = 16,
                 widths: Sequence[int] = (16, 16, 32, 32), strides: Sequence[int] = (1, 1, 2, 2),
                 kernel: int = 3, attention: bool = True, se_reduction: int = 4, head_hidden: int = 32,
                 strategy: str = "gated-conv-specific-norm", threshold: float = DEFAULT_THRESHOLD,
                 score_init: float = DEFAULT_SCORE_INIT, norm_momentum: float = 0.1,
                 norm_eps: float = 1e-5, seed: int = 0):
        self.in_channels = int(in_channels)
        self.pre_channels = int(pre_channels)
        self.widths = tuple(int(w) for w in widths)
        self.strides = tuple(int(s) for s in strides)
        self.kernel = int(kernel)
        self.attention = bool(attention)
        self.se_reduction = int(se_reduction)
        self.head_hidden = int(head_hidden)
        self.strategy = strategy
        self.threshold = float(threshold)
        self.score_init = float(score_init)
        self.norm_momentum = float(norm_momentum)
        self.norm_eps = float(norm_eps)
        self.seed = int(seed)
        self.validate()

    def validate(self):
        if len(self.widths) != 4 or len(self.strides) != 4:
            raise ModelError("backbone needs exactly four blocks")
        if 2 * int(np.prod(self.strides)) != OUTPUT_STRIDE:
            raise ModelError(f"pre-layer stride 2 x block strides {self.strides} must downsample by 8")
        if self.strategy not in STRATEGIES:
            raise ModelError(f"unknown sharing strategy '{self.strategy}'")
        if self.kernel % 2 != 1:
            raise ModelError("kernel size must be odd")

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "pre_channels": self.pre_channels,
            "widths": list(self.widths),
            "strides": list(self.strides),
            "kernel": self.kernel,
            "attention": self.attention,
            "se_reduction": self.se_reduction,
            "head_hidden": self.head_hidden,
            "strategy": self.strategy,
            "threshold": self.threshold,
            "score_init": self.score_init,
            "norm_momentum": self.norm_momentum,
            "norm_eps": self.norm_eps,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BackboneConfig":
        unknown = set(data) - set(cls().to_dict())
        if unknown:
            raise ModelError(f"unknown backbone keys: {sorted(unknown)}")
        return cls(**data)


def _he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, gain: float = 2.0) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)


class TaskParams:
    """A module whose parameters are owned by exactly one task each"""

    def __init__(self, name: str, init_fn: Callable[[np.random.Generator, Optional[np.ndarray]], Dict[str, np.ndarray]]):
        self.name = name
        self.init_fn = init_fn
        self.per_task: Dict[str, Dict[str, np.ndarray]] = {}

    def key(self, pname: str, task: str) -> str:
        return f"{self.name}.{pname}@{task}"

    def add_task(self, task: str, rng: np.random.Generator, extra: Optional[np.ndarray] = None):
        self.per_task[task] = {k: np.asarray(v, dtype=np.float64) for k, v in self.init_fn(rng, extra).items()}

    def select(self, task: str) -> Dict[str, Tuple[str, np.ndarray]]:
        return {p: (self.key(p, task), arr) for p, arr in self.per_task[task].items()}

    def count(self, task: str) -> int:
        return sum(v.size for v in self.per_task.get(task, {}).values())


class NormLayer:
    """Per-channel normalization with per-task running statistics.

    The affine scale/shift is task-specific by default; under the ``gated-all``
    strategy it becomes a scored adaptive layer and under ``all-shared`` plain
    shared structure.
    """

    def __init__(self, name: str, channels: int, config: BackboneConfig):
        self.name = name
        self.channels = channels
        self.momentum = config.norm_momentum
        self.eps = config.norm_eps
        self.adaptive: Optional[AdaptiveLayer] = None
        self.private: Optional[TaskParams] = None
        init = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
        if config.strategy == "gated-conv-specific-norm":
            self.private = TaskParams(name, lambda rng, extra: {k: v.copy() for k, v in init.items()})
        else:
            self.adaptive = AdaptiveLayer(name, init, gated=(config.strategy == "gated-all"),
                                          threshold=config.threshold, score_init=config.score_init)
        self.running: Dict[str, Dict[str, np.ndarray]] = {}

    def add_task(self, task: str, rng: np.random.Generator):
        if self.private is not None:
            self.private.add_task(task, rng)
        else:
            self.adaptive.register_task(task)
        self.running[task] = {"mean": np.zeros(self.channels), "var": np.ones(self.channels)}

    def select(self, task: str) -> Dict[str, Tuple[str, np.ndarray]]:
        if self.private is not None:
            return self.private.select(task)
        return self.adaptive.select(task)

    def build(self, trace: "ForwardPass", x: int) -> int:
        g = trace.graph
        if trace.training:
            mean = g.mean(x, axis=(0, 1, 2), keepdims=True)
            centered = g.sub(x, mean)
            var = g.mean(g.square(centered), axis=(0, 1, 2), keepdims=True)
            xhat = g.div(centered, g.sqrt(g.add(var, g.const(self.eps))))
            trace.norm_stats.append((self, mean, var))
        else:
            stats = self.running[trace.task]
            xhat = g.mul(g.sub(x, g.const(stats["mean"])), g.const(1.0 / np.sqrt(stats["var"] + self.eps)))
        selected = trace.bind_layer(self.name, self.select(trace.task),
                                    self.adaptive if self.adaptive is not None and self.adaptive.gated else None)
        return g.add(g.mul(xhat, selected["gamma"]), selected["beta"])

    def update_running(self, task: str, batch_mean: np.ndarray, batch_var: np.ndarray, count: int):
        stats = self.running[task]
        unbiased = batch_var * (count / (count - 1)) if count > 1 else batch_var
        stats["mean"] = (1.0 - self.momentum) * stats["mean"] + self.momentum * batch_mean.reshape(-1)
        stats["var"] = (1.0 - self.momentum) * stats["var"] + self.momentum * unbiased.reshape(-1)


def _gate_init(channels: int, hidden: int):
    def init(rng: np.random.Generator, extra=None) -> Dict[str, np.ndarray]:
        return {
            "fc1.weight": _he_normal(rng, (hidden, channels), channels),
            "fc1.bias": np.zeros(hidden),
            "fc2.weight": _he_normal(rng, (channels, hidden), hidden, gain=1.0),
            "fc2.bias": np.zeros(channels),
        }
    return init


def _head_init(channels: int, hidden: int):
    def init(rng: np.random.Generator, coord_mean: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
        bias = np.zeros(4)
        if coord_mean is not None:
            bias[:3] = coord_mean
        bias[3] = UNCERTAINTY_BIAS_INIT
        return {
            "conv1.weight": _he_normal(rng, (hidden, channels, 1, 1), channels),
            "conv1.bias": np.zeros(hidden),
            "conv2.weight": rng.normal(0.0, 0.01, size=(4, hidden, 1, 1)),
            "conv2.bias": bias,
        }
    return init


@dataclass
class CoordPrediction:
    coords: np.ndarray       # (Q, 3) world frame, meters
    uncertainty: np.ndarray  # (Q, 1) meters, >= UNCERTAINTY_FLOOR
    anchors: np.ndarray      # (Q, 2) pixel (u, v) of stride-8 cell centers

    @property
    def size(self) -> int:
        return self.coords.shape[0]


def cell_anchors(height: int, width: int) -> np.ndarray:
    """Row-major stride-8 cell centers as (u, v) pixel coordinates"""
    rows, cols = height // OUTPUT_STRIDE, width // OUTPUT_STRIDE
    v, u = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([OUTPUT_STRIDE * u + OUTPUT_STRIDE / 2, OUTPUT_STRIDE * v + OUTPUT_STRIDE / 2],
                    axis=-1).reshape(-1, 2).astype(np.float64)


class ForwardPass:
    """One task's forward graph together with its parameter bindings"""

    def __init__(self, task: str, images: np.ndarray, training: bool):
        self.task = task
        self.training = training
        self.images = images
        self.graph = Graph()
        self.bindings: Dict[str, np.ndarray] = {"image": images}
        # layer name -> (AdaptiveLayer or None, {pname: key})
        self.used: Dict[str, Tuple[Optional[AdaptiveLayer], Dict[str, str]]] = {}
        self.norm_stats: List[Tuple[NormLayer, int, int]] = []
        self.coords_node: Optional[int] = None
        self.uncertainty_node: Optional[int] = None
        self.evaluation: Optional[Evaluation] = None

    def bind_layer(self, name: str, selected: Dict[str, Tuple[str, np.ndarray]],
                   layer: Optional[AdaptiveLayer] = None) -> Dict[str, int]:
        nodes = {}
        for pname, (key, array) in selected.items():
            self.bindings[key] = array
            nodes[pname] = self.graph.param(key)
        self.used[name] = (layer, {p: key for p, (key, _) in selected.items()})
        return nodes

    def run(self) -> Evaluation:
        self.evaluation = evaluate(self.graph, self.bindings)
        if self.training:
            for norm, mean_node, var_node in self.norm_stats:
                source = self.evaluation.value(norm_input_node(self.graph, mean_node))
                count = int(np.prod(source.shape[:3]))
                norm.update_running(self.task, self.evaluation.value(mean_node),
                                    self.evaluation.value(var_node), count)
        return self.evaluation

    def predictions(self) -> List[CoordPrediction]:
        if self.evaluation is None:
            self.run()
        coords = self.evaluation.value(self.coords_node)
        uncertainty = self.evaluation.value(self.uncertainty_node)
        anchors = cell_anchors(self.images.shape[1], self.images.shape[2])
        return [CoordPrediction(coords[i].copy(), uncertainty[i].copy(), anchors.copy())
                for i in range(coords.shape[0])]


def norm_input_node(graph: Graph, mean_node: int) -> int:
    """The activation a batch-statistics mean node reduces over"""
    return graph.nodes[mean_node].inputs[0]


class ModelBundle:
    """Shared backbone parameters, per-task branches and per-task heads"""

    def __init__(self, config: Optional[BackboneConfig] = None):
        self.config = config or BackboneConfig()
        self.tasks: List[str] = []
        self.frozen_shared = False
        self.config_hash = short_hash(self.config.to_dict())
        self.convs: Dict[str, AdaptiveLayer] = {}
        self.conv_strides: Dict[str, int] = {}
        self.norms: Dict[str, NormLayer] = {}
        self.gates: Dict[str, TaskParams] = {}
        self.blocks: List[dict] = []
        self._build(np.random.default_rng(self.config.seed))
        channels = self.config.widths[-1]
        self.head = TaskParams("head", _head_init(channels, self.config.head_hidden))

    # --- construction
    def _conv_layer(self, rng, name: str, c_out: int, c_in: int, k: int, stride: int):
        cfg = self.config
        params = {"weight": _he_normal(rng, (c_out, c_in, k, k), c_in * k * k), "bias": np.zeros(c_out)}
        self.convs[name] = AdaptiveLayer(name, params, gated=(cfg.strategy != "all-shared"),
                                         threshold=cfg.threshold, score_init=cfg.score_init)
        self.conv_strides[name] = stride

    def _build(self, rng: np.random.Generator):
        cfg = self.config
        k = cfg.kernel
        self._conv_layer(rng, "pre.conv", cfg.pre_channels, cfg.in_channels, k, 2)
        self.norms["pre.norm"] = NormLayer("pre.norm", cfg.pre_channels, cfg)
        c_in = cfg.pre_channels
        for b, (c_out, stride) in enumerate(zip(cfg.widths, cfg.strides), start=1):
            name = f"block{b}"
            self._conv_layer(rng, f"{name}.conv1", c_out, c_in, k, stride)
            self.norms[f"{name}.norm1"] = NormLayer(f"{name}.norm1", c_out, cfg)
            self._conv_layer(rng, f"{name}.conv2", c_out, c_out, k, 1)
            self.norms[f"{name}.norm2"] = NormLayer(f"{name}.norm2", c_out, cfg)
            shortcut = stride != 1 or c_in != c_out
            if shortcut:
                self._conv_layer(rng, f"{name}.shortcut", c_out, c_in, 1, stride)
                self.norms[f"{name}.norm_sc"] = NormLayer(f"{name}.norm_sc", c_out, cfg)
            if cfg.attention:
                hidden = max(c_out // cfg.se_reduction, 1)
                self.gates[f"{name}.gate"] = TaskParams(f"{name}.gate", _gate_init(c_out, hidden))
            self.blocks.append({"name": name, "channels": c_out, "shortcut": shortcut})
            c_in = c_out

    def _task_rng(self, task: str) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, len(self.tasks)])

    def register_task(self, task: str, coord_mean: Optional[Sequence[float]] = None):
        if task in self.tasks:
            raise ModelError(f"duplicate task id '{task}'")
        rng = self._task_rng(task)
        for layer in self.convs.values():
            layer.register_task(task)
        for norm in self.norms.values():
            norm.add_task(task, rng)
        for gate_params in self.gates.values():
            gate_params.add_task(task, rng)
        mean = None if coord_mean is None else np.asarray(coord_mean, dtype=np.float64)
        self.head.add_task(task, rng, mean)
        self.tasks.append(task)
        log.debug(f"Registered task {task} ({len(self.tasks)} tasks)")

    def _check_task(self, task: str):
        if task not in self.tasks:
            raise ModelError(f"unregistered task '{task}'")

    # --- parameter bookkeeping
    def adaptive_layers(self) -> List[AdaptiveLayer]:
        layers = list(self.convs.values())
        layers += [n.adaptive for n in self.norms.values() if n.adaptive is not None]
        return layers

    def gated_layers(self) -> List[AdaptiveLayer]:
        return [layer for layer in self.adaptive_layers() if layer.gated]

    def score_names(self) -> List[str]:
        return [score_key(layer.name) for layer in self.gated_layers()]

    def scores(self) -> Dict[str, np.ndarray]:
        return {score_key(layer.name): layer.score for layer in self.gated_layers()}

    def task_private_modules(self) -> List[TaskParams]:
        modules = [n.private for n in self.norms.values() if n.private is not None]
        return modules + list(self.gates.values()) + [self.head]

    def task_private_count(self, task: str) -> int:
        return sum(module.count(task) for module in self.task_private_modules())

    def shared_parameters(self) -> Dict[str, np.ndarray]:
        """Every shared branch and score, stored once"""
        params = {}
        for layer in self.adaptive_layers():
            for pname, array in layer.shared.items():
                params[shared_key(layer.name, pname)] = array
        params.update(self.scores())
        return params

    def task_parameters(self, task: str) -> Dict[str, np.ndarray]:
        """Every stored parameter private to ``task``"""
        params = {}
        for layer in self.adaptive_layers():
            for pname, array in layer.specific.get(task, {}).items():
                params[f"{layer.name}.{pname}@{task}"] = array
        for module in self.task_private_modules():
            for pname, (key, array) in module.select(task).items():
                params[key] = array
        return params

    def visible_parameters(self, task: str) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
        """(chi_sh, chi_sp) for ``task`` under the current gates; materializes nothing"""
        self._check_task(task)
        shared: Dict[str, np.ndarray] = {}
        specific: Dict[str, np.ndarray] = {}
        for layer in self.adaptive_layers():
            target = shared if layer.gate_value() == 1 else specific
            for pname, (key, array) in layer.peek(task).items():
                target[key] = array
        shared.update(self.scores())
        for module in self.task_private_modules():
            for pname, (key, array) in module.select(task).items():
                specific[key] = array
        return shared, specific

    def is_shared_key(self, key: str) -> bool:
        return "@" not in key

    def shared_hash(self) -> str:
        digest = hashlib.sha256()
        for key, array in sorted(self.shared_parameters().items()):
            digest.update(key.encode("utf-8"))
            digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()

    # --- forward
    def _conv(self, trace: ForwardPass, name: str, x: int) -> int:
        layer = self.convs[name]
        nodes = trace.bind_layer(name, layer.select(trace.task), layer if layer.gated else None)
        k = layer.shared["weight"].shape[2]
        return trace.graph.conv2d(x, nodes["weight"], nodes["bias"], stride=self.conv_strides[name], pad=k // 2)

    def _gate(self, trace: ForwardPass, name: str, x: int, channels: int) -> int:
        g = trace.graph
        nodes = trace.bind_layer(name, self.gates[name].select(trace.task))
        squeeze = g.global_avg_pool(x)
        hidden = g.relu(g.affine(squeeze, nodes["fc1.weight"], nodes["fc1.bias"]))
        mask = g.sigmoid(g.affine(hidden, nodes["fc2.weight"], nodes["fc2.bias"]))
        return g.channel_scale(x, mask, per_sample=True, channels=channels)

    def build(self, task: str, images: np.ndarray, training: bool = False) -> ForwardPass:
        """Build (but do not run) the forward graph for a batch of one task"""
        self._check_task(task)
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[3] != self.config.in_channels:
            raise ModelError(f"expected N x H x W x {self.config.in_channels} images, got {images.shape}")
        n, h, w, _ = images.shape
        if h % OUTPUT_STRIDE or w % OUTPUT_STRIDE:
            raise ModelError(f"image size {h}x{w} not divisible by {OUTPUT_STRIDE}")

        trace = ForwardPass(task, images, training)
        g = trace.graph
        x = g.input("image")
        x = self._conv(trace, "pre.conv", x)
        x = g.relu(self.norms["pre.norm"].build(trace, x))
        for block in self.blocks:
            name = block["name"]
            y = self._conv(trace, f"{name}.conv1", x)
            y = g.relu(self.norms[f"{name}.norm1"].build(trace, y))
            y = self._conv(trace, f"{name}.conv2", y)
            y = self.norms[f"{name}.norm2"].build(trace, y)
            if f"{name}.gate" in self.gates:
                y = self._gate(trace, f"{name}.gate", y, block["channels"])
            if block["shortcut"]:
                skip = self._conv(trace, f"{name}.shortcut", x)
                skip = self.norms[f"{name}.norm_sc"].build(trace, skip)
            else:
                skip = x
            x = g.relu(g.add(y, skip))

        head = trace.bind_layer("head", self.head.select(task))
        x = g.relu(g.conv2d(x, head["conv1.weight"], head["conv1.bias"], stride=1, pad=0))
        out = g.conv2d(x, head["conv2.weight"], head["conv2.bias"], stride=1, pad=0)
        q = (h // OUTPUT_STRIDE) * (w // OUTPUT_STRIDE)
        trace.coords_node = g.output("coords", g.reshape(g.slice_last(out, 0, 3), (n, q, 3)))
        raw = g.reshape(g.slice_last(out, 3, 4), (n, q, 1))
        trace.uncertainty_node = g.output("uncertainty", g.add(g.softplus(raw), g.const(UNCERTAINTY_FLOOR)))
        return trace

    def forward(self, task: str, images: np.ndarray, training: bool = False) -> ForwardPass:
        trace = self.build(task, images, training)
        trace.run()
        return trace

    # --- persistence helpers
    def running_stats(self) -> Dict[str, np.ndarray]:
        stats = {}
        for norm in self.norms.values():
            for task, values in norm.running.items():
                stats[f"{norm.name}.mean@{task}"] = values["mean"]
                stats[f"{norm.name}.var@{task}"] = values["var"]
        return stats


def forward(bundle: ModelBundle, task: str, image: np.ndarray,
            training: bool = False) -> Union[CoordPrediction, List[CoordPrediction]]:
    """Coordinates and uncertainty for one H x W x C image (or a batch)"""
    single = np.ndim(image) == 3
    predictions = bundle.forward(task, image, training).predictions()
    return predictions[0] if single else predictions


def add_task(bundle: ModelBundle, new_task: str, freeze_shared: bool = False,
             coord_mean: Optional[Sequence[float]] = None) -> ModelBundle:
    """Register a new scene; optionally freeze shared parameters and scores"""
    bundle.register_task(new_task, coord_mean)
    if freeze_shared:
        bundle.frozen_shared = True
        log.info(f"Shared parameters frozen while adding task {new_task}")
    return bundle


def param_partition(bundle: ModelBundle, task: str) -> Tuple[Set[str], Set[str]]:
    """Names of chi_sh (shared branches in use + scores) and chi_sp for ``task``"""
    shared, specific = bundle.visible_parameters(task)
    return set(shared), set(specific)
