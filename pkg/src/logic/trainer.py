"""
Multi-task trainer with gradient-magnitude normalization of shared parameters.

Each task computes its loss gradient on its own worker. Shared gradients are
rescaled to a common norm built from relative-convergence weights and then
averaged; task-specific gradients are applied as computed.
"""

import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from ..data.scenes import RenderedView
from ..models.autodiff import backward
from ..models.config import GradNormConfig, OptimizerConfig
from ..models.losses import scene_coord_loss_graph, write_csv
from ..models.network import ModelBundle
from ..models.sharing import penalty_graph, score_backward, score_key
from ..utils.errors import RelocError, TrainingError
from ..utils.logger import log


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    """L2 norm of all arrays viewed as one concatenated vector (sorted key order)"""
    total = 0.0
    for key in sorted(grads):
        g = np.asarray(grads[key]).reshape(-1)
        total += float(g @ g)
    return math.sqrt(total)


@dataclass
class TaskGradState:
    task: str
    prev_shared_norm: Optional[float] = None
    shared_grads: Dict[str, np.ndarray] = field(default_factory=dict)
    specific_grads: Dict[str, np.ndarray] = field(default_factory=dict)
    loss: float = float("nan")
    sc_loss: float = float("nan")
    penalty: float = 0.0

    @property
    def shared_norm(self) -> float:
        return global_norm(self.shared_grads)

    def ratio(self) -> float:
        """Relative convergence; 1 on the first iteration and after a zero-norm one"""
        if self.prev_shared_norm is None or self.prev_shared_norm == 0.0:
            return 1.0
        return self.shared_norm / self.prev_shared_norm

    def roll(self, ema: Optional[float] = None):
        current = self.shared_norm
        if ema is None or self.prev_shared_norm is None:
            self.prev_shared_norm = current
        else:
            self.prev_shared_norm = ema * self.prev_shared_norm + (1.0 - ema) * current


@dataclass
class Batch:
    images: np.ndarray  # N x H x W x C
    coords: np.ndarray  # N x Q x 3
    valid: np.ndarray   # N x Q
    batch_id: str = ""


def stack_views(views: Sequence[RenderedView]) -> Batch:
    return Batch(
        images=np.stack([v.image for v in views]),
        coords=np.stack([v.coords_flat for v in views]),
        valid=np.stack([v.valid_flat for v in views]),
    )


def _shard_gradients(bundle: ModelBundle, task: str, shard: Batch, beta: float):
    trace = bundle.build(task, shard.images, training=True)
    g = trace.graph
    sc = scene_coord_loss_graph(g, trace.coords_node, trace.uncertainty_node, shard.coords, shard.valid)
    names = bundle.score_names()
    if names:
        pe = penalty_graph(g, names)
        trace.bindings.update(bundle.scores())
        total = g.add(sc, g.mul(g.const(beta), pe))
    else:
        pe = None
        total = sc
    g.output("loss", total)
    evaluation = trace.run()
    loss = float(evaluation.value("loss"))
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss in batch {shard.batch_id}", batch_id=shard.batch_id)
    grads = backward(evaluation, "loss")

    # straight-through score gradient from every gated layer on this path
    for name, (layer, keys) in trace.used.items():
        if layer is None or not layer.gated:
            continue
        upstream = {p: grads[key] for p, key in keys.items()}
        grads[score_key(name)] = grads[score_key(name)] + score_backward(upstream, layer, task)
    sc_value = float(evaluation.value(sc))
    pe_value = float(evaluation.value(pe)) if pe is not None else 0.0
    return loss, sc_value, pe_value, grads


def compute_task_gradients(bundle: ModelBundle, task: str, batch: Batch, beta: float = 0.25,
                           state: Optional[TaskGradState] = None, workers_per_task: int = 1) -> TaskGradState:
    """Fill G_sh and G_sp for ``task``; shards of the batch are averaged first"""
    state = state or TaskGradState(task)
    n = batch.images.shape[0]
    parts = np.array_split(np.arange(n), min(workers_per_task, n))
    results = []
    for k, idx in enumerate(parts):
        shard = Batch(batch.images[idx], batch.coords[idx], batch.valid[idx], f"{batch.batch_id}/{k}")
        try:
            results.append(_shard_gradients(bundle, task, shard, beta))
        except TrainingError:
            raise
        except RelocError as e:
            raise TrainingError(f"{e} (batch {shard.batch_id})", batch_id=shard.batch_id) from e

    merged: Dict[str, np.ndarray] = {}
    for _, _, _, grads in results:
        for key, grad in grads.items():
            merged[key] = grad.copy() if key not in merged else merged[key] + grad
    scale = 1.0 / len(results)
    state.shared_grads = {k: v * scale for k, v in merged.items() if bundle.is_shared_key(k)}
    state.specific_grads = {k: v * scale for k, v in merged.items() if not bundle.is_shared_key(k)}
    state.loss = sum(r[0] for r in results) * scale
    state.sc_loss = sum(r[1] for r in results) * scale
    state.penalty = sum(r[2] for r in results) * scale
    return state


def relative_weights(states: Sequence[TaskGradState]) -> np.ndarray:
    """W_n = r_n / sum_j r_j with r_n = |G_n| / |G_n,prev|"""
    ratios = [s.ratio() for s in states]
    if not all(math.isfinite(r) for r in ratios):
        raise TrainingError(f"non-finite convergence ratios {ratios}")
    total = 0.0
    for r in ratios:
        total += r
    if total == 0.0:
        raise TrainingError("degenerate iteration: every convergence ratio is zero")
    weights = [r / total for r in ratios[:-1]]
    # last weight closes the sum so it is exactly one
    partial = 0.0
    for w in weights:
        partial += w
    weights.append(1.0 - partial)
    return np.array(weights)


def common_scale(states: Sequence[TaskGradState], weights: Sequence[float]) -> float:
    """D = sum_n W_n |G_n|"""
    total = 0.0
    for state, w in zip(states, weights):
        total += float(w) * state.shared_norm
    return total


def normalize_shared(state: TaskGradState, scale: float) -> Dict[str, np.ndarray]:
    """G_n rescaled to norm ``scale``; a zero gradient stays zero"""
    norm = state.shared_norm
    if norm == 0.0:
        log.warning(f"Zero shared gradient for task {state.task}; it contributes nothing this iteration")
        return {k: np.zeros_like(v) for k, v in state.shared_grads.items()}
    factor = scale / norm
    return {k: v * factor for k, v in state.shared_grads.items()}


def aggregate_shared(gradients: Sequence[Mapping[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    """Average in task order"""
    if not gradients:
        raise TrainingError("nothing to aggregate")
    keys = set(gradients[0])
    for grads in gradients[1:]:
        if set(grads) != keys:
            raise TrainingError("shared gradients cover different parameters")
    result: Dict[str, np.ndarray] = {}
    for key in sorted(keys):
        total = np.array(gradients[0][key], dtype=np.float64)
        for grads in gradients[1:]:
            if np.shape(grads[key]) != total.shape:
                raise TrainingError(f"shape mismatch for '{key}': {np.shape(grads[key])} vs {total.shape}")
            total = total + grads[key]
        result[key] = total / len(gradients)
    return result


def cosine_lr(config: OptimizerConfig, iteration: int) -> float:
    """Linear warmup, then cosine annealing reaching lr_min at the last iteration"""
    if iteration < config.warmup_iters:
        return config.lr * (iteration + 1) / config.warmup_iters
    span = max(1, config.iterations - 1 - config.warmup_iters)
    progress = min(1.0, (iteration - config.warmup_iters) / span)
    return config.lr_min + 0.5 * (config.lr - config.lr_min) * (1.0 + math.cos(math.pi * progress))


def _decays(key: str) -> bool:
    """Weight decay applies to weight matrices only (not scores, norms or biases)"""
    return key.split("@")[0].endswith("weight")


class AdamW:
    """Adaptive moments with decoupled weight decay; state per parameter key"""

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t: Dict[str, int] = {}

    def propose(self, key: str, param: np.ndarray, grad: np.ndarray, lr: float):
        """(new value, new m, new v, new t) without touching any state"""
        b1, b2 = self.config.adam_betas
        t = self.t.get(key, 0) + 1
        m = b1 * self.m.get(key, 0.0) + (1.0 - b1) * grad
        v = b2 * self.v.get(key, 0.0) + (1.0 - b2) * grad * grad
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        update = m_hat / (np.sqrt(v_hat) + self.config.adam_eps)
        if _decays(key) and self.config.weight_decay:
            update = update + self.config.weight_decay * param
        return param - lr * update, m, v, t

    def state_dict(self) -> dict:
        return {"t": dict(self.t)}


def step(bundle: ModelBundle, shared_grad: Mapping[str, np.ndarray],
         specific_grads: Mapping[str, Mapping[str, np.ndarray]], optimizer: AdamW, iteration: int) -> float:
    """Apply one update; on any non-finite value nothing is written. Returns the learning rate."""
    lr = cosine_lr(optimizer.config, iteration)
    targets: Dict[str, np.ndarray] = {}
    if not bundle.frozen_shared:
        targets.update(bundle.shared_parameters())
    for task in specific_grads:
        targets.update(bundle.task_parameters(task))

    proposals = {}
    # 1. shared parameters with the aggregated gradient
    if not bundle.frozen_shared:
        for key, grad in shared_grad.items():
            proposals[key] = optimizer.propose(key, targets[key], np.asarray(grad), lr)
    # 2. each task's own parameters with its own gradient
    for task, grads in specific_grads.items():
        for key, grad in grads.items():
            if key not in targets:
                raise TrainingError(f"gradient for unknown parameter '{key}'")
            proposals[key] = optimizer.propose(key, targets[key], np.asarray(grad), lr)

    for key, (value, m, v, _) in proposals.items():
        if not (np.all(np.isfinite(value)) and np.all(np.isfinite(m)) and np.all(np.isfinite(v))):
            raise TrainingError(f"non-finite update for '{key}' at iteration {iteration}", iteration=iteration)
    for key, (value, m, v, t) in proposals.items():
        targets[key][...] = value
        optimizer.m[key], optimizer.v[key], optimizer.t[key] = m, v, t
    return lr


class MultiTaskTrainer:
    """Runs the synchronized per-task gradient / normalize / update loop"""

    def __init__(self, bundle: ModelBundle, datasets: Mapping[str, Sequence[RenderedView]],
                 config: OptimizerConfig, seed: int = 0):
        self.bundle = bundle
        self.config = config
        self.tasks: List[str] = [t for t in bundle.tasks if t in datasets]
        if not self.tasks:
            raise TrainingError("no registered task has training data")
        self.data = {task: stack_views(datasets[task]) for task in self.tasks}
        self.rngs = {task: np.random.default_rng([int(seed), i]) for i, task in enumerate(self.tasks)}
        self.states = {task: TaskGradState(task) for task in self.tasks}
        self.optimizer = AdamW(config)
        self.records: List[dict] = []
        self.iteration = 0

    @property
    def gradnorm(self) -> GradNormConfig:
        return self.config.gradnorm

    def sample_batch(self, task: str) -> Batch:
        data = self.data[task]
        n = data.images.shape[0]
        idx = self.rngs[task].choice(n, size=min(self.config.batch_size, n), replace=False)
        idx.sort()
        return Batch(data.images[idx], data.coords[idx], data.valid[idx], f"{task}:{self.iteration}")

    def train_step(self, pool: Optional[ThreadPoolExecutor] = None) -> dict:
        batches = [self.sample_batch(task) for task in self.tasks]

        # 1. per-task gradients, one worker per task, gathered in task order
        def work(task: str, batch: Batch) -> TaskGradState:
            return compute_task_gradients(self.bundle, task, batch, self.config.beta,
                                          self.states[task], self.config.workers_per_task)

        if pool is not None and len(self.tasks) > 1:
            futures = [pool.submit(work, task, batch) for task, batch in zip(self.tasks, batches)]
            states = [f.result() for f in futures]
        else:
            states = [work(task, batch) for task, batch in zip(self.tasks, batches)]

        # 2. shared gradient: normalize then average, or plain averaging
        if self.gradnorm.enabled:
            weights = relative_weights(states)
            scale = common_scale(states, weights)
            shared = aggregate_shared([normalize_shared(s, scale) for s in states])
        else:
            weights = np.full(len(states), 1.0 / len(states))
            scale = float("nan")
            shared = aggregate_shared([s.shared_grads for s in states])

        # 3. single writer update
        lr = step(self.bundle, shared, {s.task: s.specific_grads for s in states}, self.optimizer, self.iteration)

        record = {"iteration": self.iteration, "lr": lr, "D": scale}
        for s, w in zip(states, weights):
            record[f"loss_{s.task}"] = s.loss
            record[f"gnorm_{s.task}"] = s.shared_norm
            record[f"W_{s.task}"] = float(w)
        for s in states:
            s.roll(self.gradnorm.ema)
        self.records.append(record)
        self.iteration += 1
        return record

    def train(self, iterations: Optional[int] = None,
              checkpoint_fn: Optional[Callable[[int], None]] = None, checkpoint_every: int = 0) -> pd.DataFrame:
        iterations = self.config.iterations if iterations is None else int(iterations)
        log.info(f"Training tasks {self.tasks} for {iterations} iterations "
                 f"(gradnorm={'on' if self.gradnorm.enabled else 'off'}, beta={self.config.beta})")
        progress = tqdm(range(iterations), desc="train", disable=not sys.stdout.isatty())
        with ThreadPoolExecutor(max_workers=len(self.tasks)) as pool:
            for _ in progress:
                try:
                    record = self.train_step(pool)
                except TrainingError as e:
                    log.error(f"Training aborted at iteration {self.iteration}: {e}")
                    raise
                it = record["iteration"]
                if self.config.log_every and (it % self.config.log_every == 0 or it == iterations - 1):
                    losses = ", ".join(f"{t}={record[f'loss_{t}']:.4f}" for t in self.tasks)
                    log.info(f"iter {it}: {losses} D={record['D']:.4g} lr={record['lr']:.2e}")
                if checkpoint_fn is not None and checkpoint_every and (it + 1) % checkpoint_every == 0:
                    checkpoint_fn(it)
        return self.log_table()

    def log_table(self) -> pd.DataFrame:
        return pd.DataFrame(self.records)

    def write_log(self, path) -> str:
        return write_csv(self.log_table(), path)
