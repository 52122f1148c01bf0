"""Dense tensor engine with reverse-mode differentiation.

A :class:`Graph` is built once (nodes are appended in topological order), then
evaluated against bindings. :func:`evaluate` returns an :class:`Evaluation`
holding every node value; :func:`backward` walks the same node list in reverse
and accumulates gradients for the graph's parameters.
"""

from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from ..utils.errors import AutodiffError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]


class Tensor:
    """Flat float64 storage plus a shape"""

    __slots__ = ("shape", "data", "grad_required")

    def __init__(self, data: ArrayLike, shape: Optional[Sequence[int]] = None, grad_required: bool = False):
        flat = np.array(data, dtype=np.float64).reshape(-1)
        if shape is None:
            shape = np.shape(data)
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise AutodiffError(f"tensor dimensions must be positive, got {shape}")
        if int(np.prod(shape, dtype=np.int64)) != flat.size:
            raise AutodiffError(f"shape {shape} does not match {flat.size} elements")
        self.shape = shape
        self.data = flat
        self.grad_required = grad_required

    @classmethod
    def from_array(cls, array: np.ndarray, grad_required: bool = False) -> "Tensor":
        array = np.asarray(array, dtype=np.float64)
        return cls(array.reshape(-1), array.shape, grad_required)

    @property
    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    def bit_equal(self, other: "Tensor") -> bool:
        return self.shape == other.shape and self.data.tobytes() == other.data.tobytes()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad_required={self.grad_required})"


def as_array(value: ArrayLike) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.array
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to an operand's shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- op kernels -------------------------------------------------------------
# forward(*inputs, **attrs) -> array
# backward(g, out, *inputs, **attrs) -> tuple of input grads (None = no grad)

def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _conv_forward(x, w, b=None, stride=1, pad=0):
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[1]:
        raise ValueError(f"conv2d expects NHWC input with {w.shape[1]} channels, got {x.shape}")
    k = w.shape[2]
    n, h, wd, _ = x.shape
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(wd, k, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.zeros((n, ho, wo, w.shape[0]))
    for di in range(k):
        for dj in range(k):
            patch = xp[:, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride, :]
            out += patch @ w[:, :, di, dj].T
    if b is not None:
        out += b
    return out


def _conv_backward(g, out, x, w, b=None, stride=1, pad=0):
    k = w.shape[2]
    _, h, wd, _ = x.shape
    ho, wo = g.shape[1], g.shape[2]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for di in range(k):
        for dj in range(k):
            rows = slice(di, di + stride * (ho - 1) + 1, stride)
            cols = slice(dj, dj + stride * (wo - 1) + 1, stride)
            patch = xp[:, rows, cols, :]
            dw[:, :, di, dj] = np.tensordot(g, patch, axes=([0, 1, 2], [0, 1, 2]))
            dxp[:, rows, cols, :] += g @ w[:, :, di, dj]
    dx = dxp[:, pad:pad + h, pad:pad + wd, :]
    if b is None:
        return dx, dw
    return dx, dw, g.sum(axis=(0, 1, 2))


def _affine_forward(x, w, b=None):
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"affine expects last dim {w.shape[1]}, got {x.shape}")
    out = x @ w.T
    return out if b is None else out + b


def _affine_backward(g, out, x, w, b=None):
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    dx = g @ w
    dw = g2.T @ x2
    if b is None:
        return dx, dw
    return dx, dw, g2.sum(axis=0)


def _reduce_backward(g, out, a, axis=None, keepdims=False, mean=False):
    if axis is None:
        axes = tuple(range(a.ndim))
    else:
        axes = tuple(ax % a.ndim for ax in (axis if isinstance(axis, tuple) else (axis,)))
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    grad = np.broadcast_to(g, a.shape).copy()
    if mean:
        grad /= int(np.prod([a.shape[ax] for ax in axes]))
    return (grad,)


def _slice_backward(g, out, a, start=0, stop=None):
    grad = np.zeros_like(a)
    grad[..., start:stop] = g
    return (grad,)


OPS: Dict[str, Tuple[Callable, Callable]] = {
    "add": (lambda a, b: a + b, lambda g, o, a, b: (g, g)),
    "sub": (lambda a, b: a - b, lambda g, o, a, b: (g, -g)),
    "mul": (lambda a, b: a * b, lambda g, o, a, b: (g * b, g * a)),
    "div": (lambda a, b: a / b, lambda g, o, a, b: (g / b, -g * a / (b * b))),
    "neg": (lambda a: -a, lambda g, o, a: (-g,)),
    "square": (lambda a: a * a, lambda g, o, a: (2.0 * a * g,)),
    "sqrt": (np.sqrt, lambda g, o, a: (g / (2.0 * o),)),
    "log": (np.log, lambda g, o, a: (g / a,)),
    "exp": (np.exp, lambda g, o, a: (g * o,)),
    "abs": (np.abs, lambda g, o, a: (g * np.sign(a),)),
    "relu": (lambda a: np.maximum(a, 0.0), lambda g, o, a: (g * (a > 0.0),)),
    "sigmoid": (expit, lambda g, o, a: (g * o * (1.0 - o),)),
    "softplus": (lambda a: np.logaddexp(0.0, a), lambda g, o, a: (g * expit(a),)),
    "affine": (_affine_forward, _affine_backward),
    "conv2d": (_conv_forward, _conv_backward),
    "sum": (lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims),
            lambda g, o, a, axis=None, keepdims=False: _reduce_backward(g, o, a, axis, keepdims)),
    "mean": (lambda a, axis=None, keepdims=False: np.mean(a, axis=axis, keepdims=keepdims),
             lambda g, o, a, axis=None, keepdims=False: _reduce_backward(g, o, a, axis, keepdims, mean=True)),
    "reshape": (lambda a, shape: a.reshape(shape), lambda g, o, a, shape: (g.reshape(a.shape),)),
    "slice_last": (lambda a, start=0, stop=None: a[..., start:stop], _slice_backward),
}

# Ops whose operands may broadcast against each other
_BROADCASTING = {"add", "sub", "mul", "div"}


class Node:
    __slots__ = ("op", "inputs", "attrs", "name")

    def __init__(self, op: str, inputs: Tuple[int, ...], attrs: dict, name: Optional[str]):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.name = name

    def label(self, index: int) -> str:
        return self.name or f"{self.op}#{index}"


class Graph:
    """Append-only list of operation records; node ids are list positions"""

    def __init__(self):
        self.nodes: List[Node] = []
        self.symbols: Dict[str, int] = {}
        self.outputs: Dict[str, int] = {}
        self.constants: Dict[int, np.ndarray] = {}

    def _add(self, op: str, inputs: Sequence[int] = (), name: Optional[str] = None, **attrs) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise AutodiffError("input node does not precede its consumer", node=f"{op}#{len(self.nodes)}")
        self.nodes.append(Node(op, tuple(inputs), attrs, name))
        return len(self.nodes) - 1

    # --- leaves
    def input(self, name: str) -> int:
        """Free input that must be bound at evaluation time"""
        if name in self.symbols:
            return self.symbols[name]
        self.symbols[name] = self._add("input", name=name)
        return self.symbols[name]

    def param(self, name: str) -> int:
        """Free input that receives a gradient"""
        if name in self.symbols:
            return self.symbols[name]
        self.symbols[name] = self._add("param", name=name)
        return self.symbols[name]

    def const(self, value: ArrayLike) -> int:
        node = self._add("const")
        self.constants[node] = as_array(value).copy()
        return node

    def output(self, name: str, node: int) -> int:
        self.outputs[name] = node
        return node

    # --- elementwise
    def add(self, a: int, b: int) -> int:
        return self._add("add", (a, b))

    def sub(self, a: int, b: int) -> int:
        return self._add("sub", (a, b))

    def mul(self, a: int, b: int) -> int:
        return self._add("mul", (a, b))

    def div(self, a: int, b: int) -> int:
        return self._add("div", (a, b))

    def neg(self, a: int) -> int:
        return self._add("neg", (a,))

    def square(self, a: int) -> int:
        return self._add("square", (a,))

    def sqrt(self, a: int) -> int:
        return self._add("sqrt", (a,))

    def log(self, a: int) -> int:
        return self._add("log", (a,))

    def exp(self, a: int) -> int:
        return self._add("exp", (a,))

    def abs(self, a: int) -> int:
        return self._add("abs", (a,))

    def relu(self, a: int) -> int:
        return self._add("relu", (a,))

    def sigmoid(self, a: int) -> int:
        return self._add("sigmoid", (a,))

    def softplus(self, a: int) -> int:
        return self._add("softplus", (a,))

    # --- linear maps
    def affine(self, x: int, w: int, b: Optional[int] = None) -> int:
        """x @ w.T + b with w laid out as (out, in)"""
        return self._add("affine", (x, w) if b is None else (x, w, b))

    def conv2d(self, x: int, w: int, b: Optional[int] = None, stride: int = 1, pad: Optional[int] = None,
               kernel: Optional[int] = None) -> int:
        """NHWC convolution with (C_out, C_in, k, k) weights; pad defaults to k // 2"""
        if pad is None:
            pad = (kernel or 3) // 2
        return self._add("conv2d", (x, w) if b is None else (x, w, b), stride=stride, pad=pad)

    # --- reductions and shape
    def sum(self, a: int, axis=None, keepdims: bool = False) -> int:
        return self._add("sum", (a,), axis=axis, keepdims=keepdims)

    def mean(self, a: int, axis=None, keepdims: bool = False) -> int:
        return self._add("mean", (a,), axis=axis, keepdims=keepdims)

    def reshape(self, a: int, shape: Tuple[int, ...]) -> int:
        return self._add("reshape", (a,), shape=tuple(shape))

    def slice_last(self, a: int, start: int, stop: Optional[int] = None) -> int:
        return self._add("slice_last", (a,), start=start, stop=stop)

    def global_avg_pool(self, x: int) -> int:
        """NHWC -> NC"""
        return self.mean(x, axis=(1, 2))

    def channel_scale(self, x: int, scale: int, per_sample: bool = False, channels: int = 0) -> int:
        """Multiply NHWC activations by a per-channel (C,) or per-sample (N, C) factor"""
        if per_sample:
            scale = self.reshape(scale, (-1, 1, 1, channels))
        return self.mul(x, scale)

    def channel_shift(self, x: int, shift: int) -> int:
        return self.add(x, shift)

    def __len__(self) -> int:
        return len(self.nodes)


class Evaluation(Mapping):
    """Values of every node from one forward pass; maps output names to tensors"""

    def __init__(self, graph: Graph, values: List[np.ndarray], requested: Dict[str, int]):
        self.graph = graph
        self.values = values
        self._requested = requested

    def value(self, node: Union[int, str]) -> np.ndarray:
        return self.values[self._resolve(node)]

    def _resolve(self, node: Union[int, str]) -> int:
        if isinstance(node, str):
            if node in self._requested:
                return self._requested[node]
            if node in self.graph.symbols:
                return self.graph.symbols[node]
            raise AutodiffError("unknown output", node=node)
        return node

    def __getitem__(self, name: str) -> Tensor:
        return Tensor.from_array(self.values[self._requested[name]])

    def __iter__(self) -> Iterator[str]:
        return iter(self._requested)

    def __len__(self) -> int:
        return len(self._requested)


def evaluate(graph: Graph, bindings: Mapping[str, ArrayLike],
             outputs: Optional[Mapping[str, int]] = None) -> Evaluation:
    """Run the graph forward.

    Args:
        graph: graph to run
        bindings: value for every ``input``/``param`` symbol
        outputs: extra name -> node pairs to expose besides ``graph.outputs``

    Returns:
        Evaluation mapping each output name to its Tensor
    """
    values: List[np.ndarray] = []
    for index, node in enumerate(graph.nodes):
        if node.op in ("input", "param"):
            if node.name not in bindings:
                raise AutodiffError("unbound input", node=node.name)
            values.append(as_array(bindings[node.name]))
            continue
        if node.op == "const":
            values.append(graph.constants[index])
            continue
        forward, _ = OPS[node.op]
        args = [values[i] for i in node.inputs]
        try:
            with np.errstate(all="ignore"):
                values.append(np.asarray(forward(*args, **node.attrs), dtype=np.float64))
        except ValueError as exc:
            raise AutodiffError(f"shape mismatch: {exc}", node=node.label(index)) from exc
    requested = dict(graph.outputs)
    if outputs:
        requested.update(outputs)
    return Evaluation(graph, values, requested)


def backward(evaluation: Evaluation, output: Union[int, str],
             seed: Optional[ArrayLike] = None) -> Dict[str, np.ndarray]:
    """Reverse accumulation from ``output``.

    Returns:
        gradient of the output w.r.t. every ``param`` node, keyed by name.
        Parameters that do not influence the output get zero gradients.
    """
    if not isinstance(evaluation, Evaluation):
        raise AutodiffError("backward before forward")
    graph = evaluation.graph
    values = evaluation.values
    out_id = evaluation._resolve(output)
    out_value = values[out_id]
    if seed is None:
        if out_value.size != 1:
            raise AutodiffError("non-scalar output needs an explicit seed", node=graph.nodes[out_id].label(out_id))
        seed_arr = np.ones_like(out_value)
    else:
        seed_arr = as_array(seed)
        if seed_arr.shape != out_value.shape:
            raise AutodiffError(f"seed shape {seed_arr.shape} != output shape {out_value.shape}",
                                node=graph.nodes[out_id].label(out_id))

    grads: List[Optional[np.ndarray]] = [None] * len(graph.nodes)
    grads[out_id] = seed_arr
    for index in range(out_id, -1, -1):
        g = grads[index]
        node = graph.nodes[index]
        if g is None or node.op in ("input", "param", "const"):
            continue
        _, backward_fn = OPS[node.op]
        args = [values[i] for i in node.inputs]
        input_grads = backward_fn(g, values[index], *args, **node.attrs)
        for src, grad in zip(node.inputs, input_grads):
            if grad is None:
                continue
            if node.op in _BROADCASTING:
                grad = _unbroadcast(grad, values[src].shape)
            grads[src] = grad if grads[src] is None else grads[src] + grad

    result: Dict[str, np.ndarray] = {}
    for index, node in enumerate(graph.nodes):
        if node.op == "param":
            g = grads[index]
            result[node.name] = np.zeros_like(values[index]) if g is None else g
    return result


def finite_diff_check(graph: Graph, point: Mapping[str, ArrayLike], step: float = 1e-5,
                      output: Union[int, str, None] = None, floor: float = 1e-4) -> float:
    """Worst relative error between backward and central differences.

    Relative errors use ``max(|analytic|, |numeric|, floor)`` as denominator so
    vanishing gradients are compared absolutely.
    """
    if step <= 0:
        raise AutodiffError("finite-difference step must be positive")
    if output is None:
        if len(graph.outputs) != 1:
            raise AutodiffError("finite_diff_check needs an explicit output")
        output = next(iter(graph.outputs))
    base = {name: as_array(value).copy() for name, value in point.items()}
    analytic = backward(evaluate(graph, base), output)

    def f(bindings) -> float:
        value = evaluate(graph, bindings).value(output)
        if value.size != 1:
            raise AutodiffError("finite_diff_check needs a scalar function", node=str(output))
        scalar = float(value.reshape(-1)[0])
        if not np.isfinite(scalar):
            raise AutodiffError("non-finite function value at perturbed point", node=str(output))
        return scalar

    worst = 0.0
    for name in sorted(analytic):
        array = base[name]
        flat = array.reshape(-1)
        grad = analytic[name].reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            f_plus = f(base)
            flat[i] = original - step
            f_minus = f(base)
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(grad[i]), abs(numeric), floor)
            worst = max(worst, abs(grad[i] - numeric) / denom)
    return worst


def linearity_check(f: Graph, g: Graph, alpha: float, beta: float,
                    point: Mapping[str, ArrayLike]) -> float:
    """Max abs deviation of grad(alpha f + beta g) from alpha grad f + beta grad g.

    Both graphs must expose a single scalar output and share parameter names.
    """
    combined = Graph()
    fo = _inline(combined, f)
    go = _inline(combined, g)
    combo = combined.add(combined.mul(combined.const(alpha), fo), combined.mul(combined.const(beta), go))
    combined.output("y", combo)
    grad_f = backward(evaluate(f, point), next(iter(f.outputs)))
    grad_g = backward(evaluate(g, point), next(iter(g.outputs)))
    grad_c = backward(evaluate(combined, point), "y")
    worst = 0.0
    for name, value in grad_c.items():
        expected = alpha * grad_f.get(name, 0.0) + beta * grad_g.get(name, 0.0)
        worst = max(worst, float(np.max(np.abs(value - expected))))
    return worst


def _inline(target: Graph, source: Graph) -> int:
    """Copy ``source`` nodes into ``target``; returns the copy of its single output"""
    mapping: Dict[int, int] = {}
    for index, node in enumerate(source.nodes):
        if node.op == "input":
            mapping[index] = target.input(node.name)
        elif node.op == "param":
            mapping[index] = target.param(node.name)
        elif node.op == "const":
            mapping[index] = target.const(source.constants[index])
        else:
            mapping[index] = target._add(node.op, tuple(mapping[i] for i in node.inputs), node.name, **node.attrs)
    return mapping[next(iter(source.outputs.values()))]
