"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Graph` is an append-only tape. Every op registers a node holding its
forward value; :func:`backward` walks the tape in reverse insertion order.
Graphs are built fresh for every loss evaluation and are single use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

OP_KINDS = frozenset(
    {
        "add", "sub", "mul", "div", "matmul", "tanh", "relu", "sigmoid", "exp",
        "log", "softplus", "sum", "mean", "square", "neg", "concat", "slice",
        "scale", "dropout-mask-mul", "layer-norm", "reshape",
    }
)

LAYER_NORM_EPS = 1e-5


class AutodiffError(Exception):
    """Base class for autodiff failures."""


class ShapeError(AutodiffError):
    pass


class DomainError(AutodiffError):
    """log/div outside their domain."""


class NonFiniteError(AutodiffError):
    pass


class GraphConsumedError(AutodiffError):
    pass


@dataclass
class _Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    requires_grad: bool
    attrs: dict = field(default_factory=dict)
    saved: object = None


class Tensor:
    """A handle on one node of a graph.

    Arithmetic operators dispatch to :meth:`Graph.apply`; plain numbers and
    arrays on the other side are lifted to constants of the same graph.
    """

    __slots__ = ("graph", "node_id")
    __array_priority__ = 1000

    def __init__(self, graph: "Graph", node_id: int):
        self.graph = graph
        self.node_id = node_id

    @property
    def data(self) -> np.ndarray:
        return self.graph.nodes[self.node_id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def requires_grad(self) -> bool:
        return self.graph.nodes[self.node_id].requires_grad

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(node={self.node_id}, shape={self.shape})"

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.graph is not self.graph:
                raise AutodiffError("tensors belong to different graphs")
            return other
        return self.graph.constant(other)

    def __add__(self, other):
        return self.graph.apply("add", [self, self._lift(other)])

    def __radd__(self, other):
        return self.graph.apply("add", [self._lift(other), self])

    def __sub__(self, other):
        return self.graph.apply("sub", [self, self._lift(other)])

    def __rsub__(self, other):
        return self.graph.apply("sub", [self._lift(other), self])

    def __mul__(self, other):
        if np.isscalar(other):
            return self.graph.apply("scale", [self], factor=float(other))
        return self.graph.apply("mul", [self, self._lift(other)])

    def __rmul__(self, other):
        if np.isscalar(other):
            return self.graph.apply("scale", [self], factor=float(other))
        return self.graph.apply("mul", [self._lift(other), self])

    def __truediv__(self, other):
        if np.isscalar(other):
            if other == 0:
                raise DomainError("division by zero")
            return self.graph.apply("scale", [self], factor=1.0 / float(other))
        return self.graph.apply("div", [self, self._lift(other)])

    def __rtruediv__(self, other):
        return self.graph.apply("div", [self._lift(other), self])

    def __matmul__(self, other):
        return self.graph.apply("matmul", [self, self._lift(other)])

    def __rmatmul__(self, other):
        return self.graph.apply("matmul", [self._lift(other), self])

    def __neg__(self):
        return self.graph.apply("neg", [self])

    def __getitem__(self, index):
        return self.graph.apply("slice", [self], index=index)

    def sum(self, axis=None, keepdims=False):
        return self.graph.apply("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return self.graph.apply("mean", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.graph.apply("reshape", [self], shape=tuple(shape))

    def square(self):
        return self.graph.apply("square", [self])

    def exp(self):
        return self.graph.apply("exp", [self])

    def log(self):
        return self.graph.apply("log", [self])

    def tanh(self):
        return self.graph.apply("tanh", [self])

    def relu(self):
        return self.graph.apply("relu", [self])

    def sigmoid(self):
        return self.graph.apply("sigmoid", [self])

    def softplus(self):
        return self.graph.apply("softplus", [self])


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    return arr


def _check_finite(kind: str, value: np.ndarray) -> None:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"non-finite value produced by op '{kind}'")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not conform") from exc


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# Forward rules return (value, saved). Backward rules map (grad, node, input
# values) to a tuple of input gradients (None where no gradient flows).


def _fwd(kind: str, xs: list[np.ndarray], attrs: dict):
    if kind in ("add", "sub", "mul", "div"):
        a, b = xs
        _broadcast_shape(kind, a, b)
        if kind == "add":
            return a + b, None
        if kind == "sub":
            return a - b, None
        if kind == "mul":
            return a * b, None
        if np.any(b == 0):
            raise DomainError("div: zero divisor")
        return a / b, None
    if kind == "matmul":
        a, b = xs
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
        try:
            return np.matmul(a, b), None
        except ValueError as exc:
            raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}") from exc
    (x,) = xs[:1]
    if kind == "tanh":
        y = np.tanh(x)
        return y, y
    if kind == "relu":
        return np.maximum(x, 0.0), None
    if kind == "sigmoid":
        y = _sigmoid(x)
        return y, y
    if kind == "exp":
        y = np.exp(x)
        return y, y
    if kind == "log":
        if np.any(x <= 0):
            raise DomainError("log: non-positive argument")
        return np.log(x), None
    if kind == "softplus":
        return _softplus(x), None
    if kind == "square":
        return x * x, None
    if kind == "neg":
        return -x, None
    if kind == "scale":
        return x * attrs["factor"], None
    if kind == "sum":
        return np.sum(x, axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)), None
    if kind == "mean":
        return np.mean(x, axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)), None
    if kind == "reshape":
        try:
            return x.reshape(attrs["shape"]), None
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot view {x.shape} as {attrs['shape']}") from exc
    if kind == "slice":
        try:
            return np.array(x[attrs["index"]], dtype=np.float64), None
        except IndexError as exc:
            raise ShapeError(f"slice: {exc}") from exc
    if kind == "concat":
        axis = attrs.get("axis", -1)
        try:
            return np.concatenate(xs, axis=axis), None
        except ValueError as exc:
            raise ShapeError(f"concat: {exc}") from exc
    if kind == "dropout-mask-mul":
        x, mask = xs
        if mask.shape != x.shape[-mask.ndim:] and mask.shape != x.shape:
            raise ShapeError(f"dropout mask shape {mask.shape} does not match {x.shape}")
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise DomainError("dropout mask must be binary")
        return x * mask, None
    if kind == "layer-norm":
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LAYER_NORM_EPS)
        y = xc * inv
        return y, (y, inv)
    raise AutodiffError(f"unknown op kind '{kind}'")


def _bwd(kind: str, g: np.ndarray, node: _Node, xs: list[np.ndarray]):
    attrs = node.attrs
    if kind == "add":
        a, b = xs
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    if kind == "sub":
        a, b = xs
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    if kind == "mul":
        a, b = xs
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)
    if kind == "div":
        a, b = xs
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)
    if kind == "matmul":
        a, b = xs
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    x = xs[0]
    if kind == "tanh":
        y = node.saved
        return (g * (1.0 - y * y),)
    if kind == "relu":
        return (g * (x > 0),)
    if kind == "sigmoid":
        y = node.saved
        return (g * y * (1.0 - y),)
    if kind == "exp":
        return (g * node.saved,)
    if kind == "log":
        return (g / x,)
    if kind == "softplus":
        return (g * _sigmoid(x),)
    if kind == "square":
        return (2.0 * g * x,)
    if kind == "neg":
        return (-g,)
    if kind == "scale":
        return (g * attrs["factor"],)
    if kind in ("sum", "mean"):
        axis = attrs.get("axis")
        if axis is not None and not attrs.get("keepdims", False):
            g = np.expand_dims(g, axis)
        out = np.broadcast_to(g, x.shape).copy()
        if kind == "mean":
            count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
            out /= count
        return (out,)
    if kind == "reshape":
        return (g.reshape(x.shape),)
    if kind == "slice":
        out = np.zeros_like(x)
        np.add.at(out, attrs["index"], g)
        return (out,)
    if kind == "concat":
        axis = attrs.get("axis", -1)
        sizes = [v.shape[axis] for v in xs]
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=axis))
    if kind == "dropout-mask-mul":
        _, mask = xs
        return (g * mask, None)
    if kind == "layer-norm":
        y, inv = node.saved
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)
    raise AutodiffError(f"unknown op kind '{kind}'")


class Graph:
    """Append-only differentiation tape."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def _push(self, node: _Node) -> Tensor:
        if self.consumed:
            raise GraphConsumedError("graph was already consumed by backward()")
        self.nodes.append(node)
        return Tensor(self, len(self.nodes) - 1)

    def leaf(self, value) -> Tensor:
        """A differentiable input."""
        arr = _as_array(value)
        _check_finite("leaf", arr)
        return self._push(_Node("leaf", (), arr, True))

    def constant(self, value) -> Tensor:
        arr = _as_array(value)
        _check_finite("constant", arr)
        return self._push(_Node("const", (), arr, False))

    def bind(self, params: Mapping[str, np.ndarray], trainable: bool = True) -> dict[str, Tensor]:
        """Register a name -> array mapping as leaves (or constants)."""
        make = self.leaf if trainable else self.constant
        return {name: make(value) for name, value in params.items()}

    def apply(self, kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
        if kind not in OP_KINDS:
            raise AutodiffError(f"unknown op kind '{kind}'")
        for t in inputs:
            if t.graph is not self:
                raise AutodiffError("input tensor belongs to another graph")
        xs = [self.nodes[t.node_id].value for t in inputs]
        with np.errstate(over="ignore", invalid="ignore"):
            value, saved = _fwd(kind, xs, attrs)
        value = np.asarray(value, dtype=np.float64)
        _check_finite(kind, value)
        req = any(self.nodes[t.node_id].requires_grad for t in inputs)
        if kind == "dropout-mask-mul":
            req = self.nodes[inputs[0].node_id].requires_grad
        node = _Node(kind, tuple(t.node_id for t in inputs), value, req, attrs, saved)
        return self._push(node)


class Gradients(Mapping):
    """Gradient map keyed by node id or Tensor; unreached nodes read as zero."""

    def __init__(self, graph: Graph, grads: dict[int, np.ndarray]):
        self._graph = graph
        self._grads = grads

    def _key(self, key) -> int:
        return key.node_id if isinstance(key, Tensor) else int(key)

    def __getitem__(self, key) -> np.ndarray:
        k = self._key(key)
        if k in self._grads:
            return self._grads[k]
        if not 0 <= k < len(self._graph.nodes):
            raise KeyError(key)
        return np.zeros_like(self._graph.nodes[k].value)

    def __iter__(self):
        return iter(range(len(self._graph.nodes)))

    def __len__(self) -> int:
        return len(self._graph.nodes)

    def collect(self, bound: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        """Gradients for a name -> Tensor binding produced by ``Graph.bind``."""
        return {name: self[t] for name, t in bound.items()}


def backward(graph: Graph, root: Tensor) -> Gradients:
    """Reverse accumulation of d(root)/d(node) for every node."""
    if graph.consumed:
        raise GraphConsumedError("graph was already consumed by backward()")
    if root.graph is not graph:
        raise AutodiffError("root does not belong to this graph")
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    graph.consumed = True
    grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
    nodes = graph.nodes
    for nid in range(root.node_id, -1, -1):
        g = grads.get(nid)
        node = nodes[nid]
        if g is None or not node.requires_grad or not node.inputs:
            continue
        xs = [nodes[i].value for i in node.inputs]
        in_grads = _bwd(node.kind, g, node, xs)
        for i, gi in zip(node.inputs, in_grads):
            if gi is None or not nodes[i].requires_grad:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = np.array(gi, dtype=np.float64)
    for nid, g in grads.items():
        _check_finite("backward", g)
    return Gradients(graph, grads)


# Functional aliases, mirroring the method forms.

def op_apply(graph: Graph, kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    return graph.apply(kind, inputs, **attrs)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    graph = tensors[0].graph
    return graph.apply("concat", list(tensors), axis=axis)


def layer_norm(x: Tensor) -> Tensor:
    return x.graph.apply("layer-norm", [x])


def dropout_mask_mul(x: Tensor, mask) -> Tensor:
    mask_t = mask if isinstance(mask, Tensor) else x.graph.constant(mask)
    return x.graph.apply("dropout-mask-mul", [x, mask_t])


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min built from relu: a - relu(a - b)."""
    return a - (a - b).relu()


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    return x - (x - hi).relu() + (lo - x).relu()


def log_sigmoid(x: Tensor) -> Tensor:
    """Numerically stable log(sigmoid(x)) = -softplus(-x)."""
    return -((-x).softplus())


# ---------------------------------------------------------------------------
# Finite-difference verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray
    tol: float

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_error={self.max_rel_error:.3e} (tol {self.tol:g}, n={self.analytic.size})"


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    f: Callable[[Graph, Tensor], Tensor],
    point,
    step: float = 1e-5,
    tol: float = 1e-5,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f(graph, x)`` must build a scalar from the leaf ``x`` inside ``graph``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = _as_array(point)

    g = Graph()
    x = g.leaf(x0)
    out = f(g, x)
    analytic = backward(g, out)[x].copy()

    def value(v: np.ndarray) -> float:
        gg = Graph()
        res = f(gg, gg.constant(v)).data
        val = float(res.reshape(-1)[0])
        if not math.isfinite(val):
            raise NonFiniteError("f returned a non-finite value at a probe point")
        return val

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        num_flat[i] = (value(xp.reshape(x0.shape)) - value(xm.reshape(x0.shape))) / (2.0 * step)
    err = relative_errors(analytic, numeric)
    max_err = float(err.max()) if err.size else 0.0
    return GradCheckReport(max_err, max_err <= tol, analytic, numeric, tol)


def flatten_params(params: Mapping[str, np.ndarray]) -> tuple[np.ndarray, list[tuple[str, tuple[int, ...]]]]:
    layout = [(name, np.shape(v)) for name, v in params.items()]
    if not layout:
        return np.zeros(0), layout
    return np.concatenate([np.ravel(params[n]) for n, _ in layout]).astype(np.float64), layout


def unflatten_params(vec: Tensor, layout: Iterable[tuple[str, tuple[int, ...]]]) -> dict[str, Tensor]:
    """Split a flat leaf back into named tensors inside the same graph."""
    out = {}
    offset = 0
    for name, shape in layout:
        size = int(np.prod(shape)) if shape else 1
        out[name] = vec[offset:offset + size].reshape(shape)
        offset += size
    return out


def param_grad_check(
    f: Callable[[Graph, dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """finite_diff_check over a named parameter set, flattened to one vector."""
    flat, layout = flatten_params(params)
    return finite_diff_check(lambda g, v: f(g, unflatten_params(v, layout)), flat, step, tol)
