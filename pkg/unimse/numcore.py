"""
Dense tensor core with reverse-mode differentiation
Float64 throughout; every op validates its operand shapes and its output values
"""

import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit
from scipy.special import log_softmax as _log_softmax
from scipy.special import softmax as _softmax

from unimse.errors import GraphError, NumericError, ShapeError
from unimse.models import GradCheckFailure, GradCheckReport

DTYPE = np.float64
MASK_VALUE = -1e9

_state = threading.local()


# ============= RECORDING STATE =============

def _active_graph() -> Optional["Graph"]:
    stack = getattr(_state, "graphs", None)
    return stack[-1] if stack else None


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Evaluate ops without recording them for backward"""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


# ============= TENSOR =============

class Tensor:
    """A value node: data, gradient accumulator and the op that produced it"""

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")
    # ndarray <op> Tensor dispatches to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self.op: Optional[str] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = self.name or self.op or "leaf"
        return f"Tensor({label}, shape={self.shape})"

    # Operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other: float):
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return swap_last(self)


def parameter(data, name: Optional[str] = None) -> Tensor:
    """Leaf tensor that receives gradients"""
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def _node(op: str, data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    """Create an op output, check it is finite and record it on the active graph"""
    data = np.asarray(data, dtype=DTYPE)
    if not np.all(np.isfinite(data)):
        raise NumericError(op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.op = op
    out.grad = None
    out.requires_grad = _grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
        graph = _active_graph()
        if graph is not None:
            graph.nodes.append(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape)


# ============= ELEMENTWISE =============

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node("add", a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node("mul", a.data * b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _node("neg", -a.data, (a,), lambda g: _accumulate(a, -g))


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return _node("sigmoid", s, (a,), lambda g: _accumulate(a, g * s * (1.0 - s)))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _node("tanh", t, (a,), lambda g: _accumulate(a, g * (1.0 - t * t)))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU"""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        _accumulate(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner))

    return _node("gelu", 0.5 * x * (1.0 + t), (a,), backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _node("exp", e, (a,), lambda g: _accumulate(a, g * e))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node("log", out, (a,), lambda g: _accumulate(a, g / a.data))


def dropout(a: Tensor, rate: float) -> Tensor:
    """Inverted dropout driven by the active graph's seed; identity when disabled"""
    graph = _active_graph()
    if rate <= 0.0 or graph is None or not graph.stochastic:
        return a
    keep = (graph.rng.random(a.shape) >= rate) / (1.0 - rate)
    return _node("dropout", a.data * keep, (a,), lambda g: _accumulate(a, g * keep))


# ============= LINEAR ALGEBRA =============

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward(g):
        _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _node("matmul", out, (a, b), backward)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """
    Temporal convolution over (batch, time, channels) with zero 'same' padding

    weight has shape (kernel, in_channels, out_channels); output keeps the time extent.
    """
    if x.ndim != 3 or weight.ndim != 3 or x.shape[-1] != weight.shape[1]:
        raise ShapeError("conv1d", x.shape, weight.shape)
    if bias.shape != (weight.shape[2],):
        raise ShapeError("conv1d", weight.shape, bias.shape)
    k = weight.shape[0]
    length = x.shape[1]
    left, right = k // 2, k - 1 - k // 2
    padded = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    out = np.zeros(x.shape[:2] + (weight.shape[2],), dtype=DTYPE) + bias.data
    for i in range(k):
        out += padded[:, i:i + length, :] @ weight.data[i]

    def backward(g):
        grad_padded = np.zeros_like(padded)
        grad_w = np.zeros_like(weight.data)
        for i in range(k):
            grad_padded[:, i:i + length, :] += g @ weight.data[i].T
            grad_w[i] = np.einsum("blc,bld->cd", padded[:, i:i + length, :], g)
        _accumulate(x, grad_padded[:, left:left + length, :])
        _accumulate(weight, grad_w)
        _accumulate(bias, g.sum(axis=(0, 1)))

    return _node("conv1d", out, (x, weight, bias), backward)


# ============= NORMALIZATION AND SOFTMAX =============

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    s = _softmax(a.data, axis=axis)

    def backward(g):
        _accumulate(a, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _node("softmax", s, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = _log_softmax(a.data, axis=axis)

    def backward(g):
        _accumulate(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _node("log_softmax", out, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift"""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        g_hat = g * gain.data
        grad_x = inv_std / d * (
            d * g_hat
            - g_hat.sum(axis=-1, keepdims=True)
            - xhat * (g_hat * xhat).sum(axis=-1, keepdims=True)
        )
        _accumulate(x, grad_x)
        _accumulate(gain, _unbroadcast(g * xhat, gain.shape))
        _accumulate(bias, _unbroadcast(g, bias.shape))

    return _node("layer_norm", xhat * gain.data + bias.data, (x, gain, bias), backward)


# ============= SHAPE AND INDEXING =============

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors])
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, cuts, axis=axis)):
            _accumulate(t, piece)

    return _node("concat", out, tensors, backward)


def broadcast_to(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape)
    return _node("broadcast_to", out, (a,), lambda g: _accumulate(a, _unbroadcast(g, a.shape)))


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape)
    return _node("reshape", out, (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: _accumulate(a, np.transpose(g, inverse)))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        _accumulate(a, grad)

    return _node("getitem", np.array(out, dtype=DTYPE), (a,), backward)


def take_last(a: Tensor, indices: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading position"""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ShapeError("take_last", a.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise ShapeError("take_last", a.shape, idx.shape, detail="Index out of range in take_last")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, idx[..., None], g[..., None], axis=-1)
        _accumulate(a, grad)

    return _node("take_last", out, (a,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; gradients scatter-add back into the table"""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding", table.shape, ids.shape,
                         detail=f"Embedding id out of range [0, {table.shape[0]})")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        _accumulate(table, grad)

    return _node("embedding", table.data[ids], (table,), backward)


# ============= REDUCTIONS =============

def sum(a: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None,
        keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _node("sum", out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def mean_pool(x: Tensor, mask: np.ndarray) -> Tensor:
    """Masked mean over the time axis of a (batch, time, dim) tensor"""
    mask = np.asarray(mask, dtype=DTYPE)
    if x.ndim != 3 or mask.shape != x.shape[:2]:
        raise ShapeError("mean_pool", x.shape, mask.shape)
    counts = mask.sum(axis=1, keepdims=True)
    if np.any(counts <= 0):
        raise ShapeError("mean_pool", x.shape, mask.shape,
                         detail="mean_pool over a row with no valid positions")
    weights = (mask / counts)[..., None]

    def backward(g):
        _accumulate(x, g[:, None, :] * weights)

    return _node("mean_pool", (x.data * weights).sum(axis=1), (x,), backward)


# ============= GRAPH =============

class Graph:
    """
    A recorded computation

    `build` maps named inputs to named output tensors. Evaluating it under the graph
    appends every differentiable node in creation order, which is a topological order.
    """

    def __init__(self, build: Optional[Callable[..., Mapping[str, Tensor]]] = None, seed: int = 0):
        self.build = build
        self.seed = seed
        self.stochastic = True
        self.nodes: List[Tensor] = []
        self.rng = np.random.default_rng(seed)
        self.outputs: Optional[Dict[str, Tensor]] = None
        self.evaluated = False

    @contextmanager
    def record(self):
        """Reset the node list and seed, and make this the active graph"""
        self.nodes = []
        self.rng = np.random.default_rng(self.seed)
        stack = getattr(_state, "graphs", None)
        if stack is None:
            stack = _state.graphs = []
        stack.append(self)
        try:
            yield self
        finally:
            stack.pop()
        self.evaluated = True

    def evaluate(self, **inputs) -> Dict[str, Tensor]:
        if self.build is None:
            raise GraphError("Graph has no build function to evaluate")
        with self.record():
            outputs = self.build(**inputs)
        if isinstance(outputs, Tensor):
            outputs = {"loss": outputs}
        self.outputs = dict(outputs)
        return self.outputs

    def backward(self, loss: Tensor) -> Dict[str, np.ndarray]:
        return backward(self, loss)


def evaluate(graph: Graph, inputs: Optional[Mapping[str, object]] = None) -> Dict[str, Tensor]:
    return graph.evaluate(**dict(inputs or {}))


def backward(graph: Graph, loss: Tensor) -> Dict[str, np.ndarray]:
    """
    Propagate d(loss)/d(node) through the graph in reverse creation order

    Leaf gradients accumulate into `.grad`; the returned map holds the gradient of
    every named leaf reached.
    """
    if loss.data.size != 1:
        raise GraphError("backward needs a scalar loss", {"shape": loss.shape})
    if not graph.evaluated:
        raise GraphError("backward called before the graph was evaluated")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any differentiable parameter")
    if loss.op is not None and not any(node is loss for node in reversed(graph.nodes)):
        raise GraphError("loss was not produced by the last evaluation of this graph")

    if loss.op is None:
        _accumulate(loss, np.ones_like(loss.data))
        return {loss.name or "loss": loss.grad}

    for node in graph.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    leaves: Dict[int, Tensor] = {}
    for node in reversed(graph.nodes):
        if node.grad is None:
            continue
        node._backward(node.grad)
        for parent in node._parents:
            if parent.op is None and parent.requires_grad:
                leaves[id(parent)] = parent
    return {(leaf.name or f"leaf_{i}"): leaf.grad for i, leaf in enumerate(leaves.values())}


# ============= GRADIENT CHECKING =============

def _named(params: Union[Mapping[str, Tensor], Iterable[Tensor]]) -> Dict[str, Tensor]:
    if isinstance(params, Mapping):
        return dict(params)
    return {(p.name or f"param_{i}"): p for i, p in enumerate(params)}


def grad_check(graph: Graph, params: Union[Mapping[str, Tensor], Iterable[Tensor]],
               eps: float = 1e-5, tol: float = 1e-4,
               inputs: Optional[Mapping[str, object]] = None,
               loss_key: str = "loss", max_coords: Optional[int] = None,
               seed: int = 0, floor: float = 1e-5) -> GradCheckReport:
    """
    Compare analytic gradients with central differences

    rel = |analytic - numeric| / max(|analytic|, |numeric|, floor). With `max_coords`,
    at most that many coordinates per parameter are drawn under `seed`.
    """
    if not 0.0 < eps <= 1e-2:
        raise GraphError("grad_check eps must lie in (0, 1e-2]", {"eps": eps})
    named = _named(params)
    inputs = dict(inputs or {})
    stochastic, graph.stochastic = graph.stochastic, False
    rng = np.random.default_rng(seed)

    def loss_value() -> float:
        with no_grad():
            return float(graph.evaluate(**inputs)[loss_key].data)

    try:
        for p in named.values():
            p.zero_grad()
        loss = graph.evaluate(**inputs)[loss_key]
        backward(graph, loss)
        analytic = {name: p.grad.copy() for name, p in named.items()}

        failures: List[GradCheckFailure] = []
        per_param: Dict[str, float] = {}
        checked = 0
        for name, p in named.items():
            size = p.data.size
            if max_coords is not None and size > max_coords:
                coords = np.sort(rng.choice(size, size=max_coords, replace=False))
            else:
                coords = np.arange(size)
            worst = 0.0
            if not p.data.flags.c_contiguous:
                p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            for coord in coords:
                original = flat[coord]
                flat[coord] = original + eps
                f_plus = loss_value()
                flat[coord] = original - eps
                f_minus = loss_value()
                flat[coord] = original
                numeric = (f_plus - f_minus) / (2.0 * eps)
                exact = float(analytic[name].reshape(-1)[coord])
                rel = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
                worst = max(worst, rel)
                checked += 1
                if rel > tol:
                    failures.append(GradCheckFailure(
                        param=name, index=int(coord), analytic=exact,
                        numeric=numeric, rel_error=rel,
                    ))
            per_param[name] = worst
    finally:
        graph.stochastic = stochastic

    return GradCheckReport(
        passed=not failures,
        max_rel_error=max(per_param.values(), default=0.0),
        tol=tol,
        eps=eps,
        checked=checked,
        per_param=per_param,
        failures=sorted(failures, key=lambda f: -f.rel_error),
    )
