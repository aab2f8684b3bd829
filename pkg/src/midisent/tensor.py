"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

Every operation returns a new :class:`Tensor`.  When at least one input
requires a gradient the output remembers its parents and a closure mapping the
upstream gradient to one gradient per parent; :func:`backward` walks that graph
in reverse topological order.  Graphs are rebuilt for every batch.

Only what the networks in this package need is implemented: elementwise
arithmetic with broadcasting, 2-D matmul, reductions, a few activations,
fused linear / batchnorm / log-softmax kernels and indexing.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateBatchError, DimensionError, NumericError, ValidationError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
# floor under sqrt / arccos derivatives; keeps backward finite at 0 and +-1
_DERIV_FLOOR = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (outputs never require grad)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite value produced by '{op}'")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward = _backward
        self.op = op

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data, op="detach")

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """A fresh leaf that owns a contiguous copy of ``data`` and requires grad."""
    return Tensor(np.array(data, dtype=np.float64, copy=True, order="C"), requires_grad=True, op="param")


def _make(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), back, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    """Square root; the derivative is evaluated with a floored argument so sqrt(0) stays differentiable."""
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / np.sqrt(np.maximum(a.data, _DERIV_FLOOR)),), "sqrt")


def relu(a) -> Tensor:
    """max(0, x); the subgradient at 0 is 0."""
    a = as_tensor(a)
    mask = a.data > 0.0
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    out = np.clip(a.data, lo_, hi_)
    mask = (a.data >= lo_) & (a.data <= hi_)
    return _make(out, (a,), lambda g: (g * mask,), "clamp")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def arccos(a) -> Tensor:
    a = as_tensor(a)
    x = np.clip(a.data, -1.0, 1.0)
    return _make(np.arccos(x), (a,),
                 lambda g: (-g / np.sqrt(np.maximum(1.0 - x * x, _DERIV_FLOOR)),), "arccos")


# ----------------------------------------------------------------------
# shape manipulation and reductions
# ----------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")

    def back(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _make(a.data @ b.data, (a, b), back, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def index(a, idx) -> Tensor:
    a = as_tensor(a)

    def back(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


# ----------------------------------------------------------------------
# fused network kernels
# ----------------------------------------------------------------------
def linear(x, W, b=None) -> Tensor:
    """y = x W^T + b for x [N, in], W [out, in], b [out]."""
    x, W = as_tensor(x), as_tensor(W)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    out = x.data @ W.data.T
    parents = [x, W]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[0],):
            raise DimensionError(f"linear: bias {b.shape} does not match weight {W.shape}")
        out = out + b.data
        parents.append(b)

    def back(g):
        grads = [g @ W.data if x.requires_grad else None,
                 g.T @ x.data if W.requires_grad else None]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, back, "linear")


def batchnorm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-feature batch normalisation of ``x`` [N, D].

    Train mode uses the biased batch variance and updates ``running_mean`` /
    ``running_var`` in place; eval mode reads them.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    if training:
        n = x.shape[0]
        if n < 2:
            raise DegenerateBatchError("batchnorm in train mode needs at least 2 rows")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def back(g):
        g_gamma = (g * xhat).sum(axis=0)
        g_beta = g.sum(axis=0)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if training:
                gx = inv_std * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
            else:
                gx = gxhat * inv_std
        return gx, g_gamma, g_beta

    return _make(out, (x, gamma, beta), back, "batchnorm")


def logsumexp(z, axis: int = -1, keepdims: bool = False) -> Tensor:
    z = as_tensor(z)
    m = z.data.max(axis=axis, keepdims=True)
    e = np.exp(z.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = e / s

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (z,), back, "logsumexp")


def log_softmax(z, axis: int = -1) -> Tensor:
    z = as_tensor(z)
    m = z.data.max(axis=axis, keepdims=True)
    shifted = z.data - m
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return _make(out, (z,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),), "log_softmax")


def softmax(z, axis: int = -1) -> Tensor:
    """Row-wise softmax, computed after subtracting the row max."""
    z = as_tensor(z)
    e = np.exp(z.data - z.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (z,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),), "softmax")


def l2_normalize(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    sq = (x * x).sum(axis=axis, keepdims=True)
    if np.any(sq.data == 0.0):
        raise ValidationError("cannot L2-normalise a zero-norm vector")
    return x / sqrt(sq)


# ----------------------------------------------------------------------
# graph traversal
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class GraphNode:
    op: str
    inputs: tuple[int, ...]
    tensor: Tensor


class ComputeGraph:
    """Topologically ordered records of the sub-graph feeding a scalar loss.

    Only nodes that require grad are recorded; every input id is smaller
    than the id of its consumer.
    """

    def __init__(self, loss: Tensor):
        self.loss = loss
        order = _topological_order(loss)
        pos = {id(t): i for i, t in enumerate(order)}
        self.nodes = [
            GraphNode(t.op, tuple(pos[id(p)] for p in t._parents if p.requires_grad), t)
            for t in order
        ]

    def leaves(self) -> list[Tensor]:
        return [n.tensor for n in self.nodes if n.tensor.is_leaf]


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, graph: ComputeGraph | None = None) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``.

    Leaf gradients are overwritten, never accumulated across calls.
    """
    if loss.data.ndim != 0:
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph if graph is not None and graph.loss is loss else ComputeGraph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(graph.nodes):
        t = node.tensor
        g = grads.pop(id(t), None)
        if t.is_leaf:
            t.grad = np.zeros(t.shape) if g is None else np.array(g, dtype=np.float64)
            continue
        if g is None:
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    for leaf in graph.leaves():
        if not np.isfinite(leaf.grad).all():
            raise NumericError(f"non-finite gradient for leaf '{leaf.op}'")


def finite_diff_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
                      eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the parameter list to a scalar tensor and must be deterministic.
    The relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f(params)
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            if not np.shares_memory(flat, p.data):
                raise ValidationError("finite_diff_check needs contiguous parameter storage")
            a_flat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(params).data)
                flat[i] = orig - eps
                fm = float(f(params).data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                denom = max(abs(a_flat[i]), abs(num), 1e-8)
                worst = max(worst, abs(a_flat[i] - num) / denom)
    return worst


def checksum(tensors: Iterable[Tensor]) -> str:
    """SHA-256 over the raw bytes of the given tensors, in order."""
    h = hashlib.sha256()
    for t in tensors:
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


LOG_2PI = math.log(2.0 * math.pi)
