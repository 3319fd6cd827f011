"""
Dense-tensor computation graph with reverse-mode differentiation.

Every op builds its output eagerly and, when any input requires a gradient,
records a closure that maps the output gradient to input gradients. Graphs are
rebuilt per batch (define-by-run); ``Tensor.backward`` walks the recorded graph
once in reverse topological order.

Example::

    w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    loss = ad.sum(w * w)
    loss.backward()
    w.grad  # array([2., 4., 6.])
"""

from __future__ import annotations

import builtins
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

DEFAULT_DTYPE = np.float64
COSINE_EPS = 1e-12

OP_KINDS = (
    "matmul", "add", "sub", "mul", "neg", "concat", "slice", "gather",
    "relu", "leaky_relu", "sigmoid", "log", "log_sigmoid", "log_softmax",
    "mean", "sum", "l2_norm", "l2_normalize", "cosine_sim", "squared_diff",
)


class Tensor:
    """An n-d array of reals that can take part in a differentiable graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            floating = isinstance(data, np.ndarray) and data.dtype.kind == "f"
            dtype = data.dtype if floating else DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- array protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a constant scalar")
        return mul(self, 1.0 / float(other))

    def __getitem__(self, key):
        if not isinstance(key, slice):
            raise ContractError("only slices along the last axis are supported; use gather()")
        return slice_last(self, key.start or 0, key.stop if key.stop is not None else self.shape[-1])

    # -- differentiation ------------------------------------------------
    def backward(self) -> dict[int, np.ndarray]:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it.

        Returns a map from ``id(tensor)`` to its gradient for all requires_grad leaves.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        leaves: dict[int, np.ndarray] = {}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                    leaves[id(node)] = node.grad
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return leaves


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; deep graphs would overflow Python's recursion limit
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


@dataclass
class Graph:
    """Snapshot of the nodes reachable from a tensor, inputs before outputs."""

    nodes: list[tuple[str | None, tuple[int, ...], Tensor]] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> Graph:
        order = _topological_order(root)
        index = {id(t): i for i, t in enumerate(order)}
        nodes = [(t.op, tuple(index[id(p)] for p in t._parents if id(p) in index), t) for t in order]
        return cls(nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # plain numbers take the dtype of the tensor operand (keeps float32 graphs float32)
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(b, dtype=a.data.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(a, dtype=b.data.dtype), b
    return as_tensor(a), as_tensor(b)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out.op = op
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                   "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions of {a.shape} and {b.shape} differ")

    def backward(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def squared_diff(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"squared_diff: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    return _result(diff * diff, (a, b), lambda g: (2.0 * g * diff, -2.0 * g * diff), "squared_diff")


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise DimensionError("concat: no inputs")
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or t.shape[:-1] != ref[:-1]:
            raise DimensionError(f"concat: shapes {[t.shape for t in ts]} do not align on leading axes")
    if axis not in (-1, len(ref) - 1):
        raise DimensionError("concat: only the last axis is supported")
    edges = np.cumsum([0] + [t.shape[-1] for t in ts])

    def backward(g):
        return tuple(g[..., edges[i]:edges[i + 1]] for i in range(len(ts)))

    return _result(np.concatenate([t.data for t in ts], axis=-1), ts, backward, "concat")


def slice_last(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    n = a.shape[-1]
    if not 0 <= start <= stop <= n:
        raise DimensionError(f"slice: [{start}:{stop}] out of range for shape {a.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _result(a.data[..., start:stop], (a,), backward, "slice")


def split(a, sizes: Sequence[int]) -> list[Tensor]:
    """Inverse of ``concat`` along the last axis."""
    a = as_tensor(a)
    if builtins.sum(sizes) != a.shape[-1]:
        raise DimensionError(f"split: sizes {list(sizes)} do not sum to {a.shape[-1]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_last(a, start, start + s))
        start += s
    return out


def gather(a, index) -> Tensor:
    """Rows ``a[index]`` of a matrix; gradients scatter-add back."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    if a.ndim != 2:
        raise DimensionError(f"gather: expects a matrix, got shape {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError(f"gather: index out of range for {a.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), backward, "gather")


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # subgradient 0 at the kink
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype)
    return _result(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log: non-positive input (min {a.data.min():.3g})")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(a)) without overflow for large |a|."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _result(out, (a,), lambda g: (g * _sigmoid(-x),), "log_sigmoid")


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _result(out, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


# ---------------------------------------------------------------------------
# reductions and norms
# ---------------------------------------------------------------------------

def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise DimensionError(f"mean: empty reduction over shape {a.shape}")
    s = sum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / n)


def l2_norm(a) -> Tensor:
    """Euclidean norm along the last axis."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=-1))

    def backward(g):
        safe = np.where(norm > 0, norm, 1.0)
        return (np.expand_dims(g / safe, -1) * a.data,)

    return _result(norm, (a,), backward, "l2_norm")


def l2_normalize(a) -> Tensor:
    """a / (||a|| + 1e-12) along the last axis."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    denom = norm + COSINE_EPS
    u = a.data / denom

    def backward(g):
        # d(a/(n+eps)) = g/(n+eps) - a (a.g) / (n (n+eps)^2)
        dot = (g * a.data).sum(axis=-1, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        return (g / denom - a.data * dot / (safe * denom * denom),)

    return _result(u, (a,), backward, "l2_normalize")


def cosine_sim(a, b) -> Tensor:
    """Cosine similarity along the last axis; 1e-12 is added to each norm."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_sim: shapes {a.shape} and {b.shape} differ")
    na = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=-1, keepdims=True))
    da, db = na + COSINE_EPS, nb + COSINE_EPS
    dot = (a.data * b.data).sum(axis=-1, keepdims=True)
    cos = dot / (da * db)

    def backward(g):
        g = np.expand_dims(g, -1)
        sa = np.where(na > 0, na, 1.0)
        sb = np.where(nb > 0, nb, 1.0)
        ga = g * (b.data / (da * db) - cos * a.data / (sa * da))
        gb = g * (a.data / (da * db) - cos * b.data / (sb * db))
        return ga, gb

    return _result(cos[..., 0], (a, b), backward, "cosine_sim")


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "neg": neg, "matmul": matmul,
    "relu": relu, "leaky_relu": leaky_relu, "sigmoid": sigmoid, "log": log,
    "log_sigmoid": log_sigmoid, "log_softmax": log_softmax, "mean": mean, "sum": sum,
    "l2_norm": l2_norm, "l2_normalize": l2_normalize, "cosine_sim": cosine_sim,
    "squared_diff": squared_diff,
}


def apply(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by name, e.g. ``apply("cosine_sim", u, v)``."""
    if op_kind == "concat":
        return concat(inputs, **kwargs)
    fn = _ELEMENTWISE.get(op_kind)
    if fn is None:
        raise ContractError(f"unknown op kind {op_kind!r}")
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def fd_check(fn: Callable[..., Tensor], point: Tensor | Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative gap between backprop gradients and central differences.

    ``fn`` is called with ``point`` (a tensor or a list of tensors) and must
    return a scalar tensor. Each coordinate of each point is perturbed in place
    and restored afterwards.
    """
    if h <= 0:
        raise ContractError("fd_check: step h must be positive")
    points = [point] if isinstance(point, Tensor) else list(point)
    saved = [p.requires_grad for p in points]
    for p in points:
        p.requires_grad = True
        p.grad = None
    call = (lambda: fn(point))
    call().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in points]
    worst = 0.0
    for p, ga in zip(points, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = call().item()
            flat[i] = orig - h
            down = call().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            err = abs(gflat[i] - numeric) / (abs(gflat[i]) + 1e-8)
            worst = max(worst, err)
    for p, flag in zip(points, saved):
        p.requires_grad = flag
        p.grad = None
    return worst


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: OptimizerState, params: Sequence[Tensor], grads: Sequence[np.ndarray | None]) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(grads):
        raise ContractError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ContractError("adam_step: parameter list changed since the first step")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ContractError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self) -> None:
        adam_step(self.state, self.params, [p.grad for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Linear:
    """Affine map ``x @ W + b`` with He-uniform initialisation."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = np.sqrt(6.0 / n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def astype(self, dtype) -> None:
        for p in self.parameters():
            p.data = p.data.astype(dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class MLP:
    """Stack of affine layers with leaky ReLU between them (none after the last)."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, slope: float = 0.2):
        if len(sizes) < 2:
            raise ContractError("MLP needs at least input and output sizes")
        self.sizes = list(sizes)
        self.slope = slope
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = leaky_relu(x, self.slope)
        return x

    def astype(self, dtype) -> None:
        for layer in self.layers:
            layer.astype(dtype)

    def forward_array(self, x: np.ndarray) -> np.ndarray:
        """Same map as ``__call__`` on a plain array, without building a graph."""
        h = np.asarray(x, dtype=np.float64)
        for i, layer in enumerate(self.layers):
            h = h @ layer.weight.data + layer.bias.data
            if i < len(self.layers) - 1:
                h = np.where(h > 0, h, self.slope * h)
        return h

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def load_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ContractError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            if a.shape != p.shape:
                raise DimensionError(f"layer shape {a.shape} != expected {p.shape}")
            p.data = np.array(a, dtype=DEFAULT_DTYPE)
