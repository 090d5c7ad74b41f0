"""Dense float64 arrays with reverse-mode automatic differentiation.

Every operation computes its result eagerly and records a forward rule and a
local-gradient rule, so a graph can be re-evaluated after leaf payloads change
(``evaluate_graph``) and differentiated from any scalar root (``backward``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


def _as_array(x) -> np.ndarray:
    return np.array(x, dtype=np.float64) if not isinstance(x, np.ndarray) else x.astype(np.float64, copy=False)


class Value:
    """A node in a compute graph holding an ``np.float64`` payload."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_fwd", "_bwd", "op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Value, ...] = ()
        self._fwd: Callable | None = None
        self._bwd: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(op={self.op}, shape={self.shape})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def _raise_nonscalar(v: Value):
    raise ContractError(f"expected a scalar value, got shape {v.shape}")


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _node(op: str, parents: Sequence[Value], fwd: Callable, bwd: Callable) -> Value:
    out = Value.__new__(Value)
    out.data = np.asarray(fwd(*(p.data for p in parents)), dtype=np.float64)
    out.grad = None
    out.name = None
    out.op = op
    out._parents = tuple(parents)
    out._fwd = fwd
    out._bwd = bwd
    out.requires_grad = any(p.requires_grad for p in parents)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` over the axes numpy broadcast along."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Value, b: Value) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _node("add", (a, b), np.add,
                 lambda g, out, x, y: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _node("sub", (a, b), np.subtract,
                 lambda g, out, x, y: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def neg(a) -> Value:
    return _node("neg", (as_value(a),), np.negative, lambda g, out, x: (-g,))


def mul(a, b) -> Value:
    """Elementwise product with numpy broadcasting."""
    a, b = as_value(a), as_value(b)
    _check_broadcast("mul", a, b)
    sa, sb = a.shape, b.shape
    return _node("mul", (a, b), np.multiply,
                 lambda g, out, x, y: (_unbroadcast(g * y, sa), _unbroadcast(g * x, sb)))


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.data.ndim != 2 or b.data.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g, out, x, y):
        ga = None if not a.requires_grad else (np.outer(g, y) if y.ndim == 1 else g @ y.T)
        gb = None if not b.requires_grad else x.T @ g
        return ga, gb

    return _node("matmul", (a, b), np.matmul, bwd)


def relu(a) -> Value:
    return _node("relu", (as_value(a),), lambda x: np.maximum(x, 0.0),
                 lambda g, out, x: (g * (x > 0),))


def tanh(a) -> Value:
    return _node("tanh", (as_value(a),), np.tanh, lambda g, out, x: (g * (1.0 - out * out),))


def exp(a) -> Value:
    return _node("exp", (as_value(a),), np.exp, lambda g, out, x: (g * out,))


def log(a) -> Value:
    return _node("log", (as_value(a),), np.log, lambda g, out, x: (g / x,))


def square(a) -> Value:
    return _node("square", (as_value(a),), np.square, lambda g, out, x: (2.0 * g * x,))


def sum(a, axis: int | None = None) -> Value:  # noqa: A001 - mirrors numpy naming
    a = as_value(a)
    shape = a.shape

    def bwd(g, out, x):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node("sum", (a,), lambda x: np.sum(x, axis=axis), bwd)


def mean(a, axis: int | None = None) -> Value:
    a = as_value(a)
    shape = a.shape
    count = a.data.size if axis is None else shape[axis]

    def bwd(g, out, x):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _node("mean", (a,), lambda x: np.mean(x, axis=axis), bwd)


def broadcast_to(a, shape: Sequence[int]) -> Value:
    a = as_value(a)
    shape = tuple(shape)
    src = a.shape
    try:
        np.broadcast_shapes(src, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {src} to {shape}") from None
    return _node("broadcast", (a,), lambda x: np.broadcast_to(x, shape).copy(),
                 lambda g, out, x: (_unbroadcast(g, src),))


def concatenate(values: Sequence, axis: int = 0) -> Value:
    values = [as_value(v) for v in values]
    ref = values[0].shape
    for v in values[1:]:
        if len(v.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(v.shape, ref)) if i != axis % len(ref)
        ):
            raise DimensionError(f"concatenate: incompatible shapes {ref} and {v.shape}")
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]

    return _node("concatenate", values,
                 lambda *xs: np.concatenate(xs, axis=axis),
                 lambda g, out, *xs: tuple(np.split(g, splits, axis=axis)))


def gaussian_sample(mu, logvar, noise) -> Value:
    """Reparameterized draw ``mu + exp(logvar/2) * noise`` with caller-supplied noise."""
    mu, logvar, noise = as_value(mu), as_value(logvar), as_value(noise)
    if not (mu.shape == logvar.shape == noise.shape):
        raise DimensionError(
            f"gaussian_sample: shapes {mu.shape}, {logvar.shape} and {noise.shape} differ")

    def fwd(m, lv, e):
        return m + np.exp(0.5 * lv) * e

    def bwd(g, out, m, lv, e):
        s = np.exp(0.5 * lv)
        return g, 0.5 * g * s * e, g * s

    return _node("gaussian_sample", (mu, logvar, noise), fwd, bwd)


# ---------------------------------------------------------------------------
# graph traversal


def _topological(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def evaluate_graph(root: Value) -> np.ndarray:
    """Recompute every interior node from the current leaf payloads."""
    for node in _topological(root):
        if node._fwd is not None:
            node.data = np.asarray(node._fwd(*(p.data for p in node._parents)), dtype=np.float64)
    return root.data


def backward(root: Value) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every grad-requiring leaf."""
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._bwd(g, node.data, *(p.data for p in node._parents))
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-7
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Value], state: AdamState) -> None:
    """One bias-corrected Adam update; clears the gradients afterwards."""
    missing = [i for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise ContractError(f"adam_step: parameters {missing} have no gradient; call backward first")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params):
        raise ContractError("adam_step: optimizer state tracks a different parameter list")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    step = state.learning_rate / (1.0 - b1 ** t)
    bc2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        buf = np.empty_like(p.data)
        np.multiply(g, 1.0 - b1, out=buf)
        m *= b1
        m += buf
        np.multiply(g, g, out=buf)
        buf *= 1.0 - b2
        v *= b2
        v += buf
        np.multiply(v, 1.0 / bc2, out=buf)
        np.sqrt(buf, out=buf)
        buf += state.eps_hat
        np.divide(m, buf, out=buf)
        buf *= step
        p.data -= buf
        p.grad = None


class Adam:
    """Thin stateful wrapper so trainers can hold an optimizer per parameter group."""

    def __init__(self, params: Iterable[Value], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-7):
        self.params = list(params)
        self.state = AdamState(learning_rate=lr, beta1=beta1, beta2=beta2, eps_hat=eps)

    def step(self) -> None:
        adam_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: list[float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def gradient_check(builder: Callable[[], Value], params: Sequence[Value],
                   tolerance: float = 1e-4, h: float = 1e-5) -> GradCheckReport:
    """Compare ``backward`` against central finite differences.

    ``builder`` must construct the scalar loss deterministically from the
    current payloads of ``params``; it is called once and the resulting graph
    is re-evaluated for each perturbation. The error for a parameter is
    ``|g_auto - g_fd| / max(|g_auto|, |g_fd|, 1e-10)`` in the 2-norm.
    """
    for p in params:
        p.grad = None
    root = builder()
    backward(root)
    auto = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    errors = []
    for p, ga in zip(params, auto):
        fd = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(evaluate_graph(root))
            flat[i] = orig - h
            down = float(evaluate_graph(root))
            flat[i] = orig
            fd_flat[i] = (up - down) / (2.0 * h)
        evaluate_graph(root)
        scale = max(np.linalg.norm(ga), np.linalg.norm(fd), 1e-10)
        errors.append(float(np.linalg.norm(ga - fd) / scale))
        p.grad = None
    return GradCheckReport(max(errors) if errors else 0.0, errors, tolerance)
