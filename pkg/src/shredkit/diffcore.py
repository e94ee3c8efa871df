"""Dense float64 tensors with reverse-mode differentiation and an AdamW optimizer.

The graph is define-by-run: every primitive applied to a tensor that requires
gradients records a node, and ``backward`` releases the graph after one
reverse sweep. All math is numpy under the hood; tensors of any rank are
supported, with limited broadcasting (standard numpy rules) on elementwise
primitives and stacked batching on matmul.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np


class ShapeMismatchError(ValueError):
    """Raised when primitive inputs do not conform."""


class GraphError(RuntimeError):
    """Raised on invalid backward calls (non-scalar loss, empty graph)."""


class MissingGradientError(RuntimeError):
    """Raised when the optimizer steps a parameter that has no gradient."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation / finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense float64 array plus optional gradient buffer and graph metadata."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Operator sugar; everything routes through apply_primitive.
    def __add__(self, other):
        return apply_primitive("add", (self, _as_tensor(other)))

    def __radd__(self, other):
        return apply_primitive("add", (_as_tensor(other), self))

    def __sub__(self, other):
        return apply_primitive("sub", (self, _as_tensor(other)))

    def __rsub__(self, other):
        return apply_primitive("sub", (_as_tensor(other), self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return apply_primitive("hadamard", (self, _as_tensor(other)))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return apply_primitive("matmul", (self, _as_tensor(other)))

    def sum(self):
        return apply_primitive("sum", (self,))

    def mean(self):
        return apply_primitive("mean", (self,))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _node(op: str, out: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    t = Tensor(out)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.op = op
        t.parents = parents
        t._backward = backward
    return t


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def _add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node("add", out, (a, b), backward)


def _sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node("sub", out, (a, b), backward)


def _hadamard(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("hadamard", a, b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node("hadamard", out, (a, b), backward)


def _matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatchError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatchError(f"matmul: batch dims do not broadcast, {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node("matmul", out, (a, b), backward)


def _sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _node("sigmoid", out, (a,), backward)


def _tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _node("tanh", out, (a,), backward)


def _relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def backward(g):
        return (g * (a.data > 0.0),)

    return _node("relu", out, (a,), backward)


def _sin(a: Tensor) -> Tensor:
    out = np.sin(a.data)

    def backward(g):
        return (g * np.cos(a.data),)

    return _node("sin", out, (a,), backward)


def _cos(a: Tensor) -> Tensor:
    out = np.cos(a.data)

    def backward(g):
        return (g * -np.sin(a.data),)

    return _node("cos", out, (a,), backward)


def _sum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())

    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node("sum", out, (a,), backward)


def _mean(a: Tensor) -> Tensor:
    out = np.asarray(a.data.mean())
    n = a.data.size

    def backward(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _node("mean", out, (a,), backward)


def _mse(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mse", a, b)
    diff = a.data - b.data
    out = np.asarray(np.mean(diff * diff))
    n = diff.size

    def backward(g):
        d = (2.0 / n) * diff * g
        return _unbroadcast(d, a.shape), _unbroadcast(-d, b.shape)

    return _node("mse", out, (a, b), backward)


PRIMITIVES = {
    "add": _add,
    "sub": _sub,
    "hadamard": _hadamard,
    "matmul": _matmul,
    "sigmoid": _sigmoid,
    "tanh": _tanh,
    "relu": _relu,
    "sin": _sin,
    "cos": _cos,
    "sum": _sum,
    "mean": _mean,
    "mse": _mse,
}


def apply_primitive(kind: str, inputs: tuple) -> Tensor:
    """Apply a named primitive, recording a graph node when gradients are needed."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ShapeMismatchError(f"unknown primitive {kind!r}") from None
    return fn(*inputs)


# Parameterized primitives (carry static arguments, so not in the plain table).

def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def backward(g):
        return (g * c,)

    return _node("scale", out, (a,), backward)


def power(a: Tensor, n: int) -> Tensor:
    if n < 1:
        raise ShapeMismatchError("power: exponent must be a positive integer")
    out = a.data ** n

    def backward(g):
        return (g * n * a.data ** (n - 1),)

    return _node("power", out, (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeMismatchError("concat: empty input list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatchError(
            f"concat: shapes {[t.shape for t in tensors]} on axis {axis}"
        ) from None
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        splits = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(s for s in splits)

    return _node("concat", out, tensors, backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    nd = a.data.ndim
    axis = axis % nd
    if not (0 <= start < stop <= a.data.shape[axis]):
        raise ShapeMismatchError(
            f"slice: [{start}:{stop}] out of range for axis {axis} of shape {a.shape}"
        )
    idx = tuple(slice(start, stop) if i == axis else slice(None) for i in range(nd))
    out = a.data[idx]

    def backward(g):
        full = np.zeros(a.data.shape)
        full[idx] = g
        return (full,)

    return _node("slice", out, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.data.shape),)

    return _node("reshape", out, (a,), backward)


# Convenience wrappers matching the primitive table.
def sigmoid(a: Tensor) -> Tensor:
    return apply_primitive("sigmoid", (a,))


def tanh(a: Tensor) -> Tensor:
    return apply_primitive("tanh", (a,))


def relu(a: Tensor) -> Tensor:
    return apply_primitive("relu", (a,))


def sin(a: Tensor) -> Tensor:
    return apply_primitive("sin", (a,))


def cos(a: Tensor) -> Tensor:
    return apply_primitive("cos", (a,))


def mse(a: Tensor, b) -> Tensor:
    return apply_primitive("mse", (a, _as_tensor(b)))


# ---------------------------------------------------------------------------
# Backward sweep
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable requires-grad leaf, then free the graph.

    Gradients accumulate into existing ``grad`` buffers (sum semantics), so two
    sweeps from separate losses add up.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward is None and not loss.requires_grad:
        raise GraphError("backward called on a tensor with no recorded operations")

    # Iterative topological order over recorded parents.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node.parents, parent_grads):
            if not p.requires_grad:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
        # Release the tape node so the graph is single-use.
        node._backward = None
        node.parents = ()


def finite_diff_check(f, params, h: float = 1e-6) -> float:
    """Max relative error between analytic gradients of ``f()`` and central differences.

    ``f`` is a zero-argument callable evaluating the scalar loss from the
    current parameter values. Non-finite intermediates surface as ``inf``.
    """
    if h <= 0:
        raise ValueError("finite_diff_check requires h > 0")
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                if not (math.isfinite(num) and math.isfinite(gflat[i])):
                    return float("inf")
                err = abs(gflat[i] - num) / max(1.0, abs(num))
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """Adaptive moments with decoupled weight decay over a named parameter dict.

    Parameters listed in ``no_decay`` skip the decay term (used for dynamics
    coefficients, whose sparsity is handled by thresholding instead).
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-2, grad_clip: float | None = None,
                 no_decay: set[str] | None = None):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.no_decay = set(no_decay or ())
        self.step_count = 0
        self.m = {name: np.zeros(p.shape) for name, p in self.params.items()}
        self.v = {name: np.zeros(p.shape) for name, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradientError(f"parameter {name!r} has no gradient")
        if self.grad_clip is not None:
            total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in self.params.values()))
            if total > self.grad_clip:
                factor = self.grad_clip / total
                for p in self.params.values():
                    p.grad *= factor
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and name not in self.no_decay:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.params:
            self.m[name] = np.asarray(arrays[f"adam.m.{name}"], dtype=np.float64)
            self.v[name] = np.asarray(arrays[f"adam.v.{name}"], dtype=np.float64)
        self.step_count = int(step_count)
