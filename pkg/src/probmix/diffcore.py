"""Reverse-mode differentiation over dense float64 arrays.

A :class:`Tensor` records the primitive that produced it together with a
closure that pushes the output gradient back to its parents.  Calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order.  The primitive set is deliberately closed: affine maps, tanh/relu,
softplus, log-softmax, log, exp, sqrt, square, sum/mean, log-sum-exp, plus
the shape plumbing (row gather, reshape) needed to batch pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "ParamSet",
    "OptimizerState",
    "as_tensor",
    "tanh",
    "relu",
    "softplus",
    "exp",
    "log",
    "sqrt",
    "square",
    "log_softmax",
    "logsumexp",
    "logaddexp",
    "stop_gradient",
    "glorot_uniform",
    "evaluate_with_gradients",
    "adam_step",
    "gd_step",
    "finite_difference_check",
]


class NonFiniteError(FloatingPointError):
    """Raised when a loss or update is not finite."""

    def __init__(self, message: str, primitive: str | None = None):
        super().__init__(message)
        self.primitive = primitive


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array node in a differentiable expression."""

    __slots__ = ("value", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_ufunc__ = None

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _make(value, parents: tuple, op: str, backward: Callable) -> "Tensor":
        live = tuple(p for p in parents if p.requires_grad)
        if not live:
            return Tensor(value, op=op)
        return Tensor(value, requires_grad=True, op=op, parents=parents, backward=backward)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __float__(self) -> float:
        return float(self.value)

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(a.value + b.value, (a, b), "add", backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.value, (self,), "neg", lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._make(a.value - b.value, (a, b), "sub", backward)

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

        return Tensor._make(a.value * b.value, (a, b), "mul", backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        out = a.value / b.value

        def backward(g):
            return (_unbroadcast(g / b.value, a.shape),
                    _unbroadcast(-g * out / b.value, b.shape))

        return Tensor._make(out, (a, b), "div", backward)

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

        def backward(g):
            return g @ b.value.T, a.value.T @ g

        return Tensor._make(a.value @ b.value, (a, b), "matmul", backward)

    # -- reductions and shape -------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.value.sum(axis=axis, keepdims=keepdims), (self,), "sum", backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        old = self.shape
        return Tensor._make(self.value.reshape(shape), (self,), "reshape",
                            lambda g: (g.reshape(old),))

    def take(self, index) -> "Tensor":
        """Gather rows (first axis) by integer index; repeated indices accumulate."""
        index = np.asarray(index, dtype=np.intp)
        shape = self.shape

        def backward(g):
            out = np.zeros(shape)
            np.add.at(out, index, g)
            return (out,)

        return Tensor._make(self.value[index], (self,), "take", backward)

    # -- backward pass --------------------------------------------------------
    def backward(self) -> None:
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar output")
        order = _topological(self)
        grads = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise primitives ---------------------------------------------------

def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.value)
    return Tensor._make(out, (x,), "tanh", lambda g: (g * (1.0 - out * out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return Tensor._make(np.where(mask, x.value, 0.0), (x,), "relu", lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._make(np.logaddexp(0.0, x.value), (x,), "softplus",
                        lambda g: (g * _sigmoid(x.value),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.value)
    return Tensor._make(out, (x,), "exp", lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.value)
    return Tensor._make(out, (x,), "log", lambda g: (g / x.value,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.value)
    return Tensor._make(out, (x,), "sqrt", lambda g: (g * 0.5 / out,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._make(x.value * x.value, (x,), "square", lambda g: (2.0 * g * x.value,))


def _lse(v: np.ndarray, axis: int, keepdims: bool) -> np.ndarray:
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out_k = _lse(x.value, axis, True)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            w = np.exp(x.value - out_k)
        return (g * np.nan_to_num(w),)

    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    return Tensor._make(out, (x,), "logsumexp", backward)


def logaddexp(a, b) -> Tensor:
    """Binary log-sum-exp, ``log(exp(a) + exp(b))``; tolerates ``-inf`` operands."""
    a, b = as_tensor(a), as_tensor(b)
    out = np.logaddexp(a.value, b.value)

    def backward(g):
        with np.errstate(invalid="ignore"):
            wa = np.nan_to_num(np.exp(a.value - out))
            wb = np.nan_to_num(np.exp(b.value - out))
        return _unbroadcast(g * wa, a.shape), _unbroadcast(g * wb, b.shape)

    return Tensor._make(out, (a, b), "logaddexp", backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    out = x.value - _lse(x.value, axis, True)

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), "log_softmax", backward)


def stop_gradient(x) -> Tensor:
    """Identity on values, blocks gradient flow."""
    return Tensor(as_tensor(x).value, op="stop_gradient")


# -- parameters and optimizers ------------------------------------------------

ParamSet = dict  # name -> leaf Tensor with requires_grad=True


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _first_nonfinite(root: Tensor) -> str | None:
    for node in _topological(root):
        if not np.all(np.isfinite(node.value)):
            return node.op
    return None


def evaluate_with_gradients(params: Mapping[str, Tensor], loss_fn: Callable, inputs=None):
    """Build ``loss_fn(params, inputs)``, back-propagate, return ``(loss, grads)``.

    ``grads`` maps every parameter name to an array shaped like the parameter;
    parameters the loss does not touch get zeros.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn(params, inputs)
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.value):
        op = _first_nonfinite(loss)
        raise NonFiniteError(f"non-finite loss; first produced by primitive {op!r}", op)
    if loss.requires_grad:
        loss.backward()
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.value)) for k, p in params.items()}
    return float(loss.value), grads


@dataclass
class OptimizerState:
    algorithm: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ("adam", "full-batch-gd"):
            raise ValueError(f"unknown optimizer {self.algorithm!r}")


def _check_grads(grads: Mapping[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: OptimizerState) -> None:
    """In-place Adam update with bias correction."""
    if state.algorithm != "adam":
        raise ValueError("adam_step called with non-adam state")
    _check_grads(grads)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.value = p.value - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def gd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
            state: OptimizerState) -> None:
    if state.algorithm != "full-batch-gd":
        raise ValueError("gd_step called with non-gd state")
    _check_grads(grads)
    state.step += 1
    for name, p in params.items():
        p.value = p.value - state.lr * grads[name]


def finite_difference_check(params: Mapping[str, Tensor], loss_fn: Callable, inputs=None,
                            h: float = 1e-5) -> float:
    """Max over parameters of ``|analytic - central| / (|analytic| + 1e-12)``.

    Norms are taken over each parameter array (max-abs), so entries whose
    gradient is zero do not blow up the ratio through round-off.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("finite-difference step must lie in [1e-7, 1e-3]")
    _, grads = evaluate_with_gradients(params, loss_fn, inputs)
    worst = 0.0
    for name, p in params.items():
        numeric = np.zeros_like(p.value)
        p.value = np.ascontiguousarray(p.value)
        flat = p.value.reshape(-1)  # a view, so edits reach the parameter
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up = float(loss_fn(params, inputs).value)
            flat[idx] = orig - h
            down = float(loss_fn(params, inputs).value)
            flat[idx] = orig
            numeric.reshape(-1)[idx] = (up - down) / (2.0 * h)
        err = np.max(np.abs(grads[name] - numeric)) / (np.max(np.abs(grads[name])) + 1e-12)
        worst = max(worst, float(err))
    return worst
