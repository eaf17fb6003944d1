"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
parent gradients. ``backward`` walks the recorded graph in reverse
topological order. Broadcasting is explicit: only python scalars and 0-d
tensors combine with tensors of other shapes; bias-style additions go
through :func:`add_trailing`.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DomainError, ShapeError

# Guard added inside log/ratio terms of cross-entropy and KL.
LOG_EPS = 1e-12
# Rows with a smaller Euclidean norm cannot be normalized.
NORM_FLOOR = 1e-12
LAYER_NORM_EPS = 1e-5

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) and not isinstance(x, bool)


# -- elementwise ---------------------------------------------------------
def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,))
    b = as_tensor(b)
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 0:
        return _result(a.data + b.data, (a, b), lambda g: (g, np.sum(g)))
    if a.ndim == 0:
        return _result(a.data + b.data, (a, b), lambda g: (np.sum(g), g))
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -float(b))
    return add(a, neg(as_tensor(b)))


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    b = as_tensor(b)
    if a.shape == b.shape:
        return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    if b.ndim == 0:
        return _result(a.data * b.data, (a, b), lambda g: (g * b.data, np.sum(g * a.data)))
    if a.ndim == 0:
        return _result(a.data * b.data, (a, b), lambda g: (np.sum(g * b.data), g * a.data))
    raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")


def div(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        c = float(b)
        return _result(a.data / c, (a,), lambda g: (g / c,))
    b = as_tensor(b)
    if a.shape != b.shape and b.ndim != 0:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} differ")
    out = a.data / b.data

    def backward(g):
        gb = -g * out / b.data
        return g / b.data, (np.sum(gb) if b.ndim == 0 else gb)

    return _result(out, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), backward)


# -- linear algebra and shape ops ---------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports ``[m,k]@[k,p]``, a stack ``[...,m,k]`` times a shared ``[k,p]``
    matrix, and stacks with identical leading extents.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared and a.ndim > 2:
            k, p = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, p)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), backward)


def add_trailing(x: Tensor, b: Tensor) -> Tensor:
    """x + b where b's shape equals the trailing extents of x (bias, positions)."""
    k = b.ndim
    if x.shape[x.ndim - k:] != b.shape:
        raise ShapeError(f"add_trailing: {b.shape} is not a suffix of {x.shape}")
    lead = tuple(range(x.ndim - k))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead) if lead else g))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def getitem(x: Tensor, key) -> Tensor:
    out = x.data[key]
    if not isinstance(out, np.ndarray):
        out = np.array(out)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _result(np.array(out, copy=True), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    cuts = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=ax)))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis), 1.0 / float(n))


def weighted_sum(stack: Tensor, weights: Tensor, axis: int) -> Tensor:
    """Contract ``stack`` along ``axis`` against a weight vector."""
    stack, weights = as_tensor(stack), as_tensor(weights)
    ax = axis % stack.ndim
    if weights.shape != (stack.shape[ax],):
        raise ShapeError(f"weighted_sum: weights {weights.shape} vs axis extent {stack.shape[ax]}")
    moved = np.moveaxis(stack.data, ax, -1)
    out = moved @ weights.data

    def backward(g):
        gw = np.tensordot(g, moved, axes=(list(range(g.ndim)), list(range(g.ndim))))
        gs = np.moveaxis(g[..., None] * weights.data, -1, ax)
        return gs, gw

    return _result(out, (stack, weights), backward)


# -- normalization and probability ops ----------------------------------
def _softmax_last(z: Tensor) -> Tensor:
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (z,), backward)


def softmax_rows(x: Tensor, temperature=1.0) -> Tensor:
    """Softmax over the last axis of ``x / temperature``.

    ``temperature`` may be a positive float or a 0-d tensor (learnable).
    """
    x = as_tensor(x)
    if isinstance(temperature, Tensor):
        if temperature.ndim != 0:
            raise ShapeError(f"temperature must be 0-d, got {temperature.shape}")
        if not temperature.data > 0:
            raise DomainError(f"temperature must be positive, got {temperature.item()}")
        return _softmax_last(div(x, temperature))
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    z = x if temperature == 1.0 else div(x, float(temperature))
    return _softmax_last(z)


def l2_normalize_rows(x: Tensor) -> Tensor:
    x = as_tensor(x)
    norms = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    if np.any(norms < NORM_FLOOR):
        raise DegenerateInputError("l2_normalize_rows: row with norm below 1e-12")
    out = x.data / norms

    def backward(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norms,)

    return _result(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gamma.shape}/{beta.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), backward)


def _rows(shape: tuple[int, ...]) -> int:
    return int(np.prod(shape[:-1])) if len(shape) > 1 else 1


def cross_entropy(targets, probs: Tensor) -> Tensor:
    """Mean over rows of ``-sum_j y_j log(max(p_j, eps))``.

    The floor only guards exact zeros; ordinary probabilities are untouched, and
    below the floor the gradient passes straight through.
    """
    targets, probs = as_tensor(targets), as_tensor(probs)
    if targets.shape != probs.shape:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs probs {probs.shape}")
    n = _rows(probs.shape)
    floored = np.maximum(probs.data, LOG_EPS)
    logp = np.log(floored)
    out = np.array(-np.sum(targets.data * logp) / n)

    def backward(g):
        return -g * logp / n, -g * targets.data / floored / n

    return _result(out, (targets, probs), backward)


def kl_divergence(q, p: Tensor) -> Tensor:
    """Mean over rows of ``sum_j q_j log(q_j / p_j)``, both floored at eps (0 log 0 = 0)."""
    q, p = as_tensor(q), as_tensor(p)
    if q.shape != p.shape:
        raise ShapeError(f"kl_divergence: q {q.shape} vs p {p.shape}")
    n = _rows(p.shape)
    qf, pf = np.maximum(q.data, LOG_EPS), np.maximum(p.data, LOG_EPS)
    ratio = np.log(qf) - np.log(pf)
    out = np.array(np.sum(q.data * ratio) / n)

    def backward(g):
        gq = g * (ratio + q.data / qf) / n
        gp = -g * q.data / pf / n
        return gq, gp

    return _result(out, (q, p), backward)


# -- differentiation ----------------------------------------------------
def _topo_order(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every trainable leaf's ``grad``."""
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss was not produced by a recorded computation")
    pending: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(_topo_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the analytic and central-difference gradient.

    ``x`` must be a trainable leaf; its ``grad`` is reset before use.
    """
    if not h > 0:
        raise DomainError(f"step h must be positive, got {h}")
    return finite_diff_check_params(lambda: f(x), [x], h)


def finite_diff_check_params(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    coords: dict[int, np.ndarray] | None = None,
) -> float:
    """Gradient check of a closure against several leaves at once.

    ``coords`` optionally restricts the checked flat indices per parameter
    position; by default every coordinate is perturbed.
    """
    if not h > 0:
        raise DomainError(f"step h must be positive, got {h}")
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    if out.requires_grad:
        backward(out)
    worst = 0.0
    for pos, p in enumerate(params):
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size) if coords is None or pos not in coords else coords[pos]
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            a = analytic[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
