"""Dense float64 tensors with reverse-mode differentiation and an Adam optimizer.

Every primitive returns a new :class:`Tensor` that remembers its operands and a
closure computing the operand gradients.  :func:`backward` walks the recorded
graph in a fixed topological order, so repeated runs accumulate gradients in
exactly the same order and produce bit-identical results.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

MASK_VALUE = -1e9
"""Finite stand-in for -inf inside softmax; masked cells are zeroed afterwards."""

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


class EmptyLossError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (GPT-2 flavour)."""
    x2 = x.data * x.data
    t = np.tanh(_GELU_C * (x.data + 0.044715 * x2 * x.data))
    out = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _result(out, (x,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _result(
        np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, x.shape),)
    )


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _result(data, tensors, backward)


def take_rows(table: Tensor, index) -> Tensor:
    """Gather rows of a 2-D table; ``index`` may have any integer shape."""
    index = np.asarray(index, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D table, got {table.shape}")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")

    def backward(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, index.reshape(-1), g.reshape(-1, table.shape[1]))
        return (acc,)

    return _result(table.data[index], (table,), backward)


# ---------------------------------------------------------------------------
# reductions and linear algebra


def sum_all(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return _result(
        np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),)
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                # weight matrix: fold the batch axes into one GEMM
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# normalisation and losses


def softmax_rows_with_bias(logits, bias=None) -> Tensor:
    """Softmax over the last axis of ``logits + bias``.

    ``bias`` is a constant (no gradient flows into it).  Entries equal to -inf
    are blocked: they get exactly zero probability.  A row with every entry
    blocked raises :class:`DegenerateRowError`.
    """
    logits = as_tensor(logits)
    if bias is None:
        z = logits.data
        blocked = None
    else:
        b = bias.data if isinstance(bias, Tensor) else np.asarray(bias, dtype=DTYPE)
        try:
            np.broadcast_shapes(b.shape, logits.shape)
        except ValueError:
            raise ShapeError(f"bias shape {b.shape} incompatible with logits {logits.shape}")
        blocked = np.isneginf(b)
        if blocked.any():
            if np.broadcast_to(blocked, np.broadcast_shapes(b.shape, logits.shape)).all(axis=-1).any():
                raise DegenerateRowError("softmax row has every entry masked")
            z = logits.data + np.where(blocked, MASK_VALUE, b)
        else:
            blocked = None
            z = logits.data + b
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    if blocked is not None:
        p = np.where(blocked, 0.0, p)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (logits,), backward)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm over an empty dimension")
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layer_norm parameters {gain.shape}/{shift.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + shift.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, shift), backward)


def cross_entropy_next_token(logits: Tensor, targets, ignore_mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``logits`` [..., V].

    Positions where ``ignore_mask`` is true are excluded from both the sum and
    the count.
    """
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != flat.shape[0]:
        raise ShapeError(f"{targets.shape[0]} targets for {flat.shape[0]} logit rows")
    keep = np.ones(flat.shape[0], dtype=bool)
    if ignore_mask is not None:
        keep = ~np.asarray(ignore_mask, dtype=bool).reshape(-1)
    count = int(keep.sum())
    if count == 0:
        raise EmptyLossError("every position is ignored")
    safe_targets = np.where(keep, targets, 0)
    if (safe_targets < 0).any() or (safe_targets >= V).any():
        raise IndexError(f"target id out of range for vocabulary of {V}")
    m = flat.max(axis=1, keepdims=True)
    shifted = flat - m
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(flat.shape[0])
    nll = lse - shifted[rows, safe_targets]
    loss = float(nll[keep].sum()) / count

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, safe_targets] -= 1.0
        p *= (keep / count)[:, None] * g
        return (p.reshape(logits.shape),)

    return _result(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# differentiation


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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf tensor with ``requires_grad`` reachable from ``loss``."""
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(x))
        flat[i] = orig - h
        down = float(f(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    """Adam with bias correction.  ``step`` consumes and then clears gradients."""

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise GradientError(f"parameter {p.name or i} has no gradient")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
