"""Reverse-mode automatic differentiation over numpy arrays.

Every operation returns a graph node (`Tensor`) that remembers its parents
and a closure implementing the local backward rule; `backward` walks the
graph once in reverse topological order.  float32 is the storage mode used
for training; gradient checks run in float64 because central-difference
tolerances are unreachable in 32-bit arithmetic.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Large negative logit: exp() underflows to exactly 0.0 in both storage
# modes, which is what makes masked attention weights (and their gradients)
# exactly zero rather than merely small.
MASK_FILL = -1e9


class ShapeMismatchError(ValueError):
    """Operand shapes incompatible for an op."""


class DomainError(ValueError):
    """Operand outside an op's mathematical domain (log / divide by zero)."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A node of the computation graph: value, gradient, parents."""

    __slots__ = ("data", "grad", "parents", "_backward_rule", "requires_grad", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.parents: tuple[Tensor, ...] = ()
        self._backward_rule: Callable[[np.ndarray], None] | None = None
        self.requires_grad = requires_grad
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; non-Tensor operands are lifted to constants
    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return subtract(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return subtract(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return multiply(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return multiply(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return divide(self, _lift(other, self.dtype))

    def __rtruediv__(self, other):
        return divide(_lift(other, self.dtype), self)

    def __neg__(self):
        return negate(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_view(self, key)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], rule) -> Tensor:
    """Wrap an op result; record parents only while grad mode is on."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.parents = tuple(parents)
        out._backward_rule = rule
        out.requires_grad = True
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(
            f"{op}: operand shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting introduced."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / binary ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def rule(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), rule)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("subtract", a, b)

    def rule(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), rule)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("multiply", a, b)

    def rule(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), rule)


def divide(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("divide", a, b)
    if np.any(b.data == 0):
        raise DomainError("divide: divisor contains zero")

    def rule(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(a.data / b.data, (a, b), rule)


def negate(a: Tensor) -> Tensor:
    def rule(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), rule)


def exponential(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def rule(g):
        _accumulate(a, g * out_data)

    return _node(out_data, (a,), rule)


def logarithm(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: operand contains nonpositive values")

    def rule(g):
        _accumulate(a, g / a.data)

    return _node(np.log(a.data), (a,), rule)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    if exponent != int(exponent) and np.any(a.data < 0):
        raise DomainError(f"power: negative base with non-integer exponent {exponent}")

    def rule(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1.0))

    return _node(a.data ** exponent, (a,), rule)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation (smooth activation)."""
    c = np.asarray(np.sqrt(2.0 / np.pi), dtype=a.dtype)
    k = np.asarray(0.044715, dtype=a.dtype)
    x = a.data
    inner = c * (x + k * x ** 3)
    t = np.tanh(inner)

    def rule(g):
        dinner = c * (1.0 + 3.0 * k * x ** 2)
        _accumulate(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    return _node(0.5 * x * (1.0 + t), (a,), rule)


# ---------------------------------------------------------------------------
# matmul and structural ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: operand shapes {a.shape} and {b.shape} do not align")

    def rule(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))

    return _node(a.data @ b.data, (a, b), rule)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape

    def rule(g):
        _accumulate(a, g.reshape(orig))

    return _node(a.data.reshape(shape), (a,), rule)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def rule(g):
        _accumulate(a, g.transpose(inverse))

    return _node(a.data.transpose(axes), (a,), rule)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != axis % len(base) and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeMismatchError(
                f"concatenate: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}"
            )
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def rule(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            if t.requires_grad:
                _accumulate(t, piece)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, rule)


def slice_view(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) slicing; gradient scatters back into the source."""

    def rule(g):
        acc = np.zeros_like(a.data)
        acc[key] += g
        _accumulate(a, acc)

    return _node(a.data[key].copy(), (a,), rule)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: output shape ids.shape + (row_width,)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatchError(
            f"embedding: ids out of range for table with {table.shape[0]} rows"
        )

    def rule(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        _accumulate(table, acc)

    return _node(table.data[ids], (table,), rule)


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading position."""
    idx = np.asarray(idx)
    if idx.shape != a.shape[:-1]:
        raise ShapeMismatchError(
            f"gather_last: index shape {idx.shape} does not match leading shape {a.shape[:-1]}"
        )
    expanded = idx[..., None]

    def rule(g):
        acc = np.zeros_like(a.data)
        np.put_along_axis(acc, expanded, g[..., None], axis=-1)
        _accumulate(a, acc)

    return _node(np.take_along_axis(a.data, expanded, axis=-1)[..., 0], (a,), rule)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis: int | None) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def sum_along(a: Tensor, axis: int | None = None) -> Tensor:
    def rule(g):
        _accumulate(a, _expand_reduced(g, a.shape, axis).astype(a.dtype, copy=True))

    return _node(a.data.sum(axis=axis), (a,), rule)


def mean_along(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]

    def rule(g):
        _accumulate(a, _expand_reduced(g, a.shape, axis).astype(a.dtype) / n)

    return _node(a.data.mean(axis=axis), (a,), rule)


def variance_along(a: Tensor, axis: int | None = None) -> Tensor:
    """Population (1/n) variance; the internal mean is differentiated too."""
    n = a.data.size if axis is None else a.shape[axis]
    mu = a.data.mean(axis=axis, keepdims=True)
    centered = a.data - mu

    def rule(g):
        _accumulate(a, _expand_reduced(g, a.shape, axis) * 2.0 * centered / n)

    return _node((centered * centered).mean(axis=axis), (a,), rule)


def max_along(a: Tensor, axis: int) -> Tensor:
    """Max reduction; on ties the gradient goes to the first maximal index."""
    idx = np.argmax(a.data, axis=axis)
    expanded = np.expand_dims(idx, axis)

    def rule(g):
        acc = np.zeros_like(a.data)
        np.put_along_axis(acc, expanded, np.expand_dims(g, axis), axis=axis)
        _accumulate(a, acc)

    return _node(np.take_along_axis(a.data, expanded, axis=axis).squeeze(axis), (a,), rule)


# ---------------------------------------------------------------------------
# normalization / attention building blocks
# ---------------------------------------------------------------------------

def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis (max-subtracted for stability)."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        _accumulate(a, p * (g - (p * g).sum(axis=-1, keepdims=True)))

    return _node(p, (a,), rule)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax along the last axis; never computed as log(softmax(x))."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def rule(g):
        _accumulate(a, g - np.exp(ls) * g.sum(axis=-1, keepdims=True))

    return _node(ls, (a,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatchError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match feature size ({d},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def rule(g):
        if bias.requires_grad:
            _accumulate(bias, _unbroadcast(g, bias.shape))
        if gain.requires_grad:
            _accumulate(gain, _unbroadcast(g * xhat, gain.shape))
        if x.requires_grad:
            dxhat = g * gain.data
            _accumulate(
                x,
                inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                       - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)),
            )

    return _node(xhat * gain.data + bias.data, (x, gain, bias), rule)


def causal_mask(scores: Tensor) -> Tensor:
    """Fill entries above the diagonal of the trailing (T, T) block with a
    logit so low that softmax assigns them exactly zero weight."""
    t = scores.shape[-1]
    if scores.data.ndim < 2 or scores.shape[-2] != t:
        raise ShapeMismatchError(f"causal_mask: trailing dims of {scores.shape} are not square")
    fill = np.triu(np.full((t, t), MASK_FILL, dtype=scores.dtype), k=1)

    def rule(g):
        _accumulate(scores, g)

    return _node(scores.data + fill, (scores,), rule)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with an explicit generator so runs are replayable.

    Train-mode only by construction: evaluation paths simply do not call it.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / np.asarray(1.0 - rate, dtype=a.dtype)

    def rule(g):
        _accumulate(a, g * keep)

    return _node(a.data * keep, (a,), rule)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(root: Tensor, accumulate: bool = False) -> None:
    """Backpropagate from a scalar root, filling `.grad` on every node that
    requires a gradient.

    A second call on the same root raises unless `accumulate=True`.  Under
    the accumulate policy leaf gradients add up across passes while
    intermediate-node gradients always reflect the most recent pass.
    """
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar-shaped, got shape {root.shape}")
    if root._backward_done and not accumulate:
        raise RuntimeError("backward already ran for this root; pass accumulate=True to add")
    root._backward_done = True

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
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    for node in order:
        if node.parents:  # intermediate gradients are pass-local
            node.grad = None
    _accumulate(root, np.ones_like(root.data))
    for node in reversed(order):
        if node._backward_rule is not None and node.grad is not None:
            node._backward_rule(node.grad)


GRAD_CHECK_FLOOR = 1e-8


def gradient_check(f: Callable[[list[Tensor]], Tensor], point: Sequence[np.ndarray],
                   step: float) -> float:
    """Compare analytic gradients of a scalar function against central
    differences, coordinate by coordinate.

    `f` maps a list of leaf Tensors to a scalar Tensor; `point` gives the
    arrays at which to evaluate (converted to float64).  Returns the max over
    coordinates of |analytic - central| / max(|analytic|, |central|, 1e-8).
    """
    if step <= 0:
        raise ValueError(f"gradient_check: step must be positive, got {step}")
    arrays = [np.array(p, dtype=np.float64) for p in point]

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    root = f(leaves)
    if root.data.size != 1 or not np.isfinite(root.data).all():
        raise ValueError("gradient_check: function must evaluate to a finite scalar")
    backward(root)
    analytic = [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves
    ]

    def evaluate() -> float:
        with no_grad():
            out = f([Tensor(a) for a in arrays])
        v = float(out.data)
        if not np.isfinite(v):
            raise DomainError("gradient_check: non-finite evaluation at perturbed point")
        return v

    worst = 0.0
    for gi, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        grad_flat = analytic[gi].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = evaluate()
            flat[j] = orig - step
            fm = evaluate()
            flat[j] = orig
            central = (fp - fm) / (2.0 * step)
            denom = max(abs(grad_flat[j]), abs(central), GRAD_CHECK_FLOOR)
            worst = max(worst, abs(grad_flat[j] - central) / denom)
    return worst
