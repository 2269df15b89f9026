"""Dense float tensors with tape-based reverse-mode automatic differentiation.

Data lives in numpy arrays (float32 by default, float64 supported for
high-precision checks). Every differentiable op records a backward closure on
the output node; ``backward()`` walks the recorded graph once in reverse
topological order, accumulates gradients into leaf tensors, and frees the
graph. Reductions (sum / mean / cross-entropy / norms) accumulate in float64
regardless of storage dtype to curb drift; matmul runs in the storage dtype so
it stays on the fast BLAS path.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class DoubleBackwardError(RuntimeError):
    """Raised when backward() is called again on an already-consumed graph."""


_grad_enabled = True
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle post-op finiteness checks (off by default for speed)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / data paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if _debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A dense array node in the autodiff graph.

    ``grad`` is populated lazily by backward passes and accumulates across
    multiple backward calls on *different* graphs (gradient accumulation over
    micro-batches); calling backward twice on the same graph raises.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward_fn = None
        self._consumed = False

    # ------------------------------------------------------------------ info
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # ------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    # -------------------------------------------------------------- backward
    def backward(self) -> None:
        """Reverse-mode pass from a scalar; frees the tape afterwards."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        if self._consumed:
            raise DoubleBackwardError(
                "backward() already ran on this graph; rebuilding the forward pass "
                "is required before another backward (double accumulation)"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            fn = node._backward_fn
            if fn is not None and node.grad is not None:
                fn(node.grad)
            node._consumed = True
            # free the tape; keep grads only on leaves (parameters, inputs)
            if fn is not None:
                node.grad = None
            node._parents = ()
            node._backward_fn = None


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _accumulate(target: Tensor, contribution: np.ndarray, fresh: bool) -> None:
    """Add a gradient contribution. ``fresh`` marks arrays owned by the caller
    (safe to store without copying)."""
    if not target.requires_grad:
        return
    if target.grad is None:
        target.grad = contribution if fresh else contribution.copy()
    else:
        target.grad += contribution


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> tuple[np.ndarray, bool]:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting).

    Returns (array, fresh) where fresh is True when a reduction allocated a
    new array.
    """
    if grad.shape == shape:
        return grad, False
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape), True


def _make_node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    data = a.data + b.data

    def backward_fn(g):
        ga, fa = _unbroadcast(g, a.data.shape)
        _accumulate(a, ga, fa)
        gb, fb = _unbroadcast(g, b.data.shape)
        _accumulate(b, gb, fb)

    return _make_node(data, (a, b), backward_fn, "add")


def neg(a: Tensor) -> Tensor:
    def backward_fn(g):
        _accumulate(a, -g, True)

    return _make_node(-a.data, (a,), backward_fn, "neg")


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    data = a.data * b.data

    def backward_fn(g):
        ga, _ = _unbroadcast(g * b.data, a.data.shape)
        _accumulate(a, ga, True)
        gb, _ = _unbroadcast(g * a.data, b.data.shape)
        _accumulate(b, gb, True)

    return _make_node(data, (a, b), backward_fn, "mul")


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    data = a.data / b.data

    def backward_fn(g):
        ga, _ = _unbroadcast(g / b.data, a.data.shape)
        _accumulate(a, ga, True)
        gb, _ = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        _accumulate(b, gb, True)

    return _make_node(data, (a, b), backward_fn, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    data = a.data**exponent

    def backward_fn(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1.0), True)

    return _make_node(data, (a,), backward_fn, "power")


def texp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward_fn(g):
        _accumulate(a, g * data, True)

    return _make_node(data, (a,), backward_fn, "exp")


def tlog(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward_fn(g):
        _accumulate(a, g / a.data, True)

    return _make_node(data, (a,), backward_fn, "log")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward_fn(g):
        _accumulate(a, g * (a.data > 0), True)

    return _make_node(data, (a,), backward_fn, "relu")


def sigmoid(a: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward_fn(g):
        _accumulate(a, g * data * (1.0 - data), True)

    return _make_node(data, (a,), backward_fn, "sigmoid")


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * sig

    def backward_fn(g):
        _accumulate(a, g * sig * (1.0 + a.data * (1.0 - sig)), True)

    return _make_node(data, (a,), backward_fn, "silu")


def gelu(a: Tensor) -> Tensor:
    """Exact GeLU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    data = a.data * cdf

    def backward_fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        _accumulate(a, g * (cdf + a.data * pdf), True)

    return _make_node(data.astype(a.dtype, copy=False), (a,), backward_fn, "gelu")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatchError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    data = np.matmul(a.data, b.data)

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        ga, _ = _unbroadcast(ga, a.data.shape)
        _accumulate(a, ga, True)
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        gb, _ = _unbroadcast(gb, b.data.shape)
        _accumulate(b, gb, True)

    return _make_node(data, (a, b), backward_fn, "matmul")


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)

    def backward_fn(g):
        _accumulate(a, g.reshape(a.data.shape), True)

    return _make_node(data, (a,), backward_fn, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 1, -1, -1))
    inverse = np.argsort(axes)
    data = np.transpose(a.data, axes)

    def backward_fn(g):
        _accumulate(a, np.transpose(g, inverse), True)

    return _make_node(data, (a,), backward_fn, "transpose")


# ---------------------------------------------------------------------------
# reductions (float64 accumulation)
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    data = data.astype(a.dtype, copy=False)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy(), True)

    return _make_node(np.asarray(data), (a,), backward_fn, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.mean(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    data = data.astype(a.dtype, copy=False)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)]
    )

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / count, a.data.shape).copy(), True)

    return _make_node(np.asarray(data), (a,), backward_fn, "mean")


# ---------------------------------------------------------------------------
# normalization / softmax / losses
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``."""
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / np.sum(e, axis=axis, keepdims=True)

    def backward_fn(g):
        inner = np.sum(g * data, axis=axis, keepdims=True)
        _accumulate(a, data * (g - inner), True)

    return _make_node(data, (a,), backward_fn, "softmax")


def rms_norm(a: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis, scaled by ``gain``."""
    ms = np.mean(a.data * a.data, axis=-1, keepdims=True, dtype=np.float64)
    r = (1.0 / np.sqrt(ms + eps)).astype(a.dtype)
    data = a.data * r * gain.data

    def backward_fn(g):
        n = a.data.shape[-1]
        gg = g * gain.data
        # d/dx_j of x_i * r: r delta_ij - x_i x_j r^3 / n
        dot = np.sum(gg * a.data, axis=-1, keepdims=True)
        ga = gg * r - a.data * (r**3) * (dot / n)
        _accumulate(a, ga, True)
        ggain = np.sum(g * a.data * r, axis=tuple(range(a.ndim - 1)))
        _accumulate(gain, ggain.astype(gain.dtype, copy=False), True)

    return _make_node(data, (a, gain), backward_fn, "rms_norm")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    logits: [T, V]; targets: length-T integer array with entries in [0, V).
    """
    targets = np.asarray(targets)
    if logits.ndim != 2:
        raise ShapeMismatchError(f"cross_entropy expects 2-D logits, got {logits.shape}")
    n, vocab = logits.data.shape
    if targets.shape != (n,):
        raise ShapeMismatchError(
            f"targets shape {targets.shape} does not match logits rows {n}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(
            f"target ids must lie in [0, {vocab}), got range "
            f"[{targets.min()}, {targets.max()}]"
        )
    shifted = logits.data - np.max(logits.data, axis=1, keepdims=True)
    sumexp = np.sum(np.exp(shifted), axis=1, dtype=np.float64)
    rows = np.arange(n)
    loglik = shifted[rows, targets].astype(np.float64) - np.log(sumexp)
    data = np.asarray(-np.mean(loglik), dtype=logits.dtype)

    def backward_fn(g):
        probs = np.exp(shifted) / sumexp[:, None].astype(logits.dtype)
        probs[rows, targets] -= 1.0
        _accumulate(logits, probs * (g / n), True)

    return _make_node(data, (logits,), backward_fn, "cross_entropy")


# ---------------------------------------------------------------------------
# gather / scatter
# ---------------------------------------------------------------------------

def take(table: Tensor, ids) -> Tensor:
    """Row lookup (embedding-style): out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    data = table.data[ids]

    def backward_fn(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        _accumulate(table, acc, True)

    return _make_node(data, (table,), backward_fn, "take")


def take_rows(x: Tensor, idx, unique: bool = False) -> Tensor:
    """Gather rows of a 2-D tensor. ``unique=True`` (caller-guaranteed distinct
    indices) enables the fast accumulation path in backward."""
    idx = np.asarray(idx)
    data = x.data[idx]

    def backward_fn(g):
        acc = np.zeros_like(x.data)
        if unique:
            acc[idx] = g
        else:
            np.add.at(acc, idx, g)
        _accumulate(x, acc, True)

    return _make_node(data, (x,), backward_fn, "take_rows")


def scatter_rows(values: Tensor, idx, num_rows: int) -> Tensor:
    """Place rows of ``values`` at positions ``idx`` (distinct) in a zero
    [num_rows, d] output; inverse of take_rows."""
    idx = np.asarray(idx)
    data = np.zeros((num_rows, values.data.shape[-1]), dtype=values.dtype)
    data[idx] = values.data

    def backward_fn(g):
        _accumulate(values, g[idx], True)

    return _make_node(data, (values,), backward_fn, "scatter_rows")


def take_pairs(x: Tensor, row_idx, col_idx) -> Tensor:
    """Element gather out[j] = x[row_idx[j], col_idx[j]]."""
    row_idx = np.asarray(row_idx)
    col_idx = np.asarray(col_idx)
    data = x.data[row_idx, col_idx]

    def backward_fn(g):
        acc = np.zeros_like(x.data)
        np.add.at(acc, (row_idx, col_idx), g)
        _accumulate(x, acc, True)

    return _make_node(data, (x,), backward_fn, "take_pairs")
