"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` records every primitive applied to tensors that live on it.
Calling :meth:`Tape.backward` on a scalar walks the records in reverse and
returns the gradient of that scalar with respect to each leaf.

    tape = Tape()
    w = tape.leaf(np.ones((3, 2)))
    b = tape.leaf(np.zeros(2))
    y = reduce_mean(sigmoid(affine(Tensor(x), w, b)))
    gw, gb = tape.backward(y, [w, b])

Tensors created without a tape are constants. Mixing tensors from two
different tapes in one operation is an error.
"""
from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or infinite values."""


class TapeError(RuntimeError):
    pass


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite values produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Append-only record of primitive operations.

    Each node stores the tape indices of its parents and a vector-Jacobian
    closure. Nodes are appended in execution order, so parents always
    precede children and a single reverse sweep visits each node once.
    """

    def __init__(self, track_patterns: bool = True) -> None:
        self.track_patterns = track_patterns
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._shapes: list[tuple] = []
        self._consumed = False
        self._patterns = hashlib.sha256()
        self.kink_margin = np.inf

    def __len__(self) -> int:
        return len(self._vjps)

    def leaf(self, value) -> Tensor:
        """Register a differentiable input."""
        if self._consumed:
            raise TapeError("tape already consumed by backward(); start a new tape")
        return self._record(_as_array(value).copy(), (), None, "leaf")

    def _record(self, values, parents, vjp, op) -> Tensor:
        _check_finite(values, op)
        idx = len(self._vjps)
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._shapes.append(values.shape)
        return Tensor(values, _tape=self, _index=idx)

    def note_pattern(self, mask: np.ndarray, margin: float | None = None) -> None:
        """Record a piecewise-constant decision (ReLU mask, sort order, ...).

        The digest of all recorded decisions identifies the smooth piece the
        forward pass landed on; ``margin`` is the distance to the nearest kink.
        """
        if not self.track_patterns:
            return
        self._patterns.update(np.ascontiguousarray(mask).tobytes())
        if margin is not None and margin < self.kink_margin:
            self.kink_margin = float(margin)

    def pattern_digest(self) -> str:
        return self._patterns.hexdigest()

    def backward(self, root: Tensor, leaves: Sequence[Tensor] | None = None):
        """Gradients of scalar ``root``.

        Returns a list aligned with ``leaves`` or, when ``leaves`` is None, a
        dict keyed by leaf tape index. The tape cannot be reused afterwards.
        """
        if self._consumed:
            raise TapeError("backward() already ran on this tape")
        if root.tape is not self:
            raise TapeError("root is not recorded on this tape")
        if root.values.size != 1:
            raise TapeError(f"backward() needs a scalar root, got shape {root.shape}")
        self._consumed = True

        grads: list[np.ndarray | None] = [None] * len(self._vjps)
        grads[root._index] = np.ones(root.shape)
        for idx in range(root._index, -1, -1):
            g = grads[idx]
            vjp = self._vjps[idx]
            if g is None or vjp is None:
                continue
            parent_grads = vjp(g)
            for parent, pg in zip(self._parents[idx], parent_grads):
                if pg is None:
                    continue
                if grads[parent] is None:
                    grads[parent] = pg
                else:
                    grads[parent] = grads[parent] + pg
            if idx != root._index:
                grads[idx] = None if self._parents[idx] else g

        def leaf_grad(i: int) -> np.ndarray:
            g = grads[i]
            return np.zeros(self._shapes[i]) if g is None else g

        if leaves is None:
            return {i: leaf_grad(i) for i, v in enumerate(self._vjps) if v is None}
        out = []
        for leaf in leaves:
            if leaf.tape is not self or self._parents[leaf._index]:
                raise TapeError("gradient requested for a tensor that is not a leaf of this tape")
            out.append(leaf_grad(leaf._index))
        return out


class Tensor:
    """Dense float64 array, optionally linked to a :class:`Tape`."""

    __array_priority__ = 100

    def __init__(self, values, _tape: Tape | None = None, _index: int = -1) -> None:
        self.values = _as_array(values)
        if _tape is None:
            _check_finite(self.values, "constant")
        self.tape = _tape
        self._index = _index

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def __repr__(self) -> str:
        where = "const" if self.tape is None else f"tape#{self._index}"
        return f"Tensor({self.values!r}, {where})"

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None):
        return reduce_sum(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _common_tape(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise TapeError("operands are recorded on different tapes")
    if tape is not None and tape._consumed:
        raise TapeError("tape already consumed by backward(); start a new tape")
    return tape


def _make(values: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    """Wrap ``values``; record a node if any input is on a tape.

    ``vjp`` maps the output gradient to one gradient per input (None allowed).
    """
    tape = _common_tape(*inputs)
    if tape is None:
        return Tensor(values)
    live = [i for i, t in enumerate(inputs) if t.tape is not None]
    parents = tuple(inputs[i]._index for i in live)

    def node_vjp(g):
        full = vjp(g)
        return [full[i] for i in live]

    return tape._record(values, parents, node_vjp, op)


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.values * b.values, (a, b),
                 lambda g: (_unbroadcast(g * b.values, a.shape),
                            _unbroadcast(g * a.values, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.values == 0):
        raise ZeroDivisionError("division by zero in div")
    out = a.values / b.values
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.values, a.shape),
                            _unbroadcast(-g * out / b.values, b.shape)), "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.values @ b.values, (a, b),
                 lambda g: (g @ b.values.T, a.values.T @ g), "matmul")


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` for a single input vector ``x[n]`` or a batch ``x[M, n]``.

    ``w`` has shape (n, m) and ``b`` shape (m,), i.e. the layer computes
    ``wᵀx + b`` per input row.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or b.shape != (w.shape[1],) or x.shape[-1:] != (w.shape[0],) or x.ndim > 2:
        raise ValueError(f"affine shape mismatch: x{x.shape}, w{w.shape}, b{b.shape}")
    xv = x.values
    out = xv @ w.values + b.values

    def vjp(g):
        if xv.ndim == 1:
            return g @ w.values.T, np.outer(xv, g), g
        return g @ w.values.T, xv.T @ g, g.sum(axis=0)

    return _make(out, (x, w, b), vjp, "affine")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.values > 0
    if x.tape is not None:
        x.tape.note_pattern(mask, np.min(np.abs(x.values)) if x.values.size else None)
    return _make(np.where(mask, x.values, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    v = x.values
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def absolute(x) -> Tensor:
    """|x| with derivative sign(x) (0 at the kink)."""
    x = as_tensor(x)
    s = np.sign(x.values)
    if x.tape is not None:
        x.tape.note_pattern(s, np.min(np.abs(x.values)) if x.values.size else None)
    return _make(np.abs(x.values), (x,), lambda g: (g * s,), "abs")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        # overflow surfaces as NonFiniteError from _make
        out = np.exp(x.values)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def maximum(x, floor: float) -> Tensor:
    """Elementwise max(x, floor) for a constant floor."""
    return relu(as_tensor(x) - floor) + floor


def apply_elementwise(x, f: Callable, df: Callable, op: str = "elementwise") -> Tensor:
    """Apply a scalar function with known derivative, e.g. an interpolant."""
    x = as_tensor(x)
    out = _as_array(f(x.values))
    return _make(out, (x,), lambda g: (g * _as_array(df(x.values)),), op)


# --- shape ops --------------------------------------------------------------

def take(x, key) -> Tensor:
    x = as_tensor(x)
    out = x.values[key]
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (x,), vjp, "take")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def stack(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.values for t in ts], axis=axis)

    def vjp(g):
        return [np.take(g, i, axis=axis) for i in range(len(ts))]

    return _make(out, ts, vjp, "stack")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.values for t in ts], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return np.split(g, cuts, axis=axis)

    return _make(out, ts, vjp, "concat")


# --- reductions -------------------------------------------------------------

def reduce_sum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = x.values.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(out), (x,), vjp, "sum")


def reduce_mean(x) -> Tensor:
    """Mean over all entries."""
    x = as_tensor(x)
    n = x.values.size
    if n == 0:
        raise ValueError("reduce_mean of an empty tensor")
    shape = x.shape
    return _make(np.asarray(x.values.mean()), (x,),
                 lambda g: (np.full(shape, float(g) / n),), "mean")


def reduce_variance(x) -> Tensor:
    """Population variance (divide by M)."""
    x = as_tensor(x)
    n = x.values.size
    if n == 0:
        raise ValueError("reduce_variance of an empty tensor")
    centred = x.values - x.values.mean()
    return _make(np.asarray(np.mean(centred ** 2)), (x,),
                 lambda g: (float(g) * 2.0 * centred / n,), "variance")


def tail_mean(x, k: int, side: str = "lower") -> Tensor:
    """Mean of the ``k`` smallest (``lower``) or largest (``upper``) entries.

    Ties are broken by ascending index; the subgradient puts 1/k on the
    selected entries and zero elsewhere.
    """
    x = as_tensor(x)
    v = x.values.ravel()
    m = v.size
    if not 1 <= k <= m:
        raise ValueError(f"tail size k={k} outside [1, {m}]")
    if side not in ("lower", "upper"):
        raise ValueError(f"side must be 'lower' or 'upper', got {side!r}")
    # stable sort on value, then on index for ties
    order = np.argsort(v, kind="stable")
    if side == "lower":
        chosen = order[:k]
    else:
        # largest k, ties resolved towards the lower index
        order_desc = np.lexsort((np.arange(m), -v))
        chosen = order_desc[:k]
    if x.tape is not None:
        mask = np.zeros(m, dtype=bool)
        mask[chosen] = True
        if k < m:
            s = np.sort(v)
            gap = s[k] - s[k - 1] if side == "lower" else s[m - k] - s[m - k - 1]
        else:
            gap = None
        x.tape.note_pattern(mask, gap)
    shape = x.shape

    def vjp(g):
        grad = np.zeros(m)
        grad[chosen] = float(g) / k
        return (grad.reshape(shape),)

    return _make(np.asarray(v[chosen].mean()), (x,), vjp, "tail_mean")


def gradient_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[np.ndarray],
                   step: float = 1e-5) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Reverse-mode vs central finite-difference gradients of ``f``.

    ``f`` receives tensors (leaves on a fresh tape, or constants) and returns a
    scalar tensor. Returns (reverse, finite_difference) lists of arrays.
    """
    tape = Tape()
    leaves = [tape.leaf(p) for p in params]
    rev = tape.backward(f(leaves), leaves)
    fd = []
    for i, p in enumerate(params):
        g = np.zeros_like(p, dtype=np.float64)
        for j in np.ndindex(p.shape):
            plus = [q.astype(np.float64, copy=True) for q in params]
            minus = [q.astype(np.float64, copy=True) for q in params]
            plus[i][j] += step
            minus[i][j] -= step
            g[j] = (f([Tensor(q) for q in plus]).item() - f([Tensor(q) for q in minus]).item()) / (2 * step)
        fd.append(g)
    return rev, fd


def constants(arrays: Iterable) -> list[Tensor]:
    return [Tensor(a) for a in arrays]
