"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation validates shapes eagerly, computes the forward value with
numpy, and (when any input is tracked on a tape) records a vector-Jacobian
closure. `backward` replays the tape in reverse, so each gradient is
accumulated exactly once per use and in a fixed order: reductions use numpy's
C-order summation and accumulation follows tape order, which makes repeated
runs with the same inputs bit-identical.

There is no implicit broadcasting. The only shape-bending primitives are
`expand` (tile over new leading axes), `reshape`, `concat`, and `slice_axis`,
each with an explicit gradient rule.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DegenerateInputError, NumericFaultError, ShapeError

DTYPE = np.float64

# gelu tanh-approximation constant sqrt(2/pi)
_GELU_C = math.sqrt(2.0 / math.pi)


class Tape:
    """Ordered record of one forward pass.

    Tensors belong to at most one tape; mixing tapes in a single op raises.
    A tape is single-threaded by construction — independent tapes may live on
    separate threads as long as their tensors are never shared.
    """

    def __init__(self) -> None:
        self._nodes: list[Tensor] = []

    def leaf(self, data) -> "Tensor":
        """Register an input (parameter) tensor that should receive a gradient."""
        t = Tensor(data, tape=self)
        self._nodes.append(t)
        return t

    def _record(self, t: "Tensor") -> None:
        self._nodes.append(t)

    def __len__(self) -> int:
        return len(self._nodes)


class Tensor:
    """Dense real-valued array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "grad", "_parents", "_vjp")

    def __init__(self, data, tape: Optional[Tape] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.tape = tape
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Optional[Callable[[np.ndarray], tuple]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, tracked={self.tape is not None})"

    # convenience operators; Tensor-Tensor forms require identical shapes
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else scalar_add(self, other)

    def __sub__(self, other):
        return subtract(self, other) if isinstance(other, Tensor) else scalar_add(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scalar_mul(self, other)

    def __rmul__(self, other):
        return scalar_mul(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _join_tape(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ShapeError("operands belong to different tapes")
    return tape


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    tape = _join_tape(*parents)
    out = Tensor(data, tape=tape)
    if tape is not None:
        out._parents = parents
        out._vjp = vjp
        tape._record(out)
    return out


def constant(data) -> Tensor:
    """Untracked tensor; gradients never flow into it."""
    return Tensor(data)


def stop_gradient(t: Tensor) -> Tensor:
    """Copy `t` off the tape, severing the gradient path."""
    return Tensor(t.data.copy())


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes differ: {a.data.shape} vs {b.data.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"subtract: shapes differ: {a.data.shape} vs {b.data.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of identically shaped tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes differ: {a.data.shape} vs {b.data.shape}")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def scalar_add(a: Tensor, c: float) -> Tensor:
    return _make(a.data + float(c), (a,), lambda g: (g,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    if not np.all(np.isfinite(y)):
        raise NumericFaultError("exp overflowed to non-finite values")
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericFaultError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; subgradient passes only strictly inside the interval."""
    inside = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def gelu(a: Tensor) -> Tensor:
    # tanh form: 0.5 x (1 + tanh(c (x + 0.044715 x^3))); smooth, so the
    # finite-difference checks hold everywhere
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(u)
    y = 0.5 * x * (1.0 + th)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du
        return (g * d,)

    return _make(y, (a,), vjp)


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D matrix product."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected matrices, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner extents differ: {a.data.shape} @ {b.data.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product: (..., m, k) @ (..., k, n) with equal leading dims."""
    if a.data.ndim < 3 or a.data.ndim != b.data.ndim:
        raise ShapeError(f"bmm: ranks differ or < 3: {a.data.shape} @ {b.data.shape}")
    if a.data.shape[:-2] != b.data.shape[:-2] or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"bmm: incompatible shapes: {a.data.shape} @ {b.data.shape}")

    def vjp(g):
        return (g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g)

    return _make(a.data @ b.data, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: (..., k) @ (k, n) + (n,)."""
    if w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"linear: {x.data.shape} @ {w.data.shape}")
    if b is not None and b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"linear: bias {b.data.shape} vs weight {w.data.shape}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data

    k, n = w.data.shape

    def vjp(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, k).T @ g.reshape(-1, n)
        if b is None:
            return (gx, gw)
        return (gx, gw, g.reshape(-1, n).sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, parents, vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into an embedding table; gradient scatter-adds into rows."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding: ids must be integers")
    if np.any(ids < 0) or np.any(ids >= table.data.shape[0]):
        raise ShapeError(f"embedding: id out of range for table {table.data.shape}")

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(table.data[ids], (table,), vjp)


# ---------------------------------------------------------------------------
# reductions and shape plumbing
# ---------------------------------------------------------------------------

def sum_axis(a: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        return _make(np.sum(a.data), (a,), lambda g: (np.full_like(a.data, g),))

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), vjp)


def mean_axis(a: Tensor, axis: Optional[int] = None) -> Tensor:
    """Mean along one axis (axis=0 is the cross-frame pooling case)."""
    if axis is None:
        n = a.data.size
        return _make(np.mean(a.data), (a,), lambda g: (np.full_like(a.data, g / n),))
    n = a.data.shape[axis]

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.data.shape).copy(),)

    return _make(a.data.mean(axis=axis), (a,), vjp)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        if a.data.ndim != 2:
            raise ShapeError(f"transpose without axes needs a matrix, got {a.data.shape}")
        return _make(a.data.T, (a,), lambda g: (g.T,))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def expand(a: Tensor, leading: Sequence[int]) -> Tensor:
    """Tile `a` over new leading axes; gradient sums back over them."""
    leading = tuple(leading)
    target = leading + a.data.shape
    n_lead = len(leading)

    def vjp(g):
        return (g.sum(axis=tuple(range(n_lead))),)

    return _make(np.broadcast_to(a.data, target).copy(), (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    sizes = [t.data.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            g.take(np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _make(data, tuple(tensors), vjp)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return _make(a.data[idx].copy(), (a,), vjp)


# ---------------------------------------------------------------------------
# row-structured ops
# ---------------------------------------------------------------------------

def row_min(a: Tensor) -> tuple[Tensor, list[int]]:
    """Per-row minimum of a matrix.

    Ties resolve to the lowest column index and the subgradient flows only to
    that single entry.
    """
    if a.data.ndim != 2:
        raise ShapeError(f"row_min: expected a matrix, got {a.data.shape}")
    m, n = a.data.shape
    if n < 1:
        raise ShapeError(f"row_min: rows are empty: {a.data.shape}")
    argmins = np.argmin(a.data, axis=1)
    values = a.data[np.arange(m), argmins]

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[np.arange(m), argmins] = g
        return (ga,)

    return _make(values, (a,), vjp), [int(i) for i in argmins]


def l2_normalize_rows(a: Tensor, min_norm: float = 1e-12) -> Tensor:
    """Scale each row of a matrix to unit Euclidean norm."""
    if a.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: expected a matrix, got {a.data.shape}")
    norms = np.linalg.norm(a.data, axis=1)
    bad = np.nonzero(norms < min_norm)[0]
    if bad.size:
        raise DegenerateInputError(f"row {int(bad[0])} has near-zero norm {norms[bad[0]]:.3e}")
    y = a.data / norms[:, None]

    def vjp(g):
        # d/dx (x/|x|) = (I - y y^T)/|x|
        return ((g - y * np.sum(g * y, axis=1, keepdims=True)) / norms[:, None],)

    return _make(y, (a,), vjp)


def softmax_last(a: Tensor) -> Tensor:
    """Softmax along the last axis (numerically stabilized)."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make(y, (a,), vjp)


def layer_norm_last(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv
    n = a.data.shape[-1]

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = np.sum(g * y, axis=-1, keepdims=True) / n
        return (inv * (g - gm - y * gy),)

    return _make(y, (a,), vjp)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(root: Tensor) -> None:
    """Accumulate gradients of the scalar `root` into every tensor on its tape.

    Nodes that do not lead to `root` keep zero gradients. After the call every
    tape-registered tensor has `.grad` of its own shape.
    """
    if root.tape is None:
        raise ShapeError("backward: root is not tracked on any tape")
    if root.data.shape != ():
        raise ShapeError(f"backward: root must be a scalar, got shape {root.data.shape}")
    root.grad = np.ones((), dtype=DTYPE)
    for node in reversed(root.tape._nodes):
        if node.grad is None or node._vjp is None:
            continue
        contribs = node._vjp(node.grad)
        for parent, c in zip(node._parents, contribs):
            if parent.tape is None:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += c
    for node in root.tape._nodes:
        if node.grad is None:
            node.grad = np.zeros_like(node.data)
