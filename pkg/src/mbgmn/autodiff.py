"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor` holding its forward value and a
closure that maps the output adjoint to the adjoints of its inputs. Node ids
are drawn from a global counter at creation time, so sorting the nodes that
reach a loss by id gives a valid topological order; :func:`backward` walks that
order in reverse.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "SparseMatrix",
    "Tape",
    "ShapeError",
    "FiniteDiffReport",
    "tensor",
    "constant",
    "parameter",
    "matmul",
    "spmm",
    "add",
    "sub",
    "mul",
    "scale",
    "leaky_relu",
    "concat",
    "slice_last",
    "sum_axis",
    "reshape",
    "stack",
    "take",
    "einsum",
    "softmax_lastaxis",
    "square_sum",
    "trace",
    "backward",
    "finite_diff_check",
]

_node_ids = itertools.count()


class ShapeError(ValueError):
    pass


class Tensor:
    """A dense float64 array that records how it was computed."""

    __slots__ = ("value", "grad", "requires_grad", "node_id", "op", "branch", "_parents", "_backward")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable | None = None,
        op: str = "leaf",
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.op = op
        # for piecewise ops: which branch each element took
        self.branch: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_axis(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(value, requires_grad: bool = False) -> Tensor:
    return Tensor(value, requires_grad=requires_grad)


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def parameter(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents, backward_fn, op) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(value, requires, parents if requires else (), backward_fn if requires else None, op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------
# sparse structure


@dataclass(frozen=True)
class SparseMatrix:
    """Compressed-row sparse matrix treated as fixed (non-trainable) data."""

    rows: int
    cols: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    _csr: sp.csr_matrix = field(repr=False, compare=False, default=None)
    _csr_t: sp.csr_matrix = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        indptr = np.asarray(self.indptr, dtype=np.int64)
        indices = np.asarray(self.indices, dtype=np.int64)
        data = np.asarray(self.data, dtype=np.float64)
        if self.rows < 0 or self.cols < 0:
            raise ShapeError(f"negative sparse shape ({self.rows}, {self.cols})")
        if indptr.shape != (self.rows + 1,) or indptr[0] != 0 or np.any(np.diff(indptr) < 0):
            raise ValueError("row offsets must be non-decreasing, start at 0, and have length rows+1")
        if indptr[-1] != len(indices) or len(indices) != len(data):
            raise ValueError("row offsets, column indices and values disagree in length")
        if len(indices) and (indices.min() < 0 or indices.max() >= self.cols):
            raise ValueError(f"column index out of range [0, {self.cols})")
        keys = np.repeat(np.arange(self.rows), np.diff(indptr)) * max(self.cols, 1) + indices
        if len(np.unique(keys)) != len(keys):
            raise ValueError("duplicate (row, col) entry")
        csr = sp.csr_matrix((data, indices, indptr), shape=(self.rows, self.cols))
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "_csr", csr)
        object.__setattr__(self, "_csr_t", csr.T.tocsr())

    @classmethod
    def from_coo(cls, rows: int, cols: int, row_idx, col_idx, values=None) -> "SparseMatrix":
        row_idx = np.asarray(row_idx, dtype=np.int64)
        col_idx = np.asarray(col_idx, dtype=np.int64)
        if values is None:
            values = np.ones(len(row_idx))
        order = np.lexsort((col_idx, row_idx))
        row_idx, col_idx = row_idx[order], col_idx[order]
        values = np.asarray(values, dtype=np.float64)[order]
        indptr = np.zeros(rows + 1, dtype=np.int64)
        np.add.at(indptr, row_idx + 1, 1)
        return cls(rows, cols, np.cumsum(indptr), col_idx, values)

    @classmethod
    def from_dense(cls, dense) -> "SparseMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        r, c = np.nonzero(dense)
        return cls.from_coo(dense.shape[0], dense.shape[1], r, c, dense[r, c])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return len(self.data)

    def row_ids(self) -> np.ndarray:
        """Row index of every stored entry, aligned with ``indices``."""
        return np.repeat(np.arange(self.rows), np.diff(self.indptr))

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def transpose(self) -> "SparseMatrix":
        t = self._csr_t
        return SparseMatrix(self.cols, self.rows, t.indptr, t.indices, t.data)

    def dot(self, dense: np.ndarray) -> np.ndarray:
        return np.asarray(self._csr @ dense)

    def tdot(self, dense: np.ndarray) -> np.ndarray:
        return np.asarray(self._csr_t @ dense)


# --------------------------------------------------------------------------
# operations


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def _bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(av @ bv, (a, b), _bw, "matmul")


def spmm(s: SparseMatrix, b) -> Tensor:
    """Sparse-times-dense product; gradient flows into ``b`` only."""
    b = _as_tensor(b)
    if b.ndim != 2 or s.cols != b.shape[0]:
        raise ShapeError(f"spmm: cannot multiply sparse {s.shape} by {b.shape}")

    def _bw(g):
        return (s.tdot(g),)

    return _node(s.dot(b.value), (b,), _bw, "spmm")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def _bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _node(a.value + b.value, (a, b), _bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def _bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _node(a.value - b.value, (a, b), _bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    av, bv = a.value, b.value

    def _bw(g):
        return (
            _unbroadcast(g * bv, a.shape) if a.requires_grad else None,
            _unbroadcast(g * av, b.shape) if b.requires_grad else None,
        )

    return _node(av * bv, (a, b), _bw, "mul")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _node(a.value * c, (a,), lambda g: (g * c,), "scale")


def leaky_relu(x, slope: float = 0.1) -> Tensor:
    x = _as_tensor(x)
    pos = x.value > 0
    factor = np.where(pos, 1.0, slope)
    out = _node(x.value * factor, (x,), lambda g: (g * factor,), "leaky_relu")
    out.branch = pos
    return out


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), _bw, "concat")


def slice_last(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    n = x.shape[-1]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice_last: [{start}, {stop}) outside last axis of size {n}")

    def _bw(g):
        full = np.zeros(x.shape)
        full[..., start:stop] = g
        return (full,)

    return _node(x.value[..., start:stop], (x,), _bw, "slice")


def sum_axis(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), _bw, "sum")


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.value for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: mismatched shapes {[t.shape for t in tensors]}") from None

    def _bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(out, tuple(tensors), _bw, "stack")


def take(x, index) -> Tensor:
    """Gather rows (axis 0); repeated indices accumulate in the backward pass."""
    x = _as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0]):
        raise ShapeError(f"take: index out of range for axis of size {x.shape[0]}")

    def _bw(g):
        full = np.zeros(x.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _node(x.value[idx], (x,), _bw, "take")


def einsum(subscripts: str, *operands) -> Tensor:
    """Differentiable ``np.einsum`` for explicit-output subscripts.

    Each index of an operand must also appear in the output or in another
    operand, and no operand may repeat an index.
    """
    operands = [_as_tensor(o) for o in operands]
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise ShapeError(f"einsum: {len(in_subs)} subscripts for {len(operands)} operands")
    for i, s in enumerate(in_subs):
        if len(set(s)) != len(s):
            raise ValueError(f"einsum: repeated index in operand {i} ({s})")
        others = out_sub + "".join(in_subs[:i] + in_subs[i + 1 :])
        if any(c not in others for c in s):
            raise ValueError(f"einsum: operand {i} has an index summed only over itself")
    try:
        out = np.einsum(subscripts, *[o.value for o in operands], optimize=len(operands) > 2)
    except ValueError as exc:
        raise ShapeError(f"einsum {subscripts}: {[o.shape for o in operands]}: {exc}") from None
    values = [o.value for o in operands]

    def _bw(g):
        grads = []
        for i, (o, s) in enumerate(zip(operands, in_subs)):
            if not o.requires_grad:
                grads.append(None)
                continue
            rest_subs = in_subs[:i] + in_subs[i + 1 :]
            rest_vals = values[:i] + values[i + 1 :]
            expr = ",".join([out_sub] + rest_subs) + "->" + s
            grads.append(np.einsum(expr, g, *rest_vals, optimize=len(rest_vals) > 1))
        return tuple(grads)

    return _node(out, tuple(operands), _bw, "einsum")


def softmax_lastaxis(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("softmax over an empty last axis")
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), _bw, "softmax")


def square_sum(x) -> Tensor:
    x = _as_tensor(x)
    xv = x.value
    return _node(np.sum(xv * xv), (x,), lambda g: (2.0 * g * xv,), "square_sum")


# --------------------------------------------------------------------------
# tape and backward


@dataclass
class Tape:
    """Nodes reachable from a root, in creation (topological) order."""

    nodes: list[Tensor]

    @property
    def node_ids(self) -> list[int]:
        return [n.node_id for n in self.nodes]


def trace(root: Tensor) -> Tape:
    seen: dict[int, Tensor] = {}
    stack_ = [root]
    while stack_:
        node = stack_.pop()
        if node.node_id in seen:
            continue
        seen[node.node_id] = node
        stack_.extend(node._parents)
    return Tape([seen[k] for k in sorted(seen)])


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every node reachable from the scalar ``loss``."""
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = trace(loss)
    for node in tape.nodes:
        node.grad = np.zeros(node.shape)
    loss.grad = np.ones(loss.shape)
    for node in reversed(tape.nodes):
        if node._backward is None:
            continue
        parent_grads = node._backward(node.grad)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is not None and parent.requires_grad:
                parent.grad += pg
    return tape


# --------------------------------------------------------------------------
# finite differences


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    passed: bool
    n_checked: int
    worst: tuple[str, tuple[int, ...]] | None = None
    analytic: float = 0.0
    numeric: float = 0.0
    n_kinked: int = 0
    floor: float = 0.0

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        where = f" at {self.worst[0]}{list(self.worst[1])}" if self.worst else ""
        skipped = f", {self.n_kinked} kink-crossing coords skipped" if self.n_kinked else ""
        return f"{status}: max rel error {self.max_rel_error:.3e} over {self.n_checked} coords{where}{skipped}"


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor absorbs round-off near zero."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _scalar(out) -> float:
    v = out.value if isinstance(out, Tensor) else np.asarray(out, dtype=np.float64)
    if np.size(v) != 1:
        raise ShapeError(f"finite_diff_check: f must return a scalar, got shape {np.shape(v)}")
    v = float(np.reshape(v, ()))
    if not math.isfinite(v):
        raise FloatingPointError(f"finite_diff_check: f returned non-finite value {v}")
    return v


def branch_signature(out) -> bytes:
    """Which side of every piecewise-linear kink each element of the graph sits on."""
    if not isinstance(out, Tensor):
        return b""
    masks = [np.packbits(n.branch.ravel()).tobytes() for n in trace(out).nodes if n.branch is not None]
    return b"|".join(masks)


def finite_diff_check(
    f: Callable[[], Tensor],
    params,
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    skip_kinks: bool = True,
    roundoff: float = 8.0,
) -> FiniteDiffReport:
    """Compare analytic gradients against central differences.

    ``f`` is called with no arguments and must read the current values of
    ``params`` (a Tensor, a sequence of Tensors or a name->Tensor mapping).
    With ``max_coords`` set, that many coordinates per parameter are checked,
    chosen by ``rng``. A central difference whose two evaluations land on a
    different side of a leaky-relu kink than the base point does not estimate
    the derivative; with ``skip_kinks`` such coordinates are counted in
    ``n_kinked`` and left out of the error.

    Each evaluation of ``f`` carries round-off near ``eps * |f|``, so the
    difference quotient cannot resolve gradient gaps below ``eps * |f| / step``.
    The denominator floor is raised to ``roundoff`` times that level over
    ``tol``; gaps smaller than the quotient's own noise never fail the check.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(params, Tensor):
        named = {"param": params}
    elif isinstance(params, dict):
        named = dict(params)
    else:
        named = {f"param{i}": p for i, p in enumerate(params)}

    out = f()
    f0 = _scalar(out)
    floor = max(floor, roundoff * np.finfo(np.float64).eps * abs(f0) / (step * tol))
    base_sig = branch_signature(out) if skip_kinks else b""
    if isinstance(out, Tensor) and out.requires_grad:
        backward(out)
    analytic = {}
    for name, p in named.items():
        g = p.grad if (isinstance(out, Tensor) and out.requires_grad and p.grad is not None) else None
        analytic[name] = np.zeros(p.shape) if g is None else g.copy()

    worst_err, worst, n, kinked = 0.0, None, 0, 0
    worst_a = worst_n = 0.0
    for name, p in named.items():
        coords: Iterable = np.ndindex(*p.shape)
        if max_coords is not None and p.value.size > max_coords:
            rng = rng or np.random.default_rng(0)
            flat = rng.choice(p.value.size, size=max_coords, replace=False)
            coords = [np.unravel_index(int(c), p.shape) for c in np.sort(flat)]
        for idx in coords:
            orig = p.value[idx]
            p.value[idx] = orig + step
            out_p = f()
            p.value[idx] = orig - step
            out_m = f()
            p.value[idx] = orig
            if skip_kinks and (branch_signature(out_p) != base_sig or branch_signature(out_m) != base_sig):
                kinked += 1
                continue
            num = (_scalar(out_p) - _scalar(out_m)) / (2 * step)
            a = float(analytic[name][idx])
            err = relative_error(a, num, floor)
            n += 1
            if err > worst_err or worst is None:
                worst_err, worst, worst_a, worst_n = err, (name, tuple(int(i) for i in idx)), a, num
    return FiniteDiffReport(worst_err, worst_err < tol, n, worst, worst_a, worst_n, kinked, floor)
