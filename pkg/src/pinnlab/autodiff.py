"""Scalar reverse-mode tape with second-order forward propagation in time.

Every scalar operation appends one node to an append-only tape; a single
reverse sweep then yields gradients of any node with respect to all
trainable leaves.  Time-derivative bookkeeping is carried alongside values
as (value, d/dt, d2/dt2) triples of tape nodes (`Taylor2`), so losses that
contain v, dv/dt and d2v/dt2 stay ordinary tape nodes.

A tape can optionally evaluate its scalar graph over `batch` independent
columns at once (one column per sample or collocation point).  This is an
internal throughput device used by the training loop; the semantics per
column are exactly those of a width-1 tape, and the public single-value
API is the width-1 view.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap


OP_LEAF = 0
OP_CONST = 1
OP_INPUT = 2
OP_ADD = 3
OP_SUB = 4
OP_MUL = 5
OP_DIV = 6
OP_NEG = 7
OP_SQUARE = 8
OP_TANH = 9
OP_SIGMOID = 10
OP_EXP = 11
OP_MEAN = 12

_ARITH_OPS = {
    "add": OP_ADD,
    "sub": OP_SUB,
    "mul": OP_MUL,
    "div": OP_DIV,
    "neg": OP_NEG,
    "square": OP_SQUARE,
}
_ACTIVATION_OPS = {"tanh": OP_TANH, "sigmoid": OP_SIGMOID}
_UNARY = (OP_NEG, OP_SQUARE, OP_TANH, OP_SIGMOID, OP_EXP)
_SOURCE = (OP_LEAF, OP_CONST, OP_INPUT)


class TapeError(ValueError):
    """Invalid tape construction or evaluation; carries the offending node index."""

    def __init__(self, message, node_index=None):
        super().__init__(message)
        self.node_index = node_index


@dataclass(frozen=True)
class NodeRef:
    """Ordinal of a node on a tape (tape_id guards against cross-tape mixing)."""

    index: int
    tape_id: int


@dataclass(frozen=True)
class Taylor2:
    """(value, d/dt, d2/dt2) of one carried quantity, as nodes on one tape."""

    v0: NodeRef
    v1: NodeRef
    v2: NodeRef


@njit(cache=True, nogil=True)
def _k_refresh(op, a, b, rlo, rhi, slo, shi, val, start, stop):
    for i in range(start, stop):
        o = op[i]
        if o <= OP_INPUT:
            continue
        ai = a[i]
        bi = b[i]
        j0 = rlo[i]
        j1 = rhi[i]
        if o == OP_ADD:
            for j in range(j0, j1):
                val[i, j] = val[ai, j] + val[bi, j]
        elif o == OP_SUB:
            for j in range(j0, j1):
                val[i, j] = val[ai, j] - val[bi, j]
        elif o == OP_MUL:
            for j in range(j0, j1):
                val[i, j] = val[ai, j] * val[bi, j]
        elif o == OP_DIV:
            for j in range(j0, j1):
                val[i, j] = val[ai, j] / val[bi, j]
        elif o == OP_NEG:
            for j in range(j0, j1):
                val[i, j] = -val[ai, j]
        elif o == OP_SQUARE:
            for j in range(j0, j1):
                val[i, j] = val[ai, j] * val[ai, j]
        elif o == OP_TANH:
            for j in range(j0, j1):
                val[i, j] = math.tanh(val[ai, j])
        elif o == OP_SIGMOID:
            for j in range(j0, j1):
                x = val[ai, j]
                if x >= 0.0:
                    val[i, j] = 1.0 / (1.0 + math.exp(-x))
                else:
                    e = math.exp(x)
                    val[i, j] = e / (1.0 + e)
        elif o == OP_EXP:
            for j in range(j0, j1):
                val[i, j] = math.exp(val[ai, j])
        elif o == OP_MEAN:
            s = 0.0
            for c in range(slo[i], shi[i]):
                s += val[ai, c]
            m = s / (shi[i] - slo[i])
            for j in range(j0, j1):
                val[i, j] = m


@njit(cache=True, nogil=True)
def _k_backward(op, a, b, rlo, rhi, slo, shi, val, adj, root):
    for i in range(root + 1):
        for j in range(rlo[i], rhi[i]):
            adj[i, j] = 0.0
    adj[root, rlo[root]] = 1.0
    for i in range(root, -1, -1):
        o = op[i]
        if o <= OP_INPUT:
            continue
        ai = a[i]
        bi = b[i]
        j0 = rlo[i]
        j1 = rhi[i]
        if o == OP_ADD:
            for j in range(j0, j1):
                g = adj[i, j]
                if g != 0.0:
                    adj[ai, j] += g
                    adj[bi, j] += g
        elif o == OP_SUB:
            for j in range(j0, j1):
                g = adj[i, j]
                if g != 0.0:
                    adj[ai, j] += g
                    adj[bi, j] -= g
        elif o == OP_MUL:
            for j in range(j0, j1):
                g = adj[i, j]
                if g != 0.0:
                    adj[ai, j] += g * val[bi, j]
                    adj[bi, j] += g * val[ai, j]
        elif o == OP_DIV:
            for j in range(j0, j1):
                g = adj[i, j]
                if g != 0.0:
                    adj[ai, j] += g / val[bi, j]
                    adj[bi, j] -= g * val[i, j] / val[bi, j]
        elif o == OP_NEG:
            for j in range(j0, j1):
                g = adj[i, j]
                if g != 0.0:
                    adj[ai, j] -= g
        elif o == OP_SQUARE:
            for j in range(j0, j1):
                g = adj[i, j]
                if g != 0.0:
                    adj[ai, j] += 2.0 * g * val[ai, j]
        elif o == OP_TANH:
            for j in range(j0, j1):
                g = adj[i, j]
                if g != 0.0:
                    y = val[i, j]
                    adj[ai, j] += g * (1.0 - y * y)
        elif o == OP_SIGMOID:
            for j in range(j0, j1):
                g = adj[i, j]
                if g != 0.0:
                    y = val[i, j]
                    adj[ai, j] += g * y * (1.0 - y)
        elif o == OP_EXP:
            for j in range(j0, j1):
                g = adj[i, j]
                if g != 0.0:
                    adj[ai, j] += g * val[i, j]
        elif o == OP_MEAN:
            g = 0.0
            for j in range(j0, j1):
                g += adj[i, j]
            if g != 0.0:
                w = g / (shi[i] - slo[i])
                for c in range(slo[i], shi[i]):
                    adj[ai, c] += w


@njit(cache=True, nogil=True)
def _k_row_sums(adj, rows, out):
    for k in range(rows.shape[0]):
        s = 0.0
        r = rows[k]
        for j in range(adj.shape[1]):
            s += adj[r, j]
        out[k] = s


class Tape:
    """Append-only graph of scalar operation records.

    Node indices are topologically ordered by construction: every operand
    index is strictly below its consumer's.  Values are (re)computed in
    index order, so evaluation never reads an unset value.
    """

    _next_id = 0

    def __init__(self, batch: int = 1):
        if batch < 1:
            raise TapeError("batch must be >= 1")
        self.batch = int(batch)
        self.tape_id = Tape._next_id
        Tape._next_id += 1
        cap = 1024
        self._op = np.zeros(cap, dtype=np.uint8)
        self._a = np.full(cap, -1, dtype=np.int32)
        self._b = np.full(cap, -1, dtype=np.int32)
        self._rlo = np.zeros(cap, dtype=np.int32)
        self._rhi = np.zeros(cap, dtype=np.int32)
        self._slo = np.zeros(cap, dtype=np.int32)
        self._shi = np.zeros(cap, dtype=np.int32)
        self._val = np.zeros((cap, self.batch))
        self._n = 0
        self._clean = 0  # derived values of nodes [0, _clean) are up to date
        self._leaves: list[int] = []
        self._ranges = [(0, self.batch)]
        self._adj = None

    def __len__(self) -> int:
        return self._n

    @property
    def leaf_count(self) -> int:
        return len(self._leaves)

    @property
    def leaf_indices(self) -> list[int]:
        return list(self._leaves)

    # -- construction ------------------------------------------------------

    def _grow(self):
        cap = self._op.shape[0] * 2
        for name in ("_op", "_a", "_b", "_rlo", "_rhi", "_slo", "_shi"):
            old = getattr(self, name)
            new = np.empty(cap, dtype=old.dtype)
            new[: self._n] = old[: self._n]
            setattr(self, name, new)
        new_val = np.empty((cap, self.batch))
        new_val[: self._n] = self._val[: self._n]
        self._val = new_val
        self._adj = None

    def _append(self, opcode, ai=-1, bi=-1, rng=None, src=(0, 0)) -> int:
        if self._n == self._op.shape[0]:
            self._grow()
        i = self._n
        if rng is None:
            rng = (0, self.batch) if opcode in _SOURCE else self._ranges[-1]
        self._op[i] = opcode
        self._a[i] = ai
        self._b[i] = bi
        self._rlo[i], self._rhi[i] = rng
        self._slo[i], self._shi[i] = src
        self._n = i + 1
        return i

    def _ref(self, i: int) -> NodeRef:
        return NodeRef(i, self.tape_id)

    def _check(self, ref: NodeRef) -> int:
        if not isinstance(ref, NodeRef) or ref.tape_id != self.tape_id:
            raise TapeError("operand does not belong to this tape")
        if not 0 <= ref.index < self._n:
            raise TapeError("node index out of range", node_index=ref.index)
        return ref.index

    @contextmanager
    def active(self, lo: int, hi: int):
        """Restrict nodes created inside to batch columns [lo, hi)."""
        if not (0 <= lo < hi <= self.batch):
            raise TapeError(f"bad active range [{lo}, {hi})")
        self._ranges.append((lo, hi))
        try:
            yield
        finally:
            self._ranges.pop()

    # -- evaluation --------------------------------------------------------

    def _ensure(self, upto: int):
        if self._clean < upto:
            _k_refresh(
                self._op, self._a, self._b, self._rlo, self._rhi,
                self._slo, self._shi, self._val, self._clean, upto,
            )
            self._clean = upto

    def value(self, ref: NodeRef) -> float:
        """Cached scalar value (first active column)."""
        i = self._check(ref)
        self._ensure(i + 1)
        return float(self._val[i, self._rlo[i]])

    def values(self, ref: NodeRef) -> np.ndarray:
        """Cached values over the node's active columns (copy)."""
        i = self._check(ref)
        self._ensure(i + 1)
        return self._val[i, self._rlo[i] : self._rhi[i]].copy()

    def set_value(self, ref: NodeRef, value) -> None:
        """Restage a leaf/constant/input value; downstream caches go stale."""
        i = self._check(ref)
        if self._op[i] not in _SOURCE:
            raise TapeError("only leaf/constant/input values can be restaged", node_index=i)
        self._val[i, :] = value
        self._clean = min(self._clean, i)

    def validate_values(self, upto=None) -> None:
        """Check all cached values are finite; report the first that is not."""
        n = self._n if upto is None else upto
        self._ensure(n)
        for i in range(n):
            row = self._val[i, self._rlo[i] : self._rhi[i]]
            if not np.all(np.isfinite(row)):
                raise TapeError(f"non-finite value at node {i}", node_index=i)

    def _backward_adjoints(self, root: NodeRef) -> np.ndarray:
        i = self._check(root)
        self._ensure(i + 1)
        if self._adj is None or self._adj.shape[0] < self._op.shape[0]:
            self._adj = np.zeros((self._op.shape[0], self.batch))
        _k_backward(
            self._op, self._a, self._b, self._rlo, self._rhi,
            self._slo, self._shi, self._val, self._adj, i,
        )
        return self._adj

    def leaf_gradients(self, root: NodeRef, check: bool = True) -> np.ndarray:
        """Adjoints of all leaves (creation order) in one reverse sweep."""
        adj = self._backward_adjoints(root)
        if check:
            bad = self._first_nonfinite_adjoint(adj, root.index)
            if bad is not None:
                raise TapeError(f"non-finite adjoint at node {bad}", node_index=bad)
        rows = np.asarray(self._leaves, dtype=np.int64)
        out = np.empty(rows.shape[0])
        _k_row_sums(adj, rows, out)
        return out

    def _first_nonfinite_adjoint(self, adj, root_index):
        view = adj[: root_index + 1]
        if np.all(np.isfinite(view)):
            return None
        for i in range(root_index + 1):
            if not np.all(np.isfinite(adj[i, self._rlo[i] : self._rhi[i]])):
                return i
        return None


# -- node constructors -----------------------------------------------------


def _require_finite(value, what):
    v = float(value)
    if not math.isfinite(v):
        raise TapeError(f"{what} must be finite, got {value!r}")
    return v


def leaf(tape: Tape, value: float) -> NodeRef:
    """Trainable leaf; its adjoint appears in the gradient map."""
    v = _require_finite(value, "leaf value")
    i = tape._append(OP_LEAF)
    tape._val[i, :] = v
    tape._leaves.append(i)
    return tape._ref(i)


def constant(tape: Tape, value: float) -> NodeRef:
    """Non-trainable scalar; participates in values, receives no gradient."""
    v = _require_finite(value, "constant value")
    i = tape._append(OP_CONST)
    tape._val[i, :] = v
    return tape._ref(i)


def input_slot(tape: Tape, values) -> NodeRef:
    """Per-column non-trainable input row (restaged between evaluations)."""
    row = np.broadcast_to(np.asarray(values, dtype=float), (tape.batch,))
    if not np.all(np.isfinite(row)):
        raise TapeError("input values must be finite")
    i = tape._append(OP_INPUT)
    tape._val[i, :] = row
    return tape._ref(i)


def arith(tape: Tape, op: str, a: NodeRef, b: NodeRef | None = None) -> NodeRef:
    """Elementary arithmetic node: add, sub, mul, div, neg, square."""
    code = _ARITH_OPS.get(op)
    if code is None:
        raise TapeError(f"unknown arith op {op!r}")
    ai = tape._check(a)
    if code in _UNARY:
        if b is not None:
            raise TapeError(f"{op} takes one operand")
        i = tape._append(code, ai)
        return tape._ref(i)
    if b is None:
        raise TapeError(f"{op} takes two operands")
    bi = tape._check(b)
    if code == OP_DIV:
        tape._ensure(bi + 1)
        den = tape._val[bi, tape._rlo[bi] : tape._rhi[bi]]
        if np.any(den == 0.0):
            raise TapeError(f"division by zero-valued node {bi}", node_index=bi)
    i = tape._append(code, ai, bi)
    return tape._ref(i)


def activation(tape: Tape, op: str, a: NodeRef) -> NodeRef:
    """tanh or sigmoid node (adjoints use (1-y^2) and y(1-y) respectively)."""
    code = _ACTIVATION_OPS.get(op)
    if code is None:
        raise TapeError(f"unknown activation {op!r}")
    i = tape._append(code, tape._check(a))
    return tape._ref(i)


def exponential(tape: Tape, a: NodeRef) -> NodeRef:
    """exp node (used by the optional log-space parameterization)."""
    i = tape._append(OP_EXP, tape._check(a))
    return tape._ref(i)


def mean_over(tape: Tape, a: NodeRef, cols: tuple[int, int] | None = None) -> NodeRef:
    """Mean of a node's values over a column range; result is scalar-ranged."""
    ai = tape._check(a)
    if cols is None:
        cols = (int(tape._rlo[ai]), int(tape._rhi[ai]))
    lo, hi = cols
    if not (0 <= lo < hi <= tape.batch):
        raise TapeError(f"bad reduction range [{lo}, {hi})")
    if not (tape._rlo[ai] <= lo and hi <= tape._rhi[ai]):
        raise TapeError("reduction range outside operand's active columns", node_index=ai)
    i = tape._append(OP_MEAN, ai, rng=(0, 1), src=(lo, hi))
    return tape._ref(i)


def backward(tape: Tape, root: NodeRef) -> dict[NodeRef, float]:
    """Gradient map leaf -> d(root)/d(leaf) from a single reverse sweep."""
    grads = tape.leaf_gradients(root, check=True)
    return {tape._ref(i): float(g) for i, g in zip(tape._leaves, grads)}


# -- Taylor triples --------------------------------------------------------


def t2_input(tape: Tape, t: float) -> Taylor2:
    """Lift the time coordinate: (t, 1, 0) with dt/dt = 1."""
    return Taylor2(
        v0=constant(tape, t),
        v1=constant(tape, 1.0),
        v2=constant(tape, 0.0),
    )


def t2_input_slot(tape: Tape, times) -> Taylor2:
    """Batched time coordinate as a restageable input row."""
    return Taylor2(
        v0=input_slot(tape, times),
        v1=constant(tape, 1.0),
        v2=constant(tape, 0.0),
    )


def t2_affine(tape: Tape, w: NodeRef, x: Taylor2, b: NodeRef) -> Taylor2:
    """(w*x0 + b, w*x1, w*x2) -- linearity of differentiation."""
    return Taylor2(
        v0=arith(tape, "add", arith(tape, "mul", w, x.v0), b),
        v1=arith(tape, "mul", w, x.v1),
        v2=arith(tape, "mul", w, x.v2),
    )


def t2_add(tape: Tape, x: Taylor2, y: Taylor2) -> Taylor2:
    return Taylor2(
        v0=arith(tape, "add", x.v0, y.v0),
        v1=arith(tape, "add", x.v1, y.v1),
        v2=arith(tape, "add", x.v2, y.v2),
    )


def t2_tanh(tape: Tape, x: Taylor2) -> Taylor2:
    """tanh through the Taylor triple.

    y0 = tanh(x0); y1 = (1 - y0^2) x1; y2 = (1 - y0^2) x2 - 2 y0 y1 x1.
    """
    y0 = activation(tape, "tanh", x.v0)
    s = arith(tape, "sub", constant(tape, 1.0), arith(tape, "square", y0))
    y1 = arith(tape, "mul", s, x.v1)
    cross = arith(tape, "mul", arith(tape, "mul", y0, y1), x.v1)
    y2 = arith(
        tape,
        "sub",
        arith(tape, "mul", s, x.v2),
        arith(tape, "mul", constant(tape, 2.0), cross),
    )
    return Taylor2(v0=y0, v1=y1, v2=y2)
