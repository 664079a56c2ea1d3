"""Dense 2-D tensor arithmetic with a reverse-mode tape.

Values are plain float64 numpy arrays.  A :class:`Tape` records every
operation applied to :class:`Var` handles; ``tape.backward(root)`` walks the
record in reverse index order and returns exact gradients for every leaf.

Only two broadcasting forms are supported, because nothing in the training
math needs more: scalar against tensor, and a bias row ``(k,)`` / ``(1, k)``
against an ``(n, k)`` matrix.

A tape is meant to live for one training step and then be dropped.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from fedled.errors import ContractError, DimensionError, DomainError

Tensor = np.ndarray


def as_tensor(data, *, copy: bool = True) -> Tensor:
    """Validate external data and freeze it as a read-only float64 array.

    Rejects NaN/Inf, zero-sized dimensions and arrays of more than 2 dims.
    """
    arr = np.array(data, dtype=np.float64, copy=copy, order="C")
    if arr.ndim > 2:
        raise DimensionError(f"tensors are at most 2-D, got shape {arr.shape}")
    if any(d <= 0 for d in arr.shape):
        raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("tensor contains NaN or Inf")
    arr.setflags(write=False)
    return arr


class _Node:
    __slots__ = ("kind", "parents", "value", "vjp", "needs_grad", "is_leaf")

    def __init__(self, kind, parents, value, vjp, needs_grad, is_leaf=False):
        self.kind = kind
        self.parents = parents
        self.value = value
        self.vjp = vjp
        self.needs_grad = needs_grad
        self.is_leaf = is_leaf


class Var:
    """Handle to one node of a tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> Tensor:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        node = self.tape.nodes[self.index]
        return f"Var(#{self.index} {node.kind} shape={self.shape})"

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

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise ContractError("division is only supported by a constant")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


class Gradients:
    """Result of a backward pass.  Indexing by a :class:`Var` gives its gradient."""

    def __init__(self, tape: "Tape", grads: list):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, var: Var) -> Tensor:
        if var.tape is not self._tape:
            raise ContractError("variable belongs to a different tape")
        g = self._grads[var.index]
        if g is None:
            return np.zeros_like(var.value)
        return g

    def reached(self, var: Var) -> bool:
        return self._grads[var.index] is not None


class Tape:
    """Append-only operation record.

    Parents of node ``i`` always have indices ``< i``, so iterating indices in
    decreasing order is a valid reverse topological sweep.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def param(self, value) -> Var:
        """Register a leaf whose gradient is wanted."""
        return self._push("param", (), as_tensor(value), None, True, is_leaf=True)

    def constant(self, value) -> Var:
        return self._push("const", (), as_tensor(value), None, False, is_leaf=True)

    def _push(self, kind, parents, value, vjp, needs_grad, is_leaf=False) -> Var:
        value.setflags(write=False)
        self.nodes.append(_Node(kind, parents, value, vjp, needs_grad, is_leaf))
        return Var(self, len(self.nodes) - 1)

    def _op(self, kind: str, inputs: Sequence[Var], value, vjp: Callable) -> Var:
        parents = tuple(v.index for v in inputs)
        needs = any(self.nodes[p].needs_grad for p in parents)
        if not needs:
            vjp = None
        return self._push(kind, parents, value, vjp, needs)

    def lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ContractError("cannot mix variables from different tapes")
            return x
        return self.constant(x)

    def backward(self, root: Var, seed=None) -> Gradients:
        """Accumulate d(root)/d(node) for every node feeding ``root``.

        ``seed`` replaces the implicit upstream gradient of 1.  It is how a
        party propagates a gradient received from a peer through its own
        local tape; with a seed the root need not be scalar.
        """
        if root.tape is not self:
            raise ContractError("root belongs to a different tape")
        rv = root.value
        if seed is None:
            if rv.size != 1:
                raise ContractError(f"backward needs a scalar root, got shape {rv.shape}")
            seed = np.ones_like(rv)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != rv.shape:
                raise DimensionError(f"seed shape {seed.shape} != root shape {rv.shape}")
        grads: list = [None] * len(self.nodes)
        grads[root.index] = seed
        for i in range(root.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.vjp is None:
                continue
            parent_grads = node.vjp(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not self.nodes[p].needs_grad:
                    continue
                if grads[p] is None:
                    grads[p] = pg
                else:
                    grads[p] = grads[p] + pg
        # Only leaves and the root keep meaningful buffers for callers.
        return Gradients(self, grads)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise ContractError("at least one operand must be a tape variable")


def _broadcast_kind(a: np.ndarray, b: np.ndarray):
    """Check the two permitted broadcast forms; return output shape."""
    if a.shape == b.shape:
        return a.shape
    if b.ndim == 0 or b.size == 1 and b.ndim <= a.ndim:
        return a.shape
    if a.ndim == 0 or a.size == 1 and a.ndim <= b.ndim:
        return b.shape
    for big, small in ((a, b), (b, a)):
        if big.ndim == 2 and (
            (small.ndim == 1 and small.shape[0] == big.shape[1])
            or (small.ndim == 2 and small.shape == (1, big.shape[1]))
        ):
            return big.shape
    raise DimensionError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    if int(np.prod(shape)) == 1:
        return g.sum().reshape(shape)
    # bias row
    return g.sum(axis=0).reshape(shape)


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    _broadcast_kind(av, bv)
    out = av + bv
    return tape._op("add", (a, b), out, lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    _broadcast_kind(av, bv)
    out = av - bv
    return tape._op("sub", (a, b), out, lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    _broadcast_kind(av, bv)
    out = av * bv
    return tape._op(
        "mul", (a, b), out, lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def neg(a: Var) -> Var:
    return a.tape._op("neg", (a,), -a.value, lambda g: (-g,))


def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul shapes {av.shape} x {bv.shape} do not chain")
    return tape._op("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Var) -> Var:
    if a.value.ndim != 2:
        raise DimensionError("transpose needs a 2-D tensor")
    return a.tape._op("transpose", (a,), a.value.T.copy(), lambda g: (g.T,))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return a.tape._op("relu", (a,), np.where(mask, a.value, 0.0), lambda g: (g * mask,))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape._op("exp", (a,), out, lambda g: (g * out,))


def log(a: Var) -> Var:
    av = a.value
    if np.any(av <= 0):
        raise DomainError("log of a non-positive value")
    return a.tape._op("log", (a,), np.log(av), lambda g: (g / av,))


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Var) -> Var:
    s = _sigmoid(np.asarray(a.value, dtype=np.float64).reshape(-1)).reshape(a.value.shape)
    return a.tape._op("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def log_sigmoid(a: Var) -> Var:
    """log(sigmoid(x)) without forming sigmoid(x); ``log_sigmoid(-x)`` gives log(1 - sigmoid(x))."""
    x = a.value
    out = -np.logaddexp(0.0, -x)
    s = _sigmoid(x.reshape(-1)).reshape(x.shape)
    return a.tape._op("log_sigmoid", (a,), out, lambda g: (g * (1.0 - s),))


def softmax_rows(a: Var) -> Var:
    x = a.value
    if x.ndim != 2 or x.shape[1] < 2:
        raise DimensionError(f"softmax_rows needs n x C with C >= 2, got {x.shape}")
    z = np.exp(x - x.max(axis=1, keepdims=True))
    s = z / z.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return a.tape._op("softmax", (a,), s, vjp)


def log_softmax_rows(a: Var) -> Var:
    x = a.value
    if x.ndim != 2 or x.shape[1] < 2:
        raise DimensionError(f"log_softmax_rows needs n x C with C >= 2, got {x.shape}")
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def vjp(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return a.tape._op("log_softmax", (a,), out, vjp)


def outer_flatten(f: Var, g: Var) -> Var:
    """Row-wise outer product, flattened f-major: ``out[i, j*C + c] = f[i, j] * g[i, c]``."""
    tape = _tape_of(f, g)
    f, g = tape.lift(f), tape.lift(g)
    fv, gv = f.value, g.value
    if fv.ndim != 2 or gv.ndim != 2 or fv.shape[0] != gv.shape[0]:
        raise DimensionError(f"outer_flatten batch mismatch: {fv.shape} vs {gv.shape}")
    n, d = fv.shape
    c = gv.shape[1]
    out = (fv[:, :, None] * gv[:, None, :]).reshape(n, d * c)

    def vjp(up):
        up3 = up.reshape(n, d, c)
        return (np.einsum("ijc,ic->ij", up3, gv), np.einsum("ijc,ij->ic", up3, fv))

    return tape._op("outer", (f, g), out, vjp)


def grad_reverse(x: Var, lam: float) -> Var:
    """Identity forward; backward multiplies the upstream gradient by ``-lam``."""
    lam = float(lam)
    if lam < 0:
        raise ContractError("gradient reversal coefficient must be >= 0")
    return x.tape._op("grad_reverse", (x,), x.value, lambda g: (g * -lam,))


def sum_all(a: Var) -> Var:
    shape = a.value.shape
    return a.tape._op("sum", (a,), np.asarray(a.value.sum()), lambda g: (np.full(shape, float(g)),))


def mean_all(a: Var) -> Var:
    shape = a.value.shape
    n = a.value.size
    return a.tape._op("mean", (a,), np.asarray(a.value.mean()), lambda g: (np.full(shape, float(g) / n),))


def pick(a: Var, cols) -> Var:
    """``out[i] = a[i, cols[i]]`` as an (n,) tensor."""
    x = a.value
    cols = np.asarray(cols, dtype=np.int64)
    if x.ndim != 2 or cols.shape != (x.shape[0],):
        raise DimensionError(f"pick needs n x C input and n indices, got {x.shape} / {cols.shape}")
    rows = np.arange(x.shape[0])
    out = x[rows, cols]

    def vjp(g):
        full = np.zeros_like(x)
        full[rows, cols] = g
        return (full,)

    return a.tape._op("pick", (a,), out, vjp)


def sqdist(a, b) -> Var:
    """Pairwise squared Euclidean distances, ``out[i, j] = |a_i - b_j|^2``."""
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise DimensionError(f"sqdist width mismatch: {av.shape} vs {bv.shape}")
    diff = av[:, None, :] - bv[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def vjp(g):
        ga = 2.0 * np.einsum("ij,ijk->ik", g, diff)
        gb = -2.0 * np.einsum("ij,ijk->jk", g, diff)
        return (ga, gb)

    return tape._op("sqdist", (a, b), out, vjp)


def concat_rows(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise DimensionError(f"concat_rows width mismatch: {av.shape} vs {bv.shape}")
    n = av.shape[0]
    return tape._op("concat", (a, b), np.vstack([av, bv]), lambda g: (g[:n], g[n:]))


def row_slice(a: Var, start: int, stop: int) -> Var:
    x = a.value
    if x.ndim != 2 or not 0 <= start < stop <= x.shape[0]:
        raise DimensionError(f"bad row slice [{start}:{stop}] of {x.shape}")

    def vjp(g):
        full = np.zeros_like(x)
        full[start:stop] = g
        return (full,)

    return a.tape._op("rows", (a,), x[start:stop].copy(), vjp)
