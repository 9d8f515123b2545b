"""Dense float64 tensors with a reverse-mode tape.

A :class:`Tensor` is an immutable wrapper around a float64 numpy array.
Differentiable operations record themselves on the active :class:`Tape`
(entered with ``with Tape() as tape:``); :func:`backward` then sweeps the
tape once in reverse and returns a :class:`GradMap` for every
``requires_grad`` leaf the tape saw.

Operations evaluated outside a tape simply compute values.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ConstructionError, ContractError, OracleError, ShapeError

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _checks_enabled():
    return not getattr(_local, "allow_nonfinite", False)


@contextlib.contextmanager
def allow_nonfinite():
    """Debug path: suspend the finite-value check on construction."""
    prev = getattr(_local, "allow_nonfinite", False)
    _local.allow_nonfinite = True
    try:
        yield
    finally:
        _local.allow_nonfinite = prev


class Tensor:
    """Immutable N-d array of float64 values.

    ``data`` is a read-only view; use :meth:`numpy` for a writable copy.
    Identity (not value) is used for hashing, so tensors can key dicts.
    """

    __slots__ = ("_data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if _checks_enabled() and not np.isfinite(arr).all():
            raise ConstructionError("tensor values must be finite")
        arr.flags.writeable = False
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal: takes ownership of ``arr`` without copying
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if _checks_enabled() and not np.isfinite(arr).all():
            raise ConstructionError("operation produced non-finite values")
        if arr.flags.writeable:
            arr.flags.writeable = False
        t = cls.__new__(cls)
        t._data = arr
        t.requires_grad = False
        t.name = None
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self._data.reshape(-1)[0])

    def __len__(self):
        return self.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}{flag})"

    # arithmetic sugar; all route through the recorded primitives
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor_from(shape: Sequence[int], values, requires_grad: bool = False,
                name: str | None = None) -> Tensor:
    """Build a tensor from a flat row-major list of values."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ConstructionError(f"extents must be positive, got {shape}")
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if flat.size != int(np.prod(shape, dtype=np.int64)):
        raise ConstructionError(
            f"{flat.size} values cannot fill shape {shape}")
    if not np.isfinite(flat).all():
        raise ConstructionError("tensor values must be finite")
    return Tensor(flat.reshape(shape), requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad=False, name=None):
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


def ones(shape, requires_grad=False, name=None):
    return Tensor(np.ones(shape), requires_grad=requires_grad, name=name)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros(x.shape))


class _Entry:
    __slots__ = ("out", "parents", "needs", "backward", "kind")

    def __init__(self, out, parents, needs, backward, kind):
        self.out = out
        self.parents = parents
        self.needs = needs
        self.backward = backward
        self.kind = kind


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Entries are appended as operations execute, so operands always precede
    the entries consuming them. A tape is consumed by a single
    :func:`backward` call and is confined to the thread that created it.
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self.leaves: list[Tensor] = []
        self._leaf_ids: set[int] = set()
        self._tracked: set[int] = set()
        self.consumed = False
        self._thread = threading.get_ident()

    def __enter__(self):
        if self.consumed:
            raise ContractError("tape already consumed by backward()")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.entries)

    def tracks(self, t) -> bool:
        if not isinstance(t, Tensor):
            return False
        if id(t) in self._tracked:
            return True
        if t.requires_grad:
            self._tracked.add(id(t))
            self._leaf_ids.add(id(t))
            self.leaves.append(t)
            return True
        return False

    def record(self, out, parents, needs, backward, kind):
        self.entries.append(_Entry(out, parents, needs, backward, kind))
        self._tracked.add(id(out))

    def kinds(self) -> list[str]:
        return [e.kind for e in self.entries]


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_tape():
    """Evaluate without recording, even inside an active tape."""
    stack = _tape_stack()
    saved = stack[:]
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def record(kind: str, out_data: np.ndarray, parents: Sequence,
           backward: Callable) -> Tensor:
    """Wrap ``out_data`` and, if a parent is tracked, log the backward rule.

    ``backward(grad_out, needs)`` must return one gradient (or None) per
    parent, each with that parent's shape.
    """
    out = Tensor._wrap(out_data)
    tape = active_tape()
    if tape is not None:
        needs = tuple(tape.tracks(p) for p in parents)
        if any(needs):
            tape.record(out, tuple(parents), needs, backward, kind)
    return out


class GradMap(dict):
    """Leaf tensor -> gradient tensor of the same shape."""

    def by_name(self, named: dict) -> dict:
        return {name: self[t] for name, t in named.items() if t in self}


def backward(loss: Tensor, tape: Tape) -> GradMap:
    """Reverse sweep: d(loss)/d(leaf) for every requires-grad leaf on ``tape``."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    if tape.consumed:
        raise ContractError("tape already consumed by backward()")
    if tape._thread != threading.get_ident():
        raise ContractError("tape used outside the thread that created it")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.out), None)
        if g is None:
            continue
        parent_grads = entry.backward(g, entry.needs)
        for p, need, pg in zip(entry.parents, entry.needs, parent_grads):
            if not need or pg is None:
                continue
            if pg.shape != p.shape:
                raise ShapeError(
                    f"backward of {entry.kind} gave {pg.shape} for operand {p.shape}")
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    result = GradMap()
    for leaf in tape.leaves:
        g = grads.get(id(leaf))
        result[leaf] = Tensor(np.zeros(leaf.shape) if g is None else g)
    tape.entries.clear()
    return result


def finite_difference_grad(f: Callable[[Tensor], object], x: Tensor,
                           h: float = 1e-5, indices=None) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``indices`` optionally restricts probing to a subset of flat coordinates;
    the remaining entries of the result are left at zero.
    """
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    base = x.numpy().reshape(-1)
    out = np.zeros(base.size)
    coords = range(base.size) if indices is None else indices

    def probe(vals, i):
        with no_tape(), allow_nonfinite():
            v = f(Tensor(vals.reshape(x.shape)))
        v = v.item() if isinstance(v, Tensor) else float(v)
        if not np.isfinite(v):
            raise OracleError(f"f is non-finite when probing coordinate {i}")
        return v

    for i in coords:
        xp = base.copy()
        xp[i] += h
        xm = base.copy()
        xm[i] -= h
        out[i] = (probe(xp, i) - probe(xm, i)) / (2.0 * h)
    return Tensor(out.reshape(x.shape))


# ---------------------------------------------------------------------------
# elementwise primitives

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    # numpy rule: align trailing dims, size-1 stretches
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b), lambda g, n: (
        _unbroadcast(g, sa) if n[0] else None,
        _unbroadcast(g, sb) if n[1] else None))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b), lambda g, n: (
        _unbroadcast(g, sa) if n[0] else None,
        _unbroadcast(-g, sb) if n[1] else None))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b), lambda g, n: (
        _unbroadcast(g * bd, ad.shape) if n[0] else None,
        _unbroadcast(g * ad, bd.shape) if n[1] else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return record("div", out, (a, b), lambda g, n: (
        _unbroadcast(g / bd, ad.shape) if n[0] else None,
        _unbroadcast(-g * out / bd, bd.shape) if n[1] else None))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", -a.data, (a,), lambda g, n: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g, n: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return record("log", np.log(ad), (a,), lambda g, n: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return record("sqrt", out, (a,), lambda g, n: (g * 0.5 / out,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    p = float(exponent)
    return record("pow", ad ** p, (a,), lambda g, n: (g * p * ad ** (p - 1.0),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return record("abs", np.abs(ad), (a,), lambda g, n: (g * np.sign(ad),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return record("clip", np.clip(ad, lo, hi), (a,), lambda g, n: (g * inside,))


_UNARY = {"neg": neg, "exp": exp, "log": log, "sqrt": sqrt, "abs": absolute}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch a named elementwise primitive.

    Binary kinds broadcast numpy-style: shapes are aligned on their trailing
    dimensions and size-1 extents stretch. Anything else needs an explicit
    :func:`reshape`.
    """
    if kind in _BINARY:
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise ContractError(f"{kind} takes one operand")
        return _UNARY[kind](a)
    raise ContractError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions and structural ops

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g, n):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes], dtype=np.int64))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {src} into {tuple(shape)}") from None
    return record("reshape", out, (a,), lambda g, n: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", a.data.transpose(axes), (a,),
                  lambda g, n: (g.transpose(inv),))


def take(a, index) -> Tensor:
    """Basic (slice/int) indexing."""
    a = as_tensor(a)
    shape = a.shape
    out = np.array(a.data[index], dtype=np.float64)

    def bw(g, n):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return record("index", out, (a,), bw)


def split(a, sizes: Sequence[int], axis: int) -> list[Tensor]:
    """Split ``a`` into consecutive pieces of the given extents along ``axis``."""
    a = as_tensor(a)
    axis = axis % a.ndim
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to {a.shape[axis]}")
    pieces = []
    start = 0
    for s in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + s)
        pieces.append(take(a, tuple(idx)))
        start += s
    return pieces


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
                t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != axis):
            raise ShapeError(f"cannot concatenate {ts[0].shape} with {t.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g, n):
        out = []
        for i in range(len(ts)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(idx)].copy() if n[i] else None)
        return tuple(out)

    return record("concat", np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def tensordot(a, b, axes) -> Tensor:
    """Differentiable ``np.tensordot`` with explicit axis lists."""
    a, b = as_tensor(a), as_tensor(b)
    ax_a, ax_b = [list(x) for x in axes]
    ax_a = [x % a.ndim for x in ax_a]
    ax_b = [x % b.ndim for x in ax_b]
    free_a = [i for i in range(a.ndim) if i not in ax_a]
    free_b = [i for i in range(b.ndim) if i not in ax_b]
    ad, bd = a.data, b.data
    out = np.tensordot(ad, bd, axes=(ax_a, ax_b))
    na = len(free_a)

    def bw(g, n):
        ga = gb = None
        g_free_b = list(range(na, g.ndim))
        g_free_a = list(range(na))
        if n[0]:
            # g[free_a, free_b] . b[free_b, ax_b] -> [free_a, ax_a order]
            t = np.tensordot(g, bd, axes=(g_free_b, free_b))
            order = free_a + [ax_a[ax_b.index(x)] for x in sorted(ax_b)]
            ga = t.transpose(np.argsort(order))
        if n[1]:
            t = np.tensordot(ad, g, axes=(free_a, g_free_a))
            order = [ax_b[ax_a.index(x)] for x in sorted(ax_a)] + free_b
            gb = t.transpose(np.argsort(order))
        return ga, gb

    return record("tensordot", np.asarray(out), (a, b), bw)
