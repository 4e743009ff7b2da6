"""Reverse-mode differentiation over numpy arrays with grad-of-grad support.

Every operation records its inputs and one vector-Jacobian product per input.
The VJPs are themselves written with the recorded operations below, so running
:func:`backward` with ``create_graph=True`` records the backward pass as new
graph nodes that can be differentiated again (double backprop).

Nodes get a monotonically increasing id at creation.  A node's inputs always
exist before it does, so sorting reachable nodes by id gives a topological
order without an explicit tape.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_ids = itertools.count()
_local = threading.local()

# Fault hooks used by the gradcheck harness to prove it catches broken rules.
_faults: set[str] = set()


def _recording() -> bool:
    return getattr(_local, "recording", True)


@contextmanager
def no_grad():
    prev = _recording()
    _local.recording = False
    try:
        yield
    finally:
        _local.recording = prev


@contextmanager
def inject_fault(name: str):
    """Temporarily break a derivative rule (``"relu-sign"``); test use only."""
    _faults.add(name)
    try:
        yield
    finally:
        _faults.discard(name)


class Var:
    """A node in the computation graph holding a float64 array."""

    __slots__ = ("value", "parents", "vjps", "id", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, value, parents: tuple = (), vjps: tuple = ()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjps = vjps
        self.id = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Var(shape={self.shape}, id={self.id})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def const(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def detach(x) -> Var:
    return Var(x.value if isinstance(x, Var) else x)


def _make(value, parents: Sequence[Var], vjps: Sequence[Callable[[Var], Var]]) -> Var:
    if not _recording():
        return Var(value)
    return Var(value, tuple(parents), tuple(vjps))


# ---------------------------------------------------------------------------
# primitives


def _shape_check(a: Var, b: Var, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}; "
                         "use broadcast_to explicitly")


def _fit(g: Var, shape) -> Var:
    # scalar operand of a scalar-tensor op receives the summed gradient
    return g if g.shape == shape else sum_(g)


def add(a, b) -> Var:
    a, b = const(a), const(b)
    _shape_check(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), (lambda g: _fit(g, sa), lambda g: _fit(g, sb)))


def neg(a) -> Var:
    a = const(a)
    return _make(-a.value, (a,), (lambda g: neg(g),))


def sub(a, b) -> Var:
    return add(a, neg(b))


def mul(a, b) -> Var:
    a, b = const(a), const(b)
    _shape_check(a, b, "mul")
    sa, sb = a.shape, b.shape
    return _make(a.value * b.value, (a, b),
                 (lambda g: _fit(mul(g, b), sa), lambda g: _fit(mul(g, a), sb)))


def power(a, p: float) -> Var:
    a = const(a)
    p = float(p)
    return _make(a.value ** p, (a,), (lambda g: mul(g, mul(p, power(a, p - 1.0))),))


def exp(a) -> Var:
    a = const(a)
    out = _make(np.exp(a.value), (a,), (lambda g: mul(g, out),))
    return out


def log(a) -> Var:
    a = const(a)
    if np.any(a.value <= 0):
        raise ValueError("log of non-positive value")
    return _make(np.log(a.value), (a,), (lambda g: mul(g, power(a, -1.0)),))


def tanh(a) -> Var:
    a = const(a)
    out = _make(np.tanh(a.value), (a,), (lambda g: mul(g, sub(1.0, mul(out, out))),))
    return out


def relu_mask(a) -> np.ndarray:
    """Derivative of relu; 0 at the kink."""
    m = (const(a).value > 0).astype(np.float64)
    if "relu-sign" in _faults:
        m = -m
    return m


def relu(a) -> Var:
    a = const(a)
    mask = relu_mask(a)
    return _make(np.maximum(a.value, 0.0), (a,), (lambda g: mul(g, mask),))


def sum_(a, axis=None, keepdims=False) -> Var:
    a = const(a)
    shape = a.shape
    value = np.sum(a.value, axis=axis, keepdims=keepdims)
    if axis is None:
        kept = (1,) * len(shape)
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    return _make(value, (a,), (lambda g: broadcast_to(reshape(g, kept), shape),))


def broadcast_to(a, shape) -> Var:
    a = const(a)
    shape = tuple(shape)
    src = a.shape
    return _make(np.broadcast_to(a.value, shape).copy(), (a,), (lambda g: sum_to(g, src),))


def sum_to(a, shape) -> Var:
    """Reduce ``a`` to ``shape`` by summing broadcast axes (adjoint of broadcast_to)."""
    a = const(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and a.shape[lead + i] != 1)
    return reshape(sum_(a, axes, keepdims=True), shape)


def reshape(a, shape) -> Var:
    a = const(a)
    src = a.shape
    return _make(a.value.reshape(shape), (a,), (lambda g: reshape(g, src),))


def transpose(a, axes=None) -> Var:
    a = const(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(np.transpose(a.value, axes)), (a,),
                 (lambda g: transpose(g, inv),))


def matmul(a, b) -> Var:
    a, b = const(a), const(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.value @ b.value, (a, b),
                 (lambda g: matmul(g, transpose(b)), lambda g: matmul(transpose(a), g)))


def einsum(subscripts: str, a, b) -> Var:
    """Two-operand einsum; every operand index must appear in the output or the other operand."""
    a, b = const(a), const(b)
    ins, out = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        missing = set(s) - set(out) - set(other)
        if missing:
            raise ValueError(f"einsum {subscripts}: index {sorted(missing)} is reduced on one side only")
    value = np.einsum(subscripts, a.value, b.value, optimize=len(out) > 3)
    return _make(value, (a, b), (lambda g: einsum(f"{out},{sb}->{sa}", g, b),
                                 lambda g: einsum(f"{out},{sa}->{sb}", g, a)))


def _is_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def getitem(a, idx) -> Var:
    a = const(a)
    shape = a.shape
    return _make(np.array(a.value[idx]), (a,), (lambda g: scatter_add(g, idx, shape),))


def scatter_add(a, idx, shape) -> Var:
    """Zeros of ``shape`` with ``a`` added at ``idx`` (adjoint of getitem)."""
    a = const(a)
    out = np.zeros(shape)
    if _is_fancy(idx):
        np.add.at(out, idx, a.value)
    else:
        out[idx] += a.value
    return _make(out, (a,), (lambda g: getitem(g, idx),))


def pad(a, widths) -> Var:
    a = const(a)
    widths = tuple(tuple(w) for w in widths)
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _make(np.pad(a.value, widths), (a,), (lambda g: getitem(g, crop),))


def stack(items: Sequence, axis: int = 0) -> Var:
    items = [const(x) for x in items]
    value = np.stack([x.value for x in items], axis=axis)
    ax = axis % value.ndim

    def take(i):
        return lambda g: getitem(g, (slice(None),) * ax + (i,))

    return _make(value, tuple(items), tuple(take(i) for i in range(len(items))))


# ---------------------------------------------------------------------------
# differentiation


def _collect(output: Var) -> list[Var]:
    seen: dict[int, Var] = {}
    todo = [output]
    while todo:
        n = todo.pop()
        if n.id in seen:
            continue
        seen[n.id] = n
        todo.extend(n.parents)
    return sorted(seen.values(), key=lambda n: n.id)


def backward(output: Var, wrt, create_graph: bool = False):
    """Gradient of a scalar ``output`` with respect to each node in ``wrt``.

    ``wrt`` may be a sequence of Vars or a mapping name -> Var; the result has
    the same structure.  Targets the output does not depend on get zeros.
    With ``create_graph=True`` the results are Vars recorded on the graph;
    otherwise they are plain arrays.
    """
    if not isinstance(output, Var):
        raise TypeError("output must be a Var")
    if output.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    names = list(wrt.keys()) if isinstance(wrt, Mapping) else None
    targets = list(wrt.values()) if names is not None else list(wrt)
    target_ids = {t.id for t in targets}

    order = _collect(output)
    requires: set[int] = set()
    for n in order:
        if n.id in target_ids or any(p.id in requires for p in n.parents):
            requires.add(n.id)

    grads: dict[int, Var] = {}
    if output.id in requires:
        grads[output.id] = Var(np.ones_like(output.value))
    with (_nullctx() if create_graph else no_grad()):
        for n in reversed(order):
            if n.id not in requires:
                continue
            g = grads.get(n.id) if n.id in target_ids else grads.pop(n.id, None)
            if g is None:
                continue
            for p, vjp in zip(n.parents, n.vjps):
                if p.id not in requires:
                    continue
                gp = vjp(g)
                grads[p.id] = add(grads[p.id], gp) if p.id in grads else gp

    results = []
    for t in targets:
        g = grads.get(t.id)
        if g is None:
            g = Var(np.zeros_like(t.value))
        results.append(g if create_graph else g.value)
    if names is not None:
        return dict(zip(names, results))
    return results


@contextmanager
def _nullctx():
    yield


def grad_of_scalar_grad(h: Var, params, create_graph: bool = False, allow_unused: bool = False):
    """Gradient of a scalar built from a differentiably recorded backward pass.

    Raises if ``h`` does not reach any of ``params`` through the graph, unless
    ``allow_unused`` is set (then the result is zeros).
    """
    targets = list(params.values() if isinstance(params, Mapping) else params)
    if not isinstance(h, Var):
        raise ValueError("h must be a Var built under backward(..., create_graph=True)")
    if not allow_unused:
        ids = {n.id for n in _collect(h)}
        if not any(t.id in ids for t in targets):
            raise ValueError("h is not differentiable with respect to the requested parameters; "
                             "build it under backward(..., create_graph=True)")
    return backward(h, params, create_graph=create_graph)


def value_and_grad(fn: Callable[..., Var], params: Mapping[str, np.ndarray]):
    """Evaluate ``fn(**vars)`` and its gradient w.r.t. every named array."""
    leaves = {k: Var(v) for k, v in params.items()}
    out = fn(leaves)
    return float(out.value), backward(out, leaves)


def leaves(params: Mapping[str, np.ndarray]) -> dict[str, Var]:
    return {k: Var(v) for k, v in params.items()}


def values(xs: Iterable[Var]) -> list[np.ndarray]:
    return [x.value for x in xs]
