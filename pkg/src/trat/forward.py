"""Forward-mode (truncated Taylor / dual-number) propagation.

A :class:`Jet` carries ``c0 = g(w)``, ``c1 = d/dt g(w + t u)`` and
``c2 = d^2/dt^2 g(w + t u)`` at ``t = 0``.  Coefficients are recorded
:class:`~trat.autodiff.Var` nodes, so a directional derivative computed here
can itself be differentiated in reverse mode with respect to ``w``.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Var


class Jet:
    __slots__ = ("c0", "c1", "c2", "order")

    def __init__(self, c0, c1=None, c2=None, order: int = 1):
        self.c0 = ad.const(c0)
        self.c1 = None if c1 is None else ad.const(c1)
        self.c2 = None if (c2 is None or order < 2) else ad.const(c2)
        self.order = order

    @property
    def shape(self):
        return self.c0.shape

    def __repr__(self):
        return f"Jet(order={self.order}, shape={self.shape})"


def _opt_add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return ad.add(a, b)


def _order(*xs) -> int:
    return max((x.order for x in xs if isinstance(x, Jet)), default=0)


def lift(x, order: int) -> Jet:
    return x if isinstance(x, Jet) else Jet(x, order=order)


def linear(fn: Callable[[Var], Var], x):
    """Apply a linear map coefficient-wise."""
    if not isinstance(x, Jet):
        return fn(x)
    return Jet(fn(x.c0), None if x.c1 is None else fn(x.c1),
               None if x.c2 is None else fn(x.c2), order=x.order)


def add(a, b):
    if not isinstance(a, Jet) and not isinstance(b, Jet):
        return ad.add(a, b)
    k = _order(a, b)
    a, b = lift(a, k), lift(b, k)
    return Jet(ad.add(a.c0, b.c0), _opt_add(a.c1, b.c1), _opt_add(a.c2, b.c2), order=k)


def bilinear(fn: Callable[[Var, Var], Var], a, b):
    """Product rule for a bilinear map: (ab)'' = a''b + 2a'b' + ab''."""
    if not isinstance(a, Jet) and not isinstance(b, Jet):
        return fn(a, b)
    k = _order(a, b)
    a, b = lift(a, k), lift(b, k)
    c0 = fn(a.c0, b.c0)
    c1 = _opt_add(None if a.c1 is None else fn(a.c1, b.c0),
                  None if b.c1 is None else fn(a.c0, b.c1))
    c2 = None
    if k >= 2:
        c2 = _opt_add(None if a.c2 is None else fn(a.c2, b.c0),
                      None if b.c2 is None else fn(a.c0, b.c2))
        if a.c1 is not None and b.c1 is not None:
            c2 = _opt_add(c2, ad.mul(2.0, fn(a.c1, b.c1)))
    return Jet(c0, c1, c2, order=k)


def unary(x, f0: Callable[[Var], Var], derivs: Callable[[Var, Var], tuple]):
    """Chain rule for a pointwise function.

    ``derivs(x0, y0)`` returns ``(f'(x0), f''(x0))``; either may be None for zero.
    """
    if not isinstance(x, Jet):
        return f0(x)
    y0 = f0(x.c0)
    if x.c1 is None and x.c2 is None:
        return Jet(y0, order=x.order)
    d1, d2 = derivs(x.c0, y0)
    c1 = None if x.c1 is None else ad.mul(d1, x.c1)
    c2 = None
    if x.order >= 2:
        if x.c2 is not None:
            c2 = ad.mul(d1, x.c2)
        if d2 is not None and x.c1 is not None:
            c2 = _opt_add(c2, ad.mul(d2, ad.mul(x.c1, x.c1)))
    return Jet(y0, c1, c2, order=x.order)


def _tanh_derivs(x0, y0):
    d1 = ad.sub(1.0, ad.mul(y0, y0))
    return d1, ad.mul(-2.0, ad.mul(y0, d1))


def _relu_derivs(x0, y0):
    return ad.const(ad.relu_mask(x0)), None


def tanh(x):
    return unary(x, ad.tanh, _tanh_derivs)


def relu(x):
    return unary(x, ad.relu, _relu_derivs)


def _seed(params: Mapping[str, object], direction: Mapping[str, object], order: int) -> dict:
    if set(direction) != set(params):
        raise ValueError(f"direction keys {sorted(direction)} do not match parameters {sorted(params)}")
    jets = {}
    for k, p in params.items():
        u = direction[k]
        u_val = u.value if isinstance(u, Var) else np.asarray(u, dtype=np.float64)
        p_shape = p.shape if hasattr(p, "shape") else np.shape(p)
        if u_val.shape != tuple(p_shape):
            raise ValueError(f"direction {k!r} has shape {u_val.shape}, parameter has {tuple(p_shape)}")
        jets[k] = Jet(p, u, None, order=order)
    return jets


def jvp(fn: Callable[[dict], object], params: Mapping[str, object], direction: Mapping[str, object]):
    """Return ``(g(w), g'(w)^T u)`` by dual-number propagation through ``fn``."""
    out = fn(_seed(params, direction, order=1))
    if not isinstance(out, Jet):
        v = ad.const(out)
        return v, ad.Var(np.zeros_like(v.value))
    return out.c0, out.c1 if out.c1 is not None else ad.Var(np.zeros_like(out.c0.value))


def hvp_quadratic(fn: Callable[[dict], object], params: Mapping[str, object],
                  direction: Mapping[str, object]):
    """Return ``(g(w), g'(w)^T u, u^T g''(w) u)`` by second-order propagation."""
    out = fn(_seed(params, direction, order=2))
    if not isinstance(out, Jet):
        v = ad.const(out)
        z = ad.Var(np.zeros_like(v.value))
        return v, z, z
    zero = lambda: ad.Var(np.zeros_like(out.c0.value))  # noqa: E731
    return (out.c0, out.c1 if out.c1 is not None else zero(),
            out.c2 if out.c2 is not None else zero())
