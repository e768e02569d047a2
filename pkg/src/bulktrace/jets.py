"""First-order jets: arrays paired with their spatial gradient.

A :class:`Jet` carries a value ``v`` of shape ``(..., *s)`` and its
derivative ``d`` of shape ``(..., *s, 3)`` with respect to the Cartesian
coordinates. Products are formed with :func:`jeinsum`, which applies the
product rule so that derivatives of composite quantities (projectors,
stress resultants) need no hand-written chain rules.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_DERIV = "Z"  # einsum letter reserved for the derivative axis


@dataclass(frozen=True)
class Jet:
    v: np.ndarray
    d: np.ndarray

    @classmethod
    def constant(cls, v) -> "Jet":
        v = np.asarray(v, dtype=float)
        return cls(v, np.zeros(v.shape + (3,)))

    def __add__(self, other):
        other = _as_jet(other, self)
        return Jet(self.v + other.v, self.d + other.d)

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_jet(other, self)
        return Jet(self.v - other.v, self.d - other.d)

    def __rsub__(self, other):
        return _as_jet(other, self) - self

    def __neg__(self):
        return Jet(-self.v, -self.d)

    def __mul__(self, c):
        if isinstance(c, Jet):
            raise TypeError("use jeinsum for jet products")
        return Jet(self.v * c, self.d * c)

    __rmul__ = __mul__

    @property
    def T(self) -> "Jet":
        """Swap the last two value axes."""
        return Jet(np.swapaxes(self.v, -1, -2), np.swapaxes(self.d, -2, -3))


def _as_jet(x, like: Jet) -> Jet:
    if isinstance(x, Jet):
        return x
    x = np.broadcast_to(np.asarray(x, dtype=float), like.v.shape)
    return Jet.constant(np.array(x))


def jeinsum(subscripts: str, *ops) -> Jet:
    """Product-rule ``einsum`` over jets and plain arrays.

    ``subscripts`` uses explicit output and implicit leading batch axes,
    e.g. ``"ij,jk->ik"``; operands are expanded with ``...`` internally.
    Plain arrays are treated as constants.
    """
    lhs, out = subscripts.replace(" ", "").split("->")
    terms = lhs.split(",")
    if len(terms) != len(ops):
        raise ValueError("operand count does not match subscripts")
    if _DERIV in subscripts:
        raise ValueError(f"subscript letter {_DERIV!r} is reserved")
    vals = [op.v if isinstance(op, Jet) else np.asarray(op) for op in ops]
    spec = ",".join("..." + t for t in terms) + "->..." + out
    v = np.einsum(spec, *vals, optimize=True)
    d = np.zeros(v.shape + (3,))
    for i, op in enumerate(ops):
        if not isinstance(op, Jet):
            continue
        t = ["..." + s for s in terms]
        t[i] += _DERIV
        args = list(vals)
        args[i] = op.d
        d = d + np.einsum(",".join(t) + "->..." + out + _DERIV, *args, optimize=True)
    return Jet(v, d)


def jscalar(f, df, x: Jet) -> Jet:
    """Apply a scalar function elementwise: ``f(x)`` with derivative ``df(x) dx``."""
    return Jet(f(x.v), df(x.v)[..., None] * x.d)


def jsqrt(x: Jet) -> Jet:
    r = np.sqrt(x.v)
    return Jet(r, (0.5 / r)[..., None] * x.d)


def jinv(x: Jet) -> Jet:
    return Jet(1.0 / x.v, (-1.0 / x.v**2)[..., None] * x.d)


def jscale(s: Jet, x: Jet) -> Jet:
    """Scalar jet ``s`` (shape ``(...)``) times a tensor jet ``x``."""
    extra = x.v.ndim - s.v.ndim
    sv = s.v.reshape(s.v.shape + (1,) * extra)
    sd = s.d.reshape(s.v.shape + (1,) * extra + (3,))
    return Jet(sv * x.v, sv[..., None] * x.d + sd * x.v[..., None])
