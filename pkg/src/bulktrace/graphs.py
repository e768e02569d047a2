"""Height functions ``g(x, y)`` used by graph-type domains and level sets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class Graph:
    """Height function with first and second derivatives.

    ``grad`` returns ``(g_x, g_y)``; ``hess`` returns ``(g_xx, g_xy, g_yy)``.
    """

    name: str
    value: Callable
    grad: Callable
    hess: Callable


def _flat():
    z = lambda x, y: np.zeros_like(np.asarray(x, dtype=float) + y)
    return Graph("flat", z, lambda x, y: (z(x, y), z(x, y)), lambda x, y: (z(x, y),) * 3)


def _hypar():
    return Graph(
        "hypar",
        lambda x, y: x * x - y * y,
        lambda x, y: (2.0 * x, -2.0 * y),
        lambda x, y: (2.0 + 0 * x * y, 0.0 * x * y, -2.0 + 0 * x * y),
    )


def _trig():
    def hess(x, y):
        s, c = np.sin(0.25 * x * y), np.cos(0.25 * x * y)
        return -0.125 * y * y * s, 0.5 * c - 0.125 * x * y * s, -0.125 * x * x * s

    return Graph(
        "trig",
        lambda x, y: 2.0 * np.sin(0.25 * x * y),
        lambda x, y: (0.5 * y * np.cos(0.25 * x * y), 0.5 * x * np.cos(0.25 * x * y)),
        hess,
    )


GRAPHS = {g.name: g for g in (_flat(), _hypar(), _trig())}


def get_graph(name: str) -> Graph:
    try:
        return GRAPHS[name]
    except KeyError:
        raise ValueError(f"unknown graph {name!r}; expected one of {sorted(GRAPHS)}") from None
