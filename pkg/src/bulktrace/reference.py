"""Reference Lagrange hexahedra with equally spaced nodes and Gauss rules."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial import polynomial as npoly

MAX_ORDER = 6
MAX_DERIVATIVE = 3


class ElementOrderError(ValueError):
    pass


@lru_cache(maxsize=None)
def lagrange_1d(p: int) -> tuple[np.ndarray, list[list[np.ndarray]]]:
    """Nodes and power-basis coefficients of the 1D Lagrange polynomials.

    Returns the ``p + 1`` equispaced nodes on [-1, 1] and, for every basis
    polynomial, its coefficient arrays for derivative orders 0..3.
    """
    nodes = np.linspace(-1.0, 1.0, p + 1)
    coeffs = []
    for i in range(p + 1):
        others = np.delete(nodes, i)
        c = npoly.polyfromroots(others) / np.prod(nodes[i] - others)
        derivs = [c]
        for _ in range(MAX_DERIVATIVE):
            derivs.append(npoly.polyder(derivs[-1]) if derivs[-1].size > 1 else np.zeros(1))
        coeffs.append(derivs)
    return nodes, coeffs


def eval_lagrange_1d(p: int, x: np.ndarray, order: int = MAX_DERIVATIVE) -> np.ndarray:
    """Values and derivatives of all 1D basis polynomials.

    Returns an array of shape ``(order + 1, len(x), p + 1)``.
    """
    _, coeffs = lagrange_1d(p)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty((order + 1, x.size, p + 1))
    for i, derivs in enumerate(coeffs):
        for d in range(order + 1):
            out[d, :, i] = npoly.polyval(x, derivs[d])
    return out


@lru_cache(maxsize=None)
def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(n)


def gauss_hex(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Legendre rule with ``n`` points per direction on [-1,1]^3.

    Points are ordered with the first coordinate running fastest.
    """
    x, w = gauss_legendre(n)
    k, j, i = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    pts = np.stack([x[i], x[j], x[k]], axis=1)
    return pts, w[i] * w[j] * w[k]


def gauss_quad(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = gauss_legendre(n)
    j, i = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    i, j = i.ravel(), j.ravel()
    return np.stack([x[i], x[j]], axis=1), w[i] * w[j]


@dataclass(frozen=True)
class BasisEval:
    """Basis values and reference derivatives at a set of points.

    ``d1[q, j, a]``, ``d2[q, j, a, b]`` and ``d3[q, j, a, b, c]`` hold partial
    derivatives with respect to the reference coordinates.
    """

    values: np.ndarray
    d1: np.ndarray | None = None
    d2: np.ndarray | None = None
    d3: np.ndarray | None = None

    @property
    def max_order(self) -> int:
        return sum(d is not None for d in (self.d1, self.d2, self.d3))


@dataclass(frozen=True)
class ReferenceElement:
    """Tensor-product Lagrange hexahedron of order ``p`` on [-1, 1]^3.

    Local node ``i + (p+1)*(j + (p+1)*k)`` sits at
    ``(x_i, x_j, x_k)`` with ``x`` the equispaced 1D nodes.
    """

    order: int
    nodes: np.ndarray = field(repr=False)
    ijk: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return (self.order + 1) ** 3

    def evaluate(self, xi: np.ndarray, max_order: int = 1) -> BasisEval:
        """Evaluate the basis at reference points ``xi`` of shape (nq, 3)."""
        if not 0 <= max_order <= MAX_DERIVATIVE:
            raise ValueError(f"derivative order {max_order} not in 0..{MAX_DERIVATIVE}")
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        p = self.order
        tabs = [eval_lagrange_1d(p, xi[:, a], max_order) for a in range(3)]
        i, j, k = self.ijk.T

        def prod(d):
            return tabs[0][d[0]][:, i] * tabs[1][d[1]][:, j] * tabs[2][d[2]][:, k]

        nq, nb = xi.shape[0], self.n_nodes
        values = prod((0, 0, 0))
        d1 = d2 = d3 = None
        if max_order >= 1:
            d1 = np.empty((nq, nb, 3))
            for a in range(3):
                d1[:, :, a] = prod(np.eye(3, dtype=int)[a])
        if max_order >= 2:
            d2 = np.empty((nq, nb, 3, 3))
            for a in range(3):
                for b in range(a, 3):
                    d = np.zeros(3, dtype=int)
                    d[a] += 1
                    d[b] += 1
                    d2[:, :, a, b] = d2[:, :, b, a] = prod(d)
        if max_order >= 3:
            d3 = np.empty((nq, nb, 3, 3, 3))
            for a in range(3):
                for b in range(a, 3):
                    for c in range(b, 3):
                        d = np.zeros(3, dtype=int)
                        d[a] += 1
                        d[b] += 1
                        d[c] += 1
                        v = prod(d)
                        for perm in {(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)}:
                            d3[(slice(None), slice(None)) + perm] = v
        return BasisEval(values, d1, d2, d3)


@lru_cache(maxsize=None)
def build_reference_element(p: int) -> ReferenceElement:
    """Reference hexahedron of order ``p`` (1 <= p <= 6)."""
    if not isinstance(p, (int, np.integer)) or not 1 <= p <= MAX_ORDER:
        raise ElementOrderError(f"element order must be an integer in 1..{MAX_ORDER}, got {p!r}")
    p = int(p)
    x = np.linspace(-1.0, 1.0, p + 1)
    k, j, i = np.meshgrid(np.arange(p + 1), np.arange(p + 1), np.arange(p + 1), indexing="ij")
    ijk = np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)
    nodes = x[ijk]
    ijk.setflags(write=False)
    nodes.setflags(write=False)
    return ReferenceElement(p, nodes, ijk)


# Local faces: (reference axis, side); side -1 or +1.
FACES = ((0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1))


def face_points(face: int, pts2d: np.ndarray) -> np.ndarray:
    """Embed 2D rule points on local face ``face`` of the reference cube."""
    axis, side = FACES[face]
    others = [a for a in range(3) if a != axis]
    xi = np.empty((pts2d.shape[0], 3))
    xi[:, axis] = side
    xi[:, others[0]] = pts2d[:, 0]
    xi[:, others[1]] = pts2d[:, 1]
    return xi


def face_node_mask(p: int, face: int) -> np.ndarray:
    axis, side = FACES[face]
    ijk = build_reference_element(p).ijk
    return ijk[:, axis] == (0 if side < 0 else p)
