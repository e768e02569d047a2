"""Tangential differential calculus on the level sets of a bulk field.

All operators act pointwise on Cartesian gradients and the projector ``P``;
leading batch axes are arbitrary.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .levelset import LevelSetField, boundary_triad, levelset_derivatives, surface_frame
from .mesh import boundary_quadrature, element_geometry, iter_element_batches
from .reference import gauss_hex


@dataclass(frozen=True)
class SurfaceGradientBundle:
    directional: np.ndarray
    covariant: np.ndarray
    divergence: np.ndarray


def surface_gradient_scalar(grad_f: np.ndarray, P: np.ndarray) -> np.ndarray:
    """``P . grad f``."""
    return np.einsum("...ij,...j->...i", P, grad_f)


def surface_gradient_vector(grad_v: np.ndarray, P: np.ndarray) -> SurfaceGradientBundle:
    """Directional ``grad v . P`` and covariant ``P . grad v . P`` gradients.

    ``grad_v[..., i, j] = d v_i / d x_j``.
    """
    d = np.einsum("...ij,...jk->...ik", grad_v, P)
    c = np.einsum("...ij,...jk->...ik", P, d)
    return SurfaceGradientBundle(d, c, np.trace(d, axis1=-2, axis2=-1))


def surface_divergence_tensor(grad_T: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Row-wise surface divergence; ``grad_T[..., i, j, k] = d T_ij / d x_k``."""
    return np.einsum("...ijk,...kj->...i", grad_T, P)


def coarea_integral(
    field: LevelSetField, f: Callable[[np.ndarray], np.ndarray] | None = None, rule_points: int | None = None
) -> float:
    """Integral of ``f`` over all level sets, ``int_c int_{Gamma^c} f dA dc``.

    Evaluated in the bulk as ``int_Omega f |grad phi_h| dx``; ``f``
    defaults to one, which gives the area of the level sets integrated
    over the level-set interval.
    """
    mesh = field.mesh
    pts, w = gauss_hex(rule_points or mesh.geometry_order + 2)
    basis = mesh.reference.evaluate(pts, 1)
    total = 0.0
    for batch in iter_element_batches(mesh.n_elements, 256):
        geo = element_geometry(mesh, batch, basis)
        _, g1, _, _ = levelset_derivatives(field, batch, basis, geo, 1)
        wt = geo.detJ * w * np.linalg.norm(g1, axis=-1)
        total += float(np.sum(wt if f is None else f(geo.x) * wt))
    return total


AnalyticField = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class DivergenceCheck:
    lhs: float
    volume_term: float
    curvature_term: float
    boundary_term: float

    @property
    def rhs(self) -> float:
        return self.volume_term + self.curvature_term + self.boundary_term

    @property
    def residual(self) -> float:
        return abs(self.lhs - self.rhs)


def bulk_divergence_theorem_check(
    field: LevelSetField,
    v: AnalyticField,
    T: Callable[[np.ndarray, "object"], tuple[np.ndarray, np.ndarray]] | AnalyticField,
    rule_points: int | None = None,
    frame_dependent: bool = False,
) -> DivergenceCheck:
    """Evaluate both sides of the divergence theorem for all level sets.

    ``v(x)`` returns ``(v, grad v)``. ``T(x)`` returns ``(T, grad T)`` with
    ``grad T[..., i, j, k] = dT_ij/dx_k``; when ``frame_dependent`` is set,
    ``T(x, frame)`` is called instead so that tensors built from the
    discrete frame (for example ``P``) can be supplied with their exact
    discrete gradients.

    Level-set faces of the mesh contribute nothing because ``q . m``
    vanishes there.
    """
    mesh = field.mesh
    nq = rule_points or mesh.geometry_order + 2
    pts, w = gauss_hex(nq)
    order = 3 if frame_dependent else 2
    basis = mesh.reference.evaluate(pts, order)
    lhs = vol = curv = 0.0
    for batch in iter_element_batches(mesh.n_elements, 128):
        geo = element_geometry(mesh, batch, basis)
        _, g1, g2, g3 = levelset_derivatives(field, batch, basis, geo, order)
        fr = surface_frame(g1, g2, g3)
        vv, gv = v(geo.x)
        TT, gT = T(geo.x, fr) if frame_dependent else T(geo.x)
        wt = geo.detJ * w * fr.coarea
        div = surface_divergence_tensor(gT, fr.P)
        lhs += float(np.sum(np.einsum("...i,...i->...", vv, div) * wt))
        sg = surface_gradient_vector(gv, fr.P)
        vol -= float(np.sum(np.einsum("...ij,...ij->...", sg.directional, TT) * wt))
        Tn = np.einsum("...ij,...j->...i", TT, fr.n)
        curv += float(np.sum(fr.kappa * np.einsum("...i,...i->...", vv, Tn) * wt))

    bnd = 0.0
    skip = {mesh.tag_side(t) for t in mesh.levelset_tags}
    faces = mesh.boundary_faces[~np.isin(mesh.boundary_faces[:, 2], list(skip))]
    if faces.size:
        fq = boundary_quadrature(mesh, faces, nq)
        for lf in np.unique(faces[:, 1]):
            sel = np.flatnonzero(faces[:, 1] == lf)
            b = mesh.reference.evaluate(fq.xi[sel[0]], order)
            geo = element_geometry(mesh, faces[sel, 0], b)
            _, g1, g2, g3 = levelset_derivatives(field, faces[sel, 0], b, geo, order)
            fr = surface_frame(g1, g2, g3)
            tri = boundary_triad(fr.n, fq.m[sel])
            vv, _ = v(geo.x)
            TT, _ = T(geo.x, fr) if frame_dependent else T(geo.x)
            Tq = np.einsum("...ij,...j->...i", TT, tri.q)
            wt = fq.weights[sel] * tri.coarea_boundary_factor * fr.coarea
            bnd += float(np.sum(np.einsum("...i,...i->...", vv, Tq) * wt))
    return DivergenceCheck(lhs, vol, curv, bnd)
