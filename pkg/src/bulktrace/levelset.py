"""Interpolated level-set fields and the geometry of their level sets.

The level-set function is replaced by its Lagrange interpolant on the bulk
mesh; normals, projectors and the Weingarten map are derived from the
interpolant's derivatives at evaluation points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .graphs import get_graph
from .jets import Jet, jeinsum, jinv, jscale, jsqrt
from .mesh import Mesh, MeshQualityError, element_geometry, field_derivatives, iter_element_batches
from .reference import gauss_hex

EPS_GRAD_REL = 1e-8


class LevelSetError(ValueError):
    pass


class DegenerateTriadError(LevelSetError):
    pass


# --------------------------------------------------------------------------
# analytic expressions


@dataclass(frozen=True)
class LevelSetExpression:
    """Analytic level-set function with gradient and Hessian.

    kinds
    -----
    ``plane``      ``phi = a . x - b`` (params ``normal``, ``offset``)
    ``sphere``     ``phi = |x - c| - R`` (``center``, ``radius``)
    ``cylinder``   distance to an axis minus ``radius`` (``point``, ``axis``)
    ``graph``      ``phi = z - g(x, y)`` (``graph`` name)
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("plane", "sphere", "cylinder", "graph"):
            raise LevelSetError(f"unknown level-set kind {self.kind!r}")
        if self.kind == "graph":
            try:
                get_graph(self.params.get("graph", "flat"))
            except ValueError as exc:
                raise LevelSetError(str(exc)) from None

    def _p(self, key, default):
        return np.asarray(self.params.get(key, default), dtype=float)

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        k = self.kind
        if k == "plane":
            return x @ self._p("normal", (0, 0, 1)) - float(self._p("offset", 0.0))
        if k == "sphere":
            return np.linalg.norm(x - self._p("center", (0, 0, 0)), axis=-1) - float(self._p("radius", 0.0))
        if k == "cylinder":
            y, a = self._cyl(x)
            return np.linalg.norm(y, axis=-1) - float(self._p("radius", 0.0))
        g = get_graph(self.params.get("graph", "flat"))
        return x[..., 2] - g.value(x[..., 0], x[..., 1])

    def _cyl(self, x):
        a = self._p("axis", (0, 1, 0))
        a = a / np.linalg.norm(a)
        y = x - self._p("point", (0, 0, 0))
        return y - (y @ a)[..., None] * a, a

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        k = self.kind
        if k == "plane":
            return np.broadcast_to(self._p("normal", (0, 0, 1)), x.shape).copy()
        if k == "sphere":
            r = x - self._p("center", (0, 0, 0))
            return r / np.linalg.norm(r, axis=-1, keepdims=True)
        if k == "cylinder":
            y, _ = self._cyl(x)
            return y / np.linalg.norm(y, axis=-1, keepdims=True)
        g = get_graph(self.params.get("graph", "flat"))
        gx, gy = g.grad(x[..., 0], x[..., 1])
        return np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)

    def hessian(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        k = self.kind
        eye = np.eye(3)
        if k == "plane":
            return np.zeros(x.shape + (3,))
        if k == "sphere":
            r = x - self._p("center", (0, 0, 0))
            rn = np.linalg.norm(r, axis=-1)[..., None, None]
            e = r[..., :, None] / rn
            return (eye - e * np.swapaxes(e, -1, -2)) / rn
        if k == "cylinder":
            y, a = self._cyl(x)
            rn = np.linalg.norm(y, axis=-1)[..., None, None]
            e = y[..., :, None] / rn
            return (eye - np.outer(a, a) - e * np.swapaxes(e, -1, -2)) / rn
        g = get_graph(self.params.get("graph", "flat"))
        gxx, gxy, gyy = g.hess(x[..., 0], x[..., 1])
        h = np.zeros(x.shape + (3,))
        h[..., 0, 0], h[..., 0, 1], h[..., 1, 0], h[..., 1, 1] = -gxx, -gxy, -gxy, -gyy
        return h


# --------------------------------------------------------------------------
# interpolated field


@dataclass(frozen=True)
class LevelSetField:
    """Nodal interpolant of a level-set function on a bulk mesh."""

    mesh: Mesh
    values: np.ndarray = field(repr=False)
    interval: tuple[float, float]
    expression: LevelSetExpression | None = None

    def __post_init__(self):
        if not self.interval[0] < self.interval[1]:
            raise LevelSetError(f"need phi_min < phi_max, got {self.interval}")
        if self.values.shape != (self.mesh.n_nodes,):
            raise LevelSetError("one nodal value per mesh node required")

    @property
    def eps_grad(self) -> float:
        return EPS_GRAD_REL * self.mesh.characteristic_size()

    def element_values(self, elements: np.ndarray) -> np.ndarray:
        return self.values[self.mesh.elements[elements]][..., None]


def interpolate_levelset(
    mesh: Mesh, expression: LevelSetExpression, interval: Sequence[float] | None = None
) -> LevelSetField:
    """Sample ``expression`` at the mesh nodes."""
    vals = np.asarray(expression.value(mesh.nodes), dtype=float)
    vals.setflags(write=False)
    if interval is None:
        interval = (float(vals.min()), float(vals.max()))
    return LevelSetField(mesh, vals, (float(interval[0]), float(interval[1])), expression)


def levelset_derivatives(field: LevelSetField, elements: np.ndarray, basis, geo, order: int):
    """``(phi, grad, hess, third)`` of the interpolant at all points of a batch.

    Unrequested orders are returned as ``None``.
    """
    f, g1, g2, g3 = field_derivatives(geo, basis, field.element_values(elements), order)
    return (
        f[..., 0],
        g1[:, :, 0],
        None if g2 is None else g2[:, :, 0],
        None if g3 is None else g3[:, :, 0],
    )


def evaluate_levelset(field: LevelSetField, element: int, xi: Sequence[float], order: int = 1):
    """Interpolant and its physical derivatives up to ``order`` at one point."""
    if not 0 <= order <= 3:
        raise LevelSetError(f"derivative order {order} not available (max 3)")
    xi = np.asarray(xi, dtype=float).reshape(1, 3)
    mesh = field.mesh
    basis = mesh.reference.evaluate(xi, max(order, 1))
    el = np.array([element])
    geo = element_geometry(mesh, el, basis)
    if geo.detJ[0, 0] <= 0:
        raise MeshQualityError(f"non-positive Jacobian in element {element}")
    phi, g1, g2, g3 = levelset_derivatives(field, el, basis, geo, max(order, 1))
    out = [float(phi[0, 0])]
    for k, g in enumerate((g1, g2, g3), start=1):
        if k <= order:
            out.append(g[0, 0])
    return tuple(out)


# --------------------------------------------------------------------------
# geometry of the level sets


@dataclass(frozen=True)
class SurfaceFrame:
    """Geometric quantities of the level sets at a set of points.

    ``dP[..., i, j, k]`` and ``dH[..., i, j, k]`` hold the Cartesian
    derivatives ``d/dx_k`` of ``P_ij`` and ``H_ij``; they are present only
    when third derivatives of the level-set function were supplied.
    """

    n: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    kappa: np.ndarray
    coarea: np.ndarray
    grad_n: np.ndarray
    dP: np.ndarray | None = None
    dH: np.ndarray | None = None

    @property
    def dirP(self) -> np.ndarray | None:
        """Directional surface derivatives of P: ``dP . P`` on the last axis."""
        return None if self.dP is None else np.einsum("...ijk,...kl->...ijl", self.dP, self.P)

    @property
    def dirH(self) -> np.ndarray | None:
        return None if self.dH is None else np.einsum("...ijk,...kl->...ijl", self.dH, self.P)


@dataclass(frozen=True)
class FrameJets:
    norm: Jet
    n: Jet
    P: Jet
    grad_n: Jet
    H: Jet


def frame_jets(grad: np.ndarray, hess: np.ndarray, third: np.ndarray) -> FrameJets:
    """Normal, projector and Weingarten map together with their gradients."""
    g = Jet(grad, hess)
    hs = Jet(hess, third)
    norm = jsqrt(jeinsum("i,i->", g, g))
    inv = jinv(norm)
    n = jscale(inv, g)
    eye = np.broadcast_to(np.eye(3), grad.shape[:-1] + (3, 3))
    P = Jet.constant(eye) - jeinsum("i,j->ij", n, n)
    grad_n = jscale(inv, jeinsum("ij,jk->ik", P, hs))
    H = jeinsum("ij,jk->ik", grad_n, P)
    return FrameJets(norm, n, P, grad_n, H)


def surface_frame(grad, hess, third=None, eps_grad: float = 0.0) -> SurfaceFrame:
    """Surface frame from derivatives of the level-set function.

    Works on any leading batch shape. Raises :class:`LevelSetError` where
    the gradient norm does not exceed ``eps_grad``.
    """
    grad = np.asarray(grad, dtype=float)
    hess = np.asarray(hess, dtype=float)
    norm = np.linalg.norm(grad, axis=-1)
    if np.any(~(norm > eps_grad)):
        raise LevelSetError(f"vanishing level-set gradient (min |grad phi| = {norm.min():.3e})")
    if third is not None:
        fj = frame_jets(grad, hess, np.asarray(third, dtype=float))
        n, P, H, gn = fj.n.v, fj.P.v, fj.H.v, fj.grad_n.v
        dP, dH = fj.P.d, fj.H.d
    else:
        n = grad / norm[..., None]
        P = np.eye(3) - n[..., :, None] * n[..., None, :]
        gn = np.einsum("...ij,...jk->...ik", P, hess) / norm[..., None, None]
        H = np.einsum("...ij,...jk->...ik", gn, P)
        dP = dH = None
    Q = n[..., :, None] * n[..., None, :]
    kappa = np.trace(H, axis1=-2, axis2=-1)
    return SurfaceFrame(n, P, Q, H, kappa, norm, gn, dP, dH)


@dataclass(frozen=True)
class BoundaryTriad:
    t: np.ndarray
    q: np.ndarray
    m: np.ndarray
    coarea_boundary_factor: np.ndarray


def boundary_triad(n: np.ndarray, m: np.ndarray, tol: float = 1e-10) -> BoundaryTriad:
    """Tangent ``t = m x n`` and co-normal ``q = n x t`` (both normalised)."""
    n = np.asarray(n, dtype=float)
    m = np.asarray(m, dtype=float)
    t = np.cross(m, n)
    tn = np.linalg.norm(t, axis=-1)
    if np.any(tn <= tol):
        raise DegenerateTriadError("boundary normal parallel to level-set normal")
    t = t / tn[..., None]
    q = np.cross(n, t)
    q = q / np.linalg.norm(q, axis=-1)[..., None]
    return BoundaryTriad(t, q, m, np.einsum("...i,...i->...", q, m))


# --------------------------------------------------------------------------
# validity


@dataclass(frozen=True)
class FieldDiagnostics:
    min_grad: float
    max_grad: float
    min_detJ: float
    phi_min: float
    phi_max: float
    interior_extremum: bool
    critical_points: list
    valid: bool
    messages: list


def _newton_critical_point(field, element, xi0, iters=20):
    xi = np.array(xi0, dtype=float)
    for _ in range(iters):
        try:
            _, g, h = evaluate_levelset(field, element, np.clip(xi, -1, 1), 2)
        except MeshQualityError:
            return None
        mesh = field.mesh
        pd = mesh.reference.evaluate(np.clip(xi, -1, 1)[None], 1)
        geo = element_geometry(mesh, np.array([element]), pd)
        # Newton on grad(phi)(xi) = 0: d grad / d xi = hess . J
        A = h @ geo.J[0, 0]
        # least squares also handles degenerate (line or plane) critical sets
        step = np.linalg.lstsq(A, -g, rcond=1e-12)[0]
        xi = xi + step
        if np.any(np.abs(xi) > 1.5):
            return None
        if np.linalg.norm(step) < 1e-12:
            break
    if np.all(np.abs(xi) <= 1 + 1e-9):
        _, g = evaluate_levelset(field, element, np.clip(xi, -1, 1), 1)
        if np.linalg.norm(g) < 1e-8 * max(1.0, np.abs(h).max()):
            return xi
    return None


def validate_field(field: LevelSetField, rule_points: int | None = None) -> FieldDiagnostics:
    """Check that every level set in the domain is a regular surface.

    Flags the field invalid when the gradient (nearly) vanishes at a
    quadrature point, when a local extremum of the nodal values lies in the
    interior, or when a Newton search locates a critical point of the
    interpolant inside an element.
    """
    mesh = field.mesh
    nq = rule_points or mesh.geometry_order + 1
    pts, _ = gauss_hex(nq)
    basis = mesh.reference.evaluate(pts, 2)
    nbasis = mesh.reference.evaluate(mesh.reference.nodes, 1)
    gmin, gmax, jmin = np.inf, 0.0, np.inf
    fmin, fmax = np.inf, -np.inf
    per_elem_min = np.empty(mesh.n_elements)
    arg = np.empty(mesh.n_elements, dtype=int)
    straddle = np.zeros(mesh.n_elements, dtype=bool)
    for batch in iter_element_batches(mesh.n_elements, 256):
        geo = element_geometry(mesh, batch, basis)
        phi, g1, _, _ = levelset_derivatives(field, batch, basis, geo, 1)
        gn = np.linalg.norm(g1, axis=-1)
        gmin, gmax = min(gmin, gn.min()), max(gmax, gn.max())
        jmin = min(jmin, geo.detJ.min())
        fmin, fmax = min(fmin, phi.min()), max(fmax, phi.max())
        per_elem_min[batch] = gn.min(axis=1)
        arg[batch] = gn.argmin(axis=1)
        # a zero of grad phi_h needs every component to change sign (or vanish) in the element
        # (sampled at the quadrature points and at the element nodes)
        _, g1n, _, _ = levelset_derivatives(field, batch, nbasis, element_geometry(mesh, batch, nbasis), 1)
        gs = np.concatenate([g1, g1n], axis=1)
        tol_z = 1e-12 * max(1.0, float(gn.max()))
        straddle[batch] = np.all((gs.min(axis=1) <= tol_z) & (gs.max(axis=1) >= -tol_z), axis=-1)

    msgs = []
    eps = field.eps_grad
    valid = True
    if gmin < eps:
        valid = False
        msgs.append(f"min |grad phi_h| = {gmin:.3e} below eps_grad = {eps:.3e}")

    bnodes = np.unique(np.concatenate([mesh.node_set(t) for t in mesh.boundary_tags]))
    inner = np.setdiff1d(np.arange(mesh.n_nodes), bnodes)
    v = field.values
    tol = 1e-12 * max(1.0, np.abs(v).max())
    extremum = bool(inner.size and (v[inner].min() < v[bnodes].min() - tol or v[inner].max() > v[bnodes].max() + tol))
    if extremum:
        valid = False
        msgs.append("interior local extremum of phi: some level sets are not surfaces with boundary")

    crit = []
    med = float(np.median(per_elem_min))
    for e in np.flatnonzero((per_elem_min < 0.1 * med) | straddle):
        xi = _newton_critical_point(field, int(e), pts[arg[e]])
        if xi is not None:
            crit.append((int(e), xi.tolist()))
    if crit:
        valid = False
        msgs.append(f"{len(crit)} critical point(s) of phi_h inside elements")
    if jmin <= 0:
        valid = False
        msgs.append("non-positive Jacobian")
    return FieldDiagnostics(float(gmin), float(gmax), float(jmin), float(fmin), float(fmax), extremum, crit, valid, msgs)
