"""Error measures, point sampling and convergence tables for solved cases."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .assembly import DofMap, LinearSystem, Loads, _eval_vector, _Spaces
from .jets import Jet
from .levelset import LevelSetField, frame_jets, levelset_derivatives, surface_frame
from .mesh import Mesh, element_geometry, field_derivatives, iter_element_batches
from .reference import build_reference_element, gauss_hex
from .shell import MaterialParams, constitutive_matrix, strain_operator, strong_form_residuals, tangent_basis

TABLE_COLUMNS = ("case", "h", "p", "dofs", "eps_res_F", "eps_res_M", "eps_energy", "u_ref_sample", "wall_s")


class PostprocError(ValueError):
    pass


class PointLocationError(PostprocError):
    pass


@dataclass(frozen=True)
class SolutionState:
    """Nodal displacement and raw difference vector on a level-set field."""

    field: LevelSetField
    dofmap: DofMap
    u: np.ndarray = field(repr=False)
    w: np.ndarray = field(repr=False)

    @property
    def mesh(self) -> Mesh:
        return self.field.mesh

    @classmethod
    def from_solution(cls, field: LevelSetField, system: LinearSystem, x: np.ndarray) -> "SolutionState":
        full = system.dofmap.expand(x)
        u, w = system.dofmap.split(full)
        return cls(field, system.dofmap, u, w)

    @classmethod
    def zero(cls, field: LevelSetField, dofmap: DofMap) -> "SolutionState":
        return cls(field, dofmap, np.zeros((dofmap.n_u, 3)), np.zeros((dofmap.n_w, 3)))

    def local_coefficients(self, elements: np.ndarray) -> np.ndarray:
        """Element coefficient vectors in the local dof layout of assembly."""
        uw = self.u[self.mesh.elements[elements]].reshape(len(elements), -1)
        ww = self.w[self.mesh.space(self.dofmap.order_w).elements[elements]].reshape(len(elements), -1)
        return np.hstack([uw, ww])


@dataclass
class ErrorReport:
    """Residual and energy error measures of one solution.

    ``eps_res_F`` and ``eps_res_M`` are normalised by the load integrals
    when the corresponding load is nonzero (denominators are then > 0).
    """

    eps_res_F: float
    eps_res_M: float
    denom_F: float
    denom_M: float
    energy: float
    stabilization_energy: float = 0.0
    eps_energy: float | None = None
    reference_energy: float | None = None
    element_res_F: np.ndarray | None = field(default=None, repr=False)
    element_res_M: np.ndarray | None = field(default=None, repr=False)

    @property
    def total_energy(self) -> float:
        """Energy of the discrete quadratic form, ``x^T K x / 2``."""
        return self.energy + self.stabilization_energy

    def with_reference(self, e_ref: float) -> "ErrorReport":
        """Attach a reference energy; the error uses :attr:`total_energy`."""
        self.reference_energy = float(e_ref)
        self.eps_energy = abs(float(e_ref) - self.total_energy)
        return self

    def to_dict(self) -> dict:
        return {
            "eps_res_F": self.eps_res_F,
            "eps_res_M": self.eps_res_M,
            "denom_F": self.denom_F,
            "denom_M": self.denom_M,
            "energy": self.energy,
            "stabilization_energy": self.stabilization_energy,
            "total_energy": self.total_energy,
            "eps_energy": self.eps_energy,
            "reference_energy": self.reference_energy,
        }


def _rule(state: SolutionState, rule_points: int | None):
    nq = rule_points or state.mesh.geometry_order + 1
    return gauss_hex(nq)


def residual_errors(
    state: SolutionState,
    material: MaterialParams,
    loads: Loads = Loads(),
    rule_points: int | None = None,
    batch: int = 16,
) -> tuple[float, float, float, float, np.ndarray, np.ndarray]:
    """Strong-form defects of force and moment equilibrium in the L2 sense.

    Returns ``(eps_F, eps_M, denom_F, denom_M, per_element_F, per_element_M)``
    where the per-element arrays hold the unnormalised squared integrals.
    """
    mesh = state.mesh
    if mesh.geometry_order < 2:
        raise PostprocError("residual errors need second derivatives; use element order p >= 2")
    pts, w = _rule(state, rule_points)
    basis = mesh.reference.evaluate(pts, 3)
    wbasis = build_reference_element(state.dofmap.order_w).evaluate(pts, 2)
    wconn = mesh.space(state.dofmap.order_w).elements
    eF = np.zeros(mesh.n_elements)
    eM = np.zeros(mesh.n_elements)
    dF = dM = 0.0
    for b in iter_element_batches(mesh.n_elements, batch):
        geo = element_geometry(mesh, b, basis)
        _, g1, g2, g3 = levelset_derivatives(state.field, b, basis, geo, 3)
        fj = frame_jets(g1, g2, g3)
        _, gu, ggu, _ = field_derivatives(geo, basis, state.u[mesh.elements[b]], 2)
        wv, gw, ggw, _ = field_derivatives(geo, wbasis, state.w[wconn[b]], 2)
        f = _eval_vector(loads.f, geo.x)
        c = _eval_vector(loads.c, geo.x)
        res = strong_form_residuals(fj, Jet(gu, ggu), Jet(wv, gw), Jet(gw, ggw), material, f, c)
        wt = geo.detJ * w * fj.norm.v
        eF[b] = np.einsum("eq,eqi,eqi->e", wt, res.r_F, res.r_F)
        eM[b] = np.einsum("eq,eqi,eqi->e", wt, res.r_M, res.r_M)
        dF += float(np.einsum("eq,eqi,eqi->", wt, f, f))
        dM += float(np.einsum("eq,eqi,eqi->", wt, c, c))
    sF, sM = float(eF.sum()), float(eM.sum())
    epsF = np.sqrt(sF / dF) if dF > 0 else np.sqrt(sF)
    epsM = np.sqrt(sM / dM) if dM > 0 else np.sqrt(sM)
    return float(epsF), float(epsM), dF, dM, eF, eM


def stored_energy(
    state: SolutionState,
    material: MaterialParams,
    rule_points: int | None = None,
    rho_w: float | None = None,
    batch: int = 16,
) -> tuple[float, float]:
    """Elastic energy of all shells and the stabilisation energy.

    The first value is one half of the membrane, bending and shear work
    integrated with the co-area weight; the second is
    ``rho_w / 2 * int (w . n)^2 |grad phi|``, which is part of the discrete
    quadratic form but not of the shell energy.
    """
    mesh = state.mesh
    pts, w = _rule(state, rule_points)
    spaces = _Spaces(mesh, state.dofmap.order_w, pts, 1)
    D = constitutive_matrix(material, rho_w)
    e = stab = 0.0
    for b in iter_element_batches(mesh.n_elements, batch):
        geo = element_geometry(mesh, b, spaces.geo_basis)
        _, g1, g2, _ = levelset_derivatives(state.field, b, spaces.geo_basis, geo, 2)
        fr = surface_frame(g1, g2)
        dBu = np.matmul(spaces.geo_basis.d1[None], geo.G)
        dBw = np.matmul(spaces.w_basis.d1[None], geo.G)
        e1, e2 = tangent_basis(fr.n)
        B = strain_operator(dBu, spaces.w_basis.values, dBw, fr, e1, e2)
        s = np.einsum("eqrd,ed->eqr", B, state.local_coefficients(b))
        wt = geo.detJ * w * fr.coarea
        Ds = np.einsum("rs,eqs->eqr", D, s)
        dens = s * Ds
        e += 0.5 * float(np.einsum("eq,eqr->", wt, dens[..., :8]))
        stab += 0.5 * float(np.einsum("eq,eq->", wt, dens[..., 8]))
    return e, stab


def error_report(
    state: SolutionState,
    material: MaterialParams,
    loads: Loads = Loads(),
    rule_points: int | None = None,
    reference_energy: float | None = None,
    rho_w: float | None = None,
) -> ErrorReport:
    eF, eM, dF, dM, elF, elM = residual_errors(state, material, loads, rule_points)
    e, s = stored_energy(state, material, rule_points, rho_w=rho_w)
    rep = ErrorReport(eF, eM, dF, dM, e, s, element_res_F=elF, element_res_M=elM)
    if reference_energy is not None:
        rep.with_reference(reference_energy)
    return rep


# --------------------------------------------------------------------------
# point sampling


@dataclass(frozen=True)
class PointSample:
    x: np.ndarray
    element: int
    xi: np.ndarray
    u: np.ndarray
    w: np.ndarray
    w_raw: np.ndarray
    phi: float


class PointLocator:
    """Inverse isoparametric mapping by Newton's method.

    Seeds come from the elements around the nearest mesh node; iteration is
    capped at ``max_iter`` steps per candidate element.
    """

    def __init__(self, mesh: Mesh, max_iter: int = 30, tol: float = 1e-12):
        self.mesh = mesh
        self.max_iter = max_iter
        self.tol = tol
        self.tree = cKDTree(mesh.nodes)
        flat = mesh.elements.ravel()
        order = np.argsort(flat, kind="stable")
        self._elem_of = order // mesh.elements.shape[1]
        self._start = np.searchsorted(flat[order], np.arange(mesh.n_nodes + 1))

    def _elements_around(self, node: int) -> np.ndarray:
        return np.unique(self._elem_of[self._start[node] : self._start[node + 1]])

    def locate(self, x: Sequence[float]) -> tuple[int, np.ndarray]:
        x = np.asarray(x, dtype=float)
        ref = self.mesh.reference
        h = self.mesh.element_size()
        _, nodes = self.tree.query(x, k=min(8, self.mesh.n_nodes))
        tried: set[int] = set()
        best = None
        for node in np.atleast_1d(nodes):
            for e in self._elements_around(int(node)):
                if e in tried:
                    continue
                tried.add(int(e))
                Xe = self.mesh.nodes[self.mesh.elements[e]]
                xi = np.zeros(3)
                for _ in range(self.max_iter):
                    b = ref.evaluate(xi[None], 1)
                    xe = b.values[0] @ Xe
                    J = np.einsum("sa,si->ia", b.d1[0], Xe)
                    r = x - xe
                    if np.linalg.norm(r) <= self.tol * max(h, 1.0):
                        break
                    try:
                        xi = xi + np.linalg.solve(J, r)
                    except np.linalg.LinAlgError:
                        break
                    if np.any(np.abs(xi) > 3.0):
                        break
                else:
                    b = ref.evaluate(xi[None], 0)
                    r = x - b.values[0] @ Xe
                if np.linalg.norm(r) <= 1e-9 * max(h, 1.0) and np.all(np.abs(xi) <= 1 + 1e-9):
                    return int(e), np.clip(xi, -1.0, 1.0)
                if best is None and np.linalg.norm(r) <= 1e-9 * max(h, 1.0):
                    best = (int(e), xi)
        raise PointLocationError(f"point {x} could not be located in the mesh")


def sample_point(state: SolutionState, x: Sequence[float], locator: PointLocator | None = None) -> PointSample:
    """Interpolated displacement and difference vector at a physical point."""
    mesh = state.mesh
    loc = locator or PointLocator(mesh)
    e, xi = loc.locate(x)
    b = mesh.reference.evaluate(xi[None], 2)
    bw = build_reference_element(state.dofmap.order_w).evaluate(xi[None], 0)
    el = np.array([e])
    geo = element_geometry(mesh, el, b)
    phi, g1, g2, _ = levelset_derivatives(state.field, el, b, geo, 2)
    fr = surface_frame(g1, g2)
    u = b.values[0] @ state.u[mesh.elements[e]]
    wr = bw.values[0] @ state.w[mesh.space(state.dofmap.order_w).elements[e]]
    return PointSample(np.asarray(x, float), e, xi, u, fr.P[0, 0] @ wr, wr, float(phi[0, 0]))


def sample_displacement(state: SolutionState, points, locator: PointLocator | None = None) -> np.ndarray:
    """Displacements at one point ``(3,)`` or a line of points ``(n, 3)``."""
    pts = np.asarray(points, dtype=float)
    loc = locator or PointLocator(state.mesh)
    if pts.ndim == 1:
        return sample_point(state, pts, loc).u
    return np.array([sample_point(state, p, loc).u for p in pts])


def design_value_search(abscissae: Sequence[float], values: Sequence[float], target: float) -> float:
    """Abscissa where sampled ``values`` reach ``target`` by linear interpolation.

    The bracketing interval and its neighbours must be monotone.
    """
    s = np.asarray(abscissae, dtype=float)
    v = np.asarray(values, dtype=float)
    if s.size < 2 or s.size != v.size:
        raise PostprocError("need at least two samples of equal length")
    order = np.argsort(s)
    s, v = s[order], v[order]
    hit = np.flatnonzero(v == target)
    if hit.size:
        return float(s[hit[0]])
    d = v - target
    cross = np.flatnonzero(d[:-1] * d[1:] < 0)
    if cross.size == 0:
        raise PostprocError(f"target {target} outside the sampled range [{v.min()}, {v.max()}]")
    k = int(cross[0])
    lo, hi = max(k - 1, 0), min(k + 2, s.size - 1)
    dv = np.diff(v[lo : hi + 1])
    if not (np.all(dv > 0) or np.all(dv < 0)):
        raise PostprocError("sampled values are not monotone near the target")
    t = (target - v[k]) / (v[k + 1] - v[k])
    return float(s[k] + t * (s[k + 1] - s[k]))


@dataclass(frozen=True)
class DesignValue:
    """Level value (and radius) where ``|u|`` along a line reaches a target."""

    level: float
    radius: float | None
    levels: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)


def design_value_on_line(state: SolutionState, points, target: float, center: Sequence[float] | None = None,
                         locator: PointLocator | None = None) -> DesignValue:
    """Sample ``|u|`` at ``points`` and interpolate the level where it equals ``target``.

    The abscissa of each sample is ``phi^h`` at the point. With ``center``
    the distances to it are interpolated the same way and returned as the
    geometric radius.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    loc = locator or PointLocator(state.mesh)
    samples = [sample_point(state, x, loc) for x in pts]
    levels = np.array([s.phi for s in samples])
    values = np.array([np.linalg.norm(s.u) for s in samples])
    level = design_value_search(levels, values, target)
    radius = None
    if center is not None:
        r = np.linalg.norm(pts - np.asarray(center, dtype=float), axis=1)
        radius = design_value_search(r, values, target)
    return DesignValue(level, radius, levels, values)


# --------------------------------------------------------------------------
# convergence tables


@dataclass
class ConvergenceTable:
    """Rows of a convergence study with least-squares log-log slopes."""

    rows: list[dict] = field(default_factory=list)
    k_last: int = 3

    def add(self, **row) -> None:
        unknown = set(row) - set(TABLE_COLUMNS)
        if unknown:
            raise PostprocError(f"unknown table columns {sorted(unknown)}")
        self.rows.append({c: row.get(c) for c in TABLE_COLUMNS})

    def series(self, case: str, p: int) -> list[dict]:
        rows = [r for r in self.rows if r["case"] == case and r["p"] == p]
        hs = [r["h"] for r in rows]
        if any(b >= a for a, b in zip(hs, hs[1:])):
            raise PostprocError(f"h must decrease strictly within series ({case}, p={p})")
        return rows

    def slope(self, case: str, p: int, kind: str, k: int | None = None) -> float:
        rows = self.series(case, p)
        k = k or self.k_last
        sel = [r for r in rows if r[kind] is not None][-k:]
        if len(sel) < 2:
            raise PostprocError("need at least two points for a slope")
        return fit_slope([r["h"] for r in sel], [r[kind] for r in sel])

    def slopes(self, kinds: Iterable[str] = ("eps_res_F", "eps_res_M", "eps_energy")) -> dict:
        out: dict = {}
        for case, p in sorted({(r["case"], r["p"]) for r in self.rows}):
            for kind in kinds:
                try:
                    out[f"{case}/p{p}/{kind}"] = self.slope(case, p, kind)
                except PostprocError:
                    pass
        return out

    def to_csv(self, include_time: bool = False) -> str:
        buf = io.StringIO()
        cols = [c for c in TABLE_COLUMNS if include_time or c != "wall_s"]
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(cols)
        for r in self.rows:
            wr.writerow([_fmt(r[c]) for c in cols])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "slopes": self.slopes(), "k_last": self.k_last}, indent=2, sort_keys=True)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def fit_slope(h: Sequence[float], err: Sequence[float]) -> float:
    """Least-squares slope of ``log err`` against ``log h``."""
    lh = np.log(np.asarray(h, dtype=float))
    le = np.log(np.asarray(err, dtype=float))
    A = np.vstack([lh, np.ones_like(lh)]).T
    return float(np.linalg.lstsq(A, le, rcond=None)[0][0])
