"""Discrete weak form of the shells on all level sets.

The displacement ``u`` uses the Lagrange space of the mesh order ``p``; the
raw difference vector uses order ``p - 1`` on the same elements. Global
unknowns are numbered node by node (displacement nodes first), three
components per node, skipping strongly constrained components.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np
import scipy.sparse as sp

from .levelset import LevelSetError, LevelSetField, boundary_triad, levelset_derivatives, surface_frame
from .mesh import Mesh, boundary_quadrature, element_geometry, iter_element_batches
from .reference import build_reference_element, gauss_hex
from .shell import MaterialParams, N_ROWS, SQRT2, constitutive_matrix, strain_operator, tangent_basis

log = logging.getLogger(__name__)

VectorData = Sequence[float] | Callable[[np.ndarray], np.ndarray]
BCKind = Literal[
    "strong_dirichlet_u", "strong_dirichlet_w", "neumann_traction", "neumann_moment", "nitsche_directional"
]
_AXES = {"x": 0, "y": 1, "z": 2}


class AssemblyError(ValueError):
    pass


class ConstraintConflictError(AssemblyError):
    pass


def _eval_vector(data: VectorData | None, x: np.ndarray) -> np.ndarray:
    if data is None:
        return np.zeros(x.shape)
    if callable(data):
        return np.broadcast_to(np.asarray(data(x), dtype=float), x.shape)
    return np.broadcast_to(np.asarray(data, dtype=float), x.shape)


@dataclass(frozen=True)
class BoundaryCondition:
    """Boundary condition on one tagged region of the bulk boundary.

    ``components`` selects Cartesian components (``"x"``, ``"y"``, ``"z"``)
    for strong constraints and local-triad directions (``"t"``, ``"q"``,
    ``"n"``) for Nitsche constraints. ``target`` picks the constrained field
    of a Nitsche condition (``"u"`` or ``"w"``).
    """

    region: str
    kind: BCKind
    components: tuple[str, ...] | None = None
    value: VectorData | None = None
    target: Literal["u", "w"] = "u"
    line: tuple[tuple[float, float, float], tuple[float, float, float]] | None = None

    def __post_init__(self):
        if self.components is None:
            default = ("t", "q", "n") if self.kind == "nitsche_directional" else ("x", "y", "z")
            if self.kind == "nitsche_directional" and self.target == "w":
                default = ("t", "q")
            object.__setattr__(self, "components", default)
        if self.kind in ("strong_dirichlet_u", "strong_dirichlet_w"):
            bad = set(self.components) - set(_AXES)
            if bad:
                raise AssemblyError(f"strong constraint components must be among x/y/z, got {sorted(bad)}")
        if self.kind == "nitsche_directional":
            bad = set(self.components) - {"t", "q", "n"}
            if bad or not self.components:
                raise AssemblyError(f"Nitsche directions must be among t/q/n, got {self.components}")
            if self.target == "w" and "n" in self.components:
                raise AssemblyError("the difference vector is tangential; its n-component cannot be constrained")

    @property
    def field(self) -> str:
        if self.kind in ("strong_dirichlet_u", "neumann_traction"):
            return "u"
        if self.kind in ("strong_dirichlet_w", "neumann_moment"):
            return "w"
        return self.target


@dataclass(frozen=True)
class Loads:
    """Body force ``f`` and distributed moment ``c`` per unit shell area."""

    f: VectorData | None = None
    c: VectorData | None = None


# --------------------------------------------------------------------------
# degrees of freedom


@dataclass(frozen=True)
class DofMap:
    """Node-major numbering of the displacement and difference-vector dofs.

    ``free[node, comp]`` marks unconstrained components on the combined node
    list (``n_u`` displacement nodes followed by ``n_w`` difference-vector
    nodes); ``prescribed`` holds values of constrained components.
    """

    order_u: int
    order_w: int
    n_u: int
    n_w: int
    free: np.ndarray = field(repr=False)
    prescribed: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.n_u + self.n_w

    @property
    def n_dofs(self) -> int:
        return 3 * self.n_nodes

    @property
    def n_free(self) -> int:
        return int(self.free.sum())

    @property
    def n_constrained(self) -> int:
        return self.n_dofs - self.n_free

    @property
    def reduced(self) -> np.ndarray:
        """Map from full dof index ``3 node + comp`` to free index (or -1)."""
        f = self.free.ravel()
        r = np.cumsum(f) - 1
        r[~f] = -1
        return r

    @property
    def local_index(self) -> np.ndarray:
        """Per-node position of each free component among the node's free ones."""
        fi = np.cumsum(self.free, axis=1) - 1
        fi[~self.free] = -1
        return fi

    @property
    def node_offset(self) -> np.ndarray:
        nf = self.free.sum(axis=1)
        return np.concatenate([[0], np.cumsum(nf)[:-1]])

    def expand(self, x_free: np.ndarray) -> np.ndarray:
        """Full nodal array ``(n_nodes, 3)`` from a reduced solution."""
        out = self.prescribed.copy()
        out[self.free] = x_free
        return out

    def split(self, full: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(u nodal (n_u, 3), raw difference vector nodal (n_w, 3))``."""
        return full[: self.n_u], full[self.n_u :]

    def mark_constrained(self, nodes: np.ndarray, comps: Sequence[int], values: np.ndarray) -> None:
        for k, c in enumerate(comps):
            prev_fixed = ~self.free[nodes, c]
            clash = prev_fixed & ~np.isclose(self.prescribed[nodes, c], values[:, k], rtol=1e-12, atol=1e-300)
            if np.any(clash):
                raise ConstraintConflictError("conflicting prescribed values on a doubly constrained dof")
            self.free[nodes, c] = False
            self.prescribed[nodes, c] = values[:, k]


def space_coordinates(mesh: Mesh, order: int) -> np.ndarray:
    """Physical coordinates of the nodes of the order-``order`` space."""
    spc = mesh.space(order)
    ref = build_reference_element(order)
    basis = mesh.reference.evaluate(ref.nodes, 0)
    X = np.empty((spc.n_nodes, 3))
    for batch in iter_element_batches(mesh.n_elements, 512):
        Xe = mesh.nodes[mesh.elements[batch]]
        X[spc.elements[batch]] = np.einsum("qs,esi->eqi", basis.values, Xe)
    return X


def _on_line(x: np.ndarray, line, tol: float) -> np.ndarray:
    p0 = np.asarray(line[0], float)
    d = np.asarray(line[1], float)
    d = d / np.linalg.norm(d)
    r = x - p0
    r = r - np.einsum("ni,i->n", r, d)[:, None] * d
    return np.linalg.norm(r, axis=1) <= tol


def build_dofmap(mesh: Mesh, order_w: int, bcs: Sequence[BoundaryCondition] = ()) -> DofMap:
    n_u = mesh.n_nodes
    n_w = mesh.space(order_w).n_nodes
    dm = DofMap(mesh.geometry_order, order_w, n_u, n_w, np.ones((n_u + n_w, 3), bool), np.zeros((n_u + n_w, 3)))
    coords_w = None
    for bc in bcs:
        if bc.kind not in ("strong_dirichlet_u", "strong_dirichlet_w"):
            continue
        comps = [_AXES[c] for c in bc.components]
        if bc.kind == "strong_dirichlet_u":
            nodes = mesh.node_set(bc.region)
            x = mesh.nodes[nodes]
            gidx = nodes
        else:
            nodes = mesh.node_set(bc.region, order_w)
            if coords_w is None:
                coords_w = space_coordinates(mesh, order_w)
            x = coords_w[nodes]
            gidx = nodes + n_u
        if bc.line is not None:
            on = _on_line(x, bc.line, 1e-8 * mesh.characteristic_size())
            if not np.any(on):
                raise AssemblyError(f"no node of region {bc.region!r} lies on the line {bc.line}")
            x, gidx = x[on], gidx[on]
        vals = _eval_vector(bc.value, x)[:, comps]
        dm.mark_constrained(gidx, comps, vals)
    return dm


# --------------------------------------------------------------------------
# sparsity and scatter


def _range_concat(starts: np.ndarray, lens: np.ndarray) -> np.ndarray:
    lens = lens.astype(np.int64)
    total = int(lens.sum())
    if total == 0:
        return np.zeros(0, np.int64)
    ends = np.cumsum(lens)
    shift = np.repeat(starts.astype(np.int64) - (ends - lens), lens)
    return shift + np.arange(total, dtype=np.int64)


class SparsityPattern:
    """CSR structure of the reduced system and element scatter positions.

    With ``storage="upper"`` only entries with row <= column are kept,
    which halves the memory of symmetric systems.
    """

    def __init__(self, conn: np.ndarray, dofmap: DofMap, storage: Literal["upper", "full"]):
        self.storage = storage
        N = dofmap.n_nodes
        self.N = N
        ne, nl = conn.shape
        inc = sp.csr_matrix(
            (np.ones(conn.size, np.float32), conn.ravel(), np.arange(0, conn.size + 1, nl)), shape=(ne, N)
        )
        A = (inc.T @ inc).tocsr()
        if storage == "upper":
            A = sp.triu(A, format="csr")
        A.sort_indices()
        nptr = A.indptr.astype(np.int64)
        nidx = A.indices.astype(np.int64)
        del A, inc
        nf = dofmap.free.sum(axis=1).astype(np.int64)
        fi = dofmap.local_index
        off = dofmap.node_offset
        rowlen_n = np.diff(nptr)
        rows_n = np.repeat(np.arange(N, dtype=np.int64), rowlen_n)
        self.keys = rows_n * N + nidx
        del rows_n
        cums = np.cumsum(nf[nidx])
        start_cum = np.concatenate([[0], cums])[nptr[:-1]]
        S_total = np.concatenate([[0], cums])[nptr[1:]] - start_cum
        self.S = (cums - nf[nidx] - np.repeat(start_cum, rowlen_n)).astype(np.int64)
        del cums
        R = _range_concat(off[nidx], nf[nidx]).astype(np.int32)
        Rstart = np.concatenate([[0], np.cumsum(S_total)[:-1]])
        fnode, fcomp = np.nonzero(dofmap.free)
        skip = fi[fnode, fcomp] if storage == "upper" else np.zeros(fnode.size, np.int64)
        lens = S_total[fnode] - skip
        self.indptr = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
        self.indices = R[_range_concat(Rstart[fnode] + skip, lens)]
        del R
        self.n = dofmap.n_free
        self.fi = fi
        self.off = off

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    def positions(self, gnodes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Flat local-matrix indices and CSR data positions for one element.

        ``gnodes`` lists the combined node ids of the element's local nodes;
        local dofs are ``3 l + comp``.
        """
        nl = gnodes.size
        fi = self.fi[gnodes]  # (nl, 3)
        gd = np.where(fi >= 0, self.off[gnodes][:, None] + fi, -1)
        L = np.broadcast_to(gnodes[:, None], (nl, nl))
        M = np.broadcast_to(gnodes[None, :], (nl, nl))
        if self.storage == "upper":
            pair_ok = M >= L
        else:
            pair_ok = np.ones((nl, nl), bool)
        lpair, mpair = np.nonzero(pair_ok)
        q = np.searchsorted(self.keys, gnodes[lpair] * self.N + gnodes[mpair])
        # dof pairs for each node pair: 3x3 block
        a = np.arange(3)
        la = fi[lpair][:, :, None]  # (np, 3, 1)
        mb = fi[mpair][:, None, :]  # (np, 1, 3)
        ok = (la >= 0) & (mb >= 0)
        if self.storage == "upper":
            same = (gnodes[lpair] == gnodes[mpair])[:, None, None]
            ok &= ~same | (mb >= la)
        rows = gd[lpair][:, :, None]
        pos = self.indptr[np.maximum(rows, 0)] + self.S[q][:, None, None] + mb
        if self.storage == "upper":
            pos = pos - la
        lidx = (3 * lpair[:, None, None] + a[None, :, None]) * (3 * nl) + (3 * mpair[:, None, None] + a[None, None, :])
        return lidx[ok], pos[ok]

    def matrix(self, data: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))


@dataclass
class LinearSystem:
    """Reduced system ``K x = F`` over the free dofs.

    ``storage == "upper"`` stores only the upper triangle of a symmetric
    ``K``; use :meth:`full_matrix` for products.
    """

    K: sp.csr_matrix
    F: np.ndarray
    dofmap: DofMap
    symmetric: bool
    storage: Literal["upper", "full"] = "full"
    info: dict = field(default_factory=dict)

    def full_matrix(self) -> sp.csr_matrix:
        if self.storage == "full":
            return self.K
        K = self.K
        return (K + sp.triu(K, 1, format="csr").T).tocsr()

    def matvec(self, x: np.ndarray) -> np.ndarray:
        if self.storage == "full":
            return self.K @ x
        K = self.K
        return K @ x + K.T @ x - K.diagonal() * x

    def abs_matvec(self, x: np.ndarray) -> np.ndarray:
        """``|K| |x|``, the scale of the rounding error in ``K x``."""
        A = abs(self.K)
        ax = np.abs(x)
        if self.storage == "full":
            return A @ ax
        return A @ ax + A.T @ ax - A.diagonal() * ax


# --------------------------------------------------------------------------
# element kernels


@dataclass(frozen=True)
class AssemblyOptions:
    order_w: int | None = None
    quad_extra: int = 1  # p + 1 points underintegrate perturbed (non-affine) elements
    rho_w: float | None = None
    nitsche_penalty: float = 0.0
    batch: int = 8
    storage: Literal["auto", "upper", "full"] = "auto"


class _Spaces:
    """Reference bases of both fields at a point set."""

    def __init__(self, mesh: Mesh, order_w: int, pts: np.ndarray, order: int = 1):
        self.geo_basis = mesh.reference.evaluate(pts, max(order, 2))
        self.w_basis = build_reference_element(order_w).evaluate(pts, order)
        self.nu = mesh.reference.n_nodes
        self.nw = build_reference_element(order_w).n_nodes


def _element_nodes(mesh: Mesh, dofmap: DofMap, elements: np.ndarray) -> np.ndarray:
    w_conn = mesh.space(dofmap.order_w).elements[elements] + dofmap.n_u
    return np.hstack([mesh.elements[elements], w_conn])


def _point_data(field: LevelSetField, elements, spaces: _Spaces):
    mesh = field.mesh
    geo = element_geometry(mesh, elements, spaces.geo_basis)
    if np.any(geo.detJ <= 0):
        raise AssemblyError("non-positive Jacobian at a quadrature point")
    _, g1, g2, _ = levelset_derivatives(field, elements, spaces.geo_basis, geo, 2)
    frame = surface_frame(g1, g2, eps_grad=field.eps_grad)
    dBu = np.matmul(spaces.geo_basis.d1[None], geo.G)
    dBw = np.matmul(spaces.w_basis.d1[None], geo.G)
    e1, e2 = tangent_basis(frame.n)
    B = strain_operator(dBu, spaces.w_basis.values, dBw, frame, e1, e2)
    return geo, frame, B, (e1, e2)


def element_matrices(field, elements, spaces, w, D, mat, loads: Loads):
    """Stiffness and load of a batch of elements in local dof layout."""
    geo, frame, B, _ = _point_data(field, elements, spaces)
    wt = geo.detJ * w * frame.coarea
    E, Q, _, nd = B.shape
    DB = np.einsum("rs,eqsd->eqrd", D, B) * wt[:, :, None, None]
    Ke = np.matmul(B.reshape(E, Q * N_ROWS, nd).transpose(0, 2, 1), DB.reshape(E, Q * N_ROWS, nd))
    f = _eval_vector(loads.f, geo.x)
    c = _eval_vector(loads.c, geo.x)
    Pc = np.einsum("eqij,eqj->eqi", frame.P, c)
    Fe_u = np.einsum("qj,eq,eqa->eja", spaces.geo_basis.values, wt, f).reshape(E, -1)
    Fe_w = np.einsum("qj,eq,eqa->eja", spaces.w_basis.values, wt, Pc).reshape(E, -1)
    return Ke, np.concatenate([Fe_u, Fe_w], axis=1)


def project_difference_vector(Bw: np.ndarray, dBw: np.ndarray, frame) -> tuple[np.ndarray, np.ndarray]:
    """Tangential projection ``w = P . w_raw`` of the difference-vector basis.

    Parameters
    ----------
    Bw : (..., nw)
        Basis values of the raw difference vector.
    dBw : (..., nw, 3)
        Cartesian basis gradients.
    frame : SurfaceFrame
        Must carry ``dP`` (third level-set derivatives).

    Returns
    -------
    W : (..., nw, 3, 3)
        ``W[..., j, i, a]`` is component ``i`` of ``P . (N_j e_a)``.
    dW : (..., nw, 3, 3, 3)
        Directional surface gradient ``d/dx_k`` (projected on the last
        axis) of ``W`` by the product rule: ``dirP N_j + P (grad N_j . P)``.
    """
    if frame.dP is None:
        raise AssemblyError("projecting the difference vector needs third level-set derivatives")
    P = frame.P
    W = Bw[..., :, None, None] * P[..., None, :, :]
    gN = np.einsum("...jk,...kl->...jl", dBw, P)
    dW = Bw[..., :, None, None, None] * frame.dirP[..., None, :, :, :]
    dW = dW + P[..., None, :, :, None] * gN[..., :, None, None, :]
    return W, dW


def stabilization(Bw: np.ndarray, frame, weights: np.ndarray, rho_w: float) -> np.ndarray:
    """Penalty on the normal part of the raw difference vector.

    Returns ``rho_w * sum_q (N_j n_a)(N_k n_b) weights`` with shape
    ``(E, 3 nw, 3 nw)``; ``weights`` ``(E, Q)`` must already include the
    co-area factor. The result is symmetric positive semidefinite.
    """
    Cn = Bw[..., :, None] * frame.n[..., None, :]  # (E, Q, nw, 3)
    E, Q = weights.shape
    Cn = np.broadcast_to(Cn, (E, Q) + Cn.shape[-2:]).reshape(E, Q, -1)
    return rho_w * np.einsum("eqd,eq,eqf->edf", Cn, weights, Cn)


def _direction_projector(tri, frame, comps) -> np.ndarray:
    vecs = {"t": tri.t, "q": tri.q, "n": frame.n}
    C = 0.0
    for c in comps:
        v = vecs[c]
        C = C + v[..., :, None] * v[..., None, :]
    return C


def face_matrices(field, faces, spaces_by_face, w2, D, mat, bc: BoundaryCondition, penalty: float):
    """Boundary contributions of one condition on a batch of faces.

    Returns ``(Ke or None, Fe)`` in element-local dof layout.
    """
    mesh = field.mesh
    fq = boundary_quadrature(mesh, faces, spaces_by_face["nq"])
    E = faces.shape[0]
    nu, nw = spaces_by_face["nu"], spaces_by_face["nw"]
    nd = 3 * (nu + nw)
    Ke = np.zeros((E, nd, nd)) if bc.kind == "nitsche_directional" else None
    Fe = np.zeros((E, nd))
    for lf in np.unique(faces[:, 1]):
        sel = np.flatnonzero(faces[:, 1] == lf)
        spaces = spaces_by_face[int(lf)]
        geo, frame, B, (e1, e2) = _point_data(field, faces[sel, 0], spaces)
        try:
            tri = boundary_triad(frame.n, fq.m[sel])
        except LevelSetError as exc:
            raise AssemblyError(f"region {bc.region!r}: {exc}") from None
        wt = fq.weights[sel] * tri.coarea_boundary_factor * frame.coarea
        Bu = spaces.geo_basis.values  # (Q, nu)
        Bw = spaces.w_basis.values
        Q = Bu.shape[0]
        g = _eval_vector(bc.value, geo.x)
        Es = len(sel)
        if bc.kind == "neumann_traction":
            Fe[sel, : 3 * nu] += np.einsum("qj,eq,eqa->eja", Bu, wt, g).reshape(Es, -1)
            continue
        if bc.kind == "neumann_moment":
            Pg = np.einsum("eqij,eqj->eqi", frame.P, g)
            Fe[sel, 3 * nu :] += np.einsum("qj,eq,eqa->eja", Bw, wt, Pg).reshape(Es, -1)
            continue
        # Nitsche: conjugate fluxes as linear operators on the local dofs
        S = np.einsum("rs,eqsd->eqrd", D, B)
        q1 = np.einsum("eqi,eqi->eq", tri.q, e1)[..., None]
        q2 = np.einsum("eqi,eqi->eq", tri.q, e2)[..., None]

        def tensor_q(r0):  # (T . q) for an in-plane tensor stored in rows r0..r0+2
            t11, t22, t12 = S[:, :, r0], S[:, :, r0 + 1], S[:, :, r0 + 2] / SQRT2
            a1 = t11 * q1 + t12 * q2
            a2 = t12 * q1 + t22 * q2
            return e1[..., :, None] * a1[:, :, None, :] + e2[..., :, None] * a2[:, :, None, :]

        mq = tensor_q(3)
        if bc.target == "u":
            shear = S[:, :, 6] * q1 + S[:, :, 7] * q2
            flux = tensor_q(0) + np.einsum("eqij,eqjd->eqid", frame.H, mq) + frame.n[..., :, None] * shear[:, :, None, :]
            N = np.zeros((Es, Q, 3, nd))
            for a in range(3):
                N[:, :, a, a : 3 * nu : 3] = Bu[None]
            scale = mat.E * mat.t
        else:
            flux = mq
            N = np.zeros((Es, Q, 3, nd))
            for a in range(3):
                N[:, :, :, 3 * nu + a :: 3] = Bw[None, :, None, :] * frame.P[:, :, :, a, None]
            scale = mat.E * mat.t**3 / 12.0
        C = _direction_projector(tri, frame, bc.components)
        CN = np.einsum("eqij,eqjd->eqid", C, N) * wt[..., None, None]
        Cflux = np.einsum("eqij,eqjd->eqid", C, flux) * wt[..., None, None]
        k = -np.einsum("eqid,eqif->edf", N, Cflux) + np.einsum("eqid,eqif->edf", flux, CN)
        Cg = np.einsum("eqij,eqj->eqi", C, g) * wt[..., None]
        fvec = np.einsum("eqid,eqi->ed", flux, Cg)
        if penalty:
            h = mesh.element_size()
            k = k + penalty * scale / h * np.einsum("eqid,eqif->edf", N, CN)
            fvec = fvec + penalty * scale / h * np.einsum("eqid,eqi->ed", N, Cg)
        Ke[sel] += k
        Fe[sel] += fvec
    return Ke, Fe


def _face_spaces(mesh: Mesh, order_w: int, nq: int, faces: np.ndarray) -> dict:
    from .reference import face_points, gauss_quad

    pts2, w2 = gauss_quad(nq)
    out = {"nq": nq, "nu": mesh.reference.n_nodes, "nw": build_reference_element(order_w).n_nodes}
    for lf in np.unique(faces[:, 1]):
        out[int(lf)] = _Spaces(mesh, order_w, face_points(int(lf), pts2), 1)
    return out, w2


# --------------------------------------------------------------------------
# global assembly


def _local_full_dofs(gnodes: np.ndarray) -> np.ndarray:
    return (3 * gnodes[..., :, None] + np.arange(3)).reshape(gnodes.shape[:-1] + (-1,))


def _lift_and_scatter_rhs(F, dofmap, red, full_dofs, Ke, Fe):
    """Move prescribed-value columns to the right-hand side and add ``Fe``."""
    g = dofmap.prescribed.ravel()[full_dofs]  # (E, nd)
    fixed = red[full_dofs] < 0
    gl = np.where(fixed, g, 0.0)
    if Ke is not None and np.any(gl):
        Fe = Fe - np.einsum("edf,ef->ed", Ke, gl)
    rows = red[full_dofs]
    m = rows >= 0
    np.add.at(F, rows[m], Fe[m])


def assemble(
    field: LevelSetField,
    material: MaterialParams,
    loads: Loads = Loads(),
    bcs: Sequence[BoundaryCondition] = (),
    options: AssemblyOptions = AssemblyOptions(),
) -> LinearSystem:
    """Assemble the reduced linear system of the shell problem.

    Strong constraints are eliminated symmetrically during assembly.
    Nitsche conditions (non-symmetric, penalty-free unless
    ``options.nitsche_penalty`` is set) switch to full storage.
    """
    mesh = field.mesh
    p = mesh.geometry_order
    order_w = options.order_w if options.order_w is not None else p - 1
    if order_w < 1:
        raise AssemblyError(f"difference-vector order must be >= 1, got {order_w} (use p >= 2)")
    for bc in bcs:
        mesh.tag_side(bc.region)
        if bc.region in mesh.levelset_tags and bc.kind != "strong_dirichlet_u" and bc.kind != "strong_dirichlet_w":
            raise AssemblyError(f"region {bc.region!r} is a level-set face; shell boundary data cannot act there")
    _check_disjoint(bcs)
    dofmap = build_dofmap(mesh, order_w, bcs)
    nitsche = [bc for bc in bcs if bc.kind == "nitsche_directional"]
    storage = options.storage
    if storage == "auto":
        storage = "full" if nitsche else "upper"
    if storage == "upper" and nitsche:
        raise AssemblyError("upper-triangular storage cannot hold a non-symmetric system")

    nq = p + 1 + options.quad_extra
    pts, w = gauss_hex(nq)
    spaces = _Spaces(mesh, order_w, pts, 1)
    D = constitutive_matrix(material, options.rho_w)
    conn = _element_nodes(mesh, dofmap, np.arange(mesh.n_elements))
    pattern = SparsityPattern(conn, dofmap, storage)
    log.info("pattern: %d free dofs, %d stored entries", pattern.n, pattern.nnz)
    data = np.zeros(pattern.nnz)
    F = np.zeros(dofmap.n_free)
    red = dofmap.reduced

    def scatter(elements, Ke, Fe):
        full = _local_full_dofs(conn[elements])
        _lift_and_scatter_rhs(F, dofmap, red, full, Ke, Fe)
        if Ke is None:
            return
        for k, e in enumerate(elements):
            lidx, pos = pattern.positions(conn[e])
            data[pos] += Ke[k].ravel()[lidx]

    for batch in iter_element_batches(mesh.n_elements, options.batch):
        Ke, Fe = element_matrices(field, batch, spaces, w, D, material, loads)
        scatter(batch, Ke, Fe)

    for bc in bcs:
        if bc.kind in ("strong_dirichlet_u", "strong_dirichlet_w"):
            continue
        faces = mesh.faces_with_tag(bc.region)
        fsp, w2 = _face_spaces(mesh, order_w, nq, faces)
        for fb in iter_element_batches(faces.shape[0], options.batch):
            Ke, Fe = face_matrices(field, faces[fb], fsp, w2, D, material, bc, options.nitsche_penalty)
            scatter(faces[fb, 0], Ke, Fe)

    K = pattern.matrix(data)
    info = {
        "n_dofs": dofmap.n_dofs,
        "n_free": dofmap.n_free,
        "n_constrained": dofmap.n_constrained,
        "nnz": pattern.nnz,
        "storage": storage,
        "quadrature_points_per_direction": nq,
        "order_u": p,
        "order_w": order_w,
    }
    return LinearSystem(K, F, dofmap, symmetric=not nitsche, storage=storage, info=info)


def _check_disjoint(bcs: Sequence[BoundaryCondition]) -> None:
    seen: dict[tuple[str, str], str] = {}
    for bc in bcs:
        kind = "dirichlet" if bc.kind != "neumann_traction" and bc.kind != "neumann_moment" else "neumann"
        key = (bc.region, bc.field)
        prev = seen.get(key)
        if prev is not None and prev != kind:
            raise AssemblyError(
                f"region {bc.region!r} carries both Dirichlet and Neumann data for field {bc.field!r}"
            )
        if bc.kind == "nitsche_directional":
            for other in bcs:
                if other.kind.startswith("strong_dirichlet") and other.region == bc.region and other.field == bc.field:
                    raise AssemblyError(
                        f"Nitsche constraint on {bc.region!r} overlaps a strong constraint of field {bc.field!r}"
                    )
        seen[key] = kind


# --------------------------------------------------------------------------
# post-hoc system modifications


def apply_strong_dirichlet(system: LinearSystem, dofs: np.ndarray, values: np.ndarray | float = 0.0) -> LinearSystem:
    """Eliminate further reduced dofs with prescribed values.

    ``dofs`` index the current reduced unknowns. Returns a new system with
    the remaining unknowns and ``info["kept"]`` mapping them back.
    """
    dofs = np.asarray(dofs, dtype=int)
    if np.unique(dofs).size != dofs.size:
        raise ConstraintConflictError("a dof is listed twice")
    vals = np.broadcast_to(np.asarray(values, dtype=float), dofs.shape)
    n = system.K.shape[0]
    keep = np.setdiff1d(np.arange(n), dofs)
    Kf = system.full_matrix().tocsc()
    F = system.F[keep] - Kf[keep][:, dofs] @ vals
    K = Kf[keep][:, keep].tocsr()
    if system.storage == "upper":
        K = sp.triu(K, format="csr")
    info = dict(system.info, kept=keep, n_constrained=system.info.get("n_constrained", 0) + dofs.size)
    return LinearSystem(K, F, system.dofmap, system.symmetric, system.storage, info)


def apply_nitsche(
    system: LinearSystem,
    field: LevelSetField,
    material: MaterialParams,
    bc: BoundaryCondition,
    options: AssemblyOptions = AssemblyOptions(),
) -> LinearSystem:
    """Add a non-symmetric Nitsche constraint to an assembled system."""
    if bc.kind != "nitsche_directional":
        raise AssemblyError("apply_nitsche needs a nitsche_directional condition")
    if system.info.get("kept") is not None:
        raise AssemblyError("cannot add Nitsche terms after post-hoc elimination")
    mesh = field.mesh
    dofmap = system.dofmap
    red = dofmap.reduced
    nq = system.info.get("quadrature_points_per_direction", mesh.geometry_order + 1)
    D = constitutive_matrix(material, options.rho_w)
    faces = mesh.faces_with_tag(bc.region)
    fsp, w2 = _face_spaces(mesh, dofmap.order_w, nq, faces)
    conn = _element_nodes(mesh, dofmap, faces[:, 0])
    rows, cols, vals = [], [], []
    F = system.F.copy()
    for fb in iter_element_batches(faces.shape[0], options.batch):
        Ke, Fe = face_matrices(field, faces[fb], fsp, w2, D, material, bc, options.nitsche_penalty)
        full = _local_full_dofs(conn[fb])
        _lift_and_scatter_rhs(F, dofmap, red, full, Ke, Fe)
        r = red[full]
        for k in range(len(fb)):
            ok = r[k] >= 0
            rr, cc = np.meshgrid(r[k][ok], r[k][ok], indexing="ij")
            rows.append(rr.ravel())
            cols.append(cc.ravel())
            vals.append(Ke[k][np.ix_(ok, ok)].ravel())
    n = system.K.shape[0]
    Kn = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    K = (system.full_matrix() + Kn).tocsr()
    return LinearSystem(K, F, dofmap, False, "full", dict(system.info, storage="full"))
