"""VTK export of bulk fields and of extracted level surfaces.

Bulk output uses VTK Lagrange hexahedra of the mesh order. Level
surfaces ``phi^h = c`` are extracted by marching tetrahedra on a
per-element sub-grid, with the crossing points found by a
bracketing root search on the Lagrange interpolant itself, so every output
point satisfies ``|phi^h - c|`` below a tight tolerance.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .postproc import PostprocError, SolutionState

VTK_LAGRANGE_HEXAHEDRON = 72
VTK_TRIANGLE = 5
ROOT_TOL = 1e-12
ROOT_MAXITER = 200


class ExportError(PostprocError):
    pass


@dataclass(frozen=True)
class LevelSurface:
    """Triangulated piece of one level set with interpolated fields."""

    level: float
    points: np.ndarray
    triangles: np.ndarray
    phi: np.ndarray
    u: np.ndarray
    w: np.ndarray
    element: np.ndarray

    @property
    def area(self) -> float:
        if self.triangles.size == 0:
            return 0.0
        a, b, c = (self.points[self.triangles[:, k]] for k in range(3))
        return float(0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1).sum())


# --------------------------------------------------------------------------
# pointwise evaluation at per-point reference coordinates


def evaluate_points(state: SolutionState, elements: np.ndarray, xi: np.ndarray) -> dict[str, np.ndarray]:
    """Position, ``phi^h``, ``u`` and ``w = P . w_raw`` at ``(element, xi)`` pairs."""
    mesh = state.mesh
    elements = np.asarray(elements, dtype=int)
    xi = np.asarray(xi, dtype=float).reshape(-1, 3)
    b = mesh.reference.evaluate(xi, 1)
    conn = mesh.elements[elements]
    X = mesh.nodes[conn]  # (M, nn, 3)
    x = np.einsum("mj,mji->mi", b.values, X)
    J = np.einsum("mji,mja->mia", X, b.d1)
    phi_e = state.field.values[conn]
    phi = np.einsum("mj,mj->m", b.values, phi_e)
    dphi = np.einsum("mja,mj->ma", b.d1, phi_e)
    grad = np.linalg.solve(np.swapaxes(J, 1, 2), dphi[..., None])[..., 0]
    n = grad / np.linalg.norm(grad, axis=1, keepdims=True)
    u = np.einsum("mj,mji->mi", b.values, state.u[conn])
    wconn = mesh.space(state.dofmap.order_w).elements[elements]
    from .reference import build_reference_element

    bw = build_reference_element(state.dofmap.order_w).evaluate(xi, 0).values
    w_raw = np.einsum("mj,mji->mi", bw, state.w[wconn])
    w = w_raw - np.einsum("mi,mi->m", w_raw, n)[:, None] * n
    return {"x": x, "phi": phi, "u": u, "w": w}


def _phi_at(state: SolutionState, elements: np.ndarray, xi: np.ndarray) -> np.ndarray:
    mesh = state.mesh
    vals = mesh.reference.evaluate(xi, 0).values
    return np.einsum("mj,mj->m", vals, state.field.values[mesh.elements[elements]])


# --------------------------------------------------------------------------
# marching tetrahedra


_CUBE = np.array(list(itertools.product((0, 1), repeat=3)))[:, ::-1]  # (x fastest)
_TET_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


def _kuhn_tets() -> np.ndarray:
    """Six tetrahedra of the unit cube sharing its main diagonal, as cube-corner ids."""
    corner = {tuple(c): k for k, c in enumerate(_CUBE)}
    tets = []
    for perm in itertools.permutations(range(3)):
        v = np.zeros(3, dtype=int)
        ids = [corner[tuple(v)]]
        for a in perm:
            v = v.copy()
            v[a] = 1
            ids.append(corner[tuple(v)])
        tets.append(ids)
    return np.asarray(tets)


def _case_table() -> list[list[tuple[int, int, int]]]:
    """Triangles (as tet-edge ids) for each of the 16 sign patterns."""
    edge_id = {e: k for k, e in enumerate(_TET_EDGES)}

    def eid(a, b):
        return edge_id[(min(a, b), max(a, b))]

    table = []
    for mask in range(16):
        pos = [v for v in range(4) if mask >> v & 1]
        neg = [v for v in range(4) if not mask >> v & 1]
        if len(pos) in (0, 4):
            table.append([])
        elif len(pos) in (1, 3):
            a, others = (pos[0], neg) if len(pos) == 1 else (neg[0], pos)
            table.append([tuple(eid(a, o) for o in others)])
        else:
            (a, b), (c, d) = pos, neg
            table.append([(eid(a, c), eid(a, d), eid(b, d)), (eid(a, c), eid(b, d), eid(b, c))])
    return table


_TETS = _kuhn_tets()
_TABLE = _case_table()


def _find_roots(state, el, xa, xb, level, fa, fb):
    """Vectorised Illinois search for ``phi^h(xa + s (xb - xa)) = level``."""
    lo, hi = np.zeros_like(fa), np.ones_like(fa)
    flo, fhi = fa.copy(), fb.copy()
    s = np.where(flo == 0, 0.0, np.where(fhi == 0, 1.0, 0.5))
    fs = np.where(flo == 0, 0.0, np.where(fhi == 0, 0.0, np.inf))
    scale = max(1.0, abs(level))
    active = np.abs(fs) > ROOT_TOL * scale
    side = np.zeros(fa.shape, dtype=int)
    for _ in range(ROOT_MAXITER):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        denom = fhi[idx] - flo[idx]
        sf = np.where(denom != 0, (lo[idx] * fhi[idx] - hi[idx] * flo[idx]) / np.where(denom != 0, denom, 1), 0.5)
        mid = 0.5 * (lo[idx] + hi[idx])
        # fall back to bisection when the secant step leaves the bracket
        bad = ~((sf > lo[idx]) & (sf < hi[idx]))
        sf = np.where(bad, mid, sf)
        pts = xa[idx] + sf[:, None] * (xb[idx] - xa[idx])
        f = _phi_at(state, el[idx], pts) - level
        s[idx], fs[idx] = sf, f
        left = np.sign(f) == np.sign(flo[idx])
        # Illinois modification: halve the stale endpoint value
        hi_new = np.where(left, hi[idx], sf)
        lo_new = np.where(left, sf, lo[idx])
        fhi_new = np.where(left, np.where(side[idx] == 1, 0.5 * fhi[idx], fhi[idx]), f)
        flo_new = np.where(left, f, np.where(side[idx] == -1, 0.5 * flo[idx], flo[idx]))
        side[idx] = np.where(left, 1, -1)
        lo[idx], hi[idx], flo[idx], fhi[idx] = lo_new, hi_new, flo_new, fhi_new
        active[idx] = (np.abs(f) > ROOT_TOL * scale) & (hi_new - lo_new > 1e-15)
    return xa + s[:, None] * (xb - xa), fs


def extract_level_surface(state: SolutionState, level: float, subdivisions: int | None = None) -> LevelSurface:
    """Triangulate ``{phi^h = level}`` with interpolated ``u`` and ``w``.

    Parameters
    ----------
    level : float
        Must lie strictly inside the field interval.
    subdivisions : int, optional
        Sub-grid cells per element direction; defaults to the mesh order.
    """
    field = state.field
    lo, hi = field.interval
    if not lo < level < hi:
        raise ExportError(f"level {level} outside the open interval ({lo}, {hi})")
    mesh = state.mesh
    r = int(subdivisions or mesh.geometry_order)
    g1 = np.linspace(-1.0, 1.0, r + 1)
    gk, gj, gi = np.meshgrid(np.arange(r + 1), np.arange(r + 1), np.arange(r + 1), indexing="ij")
    gidx = np.stack([gi.ravel(), gj.ravel(), gk.ravel()], axis=1)
    gxi = g1[gidx]
    gvals = mesh.reference.evaluate(gxi, 0).values
    phi_g = field.values[mesh.elements] @ gvals.T - level  # (E, G)
    # snap rounding noise so level sets lying on element faces are not folded
    phi_g[np.abs(phi_g) <= ROOT_TOL * max(1.0, abs(level), float(np.abs(field.values).max()))] = 0.0

    # tetrahedra of the sub-grid: (T, 4) sub-grid vertex ids
    cells = gidx[(gidx < r).all(axis=1)]
    corner_ids = cells[:, None, :] + _CUBE[None]
    cid = corner_ids[..., 0] + (r + 1) * (corner_ids[..., 1] + (r + 1) * corner_ids[..., 2])
    tets = cid[:, _TETS].reshape(-1, 4)

    sv = phi_g[:, tets] >= 0  # (E, T, 4)
    mask = (sv * (1 << np.arange(4))).sum(axis=-1)
    cut_e, cut_t = np.nonzero((mask > 0) & (mask < 15))
    empty = LevelSurface(level, np.zeros((0, 3)), np.zeros((0, 3), int), np.zeros(0), np.zeros((0, 3)),
                         np.zeros((0, 3)), np.zeros(0, int))
    if cut_e.size == 0:
        return empty
    tv = tets[cut_t]  # (C, 4)
    edges = np.stack([np.sort(tv[:, list(e)], axis=1) for e in _TET_EDGES], axis=1)  # (C, 6, 2)
    G = (r + 1) ** 3
    keys = (cut_e[:, None] * G + edges[..., 0]) * G + edges[..., 1]  # (C, 6)
    tri_keys = []
    tri_elem = []
    cmask = mask[cut_e, cut_t]
    for m in range(1, 15):
        sel = np.flatnonzero(cmask == m)
        for tri in _TABLE[m]:
            tri_keys.append(keys[sel][:, list(tri)])
            tri_elem.append(cut_e[sel])
    tri_keys = np.concatenate(tri_keys)
    tri_elem = np.concatenate(tri_elem)
    ukeys, inv = np.unique(tri_keys.ravel(), return_inverse=True)
    triangles = inv.reshape(-1, 3)
    a = (ukeys // G) % G
    b = ukeys % G
    el = ukeys // (G * G)
    fa, fb = phi_g[el, a], phi_g[el, b]
    pts_xi, fval = _find_roots(state, el, gxi[a], gxi[b], level, fa, fb)
    vals = evaluate_points(state, el, pts_xi)
    # drop triangles degenerated by roots on shared sub-grid vertices
    keep = (triangles[:, 0] != triangles[:, 1]) & (triangles[:, 1] != triangles[:, 2]) & (triangles[:, 0] != triangles[:, 2])
    return LevelSurface(level, vals["x"], triangles[keep], vals["phi"], vals["u"], vals["w"], el)


# --------------------------------------------------------------------------
# VTU writing


def _data_array(name: str, arr: np.ndarray, dtype: str = "Float64") -> str:
    arr = np.asarray(arr)
    ncomp = 1 if arr.ndim == 1 else arr.shape[1]
    fmt = "%d" if dtype.startswith(("Int", "UInt")) else "%.17g"
    body = " ".join(fmt % v for v in arr.ravel())
    comp = f' NumberOfComponents="{ncomp}"' if ncomp > 1 else ""
    nm = f' Name="{name}"' if name else ""
    return f'        <DataArray type="{dtype}"{nm}{comp} format="ascii">{body}</DataArray>\n'


def write_vtu(path: str, points: np.ndarray, cells: np.ndarray, cell_type: int,
              point_data: dict[str, np.ndarray], cell_data: dict[str, np.ndarray] | None = None) -> str:
    """Write an ASCII VTK unstructured grid with a single cell type."""
    cells = np.asarray(cells, dtype=np.int64)
    npc = cells.shape[1] if cells.size else 0
    out = ['<?xml version="1.0"?>\n',
           '<VTKFile type="UnstructuredGrid" version="1.0" byte_order="LittleEndian" header_type="UInt64">\n',
           "  <UnstructuredGrid>\n",
           f'    <Piece NumberOfPoints="{points.shape[0]}" NumberOfCells="{cells.shape[0]}">\n',
           "      <PointData>\n"]
    out += [_data_array(k, v) for k, v in point_data.items()]
    out.append("      </PointData>\n      <CellData>\n")
    out += [_data_array(k, v, "Int64" if np.asarray(v).dtype.kind in "iu" else "Float64")
            for k, v in (cell_data or {}).items()]
    out.append("      </CellData>\n      <Points>\n")
    out.append(_data_array("", points))
    out.append("      </Points>\n      <Cells>\n")
    out.append(_data_array("connectivity", cells.ravel(), "Int64"))
    out.append(_data_array("offsets", npc * np.arange(1, cells.shape[0] + 1), "Int64"))
    out.append(_data_array("types", np.full(cells.shape[0], cell_type), "UInt8"))
    out.append("      </Cells>\n    </Piece>\n  </UnstructuredGrid>\n</VTKFile>\n")
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.writelines(out)
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc}") from None
    return path


def vtk_lagrange_index(i: int, j: int, k: int, p: int) -> int:
    """Position of tensor node ``(i, j, k)`` in the VTK Lagrange hexahedron of order ``p``."""
    ib, jb, kb = i in (0, p), j in (0, p), k in (0, p)
    nb = ib + jb + kb
    if nb == 3:
        return ((2 if j else 1) if i else (3 if j else 0)) + (4 if k else 0)
    off = 8
    if nb == 2:
        if not ib:
            return (i - 1) + ((2 * p - 2) if j else 0) + ((4 * p - 4) if k else 0) + off
        if not jb:
            return (j - 1) + ((p - 1) if i else (3 * p - 3)) + ((4 * p - 4) if k else 0) + off
        off += 8 * (p - 1)
        return (k - 1) + (p - 1) * ((3 if j else 1) if i else (2 if j else 0)) + off
    off += 12 * (p - 1)
    m = p - 1
    if nb == 1:
        if ib:
            return (j - 1) + m * (k - 1) + (m * m if i else 0) + off
        off += 2 * m * m
        if jb:
            return (i - 1) + m * (k - 1) + (m * m if j else 0) + off
        off += 2 * m * m
        return (i - 1) + m * (j - 1) + (m * m if k else 0) + off
    off += 6 * m * m
    return off + (i - 1) + m * ((j - 1) + m * (k - 1))


def vtk_lagrange_permutation(ref) -> np.ndarray:
    """Local node ids in VTK Lagrange order: ``cell[v] = local[perm[v]]``."""
    perm = np.empty(ref.n_nodes, dtype=int)
    for loc, (i, j, k) in enumerate(ref.ijk):
        perm[vtk_lagrange_index(int(i), int(j), int(k), ref.order)] = loc
    return perm


def _bulk_cells(mesh) -> np.ndarray:
    return mesh.elements[:, vtk_lagrange_permutation(mesh.reference)]


def bulk_point_fields(state: SolutionState) -> dict[str, np.ndarray]:
    """Nodal ``u``, ``|u|``, ``phi`` and element-averaged ``w`` at the mesh nodes."""
    mesh = state.mesh
    ne, nn = mesh.elements.shape
    el = np.repeat(np.arange(ne), nn)
    xi = np.tile(mesh.reference.nodes, (ne, 1))
    vals = evaluate_points(state, el, xi)
    w = np.zeros((mesh.n_nodes, 3))
    cnt = np.zeros(mesh.n_nodes)
    nodes = mesh.elements.ravel()
    np.add.at(w, nodes, vals["w"])
    np.add.at(cnt, nodes, 1.0)
    w /= cnt[:, None]
    return {"u": state.u, "u_norm": np.linalg.norm(state.u, axis=1), "w": w, "phi": state.field.values}


def export_fields(state: SolutionState, levels: Sequence[float], path: str, name: str = "solution",
                  subdivisions: int | None = None) -> list[str]:
    """Write the bulk solution and one triangulated surface per level value.

    Returns the written file paths: ``<name>_bulk.vtu`` followed by
    ``<name>_level_<k>.vtu`` in the order of ``levels``.
    """
    lo, hi = state.field.interval
    for c in levels:
        if not lo < c < hi:
            raise ExportError(f"level {c} outside the open interval ({lo}, {hi})")
    os.makedirs(path, exist_ok=True)
    mesh = state.mesh
    cells = _bulk_cells(mesh)
    ne = mesh.n_elements
    files = [write_vtu(os.path.join(path, f"{name}_bulk.vtu"), mesh.nodes, cells, VTK_LAGRANGE_HEXAHEDRON,
                       bulk_point_fields(state), {"element": np.arange(ne)})]
    for k, c in enumerate(levels):
        s = extract_level_surface(state, c, subdivisions)
        pdata = {"u": s.u, "u_norm": np.linalg.norm(s.u, axis=1) if s.u.size else s.phi, "w": s.w, "phi": s.phi}
        files.append(write_vtu(os.path.join(path, f"{name}_level_{k}.vtu"), s.points, s.triangles, VTK_TRIANGLE,
                               pdata))
    return files
