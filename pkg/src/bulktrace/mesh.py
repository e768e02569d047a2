"""Structured higher-order hexahedral meshes of the benchmark bulk domains.

Every preset is a smooth map ``F: [0,1]^3 -> R^3`` of a parameter box. Nodes
of a Lagrange mesh of order ``p`` are images of an equispaced parameter grid,
so curved boundaries are reproduced by the isoparametric map of order ``p``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Callable, Sequence

import numpy as np

from .graphs import get_graph
from .reference import (
    FACES,
    BasisEval,
    build_reference_element,
    face_points,
    gauss_hex,
    gauss_quad,
)

log = logging.getLogger(__name__)

MAX_BACKTRACK = 4  # halvings of an inverting perturbation amplitude

PRESETS = ("cylinder_sector", "extruded_graph", "spherical_shell_sector", "mapped_box_slab")
SIDES = ("s1min", "s1max", "s2min", "s2max", "s3min", "s3max")


class MeshError(ValueError):
    pass


class MeshQualityError(MeshError):
    pass


# --------------------------------------------------------------------------
# parametric maps


def _graph_function(name: str) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    try:
        return get_graph(name).value
    except ValueError as exc:
        raise MeshError(str(exc)) from None


def _rotation_to(axis: Sequence[float]) -> np.ndarray:
    """Rotation matrix taking e_z onto the unit vector along ``axis``."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    ez = np.array([0.0, 0.0, 1.0])
    v = np.cross(ez, a)
    c = float(ez @ a)
    if np.linalg.norm(v) < 1e-14:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx / (1.0 + c)


@dataclass(frozen=True)
class CylinderSectorMap:
    """Sector of a thick cylinder around the y axis; x = r sin(theta), z = r cos(theta)."""

    r_inner: float
    r_outer: float
    theta_min: float
    theta_max: float
    y_min: float
    y_max: float

    tags = ("theta_min", "theta_max", "y_min", "y_max", "inner", "outer")
    levelset_tags = ("inner", "outer")

    def __post_init__(self):
        if not 0 < self.r_inner < self.r_outer:
            raise MeshError(f"need 0 < r_inner < r_outer, got {self.r_inner}, {self.r_outer}")
        if not self.theta_min < self.theta_max or self.theta_max - self.theta_min >= 360:
            raise MeshError("need theta_min < theta_max spanning less than 360 degrees")
        if not self.y_min < self.y_max:
            raise MeshError("need y_min < y_max")

    def __call__(self, s: np.ndarray) -> np.ndarray:
        th = np.radians(self.theta_min + (self.theta_max - self.theta_min) * s[:, 0])
        y = self.y_min + (self.y_max - self.y_min) * s[:, 1]
        r = self.r_inner + (self.r_outer - self.r_inner) * s[:, 2]
        return np.stack([r * np.sin(th), y, r * np.cos(th)], axis=1)

    def volume(self) -> float:
        dth = np.radians(self.theta_max - self.theta_min)
        return 0.5 * dth * (self.r_outer**2 - self.r_inner**2) * (self.y_max - self.y_min)


@dataclass(frozen=True)
class LiftedChartMap:
    """Slab between two level sets over a bilinearly blended lateral box.

    The parameters ``(s1, s2)`` are blended from four chart corners and
    scaled about the corner centroid by ``1 + taper * (c - c_mid)``, where
    ``c`` runs linearly with ``s3`` over ``[c_min, c_max]``. The chart point
    is then lifted onto the level set ``c``:

    * ``lift="graph"``: chart = (x, y), ``z = c + g(x, y)``.
    * ``lift="sphere"``: chart = equiangular angles ``(a, b)`` in radians,
      ``x = center + (radius + c) * R @ normalize(tan a, tan b, 1)``.
    """

    lift: str
    corners: tuple[tuple[float, float], ...]
    c_min: float
    c_max: float
    taper: float = 0.0
    graph: str = "flat"
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 0.0
    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)

    tags = ("west", "east", "south", "north", "bottom", "top")
    levelset_tags = ("bottom", "top")

    def __post_init__(self):
        if self.lift not in ("graph", "sphere"):
            raise MeshError(f"unknown lift {self.lift!r}")
        if len(self.corners) != 4:
            raise MeshError("mapped box needs four chart corners")
        if not self.c_min < self.c_max:
            raise MeshError("need c_min < c_max")
        if self.lift == "graph":
            _graph_function(self.graph)
        if self.lift == "sphere":
            if self.radius + self.c_min <= 0:
                raise MeshError("sphere slab would reach the centre")
            if np.max(np.abs(self.corners)) >= np.pi / 2:
                raise MeshError("equiangular chart angles must lie in (-pi/2, pi/2)")
        c = np.asarray(self.corners, dtype=float)
        # orientation of the lateral quad (corner order: (0,0), (1,0), (1,1), (0,1))
        area = 0.5 * np.sum(c[:, 0] * np.roll(c[:, 1], -1) - np.roll(c[:, 0], -1) * c[:, 1])
        if area <= 0:
            raise MeshError("chart corners must be ordered counter-clockwise")
        mid = 0.5 * (self.c_min + self.c_max)
        for cc in (self.c_min, self.c_max):
            if 1.0 + self.taper * (cc - mid) <= 0:
                raise MeshError("taper collapses the lateral box")

    def chart(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        c4 = np.asarray(self.corners, dtype=float)
        u, v = s[:, 0:1], s[:, 1:2]
        ab = (1 - u) * (1 - v) * c4[0] + u * (1 - v) * c4[1] + u * v * c4[2] + (1 - u) * v * c4[3]
        lev = self.c_min + (self.c_max - self.c_min) * s[:, 2]
        centroid = c4.mean(axis=0)
        scale = 1.0 + self.taper * (lev - 0.5 * (self.c_min + self.c_max))
        ab = centroid + (ab - centroid) * scale[:, None]
        return ab[:, 0], ab[:, 1], lev

    def __call__(self, s: np.ndarray) -> np.ndarray:
        a, b, lev = self.chart(s)
        if self.lift == "graph":
            return np.stack([a, b, lev + _graph_function(self.graph)(a, b)], axis=1)
        d = np.stack([np.tan(a), np.tan(b), np.ones_like(a)], axis=1)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        d = d @ _rotation_to(self.axis).T
        return np.asarray(self.center) + (self.radius + lev)[:, None] * d


@dataclass(frozen=True)
class AnnularChartMap:
    """Slab between two level sets of a graph over a plane annulus.

    ``s1`` is the clockwise polar angle (periodic), ``s2`` runs from the inner to the
    outer circle and ``s3`` across the level sets; radii are scaled by
    ``1 + taper * (c - c_mid)``. The lateral boundary consists of two
    smooth closed curves per level set, so the shells have no corners.
    """

    r_inner: float
    r_outer: float
    c_min: float
    c_max: float
    taper: float = 0.0
    graph: str = "flat"
    center: tuple[float, float] = (0.0, 0.0)

    tags = ("seam_start", "seam_end", "inner", "outer", "bottom", "top")
    levelset_tags = ("bottom", "top")
    periodic = True

    def __post_init__(self):
        if not 0 < self.r_inner < self.r_outer:
            raise MeshError(f"need 0 < r_inner < r_outer, got {self.r_inner}, {self.r_outer}")
        if not self.c_min < self.c_max:
            raise MeshError("need c_min < c_max")
        _graph_function(self.graph)
        mid = 0.5 * (self.c_min + self.c_max)
        for cc in (self.c_min, self.c_max):
            if 1.0 + self.taper * (cc - mid) <= 0:
                raise MeshError("taper collapses the annulus")

    def __call__(self, s: np.ndarray) -> np.ndarray:
        th = -2.0 * np.pi * s[:, 0]  # clockwise keeps the map right-handed
        lev = self.c_min + (self.c_max - self.c_min) * s[:, 2]
        scale = 1.0 + self.taper * (lev - 0.5 * (self.c_min + self.c_max))
        rho = (self.r_inner + (self.r_outer - self.r_inner) * s[:, 1]) * scale
        x = self.center[0] + rho * np.cos(th)
        y = self.center[1] + rho * np.sin(th)
        return np.stack([x, y, lev + _graph_function(self.graph)(x, y)], axis=1)


# --------------------------------------------------------------------------
# structured spaces


@dataclass(frozen=True)
class StructuredSpace:
    """Continuous Lagrange space of one order on a structured element grid.

    With ``periodic`` the first grid direction closes on itself.
    """

    order: int
    divisions: tuple[int, int, int]
    elements: np.ndarray = field(repr=False)
    periodic: bool = False

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        shape = [n * self.order + 1 for n in self.divisions]
        if self.periodic:
            shape[0] -= 1
        return tuple(shape)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.grid_shape))

    def grid_index(self) -> np.ndarray:
        """Integer grid coordinates (I, J, K) of every node."""
        n1, n2, n3 = self.grid_shape
        k, j, i = np.meshgrid(np.arange(n3), np.arange(n2), np.arange(n1), indexing="ij")
        return np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)

    def side_nodes(self, side: int) -> np.ndarray:
        axis, sgn = FACES[side]
        if self.periodic and axis == 0:
            raise MeshError("the periodic direction has no boundary nodes")
        g = self.grid_index()
        target = 0 if sgn < 0 else self.grid_shape[axis] - 1
        return np.flatnonzero(g[:, axis] == target)


@lru_cache(maxsize=32)
def structured_space(divisions: tuple[int, int, int], order: int, periodic: bool = False) -> StructuredSpace:
    n1, n2, n3 = divisions
    p = order
    if periodic and n1 < 3:
        raise MeshError("a periodic direction needs at least three elements")
    N1, N2 = (n1 * p if periodic else n1 * p + 1), n2 * p + 1
    ref = build_reference_element(p)
    e3, e2, e1 = np.meshgrid(np.arange(n3), np.arange(n2), np.arange(n1), indexing="ij")
    eg = np.stack([e1.ravel(), e2.ravel(), e3.ravel()], axis=1)
    gi = eg[:, None, :] * p + ref.ijk[None, :, :]
    conn = gi[..., 0] % N1 + N1 * (gi[..., 1] + N2 * gi[..., 2])
    conn.setflags(write=False)
    return StructuredSpace(p, tuple(divisions), conn, periodic)


# --------------------------------------------------------------------------
# mesh


@dataclass(frozen=True)
class Mesh:
    """Conforming Lagrange hexahedral mesh of order ``geometry_order``.

    ``boundary_faces`` rows are ``(element, local face, tag index)`` with
    ``tag index`` pointing into ``region_tags``.
    """

    geometry_order: int
    divisions: tuple[int, int, int]
    nodes: np.ndarray = field(repr=False)
    elements: np.ndarray = field(repr=False)
    boundary_faces: np.ndarray = field(repr=False)
    region_tags: tuple[str, ...]
    levelset_tags: tuple[str, ...] = ()
    preset: str = ""
    params: dict = field(default_factory=dict)
    perturbation: dict = field(default_factory=dict)
    periodic: bool = False

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @cached_property
    def reference(self):
        return build_reference_element(self.geometry_order)

    def space(self, order: int) -> StructuredSpace:
        return structured_space(self.divisions, order, self.periodic)

    def tag_side(self, tag: str) -> int:
        try:
            return self.region_tags.index(tag)
        except ValueError:
            raise MeshError(f"unknown region tag {tag!r}; available: {self.region_tags}") from None

    def faces_with_tag(self, tag: str) -> np.ndarray:
        idx = self.tag_side(tag)
        return self.boundary_faces[self.boundary_faces[:, 2] == idx]

    def node_set(self, tag: str, order: int | None = None) -> np.ndarray:
        """Nodes of the order-``order`` space lying on boundary region ``tag``."""
        sp = self.space(self.geometry_order if order is None else order)
        return sp.side_nodes(self.tag_side(tag))

    @property
    def boundary_tags(self) -> tuple[str, ...]:
        """Region tags that own boundary faces (periodic seams own none)."""
        present = set(np.unique(self.boundary_faces[:, 2]).tolist()) if self.boundary_faces.size else set()
        return tuple(t for k, t in enumerate(self.region_tags) if k in present)

    @property
    def node_sets(self) -> dict[str, np.ndarray]:
        return {t: self.node_set(t) for t in self.boundary_tags}

    def characteristic_size(self) -> float:
        lo, hi = self.nodes.min(axis=0), self.nodes.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    def element_size(self) -> float:
        """Mean edge length along the three element directions."""
        v = self.nodes[self.elements[:, [0, -1]]]
        diag = np.linalg.norm(v[:, 1] - v[:, 0], axis=1)
        return float(diag.mean() / np.sqrt(3.0))


def _make_map(preset: str, params: dict):
    params = dict(params)
    if preset == "cylinder_sector":
        if "theta" in params:
            half = 0.5 * params.pop("theta")
            params.setdefault("theta_min", -half)
            params.setdefault("theta_max", half)
        if "length" in params:
            length = params.pop("length")
            params.setdefault("y_min", 0.0)
            params.setdefault("y_max", length)
        allowed = {"r_inner", "r_outer", "theta_min", "theta_max", "y_min", "y_max"}
        _check_keys(preset, params, allowed)
        missing = allowed - set(params)
        if missing:
            raise MeshError(f"cylinder_sector is missing parameters {sorted(missing)}")
        return CylinderSectorMap(**params)
    if preset == "extruded_graph":
        allowed = {"graph", "x_range", "y_range", "height"}
        _check_keys(preset, params, allowed)
        (x0, x1), (y0, y1) = params.get("x_range", (-0.5, 0.5)), params.get("y_range", (-0.5, 0.5))
        h = params.get("height", 0.1)
        if h <= 0 or x1 <= x0 or y1 <= y0:
            raise MeshError("extruded_graph needs positive height and increasing ranges")
        return LiftedChartMap(
            "graph", ((x0, y0), (x1, y0), (x1, y1), (x0, y1)), -0.5 * h, 0.5 * h,
            graph=params.get("graph", "flat"),
        )
    if preset == "spherical_shell_sector":
        allowed = {"center", "r_inner", "r_outer", "half_angle", "axis"}
        _check_keys(preset, params, allowed)
        ri, ro = params.get("r_inner", 0.8), params.get("r_outer", 1.4)
        if not 0 < ri < ro:
            raise MeshError(f"need 0 < r_inner < r_outer, got {ri}, {ro}")
        ha = params.get("half_angle", (30.0, 30.0))
        if np.isscalar(ha):
            ha = (ha, ha)
        a, b = np.radians(ha[0]), np.radians(ha[1])
        return LiftedChartMap(
            "sphere", ((-a, -b), (a, -b), (a, b), (-a, b)), ri, ro,
            center=tuple(params.get("center", (0.0, 0.0, 0.0))), radius=0.0,
            axis=tuple(params.get("axis", (0.0, 0.0, 1.0))),
        )
    if preset == "mapped_box_slab":
        allowed = {"lift", "corners", "c_range", "taper", "rotation", "graph", "center", "radius", "axis",
                   "chart", "radii"}
        _check_keys(preset, params, allowed)
        if params.get("chart", "box") == "annulus":
            if params.get("lift", "graph") != "graph":
                raise MeshError("the annular chart supports the graph lift only")
            r0, r1 = params.get("radii", (0.3, 0.9))
            c0, c1 = params.get("c_range", (-0.1, 0.1))
            cen = params.get("center", (0.0, 0.0))
            return AnnularChartMap(r0, r1, c0, c1, taper=params.get("taper", 0.0),
                                   graph=params.get("graph", "flat"), center=tuple(cen[:2]))
        if params.get("chart", "box") != "box":
            raise MeshError(f"unknown chart {params['chart']!r}; expected 'box' or 'annulus'")
        corners = np.asarray(params.get("corners", ((-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5))), float)
        rot = np.radians(params.get("rotation", 0.0))
        R = np.array([[np.cos(rot), -np.sin(rot)], [np.sin(rot), np.cos(rot)]])
        corners = corners @ R.T
        lift = params.get("lift", "graph")
        if lift == "sphere":
            corners = np.radians(corners)
        c0, c1 = params.get("c_range", (-0.1, 0.1))
        return LiftedChartMap(
            lift, tuple(map(tuple, corners)), c0, c1,
            taper=params.get("taper", 0.0), graph=params.get("graph", "flat"),
            center=tuple(params.get("center", (0.0, 0.0, 0.0))), radius=params.get("radius", 0.0),
            axis=tuple(params.get("axis", (0.0, 0.0, 1.0))),
        )
    raise MeshError(f"unknown preset {preset!r}; expected one of {PRESETS}")


def _check_keys(preset, params, allowed):
    extra = set(params) - allowed
    if extra:
        raise MeshError(f"unknown parameters for {preset}: {sorted(extra)}")


def perturbation_field(s: np.ndarray, seed: int, n_modes: int = 3) -> np.ndarray:
    """Smooth pseudo-random field on [0,1]^3 vanishing on the box boundary.

    Values lie in [-1, 1] per component.
    """
    rng = np.random.default_rng(seed)
    bump = 64.0 * np.prod(s * (1.0 - s), axis=1)
    out = np.zeros_like(s)
    for d in range(3):
        k = rng.integers(1, 3, size=(n_modes, 3))
        phase = rng.uniform(0, 2 * np.pi, size=n_modes)
        amp = rng.uniform(-1, 1, size=n_modes)
        amp /= np.sum(np.abs(amp))
        out[:, d] = bump * np.sum(amp * np.sin(np.pi * s @ k.T + phase), axis=1)
    return out


def generate_mesh(
    preset: str,
    divisions: Sequence[int],
    geometry_order: int,
    params: dict | None = None,
    perturb: bool = True,
    amplitude: float = 0.1,
    seed: int = 0,
) -> Mesh:
    """Generate a conforming hexahedral mesh for a preset bulk domain.

    Parameters
    ----------
    preset : str
        One of ``PRESETS``.
    divisions : (n1, n2, n3)
        Elements along the three parameter directions.
    geometry_order : int
        Lagrange order of the isoparametric map.
    params : dict, optional
        Preset geometry parameters.
    perturb : bool
        Displace non-boundary nodes by a smooth field of size ``amplitude``
        times the local element size so that element faces do not follow
        the level sets. If the perturbed map inverts an element, the
        amplitude is halved (up to ``MAX_BACKTRACK`` times, then dropped);
        the amplitude used is stored in ``mesh.perturbation``.
    """
    divisions = tuple(int(n) for n in divisions)
    if len(divisions) != 3 or min(divisions) < 1:
        raise MeshError(f"divisions must be three positive integers, got {divisions}")
    params = dict(params or {})
    fmap = _make_map(preset, params)
    periodic = bool(getattr(fmap, "periodic", False))
    sp = structured_space(divisions, geometry_order, periodic)
    g = sp.grid_index()
    s0 = g / (np.asarray(divisions, dtype=float) * geometry_order)
    h = 1.0 / np.asarray(divisions, dtype=float)
    amps = [0.0]
    if perturb and amplitude != 0:
        amps = [amplitude * 0.5**k for k in range(MAX_BACKTRACK + 1)] + [0.0]
    dpert = perturbation_field(s0, seed) if amps[0] != 0 else None
    for a in amps:
        mesh = _assemble_mesh(preset, params, fmap, sp, divisions, geometry_order, periodic,
                              s0 if a == 0 else s0 + a * h * dpert, {"enabled": bool(perturb), "amplitude": a,
                                                                     "requested_amplitude": amplitude, "seed": seed})
        try:
            check_jacobians(mesh, geometry_order + 2)
        except MeshQualityError:
            if a == 0:
                raise
            log.warning("perturbation amplitude %.4g inverts elements; halving", a)
            continue
        return mesh
    raise AssertionError("unreachable")


def _assemble_mesh(preset, params, fmap, sp, divisions, geometry_order, periodic, s, perturbation) -> Mesh:
    nodes = fmap(s)
    nodes.setflags(write=False)

    faces = []
    for side in range(6):
        axis, sgn = FACES[side]
        if periodic and axis == 0:
            continue
        eg_axis = np.unravel_index(np.arange(sp.elements.shape[0]), divisions[::-1])[::-1][axis]
        target = 0 if sgn < 0 else divisions[axis] - 1
        for e in np.flatnonzero(eg_axis == target):
            faces.append((e, side, side))
    bfaces = np.asarray(faces, dtype=np.int64)
    bfaces.setflags(write=False)

    mesh = Mesh(
        geometry_order=geometry_order,
        divisions=divisions,
        nodes=nodes,
        elements=sp.elements,
        boundary_faces=bfaces,
        region_tags=fmap.tags,
        levelset_tags=fmap.levelset_tags,
        preset=preset,
        params=params,
        perturbation=perturbation,
        periodic=periodic,
    )
    return mesh


# --------------------------------------------------------------------------
# isoparametric mapping


@dataclass(frozen=True)
class Geometry:
    """Isoparametric map data at points of a batch of elements.

    Arrays carry leading axes ``(E, Q)``; ``J[..., i, a] = dx_i / dxi_a`` and
    ``G = J^{-1}`` so that ``G[..., a, i] = dxi_a / dx_i``.
    """

    x: np.ndarray
    J: np.ndarray
    detJ: np.ndarray
    G: np.ndarray
    X2: np.ndarray | None = None
    X3: np.ndarray | None = None


def element_geometry(mesh: Mesh, elements: np.ndarray, basis: BasisEval) -> Geometry:
    """Evaluate the map of ``elements`` at the points of ``basis``."""
    Xe = mesh.nodes[mesh.elements[elements]]  # (E, nb, 3)
    x = np.einsum("qs,esi->eqi", basis.values, Xe)
    J = np.einsum("qsa,esi->eqia", basis.d1, Xe)
    detJ = np.linalg.det(J)
    G = np.linalg.inv(J)
    X2 = np.einsum("qsab,esi->eqiab", basis.d2, Xe) if basis.d2 is not None else None
    X3 = np.einsum("qsabc,esi->eqiabc", basis.d3, Xe) if basis.d3 is not None else None
    return Geometry(x, J, detJ, G, X2, X3)


def physical_derivatives(geo: Geometry, d1, d2=None, d3=None):
    """Chain rule from reference to physical derivatives.

    ``d1`` has shape ``(..., s, 3)`` with the same leading axes as ``geo``
    (or broadcastable to them); ``s`` indexes basis functions or field
    components. Returns ``(g1, g2, g3)`` with unavailable orders ``None``.
    """
    G = geo.G
    g1 = np.einsum("...sa,...ai->...si", d1, G)
    g2 = g3 = None
    if d2 is not None:
        if geo.X2 is None:
            raise ValueError("second physical derivatives need second map derivatives")
        t2 = d2 - np.einsum("...si,...iab->...sab", g1, geo.X2)
        g2 = np.einsum("...sab,...ai,...bj->...sij", t2, G, G, optimize=True)
    if d3 is not None:
        if geo.X3 is None or g2 is None:
            raise ValueError("third physical derivatives need third map derivatives")
        J, X2 = geo.J, geo.X2
        corr = (
            np.einsum("...sij,...iac,...jb->...sabc", g2, X2, J, optimize=True)
            + np.einsum("...sij,...ia,...jbc->...sabc", g2, J, X2, optimize=True)
            + np.einsum("...sij,...iab,...jc->...sabc", g2, X2, J, optimize=True)
            + np.einsum("...si,...iabc->...sabc", g1, geo.X3)
        )
        t3 = d3 - corr
        g3 = np.einsum("...sabc,...ai,...bj,...ck->...sijk", t3, G, G, G, optimize=True)
    return g1, g2, g3


def field_derivatives(geo: Geometry, basis: BasisEval, values: np.ndarray, order: int):
    """Physical derivatives of a discrete field with nodal ``values``.

    ``values`` has shape ``(E, nb, ncomp)``; returns ``(f, g1, g2, g3)``
    with shapes ``(E, Q, ncomp)``, ``(E, Q, ncomp, 3)`` and so on.
    """
    f = np.einsum("qs,esn->eqn", basis.values, values)
    r1 = np.einsum("qsa,esn->eqna", basis.d1, values)
    r2 = np.einsum("qsab,esn->eqnab", basis.d2, values) if order >= 2 else None
    r3 = np.einsum("qsabc,esn->eqnabc", basis.d3, values) if order >= 3 else None
    g1, g2, g3 = physical_derivatives(geo, r1, r2, r3)
    return f, g1, g2, g3


@dataclass(frozen=True)
class PhysicalPointData:
    x: np.ndarray
    J: np.ndarray
    detJ: float
    values: np.ndarray
    d1: np.ndarray | None
    d2: np.ndarray | None
    d3: np.ndarray | None


def map_point(mesh: Mesh, element_id: int, xi: Sequence[float], derivative_order: int = 1) -> PhysicalPointData:
    """Map a reference point and return physical basis derivatives there."""
    if not 0 <= derivative_order <= 3:
        raise ValueError("derivative order must be in 0..3")
    xi = np.asarray(xi, dtype=float).reshape(1, 3)
    if np.any(np.abs(xi) > 1 + 1e-12):
        raise ValueError(f"reference point {xi.ravel()} outside [-1,1]^3")
    basis = mesh.reference.evaluate(xi, max(derivative_order, 1))
    geo = element_geometry(mesh, np.array([element_id]), basis)
    if geo.detJ[0, 0] <= 0:
        raise MeshQualityError(f"non-positive Jacobian {geo.detJ[0, 0]:.3e} in element {element_id}")
    k = derivative_order
    g1, g2, g3 = physical_derivatives(
        geo, basis.d1[None], basis.d2[None] if k >= 2 else None, basis.d3[None] if k >= 3 else None
    )
    pick = lambda a: None if a is None else a[0, 0]
    return PhysicalPointData(
        geo.x[0, 0], geo.J[0, 0], float(geo.detJ[0, 0]), basis.values[0],
        pick(g1) if k >= 1 else None, pick(g2), pick(g3),
    )


def iter_element_batches(n_elements: int, batch: int):
    for start in range(0, n_elements, batch):
        yield np.arange(start, min(start + batch, n_elements))


def check_jacobians(mesh: Mesh, rule_points: int | None = None) -> float:
    """Minimum detJ over all quadrature points; raises on non-positive values."""
    nq = rule_points or mesh.geometry_order + 1
    pts, _ = gauss_hex(nq)
    basis = mesh.reference.evaluate(pts, 1)
    worst = np.inf
    for batch in iter_element_batches(mesh.n_elements, 256):
        geo = element_geometry(mesh, batch, basis)
        worst = min(worst, float(geo.detJ.min()))
    if worst <= 0:
        raise MeshQualityError(f"mesh has non-positive Jacobian determinant (min {worst:.3e})")
    return worst


def mesh_volume(mesh: Mesh, rule_points: int | None = None) -> float:
    pts, w = gauss_hex(rule_points or mesh.geometry_order + 1)
    basis = mesh.reference.evaluate(pts, 1)
    total = 0.0
    for batch in iter_element_batches(mesh.n_elements, 256):
        geo = element_geometry(mesh, batch, basis)
        total += float(np.einsum("eq,q->", geo.detJ, w))
    return total


@dataclass(frozen=True)
class FaceQuadrature:
    """Points, outward unit normals ``m`` and area weights on boundary faces.

    Arrays carry leading axes ``(F, Q)`` over the faces requested.
    """

    elements: np.ndarray
    local_faces: np.ndarray
    xi: np.ndarray
    x: np.ndarray
    m: np.ndarray
    weights: np.ndarray


def boundary_quadrature(mesh: Mesh, faces: np.ndarray, rule_points: int | None = None) -> FaceQuadrature:
    """Gauss rule on boundary faces ``faces`` (rows of ``mesh.boundary_faces``).

    Uses Nanson's relation: on the face ``xi_a = +-1`` the outward normal is
    ``+-grad(xi_a)/|grad(xi_a)|`` and ``dA = detJ |grad(xi_a)| dxi dxi'``.
    """
    faces = np.atleast_2d(np.asarray(faces))
    nq = rule_points or mesh.geometry_order + 1
    pts2, w2 = gauss_quad(nq)
    F = faces.shape[0]
    xi = np.empty((F, pts2.shape[0], 3))
    x = np.empty_like(xi)
    m = np.empty_like(xi)
    wts = np.empty((F, pts2.shape[0]))
    for lf in np.unique(faces[:, 1]):
        sel = np.flatnonzero(faces[:, 1] == lf)
        xi_f = face_points(int(lf), pts2)
        basis = mesh.reference.evaluate(xi_f, 1)
        geo = element_geometry(mesh, faces[sel, 0], basis)
        axis, sgn = FACES[int(lf)]
        grad = geo.G[:, :, axis, :]
        gn = np.linalg.norm(grad, axis=-1)
        if np.any(gn * geo.detJ <= 0):
            raise MeshQualityError("degenerate boundary face")
        xi[sel] = xi_f
        x[sel] = geo.x
        m[sel] = sgn * grad / gn[..., None]
        wts[sel] = geo.detJ * gn * w2
    return FaceQuadrature(faces[:, 0], faces[:, 1], xi, x, m, wts)
