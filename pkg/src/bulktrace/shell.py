"""Linear Reissner-Mindlin shell mechanics written with surface operators.

Strains, stress resultants and strong-form residuals are evaluated
pointwise; tensors are 3x3 Cartesian with arbitrary leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .jets import Jet, jeinsum, jscale
from .levelset import FrameJets, SurfaceFrame

SQRT2 = np.sqrt(2.0)


class MaterialError(ValueError):
    pass


@dataclass(frozen=True)
class MaterialParams:
    """Isotropic shell material.

    ``lam`` uses the plane-stress value ``E nu / (1 - nu^2)``.
    """

    E: float
    nu: float
    t: float
    alpha_s: float = 1.0

    def __post_init__(self):
        if not self.E > 0:
            raise MaterialError(f"Young's modulus must be positive, got {self.E}")
        if not -1.0 < self.nu < 0.5:
            raise MaterialError(f"Poisson ratio must lie in (-1, 0.5), got {self.nu}")
        if not self.t > 0:
            raise MaterialError(f"thickness must be positive, got {self.t}")
        if not self.alpha_s > 0:
            raise MaterialError(f"shear correction factor must be positive, got {self.alpha_s}")

    @property
    def mu(self) -> float:
        return self.E / (2.0 * (1.0 + self.nu))

    @property
    def lam(self) -> float:
        return self.E * self.nu / (1.0 - self.nu**2)

    @property
    def rho_w(self) -> float:
        """Default stabilisation parameter for the normal part of the difference vector."""
        return self.E * self.t


@dataclass(frozen=True)
class StrainState:
    memb: np.ndarray
    bend: np.ndarray
    shear: np.ndarray


@dataclass(frozen=True)
class StressResultants:
    m: np.ndarray
    n_eff: np.ndarray
    q: np.ndarray
    n_real: np.ndarray


def _sym(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _mm(a, b):
    return np.einsum("...ij,...jk->...ik", a, b)


def strains(grad_u: np.ndarray, w: np.ndarray, grad_w: np.ndarray, frame: SurfaceFrame) -> StrainState:
    """Membrane, bending and shear strains.

    ``grad_u`` and ``grad_w`` are Cartesian gradients (``[..., i, j] =
    d_j v_i``) of the displacement and of the tangential difference vector.
    """
    P, H, Q, n = frame.P, frame.H, frame.Q, frame.n
    dir_u = _mm(grad_u, P)
    cov_u = _mm(P, dir_u)
    cov_w = _mm(P, _mm(grad_w, P))
    memb = _sym(cov_u)
    bend = _sym(_mm(H, dir_u) + cov_w)
    shear = _sym(_mm(Q, dir_u) + n[..., :, None] * w[..., None, :])
    return StrainState(memb, bend, shear)


def plane_stress(eps: np.ndarray, P: np.ndarray, mat: MaterialParams) -> np.ndarray:
    """``2 mu eps + lam tr(eps) P`` for an in-plane strain."""
    tr = np.trace(eps, axis1=-2, axis2=-1)[..., None, None]
    return 2.0 * mat.mu * eps + mat.lam * tr * P


def stress_resultants(st: StrainState, mat: MaterialParams, frame: SurfaceFrame) -> StressResultants:
    """Thickness-integrated resultants; the shear force carries ``alpha_s``."""
    m = mat.t**3 / 12.0 * plane_stress(st.bend, frame.P, mat)
    n_eff = mat.t * plane_stress(st.memb, frame.P, mat)
    # shear strain is trace-free, so only the 2 mu part of Hooke's law remains
    q = mat.alpha_s * mat.t * 2.0 * mat.mu * st.shear
    return StressResultants(m, n_eff, q, n_eff + _mm(frame.H, m))


def energy_density(st: StrainState, res: StressResultants, coarea) -> np.ndarray:
    """Stored energy per bulk volume (co-area weight included)."""
    dd = lambda a, b: np.einsum("...ij,...ij->...", a, b)
    return 0.5 * (dd(st.memb, res.n_eff) + dd(st.bend, res.m) + dd(st.shear, res.q)) * coarea


# --------------------------------------------------------------------------
# discrete operators in a local tangent frame


def tangent_basis(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal tangent vectors ``(e1, e2)`` with ``e1 x e2 = n``."""
    k = np.argmin(np.abs(n), axis=-1)
    a = np.zeros_like(n)
    np.put_along_axis(a, k[..., None], 1.0, axis=-1)
    e1 = a - np.einsum("...i,...i->...", a, n)[..., None] * n
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(n, e1)
    return e1, e2


N_ROWS = 9
ROWS = ("m11", "m22", "m12", "b11", "b22", "b12", "g1", "g2", "stab")


def strain_operator(dBu, Bw, dBw, frame: SurfaceFrame, e1, e2) -> np.ndarray:
    """Generalised strains per unit nodal coefficient.

    Rows follow :data:`ROWS`: membrane and bending strains as
    ``(e11, e22, sqrt(2) e12)`` in the frame ``(e1, e2)``, the transverse
    shear vector ``(g1, g2)`` and the normal component of the raw difference
    vector for the stabilisation. Columns are ``3 j + a`` for displacement
    basis ``j`` and component ``a``, followed by the difference-vector
    coefficients in the same layout.

    Shapes: ``dBu (..., nu, 3)``, ``Bw (..., nw)``, ``dBw (..., nw, 3)``.
    """
    n, H = frame.n, frame.H
    Ev = np.stack([e1, e2], axis=-2)  # (..., 2, 3)
    d = np.einsum("...ja,...ba->...jb", dBu, Ev)
    c = np.einsum("...ja,...ba->...jb", dBw, Ev)
    HE = np.einsum("...ab,...gb->...ga", H, Ev)
    Hab = np.einsum("...ga,...ba->...gb", Ev, HE)
    nu, nw = dBu.shape[-2], dBw.shape[-2]
    lead = np.broadcast_shapes(dBu.shape[:-2], dBw.shape[:-2], n.shape[:-1])
    Bu = np.zeros(lead + (N_ROWS, nu, 3))
    Bww = np.zeros(lead + (N_ROWS, nw, 3))

    def outer(a, b):  # a (..., j), b (..., a) -> (..., j, a)
        return a[..., :, None] * b[..., None, :]

    E0, E1 = Ev[..., 0, :], Ev[..., 1, :]
    H0, H1 = HE[..., 0, :], HE[..., 1, :]
    d0, d1 = d[..., 0], d[..., 1]
    c0, c1 = c[..., 0], c[..., 1]
    Bw_ = np.broadcast_to(Bw, lead + (nw,))
    Cn = outer(Bw_, n)

    Bu[..., 0, :, :] = outer(d0, E0)
    Bu[..., 1, :, :] = outer(d1, E1)
    Bu[..., 2, :, :] = (outer(d1, E0) + outer(d0, E1)) / SQRT2
    Bu[..., 3, :, :] = outer(d0, H0)
    Bu[..., 4, :, :] = outer(d1, H1)
    Bu[..., 5, :, :] = (outer(d1, H0) + outer(d0, H1)) / SQRT2
    Bu[..., 6, :, :] = outer(d0, n)
    Bu[..., 7, :, :] = outer(d1, n)

    Bww[..., 3, :, :] = outer(c0, E0) - Cn * Hab[..., 0, 0, None, None]
    Bww[..., 4, :, :] = outer(c1, E1) - Cn * Hab[..., 1, 1, None, None]
    Bww[..., 5, :, :] = (outer(c1, E0) + outer(c0, E1)) / SQRT2 - SQRT2 * Cn * Hab[..., 0, 1, None, None]
    Bww[..., 6, :, :] = outer(Bw_, E0)
    Bww[..., 7, :, :] = outer(Bw_, E1)
    Bww[..., 8, :, :] = Cn
    return np.concatenate(
        [Bu.reshape(lead + (N_ROWS, 3 * nu)), Bww.reshape(lead + (N_ROWS, 3 * nw))], axis=-1
    )


def constitutive_matrix(mat: MaterialParams, rho_w: float | None = None) -> np.ndarray:
    """Block-diagonal material matrix matching :data:`ROWS`."""
    mu, lam, t = mat.mu, mat.lam, mat.t
    C = np.array([[2 * mu + lam, lam, 0.0], [lam, 2 * mu + lam, 0.0], [0.0, 0.0, 2 * mu]])
    D = np.zeros((N_ROWS, N_ROWS))
    D[0:3, 0:3] = t * C
    D[3:6, 3:6] = t**3 / 12.0 * C
    D[6:8, 6:8] = mat.alpha_s * t * mu * np.eye(2)
    D[8, 8] = mat.rho_w if rho_w is None else rho_w
    return D


def frame_to_tensor(v3: np.ndarray, e1: np.ndarray, e2: np.ndarray) -> np.ndarray:
    """Symmetric in-plane tensor from ``(a11, a22, sqrt(2) a12)`` frame components."""
    out = v3[..., 0, None, None] * e1[..., :, None] * e1[..., None, :]
    out = out + v3[..., 1, None, None] * e2[..., :, None] * e2[..., None, :]
    s = v3[..., 2, None, None] / SQRT2
    return out + s * (e1[..., :, None] * e2[..., None, :] + e2[..., :, None] * e1[..., None, :])


# --------------------------------------------------------------------------
# strong form


@dataclass(frozen=True)
class Residuals:
    r_F: np.ndarray
    r_M: np.ndarray
    r_F_effective: np.ndarray


def _div(T: Jet, P: np.ndarray) -> np.ndarray:
    return np.einsum("...ijk,...kj->...i", T.d, P)


def _symj(a: Jet) -> Jet:
    return 0.5 * (a + a.T)


def strong_form_residuals(
    fj: FrameJets,
    grad_u: Jet,
    w_raw: Jet,
    grad_w_raw: Jet,
    mat: MaterialParams,
    f: np.ndarray,
    c: np.ndarray,
) -> Residuals:
    """Defects of the force and moment equilibrium at points.

    ``grad_u`` is the jet of the Cartesian displacement gradient (value
    ``grad u``, derivative the second derivatives of ``u``); ``w_raw`` and
    ``grad_w_raw`` are jets of the unprojected difference vector and its
    gradient. The tangential difference vector is ``P . w_raw`` with its
    gradient from the product rule.

    ``r_F_effective`` re-evaluates the force balance in terms of the
    effective normal force, which involves the surface derivatives of the
    Weingarten map explicitly; both forms agree for exact arithmetic.
    """
    P, n, H, gn = fj.P, fj.n, fj.H, fj.grad_n
    Pv = P.v
    Q = jeinsum("i,j->ij", n, n)
    dPj = -1.0 * (jeinsum("ik,j->ijk", gn, n) + jeinsum("i,jk->ijk", n, gn))
    w = jeinsum("ij,j->i", P, w_raw)
    grad_w = jeinsum("ijk,j->ik", dPj, w_raw) + jeinsum("ij,jk->ik", P, grad_w_raw)

    dir_u = jeinsum("ij,jk->ik", grad_u, P)
    cov_u = jeinsum("ij,jk->ik", P, dir_u)
    cov_w = jeinsum("ij,jk,kl->il", P, grad_w, P)
    e_m = _symj(cov_u)
    e_b = _symj(jeinsum("ij,jk->ik", H, dir_u) + cov_w)
    e_s = _symj(jeinsum("ij,jk->ik", Q, dir_u) + jeinsum("i,j->ij", n, w))

    def sig(e: Jet) -> Jet:
        return 2.0 * mat.mu * e + mat.lam * jscale(jeinsum("ii->", e), P)

    m = (mat.t**3 / 12.0) * sig(e_b)
    n_eff = mat.t * sig(e_m)
    q = (mat.alpha_s * mat.t * 2.0 * mat.mu) * e_s
    n_real = n_eff + jeinsum("ij,jk->ik", H, m)

    qn = np.einsum("...ij,...j->...i", q.v, n.v)
    div_q = _div(q, Pv)
    Qdiv_q = np.einsum("...ij,...j->...i", Q.v, div_q)
    Hqn = np.einsum("...ij,...j->...i", H.v, qn)
    r_F = _div(n_real, Pv) + Qdiv_q + Hqn + f
    div_m = _div(m, Pv)
    r_M = np.einsum("...ij,...j->...i", Pv, div_m) - qn + c

    dirH = np.einsum("...jkl,...li->...jki", H.d, Pv)
    extra = np.einsum("...jki,...ji->...k", dirH, m.v)
    r_F_eff = _div(n_eff, Pv) + np.einsum("...ij,...j->...i", H.v, div_m) + extra + Qdiv_q + Hqn + f
    return Residuals(r_F, r_M, r_F_eff)
