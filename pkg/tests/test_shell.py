import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bulktrace.jets import Jet
from bulktrace.levelset import LevelSetExpression, frame_jets, levelset_derivatives, surface_frame
from bulktrace.mesh import element_geometry
from bulktrace.reference import build_reference_element, gauss_hex
from bulktrace.shell import (
    ROWS,
    MaterialError,
    MaterialParams,
    constitutive_matrix,
    energy_density,
    frame_to_tensor,
    strain_operator,
    strains,
    stress_resultants,
    strong_form_residuals,
    tangent_basis,
)

from conftest import flat_slab, sphere_slab

MAT = MaterialParams(E=2.1e7, nu=0.3, t=0.1)


def skew(w):
    return np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])


def sphere_frame(x):
    expr = LevelSetExpression("sphere", {"radius": 1.0})
    return surface_frame(expr.gradient(x), expr.hessian(x))


def test_lame_constants():
    assert MAT.mu == pytest.approx(2.1e7 / 2.6)
    assert MAT.lam == pytest.approx(2.1e7 * 0.3 / 0.91)
    assert MAT.rho_w == pytest.approx(2.1e6)


@pytest.mark.parametrize("kw", [dict(E=0.0), dict(nu=0.5), dict(nu=-1.0), dict(t=-1.0), dict(alpha_s=0.0)])
def test_invalid_material(kw):
    args = dict(E=1.0, nu=0.3, t=0.1) | kw
    with pytest.raises(MaterialError):
        MaterialParams(**args)


def test_zero_and_translation_strains(rng):
    x = rng.normal(size=(5, 3))
    fr = sphere_frame(x)
    z = np.zeros((5, 3, 3))
    st0 = strains(z, np.zeros((5, 3)), z, fr)
    for a in (st0.memb, st0.bend, st0.shear):
        assert np.abs(a).max() == 0.0


def test_rigid_rotation_gives_zero_strain(rng):
    x = rng.normal(size=(6, 3))
    fr = sphere_frame(x)
    om = np.array([0.3, -0.2, 0.7])
    W = skew(om)
    grad_u = np.broadcast_to(W, (6, 3, 3))
    w = np.cross(om, fr.n)  # rotation of the director
    grad_w = np.einsum("ij,qjk->qik", W, fr.grad_n)
    s = strains(grad_u, w, grad_w, fr)
    for a in (s.memb, s.bend, s.shear):
        assert np.abs(a).max() < 1e-14


def test_uniaxial_membrane_energy():
    # phi = z, u = (a x, 0, 0), nu = 0: density t E a^2 / 2
    mat = MaterialParams(E=3.0, nu=0.0, t=0.2)
    fr = surface_frame(np.array([[0.0, 0, 1]]), np.zeros((1, 3, 3)))
    a = 0.01
    gu = np.zeros((1, 3, 3))
    gu[0, 0, 0] = a
    s = strains(gu, np.zeros((1, 3)), np.zeros((1, 3, 3)), fr)
    r = stress_resultants(s, mat, fr)
    assert energy_density(s, r, fr.coarea)[0] == pytest.approx(0.5 * 0.2 * 3.0 * a * a, rel=1e-14)


finite = st.floats(-1.0, 1.0, allow_nan=False, allow_infinity=False)


@settings(max_examples=40, deadline=None)
@given(st.lists(finite, min_size=30, max_size=30), st.floats(-0.99, 0.49), st.floats(0.5, 2.0))
def test_invariants_of_strains_and_resultants(vals, nu, r):
    v = np.asarray(vals)
    x = np.array([[r, 0.3 * r, -0.2 * r]])
    fr = sphere_frame(x)
    gu, gw = v[:9].reshape(1, 3, 3), v[9:18].reshape(1, 3, 3)
    w = (fr.P[0] @ v[18:21])[None]
    mat = MaterialParams(E=1.0, nu=nu, t=0.1)
    s = strains(gu, w, gw, fr)
    P = fr.P
    sand = lambda a: np.einsum("qij,qjk,qkl->qil", P, a, P)
    scale = 1.0 + np.abs(v).max()
    assert np.abs(sand(s.memb) - s.memb).max() <= 1e-12 * scale
    assert np.abs(sand(s.bend) - s.bend).max() <= 1e-12 * scale
    assert np.abs(sand(s.shear)).max() <= 1e-12 * scale
    assert abs(np.trace(s.shear[0])) <= 1e-12 * scale
    res = stress_resultants(s, mat, fr)
    for m in (res.m, res.n_eff):
        assert np.abs(sand(m) - m).max() <= 1e-10 * (np.abs(m).max() + 1e-300)
        assert np.abs(m - np.swapaxes(m, -1, -2)).max() <= 1e-12 * (np.abs(m).max() + 1e-300)
    np.testing.assert_allclose(res.n_real, res.n_eff + fr.H @ res.m, atol=1e-14)
    assert energy_density(s, res, fr.coarea)[0] >= -1e-15


def test_constitutive_matrix_spd():
    D = constitutive_matrix(MAT)
    assert D.shape == (len(ROWS), len(ROWS))
    np.testing.assert_allclose(D, D.T)
    assert np.linalg.eigvalsh(D).min() > 0
    assert constitutive_matrix(MAT, rho_w=0.0)[8, 8] == 0.0


def test_tangent_basis_right_handed(rng):
    n = rng.normal(size=(20, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    e1, e2 = tangent_basis(n)
    np.testing.assert_allclose(np.cross(e1, e2), n, atol=1e-14)
    np.testing.assert_allclose(np.einsum("qi,qi->q", e1, n), 0.0, atol=1e-14)


def _element_point_data(field, e, xi, order_w):
    mesh = field.mesh
    b = mesh.reference.evaluate(xi, 3)
    geo = element_geometry(mesh, np.array([e]), b)
    _, g1, g2, g3 = levelset_derivatives(field, np.array([e]), b, geo, 3)
    fr = surface_frame(g1, g2, g3)
    bw = build_reference_element(order_w).evaluate(xi, 1)
    dBu = np.matmul(b.d1[None], geo.G)
    dBw = np.matmul(bw.d1[None], geo.G)
    return mesh, b, bw, geo, fr, dBu, dBw


def test_strain_operator_matches_pointwise_strains(rng):
    """B times nodal coefficients equals the tensor strains of the interpolated fields."""
    _, field = sphere_slab(3)
    xi, _ = gauss_hex(2)
    mesh, b, bw, geo, fr, dBu, dBw = _element_point_data(field, 1, xi, 2)
    U = rng.normal(size=(b.values.shape[1], 3))
    Wr = rng.normal(size=(bw.values.shape[1], 3))
    gu = np.einsum("eqja,ji->eqia", dBu, U)
    wr = bw.values @ Wr
    gwr = np.einsum("eqja,ji->eqia", dBw, Wr)
    w = np.einsum("eqij,qj->eqi", fr.P, wr)
    gw = np.einsum("eqijk,qj->eqik", fr.dP, wr) + np.einsum("eqij,eqjk->eqik", fr.P, gwr)
    s = strains(gu, w, gw, fr)
    e1, e2 = tangent_basis(fr.n)
    B = strain_operator(dBu, bw.values, dBw, fr, e1, e2)
    vec = B @ np.concatenate([U.ravel(), Wr.ravel()])
    np.testing.assert_allclose(frame_to_tensor(vec[..., 0:3], e1, e2), s.memb, atol=1e-10)
    np.testing.assert_allclose(frame_to_tensor(vec[..., 3:6], e1, e2), s.bend, atol=1e-9)
    gam = 2.0 * np.einsum("eqij,eqj->eqi", s.shear, fr.n)  # shear vector 2 eps_s . n
    np.testing.assert_allclose(vec[..., 6], np.einsum("eqi,eqi->eq", gam, e1), atol=1e-10)
    np.testing.assert_allclose(vec[..., 7], np.einsum("eqi,eqi->eq", gam, e2), atol=1e-10)
    np.testing.assert_allclose(vec[..., 8], np.einsum("qi,eqi->eq", wr, fr.n), atol=1e-12)


def test_energy_from_operator_equals_tensor_energy(rng):
    _, field = sphere_slab(2)
    xi, _ = gauss_hex(2)
    mesh, b, bw, geo, fr, dBu, dBw = _element_point_data(field, 0, xi, 1)
    U = rng.normal(size=(b.values.shape[1], 3))
    Wr = rng.normal(size=(bw.values.shape[1], 3))
    e1, e2 = tangent_basis(fr.n)
    B = strain_operator(dBu, bw.values, dBw, fr, e1, e2)
    vec = B @ np.concatenate([U.ravel(), Wr.ravel()])
    D = constitutive_matrix(MAT, rho_w=0.0)
    e_op = 0.5 * np.einsum("eqr,rs,eqs->eq", vec, D, vec) * fr.coarea
    gu = np.einsum("eqja,ji->eqia", dBu, U)
    wr = bw.values @ Wr
    w = np.einsum("eqij,qj->eqi", fr.P, wr)
    gw = np.einsum("eqijk,qj->eqik", fr.dP, wr) + np.einsum("eqij,eqjk->eqik", fr.P,
                                                           np.einsum("eqja,ji->eqia", dBw, Wr))
    s = strains(gu, w, gw, fr)
    e_t = energy_density(s, stress_resultants(s, MAT, fr), fr.coarea)
    np.testing.assert_allclose(e_op, e_t, rtol=1e-9)


def test_strong_form_variants_agree(rng):
    """Force balance in terms of n_real and of the effective normal force coincide."""
    _, field = sphere_slab(3)
    mesh = field.mesh
    pts, _ = gauss_hex(2)
    b = mesh.reference.evaluate(pts, 3)
    geo = element_geometry(mesh, np.array([2]), b)
    _, g1, g2, g3 = levelset_derivatives(field, np.array([2]), b, geo, 3)
    fj = frame_jets(g1, g2, g3)
    x = geo.x
    A, C = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
    Bt = rng.normal(size=(3, 3, 3))
    Bt = 0.5 * (Bt + np.swapaxes(Bt, 1, 2))
    gu = A + np.einsum("ijk,eqk->eqij", Bt, x)
    ggu = np.broadcast_to(Bt, x.shape[:2] + Bt.shape)
    w = np.einsum("ij,eqj->eqi", C, x)
    gw = np.broadcast_to(C, x.shape[:2] + (3, 3))
    zero3 = np.zeros(x.shape[:2] + (3, 3, 3))
    f = np.zeros(x.shape)
    res = strong_form_residuals(fj, Jet(gu, ggu), Jet(w, gw), Jet(gw, zero3), MAT, f, f)
    scale = np.abs(res.r_F).max()
    assert scale > 0
    np.testing.assert_allclose(res.r_F, res.r_F_effective, atol=1e-10 * scale)


def test_flat_plate_moment_balance_reduces_to_plate_equation():
    """On phi = z, r_M is the classical plate moment balance  div m - q."""
    _, field = flat_slab(2, perturb=False)
    mesh = field.mesh
    pts, _ = gauss_hex(2)
    b = mesh.reference.evaluate(pts, 3)
    geo = element_geometry(mesh, np.array([0]), b)
    _, g1, g2, g3 = levelset_derivatives(field, np.array([0]), b, geo, 3)
    fj = frame_jets(g1, g2, g3)
    x = geo.x
    # rotation field beta = (x^2 y, x y^2, 0) entering w = beta, deflection w_z = x y
    bx, by = x[..., 0] ** 2 * x[..., 1], x[..., 0] * x[..., 1] ** 2
    w = np.stack([bx, by, 0 * bx], axis=-1)
    gw = np.zeros(x.shape + (3,))
    gw[..., 0, 0], gw[..., 0, 1] = 2 * x[..., 0] * x[..., 1], x[..., 0] ** 2
    gw[..., 1, 0], gw[..., 1, 1] = x[..., 1] ** 2, 2 * x[..., 0] * x[..., 1]
    ggw = np.zeros(x.shape + (3, 3))
    ggw[..., 0, 0, 0], ggw[..., 0, 0, 1] = 2 * x[..., 1], 2 * x[..., 0]
    ggw[..., 0, 1, 0] = 2 * x[..., 0]
    ggw[..., 1, 1, 1], ggw[..., 1, 1, 0] = 2 * x[..., 0], 2 * x[..., 1]
    ggw[..., 1, 0, 1] = 2 * x[..., 1]
    gu = np.zeros(x.shape + (3,))
    gu[..., 2, 0], gu[..., 2, 1] = x[..., 1], x[..., 0]
    ggu = np.zeros(x.shape + (3, 3))
    ggu[..., 2, 0, 1] = ggu[..., 2, 1, 0] = 1.0
    zero = np.zeros(x.shape)
    res = strong_form_residuals(fj, Jet(gu, ggu), Jet(w, gw), Jet(gw, ggw), MAT, zero, zero)
    D = MAT.E * MAT.t**3 / (12 * (1 - MAT.nu**2))
    nu, X, Y = MAT.nu, x[..., 0], x[..., 1]
    # classical plate: m = D [(1-nu) sym grad beta + nu div beta I], q = G t (grad w_z + beta)
    dmx = D * (2 * Y + nu * 2 * Y) + D * (1 - nu) / 2 * (2 * Y)
    dmy = D * (2 * X + nu * 2 * X) + D * (1 - nu) / 2 * (2 * X)
    G = MAT.mu * MAT.t
    qx, qy = G * (Y + bx), G * (X + by)
    np.testing.assert_allclose(res.r_M[..., 0], dmx - qx, rtol=1e-9, atol=1e-9 * D)
    np.testing.assert_allclose(res.r_M[..., 1], dmy - qy, rtol=1e-9, atol=1e-9 * D)
    np.testing.assert_allclose(res.r_M[..., 2], 0.0, atol=1e-9 * D)
