"""Acceptance suite: one PASS/FAIL line per criterion.

Benchmark runs go through the command line in subprocesses so that the
memory of a large factorisation is returned to the system after each case.
"""

import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from bulktrace.assembly import BoundaryCondition, Loads, assemble
from bulktrace.config import preset_config
from bulktrace.levelset import levelset_derivatives, surface_frame
from bulktrace.mesh import element_geometry
from bulktrace.postproc import SolutionState, error_report, fit_slope
from bulktrace.reference import gauss_hex
from bulktrace.runner import run_case
from bulktrace.shell import MaterialParams
from bulktrace.solve import solve
from bulktrace.tdc import bulk_divergence_theorem_check, coarea_integral

from conftest import record_acceptance, sphere_slab
from test_tdc import t_general, t_projector, v_field

pytestmark = pytest.mark.acceptance

SIDES = ("west", "east", "south", "north")


def _cli(tmp_path_factory, *args):
    out = tmp_path_factory.mktemp("cli")
    t0 = time.perf_counter()
    res = subprocess.run([sys.executable, "-m", "bulktrace.cli", *args, "--out", str(out)],
                         capture_output=True, text=True, env=os.environ.copy())
    wall = time.perf_counter() - t0
    assert res.returncode == 0, res.stderr + res.stdout
    with open(out / "report.json", encoding="utf-8") as fh:
        return json.load(fh), out, wall


@pytest.fixture(scope="module")
def scordelis_full(tmp_path_factory):
    return _cli(tmp_path_factory, "run", "scordelis_lo")


@pytest.fixture(scope="module")
def scordelis_quarter(tmp_path_factory):
    return _cli(tmp_path_factory, "run", "scordelis_lo_quarter")


@pytest.fixture(scope="module")
def hypar(tmp_path_factory):
    return _cli(tmp_path_factory, "run", "hyperbolic_paraboloid")


@pytest.fixture(scope="module")
def flat_plate(tmp_path_factory):
    return _cli(tmp_path_factory, "run", "flat_plate_oracle")


@pytest.fixture(scope="module")
def trig_study(tmp_path_factory):
    return _cli(tmp_path_factory, "study", "trig_graph_slab")


# ---------------------------------------------------------------- 1-3, 7: benchmark displacements


def test_criterion_1_scordelis_lo(scordelis_full):
    rep, _, wall = scordelis_full
    assert rep["mesh"]["geometry_order"] == 4 and rep["mesh"]["divisions"] == [16, 16, 2]
    s = rep["samples"]["u_z(P_ref)"]
    err = abs(s["value"] / -0.3024 - 1)
    ok = err <= 0.01 and wall <= 900
    record_acceptance("1 Scordelis-Lo", ok, f"u_z(P_ref) = {s['value']:.6f}, rel. error {err:.2e} <= 1e-2, "
                                           f"wall {wall:.0f} s")
    assert ok


def test_criterion_1_scordelis_lo_cubic(tmp_path_factory):
    rep, _, _ = _cli(tmp_path_factory, "run", "scordelis_lo", "--set", "orders.p=3")
    v = rep["samples"]["u_z(P_ref)"]["value"]
    err = abs(v / -0.3024 - 1)
    ok = err <= 0.01
    record_acceptance("1 Scordelis-Lo at p=3", ok, f"u_z(P_ref) = {v:.6f}, rel. error {err:.2e} <= 1e-2")
    assert ok


def test_criterion_2_scordelis_quarter_nitsche(scordelis_full, scordelis_quarter):
    full = scordelis_full[0]["samples"]["u_z(P_ref)"]["value"]
    rep = scordelis_quarter[0]
    assert rep["system"]["storage"] == "full"  # non-symmetric Nitsche system
    quarter = rep["samples"]["u_z(P_ref)"]["value"]
    diff = abs(quarter / full - 1)
    ok = diff <= 0.005
    record_acceptance("2 Scordelis-Lo quarter", ok, f"u_z = {quarter:.6f} vs full {full:.6f}, rel. diff {diff:.2e} "
                                                   "<= 5e-3")
    assert ok


def test_criterion_3_hyperbolic_paraboloid(hypar):
    rep = hypar[0]
    assert rep["mesh"]["geometry_order"] == 4
    v = rep["samples"]["u_z(P_ref)"]["value"]
    err = abs(v / -9.3355e-5 - 1)
    ok = err <= 0.01
    record_acceptance("3 hyperbolic paraboloid", ok, f"u_z(P_ref) = {v:.6e}, rel. error {err:.2e} <= 1e-2")
    assert ok


def test_criterion_7_flat_plate_navier(flat_plate):
    rep = flat_plate[0]
    assert rep["mesh"]["geometry_order"] == 3
    s = rep["samples"]["u_z(centre)"]
    err = abs(s["ratio"] - 1)
    ok = err <= 0.01
    record_acceptance("7 flat plate vs Navier series", ok, f"w = {s['value']:.6e} vs {s['reference']:.6e}, "
                                                          f"rel. error {err:.2e} <= 1e-2")
    assert ok


# ---------------------------------------------------------------- 4: convergence orders

# the difference vector is one order below u, so the moment residual (a second
# derivative of w) converges at p - 2; see the decisions ledger
RATE_LIMITED = {("eps_res_M", 2), ("eps_res_M", 3)}

SLOPE_CASES = [("eps_res_F", p, -1.2) for p in (2, 3, 4)] + [("eps_energy", p, 0.7) for p in (2, 3, 4)] + \
              [("eps_res_M", p, -1.2) for p in (2, 3)]


@pytest.mark.parametrize(
    "kind,p,offset",
    [pytest.param(*c, marks=pytest.mark.xfail(strict=True, reason="w of order p-1 limits the moment residual to "
                                                                    "rate p-2"))
     if c[:2] in RATE_LIMITED else c for c in SLOPE_CASES],
    ids=[f"{k}-p{p}" for k, p, _ in SLOPE_CASES],
)
def test_criterion_4_convergence_orders(trig_study, kind, p, offset):
    rep = trig_study[0]
    slope = rep["slopes"][f"trig_graph_slab/p{p}/{kind}"]
    ok = slope >= p + offset
    record_acceptance(f"4 slope {kind} p={p}", ok, f"{slope:.3f} >= {p + offset:.1f}")
    assert ok


def test_criterion_4_table_and_reference(trig_study):
    rep, out, _ = trig_study
    rows = (out / "table.csv").read_text().splitlines()
    assert len(rows) == 1 + 3 * 4
    ref = rep["reference"]
    assert ref["order"] == 5 and ref["reference_energy"] > 0
    # the reference must be well below the finest study errors
    table = json.loads((out / "table.json").read_text())["rows"]
    finest = min(r["eps_energy"] for r in table)
    ok = abs(ref["correction"]) < finest
    record_acceptance("4 overkill reference", ok, f"Richardson correction {abs(ref['correction']):.2e} < smallest "
                                                 f"energy error {finest:.2e}")
    assert ok


# ---------------------------------------------------------------- 5: Clapeyron identity


def test_criterion_5_clapeyron_on_benchmarks(scordelis_full, hypar, flat_plate):
    worst = 0.0
    for rep in (scordelis_full[0], hypar[0], flat_plate[0]):
        assert rep["clapeyron"]["applicable"]
        worst = max(worst, rep["clapeyron"]["relative_difference"])
    for name, over in (("sphere_slab", {}), ("trig_graph_slab", {"geometry": {"divisions": [6, 2, 2]}})):
        r = run_case(preset_config(name, **over))
        assert r.clapeyron["applicable"]
        worst = max(worst, r.clapeyron["relative_difference"])
    ok = worst <= 1e-9
    record_acceptance("5 Clapeyron e(u_h) = F.x/2", ok, f"max rel. difference {worst:.2e} <= 1e-9 on 5 cases")
    assert ok


# ---------------------------------------------------------------- 6: geometry and operator oracles


def _frames(field, order, nq):
    mesh = field.mesh
    pts, _ = gauss_hex(nq)
    b = mesh.reference.evaluate(pts, order)
    el = np.arange(mesh.n_elements)
    geo = element_geometry(mesh, el, b)
    _, g1, g2, g3 = levelset_derivatives(field, el, b, geo, order)
    return geo, surface_frame(g1, g2, g3)


def test_criterion_6_geometry_and_operator_oracles():
    lines = []
    _, field = sphere_slab(3)
    _, fr = _frames(field, 3, 4)
    proj = max(np.abs(fr.P @ fr.P - fr.P).max(), np.abs(np.einsum("...ij,...j->...i", fr.P, fr.n)).max())
    lines.append((proj <= 1e-12, f"projector idempotence {proj:.1e} <= 1e-12"))

    for p in (2, 3):
        hs, errs = [], []
        for n in (2, 4, 8):
            mesh, field = sphere_slab(p, (n, n, max(1, n // 2)))
            geo, fr = _frames(field, 2, p + 1)
            errs.append(np.abs(fr.kappa - 2.0 / np.linalg.norm(geo.x, axis=-1)).max())
            hs.append(mesh.element_size())
        rate = fit_slope(hs, errs)
        lines.append((rate >= p - 1, f"mean curvature rate p={p}: {rate:.2f} >= {p - 1}"))

    solid = 4.0 * np.arcsin(np.sin(np.radians(30.0)) ** 2)
    exact = solid * (1.2**3 - 0.8**3) / 3.0
    _, field = sphere_slab(4, (8, 8, 4))
    err = abs(coarea_integral(field, rule_points=7) / exact - 1)
    lines.append((err <= 1e-8, f"co-area identity at p=4: {err:.1e} <= 1e-8"))

    for name, T, dep in (("non-in-plane T", t_general, False), ("in-plane T", t_projector, True)):
        res = []
        for n in (2, 4, 8):
            _, field = sphere_slab(2, (n, n, 1))
            chk = bulk_divergence_theorem_check(field, v_field, T, frame_dependent=dep)
            res.append(chk.residual / abs(chk.lhs))
        dec = res[0] > res[1] > res[2]
        lines.append((dec, f"divergence theorem residual ({name}) " + " > ".join(f"{r:.1e}" for r in res)))

    ok = all(o for o, _ in lines)
    record_acceptance("6 oracle suite", ok, "; ".join(d for _, d in lines))
    assert ok, lines


# ---------------------------------------------------------------- 8: zero loads and rigid motion

MAT = MaterialParams(E=1e4, nu=0.3, t=0.05)


def test_criterion_8_zero_load_and_translation():
    _, field = sphere_slab(3, (3, 3, 2))
    clamp = tuple(BoundaryCondition(r, k) for r in SIDES for k in ("strong_dirichlet_u", "strong_dirichlet_w"))
    sol = solve(assemble(field, MAT, Loads(), clamp))
    zero = float(np.abs(sol.x).max())

    shift = [0.01, -0.02, 0.015]
    bcs = tuple(BoundaryCondition(r, "strong_dirichlet_u", value=shift) for r in SIDES) + \
        tuple(BoundaryCondition(r, "strong_dirichlet_w") for r in SIDES)
    system = assemble(field, MAT, Loads(), bcs)
    state = SolutionState.from_solution(field, system, solve(system).x)
    energy = error_report(state, MAT, rule_points=system.info["quadrature_points_per_direction"]).total_energy
    lo, hi = field.interval
    area = coarea_integral(field) / (hi - lo)  # mean level-set area
    bound = 1e-10 * MAT.E * MAT.t * area
    move = float(np.abs(state.u - shift).max())
    ok = zero == 0.0 and abs(energy) <= bound and move < 1e-10
    record_acceptance("8 zero load / rigid translation", ok,
                      f"max|x| = {zero:.1e}; translation energy {abs(energy):.1e} <= {bound:.1e}, "
                      f"max|u - t| = {move:.1e}")
    assert ok


# ---------------------------------------------------------------- 9: determinism


def test_criterion_9_determinism(tmp_path):
    outs = []
    for k in range(2):
        for cmd in (["run", "sphere_slab", "--set", "orders.p=2"],
                    ["study", "sphere_slab", "--set", "study.orders=[2]",
                     "--set", "study.levels=[[2,2,1],[3,3,1],[4,4,2]]", "--set", "study.reference=null"]):
            out = tmp_path / f"{cmd[0]}-{k}"
            res = subprocess.run([sys.executable, "-m", "bulktrace.cli", *cmd, "--out", str(out)],
                                 capture_output=True, text=True)
            assert res.returncode == 0, res.stderr
        outs.append({f"{c}/{f}": (tmp_path / f"{c}-{k}" / f).read_bytes()
                     for c in ("run", "study") for f in ("report.json", "table.csv")})
    same = outs[0] == outs[1]
    record_acceptance("9 determinism", same, "report.json and table.csv bitwise identical across two runs")
    assert same
