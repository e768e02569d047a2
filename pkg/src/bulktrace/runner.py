"""End-to-end execution of configured cases and convergence studies."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .assembly import AssemblyOptions, BoundaryCondition, Loads, LinearSystem, assemble
from .config import CaseConfig, ConfigError, vector_data
from .levelset import LevelSetExpression, LevelSetField, interpolate_levelset, validate_field
from .mesh import Mesh, generate_mesh
from .oracles import navier_plate_deflection
from .postproc import ConvergenceTable, ErrorReport, PointLocator, SolutionState, error_report, sample_point
from .shell import MaterialParams
from .solve import SolveReport, SolverOptions, solve

log = logging.getLogger(__name__)

CLAPEYRON_RTOL = 1e-9


@dataclass(frozen=True)
class Problem:
    config: CaseConfig
    mesh: Mesh
    field: LevelSetField
    material: MaterialParams
    loads: Loads
    bcs: tuple[BoundaryCondition, ...]
    options: AssemblyOptions
    solver: SolverOptions


@dataclass
class Check:
    name: str
    value: float
    target: float
    tolerance: str
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.value:.6g} (target {self.target:.6g}, {self.tolerance})"


@dataclass
class CaseResult:
    problem: Problem
    system: LinearSystem
    solution: SolveReport
    state: SolutionState
    errors: ErrorReport | None
    samples: dict[str, dict]
    checks: list[Check]
    clapeyron: dict
    files: list[str] = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def report(self) -> dict:
        """Deterministic summary (no timings, no absolute paths)."""
        cfg = self.problem.config
        mesh = self.problem.mesh
        info = {k: self.system.info[k] for k in ("n_dofs", "n_free", "n_constrained", "nnz", "storage",
                                                 "quadrature_points_per_direction", "order_u", "order_w")}
        sol = {"method": self.solution.method, "residual": self.solution.residual,
               "rounding_floor": self.solution.rounding_floor,
               "refinement_steps": self.solution.stats.get("refinement_steps", 0)}
        return {
            "case": cfg.name,
            "config_digest": cfg.digest(),
            "mesh": {"domain": cfg.geometry.domain, "divisions": list(mesh.divisions),
                     "geometry_order": mesh.geometry_order, "n_elements": mesh.n_elements,
                     "element_size": mesh.element_size(), "perturbation": mesh.perturbation},
            "system": info,
            "solve": sol,
            "samples": self.samples,
            "errors": None if self.errors is None else self.errors.to_dict(),
            "clapeyron": self.clapeyron,
            "checks": [c.__dict__ for c in self.checks],
            "files": [os.path.basename(f) for f in self.files],
        }


# --------------------------------------------------------------------------
# building blocks


def build_problem(cfg: CaseConfig) -> Problem:
    g = cfg.geometry
    mesh = generate_mesh(g.domain, g.divisions, cfg.orders.p, g.params, perturb=g.perturb, amplitude=g.amplitude,
                         seed=g.seed)
    expr = LevelSetExpression(cfg.levelset.kind, dict(cfg.levelset.params))
    fld = interpolate_levelset(mesh, expr, cfg.levelset.interval)
    m = cfg.material
    mat = MaterialParams(m.E, m.nu, m.t, m.alpha_s)
    loads = Loads(f=vector_data(cfg.loads.f), c=vector_data(cfg.loads.c))
    bcs = []
    for b in cfg.bcs:
        comps = None if b.components is None else tuple(b.components)
        bcs.append(BoundaryCondition(b.region, b.kind, comps, vector_data(b.value), b.target,
                                     None if b.line is None else tuple(map(tuple, b.line))))
    a = cfg.assembly
    opts = AssemblyOptions(order_w=cfg.orders.p_w, quad_extra=a.quad_extra, rho_w=a.rho_w,
                           nitsche_penalty=a.nitsche_penalty)
    return Problem(cfg, mesh, fld, mat, loads, tuple(bcs), opts, SolverOptions(cfg.solver.method, cfg.solver.rtol))


def _sample_reference(cfg: CaseConfig, s) -> float | None:
    if s.reference is not None:
        return s.reference
    if s.oracle == "navier_plate":
        g = cfg.geometry
        if g.domain != "extruded_graph" or g.params.get("graph", "flat") != "flat":
            raise ConfigError("outputs.samples.oracle: navier_plate needs a flat extruded_graph domain")
        (x0, x1), (y0, y1) = g.params.get("x_range", (-0.5, 0.5)), g.params.get("y_range", (-0.5, 0.5))
        f = vector_data(cfg.loads.f)
        if callable(f) or f[0] != 0 or f[1] != 0:
            raise ConfigError("outputs.samples.oracle: navier_plate needs a constant transverse load")
        m = cfg.material
        return navier_plate_deflection(m.E, m.nu, m.t, f[2], x1 - x0, y1 - y0, s.point[0] - x0, s.point[1] - y0,
                                       m.alpha_s)
    return None


def _homogeneous_dirichlet(cfg: CaseConfig) -> bool:
    for b in cfg.bcs:
        if not b.kind.startswith("strong_dirichlet"):
            return False
        if b.value is not None and any(v != 0 for v in b.value):
            return False
    return True


def run_case(cfg: CaseConfig, out: str | None = None, export_levels=None, errors: bool | None = None,
             reference_energy: float | None = None) -> CaseResult:
    """Mesh, assemble, solve and post-process one configured case."""
    t = {}
    t0 = time.perf_counter()
    prob = build_problem(cfg)
    diag = validate_field(prob.field)
    if not diag.valid:
        from .levelset import LevelSetError

        raise LevelSetError(f"level-set field is not valid on this domain: {'; '.join(diag.messages)}")
    t["mesh"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    system = assemble(prob.field, prob.material, prob.loads, prob.bcs, prob.options)
    t["assembly"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    sol = solve(system, prob.solver)
    t["solve"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    state = SolutionState.from_solution(prob.field, system, sol.x)

    want_errors = cfg.outputs.errors if errors is None else errors
    rep = None
    if want_errors and prob.mesh.geometry_order >= 2:
        rep = error_report(state, prob.material, prob.loads, system.info["quadrature_points_per_direction"],
                           reference_energy=reference_energy, rho_w=prob.options.rho_w)

    samples, checks = {}, []
    if cfg.outputs.samples:
        loc = PointLocator(prob.mesh)
        for s in cfg.outputs.samples:
            ps = sample_point(state, s.point, loc)
            u = ps.u
            val = float(np.linalg.norm(u)) if s.component == "norm" else float(u["xyz".index(s.component)])
            ref = _sample_reference(cfg, s)
            entry = {"point": list(s.point), "component": s.component, "value": val, "u": u.tolist(),
                     "w": ps.w.tolist(), "phi": ps.phi, "reference": ref}
            if ref is not None:
                entry["ratio"] = val / ref
                if s.rel_tol is not None:
                    checks.append(Check(s.name, val, ref, f"rel. tol {s.rel_tol:g}", abs(val / ref - 1.0) <= s.rel_tol))
            samples[s.name] = entry

    work = 0.5 * float(system.F @ sol.x)
    clap = {"half_Fx": work, "applicable": _homogeneous_dirichlet(cfg)}
    if rep is not None:
        rel = abs(rep.total_energy - work) / abs(work) if work != 0 else abs(rep.total_energy)
        clap["relative_difference"] = rel
        if clap["applicable"]:
            checks.append(Check("Clapeyron identity", rel, 0.0, f"<= {CLAPEYRON_RTOL:g}", rel <= CLAPEYRON_RTOL))

    files = []
    levels = cfg.outputs.export_levels if export_levels is None else export_levels
    if levels:
        if out is None:
            raise ConfigError("outputs.export_levels: an output directory is required for exports")
        from .export import export_fields

        files = export_fields(state, list(levels), out, name=cfg.name, subdivisions=cfg.outputs.export_subdivisions)
    t["postprocessing"] = time.perf_counter() - t0
    return CaseResult(prob, system, sol, state, rep, samples, checks, clap, files, t)


# --------------------------------------------------------------------------
# convergence studies


def _cache_dir() -> str:
    return os.environ.get("BULKTRACE_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "bulktrace"))


def overkill_reference(cfg: CaseConfig) -> dict:
    """Reference energy of a study, computed once and cached by config hash."""
    ref = cfg.study.reference
    base = cfg.model_copy(update={"study": None, "outputs": cfg.outputs.model_copy(
        update={"samples": [], "export_levels": []})})
    key_cfg = base.with_updates(orders={"p": ref.order, "p_w": None})
    key = f"{key_cfg.digest()}-{ref.model_dump_json()}"
    import hashlib

    digest = hashlib.sha256(key.encode()).hexdigest()[:20]
    path = os.path.join(_cache_dir(), f"overkill-{digest}.json")
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        data["cached"] = True
        return data
    energies, hs = [], []
    for div in ref.divisions:
        c = key_cfg.with_updates(geometry={"divisions": list(div)})
        r = run_case(c, errors=True)
        energies.append(r.errors.total_energy)
        hs.append(r.problem.mesh.element_size())
        del r
    value, correction = energies[-1], 0.0
    if ref.richardson_rate is not None:
        ratio = (hs[0] / hs[1]) ** ref.richardson_rate
        correction = (energies[1] - energies[0]) / (ratio - 1.0)
        value = energies[1] + correction
    data = {"order": ref.order, "divisions": [list(d) for d in ref.divisions], "h": hs, "energies": energies,
            "richardson_rate": ref.richardson_rate, "correction": correction, "reference_energy": value,
            "key": digest}
    os.makedirs(_cache_dir(), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
    os.replace(tmp, path)
    data["cached"] = False
    return data


@dataclass
class StudyResult:
    config: CaseConfig
    table: ConvergenceTable
    reference: dict | None
    slopes: dict
    checks: list[Check]

    def report(self) -> dict:
        ref = None if self.reference is None else {k: v for k, v in self.reference.items() if k != "cached"}
        return {"case": self.config.name, "config_digest": self.config.digest(), "reference": ref,
                "fit_last": self.table.k_last, "slopes": self.slopes, "checks": [c.__dict__ for c in self.checks]}


def run_convergence(cfg: CaseConfig, progress=None) -> StudyResult:
    """Run every ``(p, level)`` of ``cfg.study`` and fit the error slopes."""
    st = cfg.study
    if st is None:
        raise ConfigError("study: this case defines no convergence study")
    ref = overkill_reference(cfg) if st.reference is not None else None
    e_ref = None if ref is None else ref["reference_energy"]
    table = ConvergenceTable(k_last=st.fit_last)
    for p in st.orders:
        for div in st.levels:
            c = cfg.with_updates(orders={"p": p, "p_w": None}, geometry={"divisions": list(div)})
            c = c.model_copy(update={"study": None})
            t0 = time.perf_counter()
            r = run_case(c, errors=True, reference_energy=e_ref)
            first = next(iter(r.samples.values()), None)
            table.add(case=cfg.name, h=r.problem.mesh.element_size(), p=p, dofs=r.system.info["n_free"],
                      eps_res_F=r.errors.eps_res_F, eps_res_M=r.errors.eps_res_M, eps_energy=r.errors.eps_energy,
                      u_ref_sample=None if first is None else first["value"], wall_s=time.perf_counter() - t0)
            if progress:
                progress(table.rows[-1])
            del r
    slopes = table.slopes()
    checks = []
    for kind, off in st.min_slope_offsets.items():
        for p in st.slope_orders.get(kind, st.orders):
            name = f"{cfg.name}/p{p}/{kind}"
            if name not in slopes:
                continue
            checks.append(Check(f"slope {kind} p={p}", slopes[name], p + off, ">=", slopes[name] >= p + off))
    return StudyResult(cfg, table, ref, slopes, checks)
