"""Sparse linear solvers for assembled shell systems.

The default is a direct factorisation: MKL PARDISO through ``pypardiso``
when it can be loaded, otherwise SciPy's SuperLU. Preconditioned Krylov
methods are available for systems too large to factorise.
"""

from __future__ import annotations

import glob
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .assembly import LinearSystem

log = logging.getLogger(__name__)

Method = Literal["auto", "pardiso", "superlu", "gmres", "bicgstab"]
DIRECT_RTOL = 1e-10
MAX_REFINEMENT = 3
FLOOR_FACTOR = 8.0
# a rounding floor above this means x is dominated by a near null space
FLOOR_CAP = 1e-6


class SolverError(RuntimeError):
    pass


class SingularSystemError(SolverError):
    """Raised for (numerically) singular systems: missing constraints or a bad field."""


@dataclass(frozen=True)
class SolverOptions:
    method: Method = "auto"
    rtol: float = 1e-10
    maxiter: int = 2000
    restart: int = 200
    ilu_drop_tol: float = 1e-5
    ilu_fill_factor: float = 20.0


@dataclass
class SolveReport:
    """Solution and diagnostics.

    ``residual`` is ``|K x - F| / |F|``; ``rounding_floor`` is
    ``eps |(|K| |x|)| / |F|``, the smallest residual double precision can
    represent for this ``x``.
    """

    x: np.ndarray = field(repr=False)
    residual: float
    method: str
    rounding_floor: float = 0.0
    stats: dict = field(default_factory=dict)
    wall_time: float = 0.0


_PARDISO = None


def _load_pardiso():
    """Import ``pypardiso``, locating ``libmkl_rt`` if the default lookup fails."""
    global _PARDISO
    if _PARDISO is not None:
        return _PARDISO or None
    try:
        import pypardiso  # noqa: F401
    except ImportError:
        if "PYPARDISO_MKL_RT" not in os.environ:
            for d in ("/usr/local/lib", "/usr/lib", "/usr/lib/x86_64-linux-gnu", "/opt/intel/oneapi/mkl/latest/lib"):
                hits = sorted(glob.glob(os.path.join(d, "libmkl_rt.so*")))
                if hits:
                    os.environ["PYPARDISO_MKL_RT"] = hits[0]
                    break
        try:
            import pypardiso  # noqa: F401
        except ImportError:
            _PARDISO = False
            return None
    from pypardiso import PyPardisoSolver

    _PARDISO = PyPardisoSolver
    return _PARDISO


def pardiso_available() -> bool:
    return _load_pardiso() is not None


def _relative_residual(system: LinearSystem, x: np.ndarray) -> float:
    nf = np.linalg.norm(system.F)
    r = np.linalg.norm(system.matvec(x) - system.F)
    return float(r / nf) if nf > 0 else float(r)


def _rounding_floor(system: LinearSystem, x: np.ndarray) -> float:
    nf = np.linalg.norm(system.F)
    scale = np.linalg.norm(system.abs_matvec(x))
    return float(np.finfo(float).eps * scale / nf) if nf > 0 else 0.0


def _factor_pardiso(system: LinearSystem):
    Solver = _load_pardiso()
    from pypardiso.pardiso_wrapper import PyPardisoError

    A = system.K.tocsr()
    A.sort_indices()
    mtypes = (2, -2) if system.storage == "upper" else (11,)
    last = None
    for mtype in mtypes:
        s = Solver(mtype=mtype, size_limit_storage=0)
        try:
            s.factorize(A)
        except PyPardisoError as exc:
            last = exc
            s.free_memory(everything=True)
            continue
        stats = {"mtype": mtype, "peak_memory_kb": int(max(s.iparm[14], s.iparm[15] + s.iparm[16])),
                 "perturbed_pivots": int(s.iparm[13])}

        def apply(b, s=s):
            s.set_phase(33)
            return np.asarray(s._call_pardiso(A, np.asfortranarray(b, dtype=float)), dtype=float).ravel()

        return apply, (lambda s=s: s.free_memory(everything=True)), stats
    raise SingularSystemError(f"factorisation failed ({last}); check constraints and the level-set field")


def _factor_superlu(system: LinearSystem):
    A = system.full_matrix().tocsc()
    try:
        lu = sla.splu(A, permc_spec="COLAMD")
    except RuntimeError as exc:
        raise SingularSystemError(f"factorisation failed ({exc}); check constraints and the level-set field") from None
    diag = np.abs(lu.U.diagonal())
    stats = {"min_pivot_ratio": float(diag.min() / diag.max()) if diag.size else 1.0,
             "fill_nnz": int(lu.L.nnz + lu.U.nnz)}
    return lu.solve, (lambda: None), stats


def _solve_krylov(system: LinearSystem, opts: SolverOptions, kind: str) -> tuple[np.ndarray, dict]:
    A = system.full_matrix().tocsc()
    d = np.abs(A.diagonal())
    d[d == 0] = 1.0
    s = 1.0 / np.sqrt(d)
    S = sp.diags(s)
    As = (S @ A @ S).tocsc()
    try:
        ilu = sla.spilu(As, drop_tol=opts.ilu_drop_tol, fill_factor=opts.ilu_fill_factor)
    except RuntimeError as exc:
        raise SingularSystemError(f"incomplete factorisation failed ({exc})") from None
    M = sla.LinearOperator(As.shape, ilu.solve)
    iters = [0]

    def cb(_):
        iters[0] += 1

    bs = s * system.F
    if kind == "gmres":
        y, info = sla.gmres(As, bs, M=M, rtol=opts.rtol, atol=0.0, restart=opts.restart,
                            maxiter=opts.maxiter, callback=cb, callback_type="pr_norm")
    else:
        y, info = sla.bicgstab(As, bs, M=M, rtol=opts.rtol, atol=0.0, maxiter=opts.maxiter, callback=cb)
    if info != 0:
        raise SingularSystemError(f"{kind} stagnated after {iters[0]} iterations (info={info})")
    return s * y, {"iterations": iters[0]}


def solve(system: LinearSystem, options: SolverOptions = SolverOptions()) -> SolveReport:
    """Solve ``K x = F`` and verify the relative algebraic residual.

    Direct methods must reach ``max(options.rtol, 1e-10)``; iterative ones
    ``options.rtol`` measured in the unscaled system, with a safety factor
    of 10 for the diagonal scaling used internally. Either bound is relaxed
    to ``FLOOR_FACTOR`` times the rounding floor when that is larger, as
    long as the floor stays below ``FLOOR_CAP``.
    """
    t0 = time.perf_counter()
    n = system.F.size
    if n == 0:
        return SolveReport(np.zeros(0), 0.0, "empty", 0.0, {}, time.perf_counter() - t0)
    if not np.all(np.isfinite(system.F)):
        raise SolverError("right-hand side contains non-finite entries")
    method = options.method
    if method == "auto":
        method = "pardiso" if pardiso_available() else "superlu"
    if method in ("pardiso", "superlu"):
        if method == "pardiso" and not pardiso_available():
            raise SolverError("pypardiso (MKL PARDISO) is not available; use method 'superlu'")
        apply, release, stats = _factor_pardiso(system) if method == "pardiso" else _factor_superlu(system)
        tol = max(options.rtol, DIRECT_RTOL)
        try:
            x = apply(system.F)
            res = _relative_residual(system, x)
            floor = _rounding_floor(system, x)
            steps = 0
            bound = max(tol, FLOOR_FACTOR * min(floor, FLOOR_CAP))
            # iterative refinement with the stored factors; needed for thin, stiff shells
            while not res <= bound and steps < MAX_REFINEMENT and np.isfinite(res):
                x = x + apply(system.F - system.matvec(x))
                res = _relative_residual(system, x)
                steps += 1
            stats["refinement_steps"] = steps
        finally:
            release()
    elif method in ("gmres", "bicgstab"):
        x, stats = _solve_krylov(system, options, method)
        tol = 10.0 * options.rtol
        res = _relative_residual(system, x)
        floor = _rounding_floor(system, x)
    else:
        raise SolverError(f"unknown solver method {method!r}")
    if not np.all(np.isfinite(x)):
        raise SingularSystemError("solution contains non-finite entries; the system is singular")
    # thin stiff shells can have a rounding floor above the nominal tolerance
    if not res <= max(tol, FLOOR_FACTOR * min(floor, FLOOR_CAP)):
        raise SingularSystemError(
            f"relative residual {res:.3e} exceeds {tol:.1e} (rounding floor {floor:.1e}); the system is near singular"
        )
    wall = time.perf_counter() - t0
    log.info("solve: %s, n=%d, residual %.2e (floor %.1e), %.2fs", method, n, res, floor, wall)
    return SolveReport(x, res, method, floor, stats, wall)
