"""Case configuration: schema, expression loads and embedded benchmark presets.

A case file is YAML. ``preset: <name>`` starts from the embedded preset of
that name and deep-merges the remaining keys over it, so a case file only
needs the values it changes.
"""

from __future__ import annotations

import ast
import copy
import hashlib
import json
import math
from typing import Any, Callable, Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .mesh import PRESETS as DOMAINS


class ConfigError(ValueError):
    """Schema violation; the message lists the offending field paths."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


Vec3 = tuple[float, float, float]
# constant vector or three expressions in x, y, z
VectorSpec = tuple[float | str, float | str, float | str]


class GeometryConfig(_Strict):
    domain: Literal[DOMAINS]
    params: dict[str, Any] = Field(default_factory=dict)
    divisions: tuple[int, int, int]
    perturb: bool = True
    amplitude: float = Field(0.1, ge=0.0, le=0.3)
    seed: int = 0

    @field_validator("divisions")
    @classmethod
    def _positive(cls, v):
        if min(v) < 1:
            raise ValueError("divisions must be positive")
        return v


class LevelSetConfig(_Strict):
    kind: Literal["plane", "sphere", "cylinder", "graph"]
    params: dict[str, Any] = Field(default_factory=dict)
    interval: Optional[tuple[float, float]] = None


class MaterialConfig(_Strict):
    E: float = Field(gt=0)
    nu: float = Field(gt=-1.0, lt=0.5)
    t: float = Field(gt=0)
    alpha_s: float = Field(1.0, gt=0)


class LoadsConfig(_Strict):
    f: VectorSpec = (0.0, 0.0, 0.0)
    c: VectorSpec = (0.0, 0.0, 0.0)


class BCConfig(_Strict):
    region: str
    kind: Literal["strong_dirichlet_u", "strong_dirichlet_w", "neumann_traction", "neumann_moment",
                  "nitsche_directional"]
    components: Optional[tuple[str, ...]] = None
    value: Optional[VectorSpec] = None
    target: Literal["u", "w"] = "u"
    line: Optional[tuple[Vec3, Vec3]] = None


class OrdersConfig(_Strict):
    p: int = Field(ge=1, le=6)
    p_w: Optional[int] = Field(None, ge=1, le=6)


class SolverConfig(_Strict):
    method: Literal["auto", "pardiso", "superlu", "gmres", "bicgstab"] = "auto"
    rtol: float = Field(1e-10, gt=0)


class AssemblyConfig(_Strict):
    quad_extra: int = Field(1, ge=0, le=4)
    nitsche_penalty: float = Field(0.0, ge=0)
    rho_w: Optional[float] = Field(None, ge=0)


class SampleConfig(_Strict):
    name: str
    point: Vec3
    component: Literal["x", "y", "z", "norm"] = "z"
    reference: Optional[float] = None
    rel_tol: Optional[float] = Field(None, gt=0)
    # closed-form reference instead of a number
    oracle: Optional[Literal["navier_plate"]] = None

    @model_validator(mode="after")
    def _one_reference(self):
        if self.reference is not None and self.oracle is not None:
            raise ValueError("give either reference or oracle, not both")
        return self


class OutputsConfig(_Strict):
    samples: list[SampleConfig] = Field(default_factory=list)
    errors: bool = True
    export_levels: list[float] = Field(default_factory=list)
    export_subdivisions: Optional[int] = Field(None, ge=1, le=12)


class ReferenceConfig(_Strict):
    """Overkill reference energy for a convergence study.

    With two ``divisions`` entries the second (finer) value is corrected by
    Richardson extrapolation with the given ``richardson_rate``.
    """

    order: int = Field(ge=2, le=6)
    divisions: list[tuple[int, int, int]] = Field(min_length=1, max_length=2)
    richardson_rate: Optional[float] = Field(None, gt=0)

    @model_validator(mode="after")
    def _rate_needs_two(self):
        if self.richardson_rate is not None and len(self.divisions) != 2:
            raise ValueError("richardson_rate needs exactly two reference divisions")
        return self


class StudyConfig(_Strict):
    orders: list[int] = Field(min_length=1)
    levels: list[tuple[int, int, int]] = Field(min_length=3)
    fit_last: int = Field(3, ge=2)
    reference: Optional[ReferenceConfig] = None
    # minimum slope offsets relative to p: slope(kind) >= p + offset
    min_slope_offsets: dict[Literal["eps_res_F", "eps_res_M", "eps_energy"], float] = Field(default_factory=dict)
    # orders to which each slope requirement applies (default: all)
    slope_orders: dict[Literal["eps_res_F", "eps_res_M", "eps_energy"], list[int]] = Field(default_factory=dict)


class CaseConfig(_Strict):
    name: str
    preset: Optional[str] = None
    description: str = ""
    geometry: GeometryConfig
    levelset: LevelSetConfig
    material: MaterialConfig
    loads: LoadsConfig = LoadsConfig()
    bcs: list[BCConfig] = Field(default_factory=list)
    orders: OrdersConfig
    solver: SolverConfig = SolverConfig()
    assembly: AssemblyConfig = AssemblyConfig()
    outputs: OutputsConfig = OutputsConfig()
    study: Optional[StudyConfig] = None

    def digest(self) -> str:
        """Stable hash of the full configuration."""
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_updates(self, **changes) -> "CaseConfig":
        """Copy with nested updates, e.g. ``orders={"p": 3}``; revalidated."""
        return CaseConfig.model_validate(_deep_merge(self.model_dump(mode="python"), changes))


# --------------------------------------------------------------------------
# expression loads

_FUNCS = {n: getattr(np, n) for n in ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "arctan2", "sinh", "cosh",
                                       "tanh", "arcsin", "arccos", "arctan")}
_CONSTS = {"pi": math.pi, "e": math.e}
_ALLOWED = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load, ast.Constant, ast.Add, ast.Sub,
            ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd, ast.Mod)


def compile_expression(src: str) -> Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]:
    """Compile an arithmetic expression in ``x, y, z`` with numpy functions."""
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"invalid expression {src!r}: {exc.msg}") from None
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED):
            raise ConfigError(f"expression {src!r}: {type(node).__name__} not allowed")
        if isinstance(node, ast.Name) and node.id not in {"x", "y", "z"} | set(_FUNCS) | set(_CONSTS):
            raise ConfigError(f"expression {src!r}: unknown name {node.id!r}")
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in _FUNCS):
            raise ConfigError(f"expression {src!r}: only numpy functions may be called")
    code = compile(tree, "<expression>", "eval")
    env = {"__builtins__": {}, **_FUNCS, **_CONSTS}

    def f(x, y, z):
        return np.asarray(eval(code, env, {"x": x, "y": y, "z": z}), dtype=float) + 0.0 * x

    return f


def vector_data(spec: VectorSpec | None):
    """Constant list, or a callable ``X (..., 3) -> (..., 3)`` for expressions."""
    if spec is None:
        return None
    if all(isinstance(s, (int, float)) for s in spec):
        return [float(s) for s in spec]
    parts = [compile_expression(s) if isinstance(s, str) else (lambda x, y, z, c=float(s): c + 0.0 * x)
             for s in spec]

    def field(X):
        x, y, z = X[..., 0], X[..., 1], X[..., 2]
        return np.stack([p(x, y, z) for p in parts], axis=-1)

    return field


# --------------------------------------------------------------------------
# presets

_S50 = (25.0 * math.cos(math.radians(50.0)), 25.0, 25.0 * math.sin(math.radians(50.0)))

PRESETS: dict[str, dict] = {
    "scordelis_lo": {
        "description": "Scordelis-Lo roof: all cylinders r in [20, 25], rigid diaphragms at both ends",
        "geometry": {"domain": "cylinder_sector",
                     "params": {"r_inner": 20.0, "r_outer": 25.0, "theta": 80.0, "length": 50.0},
                     "divisions": [16, 16, 2]},
        "levelset": {"kind": "cylinder", "params": {"point": [0, 0, 0], "axis": [0, 1, 0]}},
        "material": {"E": 4.32e8, "nu": 0.0, "t": 0.25},
        "loads": {"f": [0, 0, -90.0]},
        "bcs": [
            {"region": "y_min", "kind": "strong_dirichlet_u", "components": ["x", "z"]},
            {"region": "y_max", "kind": "strong_dirichlet_u", "components": ["x", "z"]},
            # axial rigid motion of every shell: pin u_y along the crown line of one end
            {"region": "y_min", "kind": "strong_dirichlet_u", "components": ["y"],
             "line": [[0, 0, 0], [0, 0, 1]]},
        ],
        "orders": {"p": 4},
        "outputs": {"samples": [
            {"name": "u_z(P_ref)", "point": [-_S50[0], _S50[1], _S50[2]], "reference": -0.3024, "rel_tol": 0.01},
            {"name": "u_z(P_ref mirror)", "point": list(_S50), "reference": -0.3024, "rel_tol": 0.01},
        ]},
    },
    "scordelis_lo_quarter": {
        "description": "Scordelis-Lo quarter model with weak symmetry constraints",
        "geometry": {"domain": "cylinder_sector",
                     "params": {"r_inner": 20.0, "r_outer": 25.0, "theta_min": -40.0, "theta_max": 0.0,
                                "y_min": 0.0, "y_max": 25.0},
                     "divisions": [8, 8, 2]},
        "levelset": {"kind": "cylinder", "params": {"point": [0, 0, 0], "axis": [0, 1, 0]}},
        "material": {"E": 4.32e8, "nu": 0.0, "t": 0.25},
        "loads": {"f": [0, 0, -90.0]},
        "bcs": [
            {"region": "y_min", "kind": "strong_dirichlet_u", "components": ["x", "z"]},
            {"region": "theta_max", "kind": "nitsche_directional", "components": ["q"], "target": "u"},
            {"region": "theta_max", "kind": "nitsche_directional", "components": ["q"], "target": "w"},
            {"region": "y_max", "kind": "nitsche_directional", "components": ["q"], "target": "u"},
            {"region": "y_max", "kind": "nitsche_directional", "components": ["q"], "target": "w"},
        ],
        "orders": {"p": 4},
        "outputs": {"samples": [
            {"name": "u_z(P_ref)", "point": [-_S50[0], _S50[1], _S50[2]], "reference": -0.3024, "rel_tol": 0.01},
        ]},
    },
    "hyperbolic_paraboloid": {
        "description": "Partly clamped hyperbolic paraboloids z = x^2 - y^2 + c, clamped at x = -0.5",
        "geometry": {"domain": "extruded_graph",
                     "params": {"graph": "hypar", "x_range": [-0.5, 0.5], "y_range": [-0.5, 0.5], "height": 0.1},
                     "divisions": [16, 16, 1]},
        "levelset": {"kind": "graph", "params": {"graph": "hypar"}},
        "material": {"E": 2.0e11, "nu": 0.3, "t": 0.01},
        "loads": {"f": [0, 0, -80.0]},
        "bcs": [
            {"region": "west", "kind": "strong_dirichlet_u"},
            {"region": "west", "kind": "strong_dirichlet_w"},
        ],
        "orders": {"p": 4},
        "outputs": {"samples": [
            {"name": "u_z(P_ref)", "point": [0.5, 0.0, 0.25], "reference": -9.3355e-5, "rel_tol": 0.01},
        ]},
    },
    "trig_graph_slab": {
        "description": "Graphs z = 2 sin(xy/4) + c over a plane annulus, Navier support on both circles",
        "geometry": {"domain": "mapped_box_slab",
                     "params": {"chart": "annulus", "lift": "graph", "graph": "trig", "radii": [0.3, 0.9],
                                "c_range": [-0.2, 0.4], "taper": -0.25},
                     "divisions": [12, 4, 4]},
        "levelset": {"kind": "graph", "params": {"graph": "trig"}},
        "material": {"E": 2.1e7, "nu": 0.3, "t": 0.1},
        "loads": {"f": [0, 0, -100.0]},
        "bcs": [
            {"region": "inner", "kind": "strong_dirichlet_u"},
            {"region": "outer", "kind": "strong_dirichlet_u"},
        ],
        "orders": {"p": 3},
        "study": {
            "orders": [2, 3, 4],
            "levels": [[3, 1, 1], [6, 2, 2], [9, 3, 3], [12, 4, 4]],
            "fit_last": 3,
            "reference": {"order": 5, "divisions": [[6, 2, 2], [9, 3, 3]], "richardson_rate": 8.0},
            "min_slope_offsets": {"eps_res_F": -1.2, "eps_res_M": -1.2, "eps_energy": 0.7},
            "slope_orders": {"eps_res_M": [2, 3]},
        },
    },
    "sphere_slab": {
        "description": "Clamped spherical shells |x - x_C| = 2 + c, c in (0, 0.5), on an equiangular patch",
        "geometry": {"domain": "mapped_box_slab",
                     "params": {"lift": "sphere", "center": [1.0, -0.5, -2.0], "radius": 2.0, "c_range": [0.0, 0.5],
                                "corners": [[-30, -30], [30, -30], [30, 30], [-30, 30]]},
                     "divisions": [4, 4, 2]},
        "levelset": {"kind": "sphere", "params": {"center": [1.0, -0.5, -2.0], "radius": 2.0}},
        "material": {"E": 1.0e4, "nu": 0.3, "t": 0.05},
        "loads": {"f": [0, 0, -5.0]},
        "bcs": [{"region": r, "kind": k} for r in ("west", "east", "south", "north")
                for k in ("strong_dirichlet_u", "strong_dirichlet_w")],
        "orders": {"p": 3},
        "study": {
            "orders": [2, 3],
            "levels": [[2, 2, 1], [4, 4, 2], [6, 6, 3]],
            "reference": {"order": 4, "divisions": [[6, 6, 3]]},
        },
    },
    "flat_plate_oracle": {
        "description": "Simply supported square plates z = c under uniform load (Navier series reference)",
        "geometry": {"domain": "extruded_graph",
                     "params": {"graph": "flat", "x_range": [-0.5, 0.5], "y_range": [-0.5, 0.5], "height": 0.1},
                     "divisions": [8, 8, 1]},
        "levelset": {"kind": "plane", "params": {"normal": [0, 0, 1], "offset": 0.0}},
        "material": {"E": 1.0e6, "nu": 0.3, "t": 0.05},
        "loads": {"f": [0, 0, -1.0]},
        "bcs": [
            *({"region": r, "kind": "strong_dirichlet_u"} for r in ("west", "east", "south", "north")),
            # hard simple support: rotation about the edge free, twist about the normal to the edge fixed
            {"region": "west", "kind": "strong_dirichlet_w", "components": ["y"]},
            {"region": "east", "kind": "strong_dirichlet_w", "components": ["y"]},
            {"region": "south", "kind": "strong_dirichlet_w", "components": ["x"]},
            {"region": "north", "kind": "strong_dirichlet_w", "components": ["x"]},
        ],
        "orders": {"p": 3},
        "outputs": {"samples": [{"name": "u_z(centre)", "point": [0.0, 0.0, 0.0], "oracle": "navier_plate",
                                 "rel_tol": 0.01}]},
    },
}


def preset_names() -> list[str]:
    return list(PRESETS)


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def resolve_config(data: dict) -> CaseConfig:
    """Validate a raw mapping, expanding ``preset`` first."""
    if not isinstance(data, dict):
        raise ConfigError("<root>: a case file must contain a mapping")
    name = data.get("preset")
    if name is not None:
        if name not in PRESETS:
            raise ConfigError(f"preset: unknown preset {name!r}; available: {', '.join(PRESETS)}")
        data = _deep_merge({"name": name, **PRESETS[name]}, data)
    try:
        return CaseConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def preset_config(name: str, **overrides) -> CaseConfig:
    return resolve_config({"preset": name, **overrides})


def load_config(path: str) -> CaseConfig:
    """Read and validate a YAML case file."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"<file>: cannot read {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"<file>: invalid YAML: {exc}") from None
    return resolve_config(data if data is not None else {})
