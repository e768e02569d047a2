import os

import numpy as np
import pytest

from bulktrace.levelset import LevelSetExpression, interpolate_levelset
from bulktrace.mesh import generate_mesh


@pytest.fixture(autouse=True, scope="session")
def _isolated_cache(tmp_path_factory):
    """Keep overkill references of the test run out of the user cache."""
    if "BULKTRACE_CACHE" not in os.environ:
        os.environ["BULKTRACE_CACHE"] = str(tmp_path_factory.mktemp("bulktrace-cache"))
    yield


def sphere_slab(p, divisions=(2, 2, 1), radius=1.0, c=(-0.2, 0.2), perturb=True):
    """Spherical slab ``radius + c`` around the origin with the matching field."""
    mesh = generate_mesh(
        "spherical_shell_sector", divisions, p,
        {"r_inner": radius + c[0], "r_outer": radius + c[1], "half_angle": 30.0}, perturb=perturb,
    )
    expr = LevelSetExpression("sphere", {"center": [0, 0, 0], "radius": radius})
    return mesh, interpolate_levelset(mesh, expr, c)


def flat_slab(p, divisions=(2, 2, 1), perturb=True, height=0.2):
    mesh = generate_mesh("extruded_graph", divisions, p, {"graph": "flat", "height": height}, perturb=perturb)
    expr = LevelSetExpression("plane", {"normal": [0, 0, 1], "offset": 0.0})
    return mesh, interpolate_levelset(mesh, expr, (-0.5 * height, 0.5 * height))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(criterion: str, passed: bool, detail: str) -> None:
    """Print and remember one PASS/FAIL line of the acceptance suite."""
    line = f"{'PASS' if passed else 'FAIL'} [{criterion}] {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
