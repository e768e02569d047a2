import numpy as np
import pytest
import yaml

from bulktrace.config import (
    PRESETS,
    ConfigError,
    compile_expression,
    load_config,
    preset_config,
    preset_names,
    resolve_config,
    vector_data,
)
from bulktrace.runner import build_problem

EXPECTED = ["scordelis_lo", "scordelis_lo_quarter", "hyperbolic_paraboloid", "trig_graph_slab", "sphere_slab",
            "flat_plate_oracle"]


def test_preset_list_is_exact():
    assert sorted(preset_names()) == sorted(EXPECTED)


@pytest.mark.parametrize("name", EXPECTED)
def test_presets_validate_and_build(name):
    cfg = preset_config(name, geometry={"divisions": [3, 2, 1]}, orders={"p": 2})
    assert cfg.name == name
    prob = build_problem(cfg)
    assert prob.mesh.n_elements == 6
    lo, hi = prob.field.interval
    assert lo < hi


def test_unknown_keys_rejected_with_location():
    with pytest.raises(ConfigError, match=r"material\.colour"):
        resolve_config({"preset": "flat_plate_oracle", "material": {"colour": "red"}})
    with pytest.raises(ConfigError, match="unknown preset"):
        resolve_config({"preset": "nope"})
    with pytest.raises(ConfigError, match=r"orders\.p"):
        resolve_config({"preset": "flat_plate_oracle", "orders": {"p": 0}})
    with pytest.raises(ConfigError, match=r"geometry\.divisions"):
        resolve_config({"preset": "flat_plate_oracle", "geometry": {"divisions": [0, 1, 1]}})


def test_missing_required_fields():
    with pytest.raises(ConfigError, match="geometry"):
        resolve_config({"name": "x"})


def test_load_config_from_yaml(tmp_path):
    path = tmp_path / "case.yaml"
    path.write_text(yaml.safe_dump({"preset": "sphere_slab", "orders": {"p": 2}}))
    cfg = load_config(str(path))
    assert cfg.orders.p == 2 and list(cfg.geometry.divisions) == PRESETS["sphere_slab"]["geometry"]["divisions"]
    assert cfg == resolve_config({"preset": "sphere_slab", "orders": {"p": 2}})
    bad = tmp_path / "bad.yaml"
    bad.write_text("geometry: [unclosed")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(str(bad))
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(str(tmp_path / "missing.yaml"))


def test_digest_is_stable_and_sensitive():
    a = preset_config("trig_graph_slab")
    b = preset_config("trig_graph_slab")
    assert a.digest() == b.digest()
    assert a.digest() != preset_config("trig_graph_slab", orders={"p": 2}).digest()
    assert a.with_updates(orders={"p": 2}).digest() == preset_config("trig_graph_slab", orders={"p": 2}).digest()


def test_expression_evaluation():
    f = compile_expression("sin(pi * x) * y**2 - 3 * z")
    x, y, z = np.array([0.5, 0.25]), np.array([2.0, 1.0]), np.array([1.0, 0.0])
    np.testing.assert_allclose(f(x, y, z), np.sin(np.pi * x) * y**2 - 3 * z)
    g = compile_expression("2.0")
    assert g(x, y, z).shape == x.shape


@pytest.mark.parametrize("src", [
    "__import__('os').system('true')",
    "x.__class__",
    "[x for x in y]",
    "open('f')",
    "lambda: 1",
    "w + 1",
    "x if y else z",
    "1 +",
])
def test_expression_evaluator_rejects_unsafe_input(src):
    with pytest.raises(ConfigError):
        compile_expression(src)


def test_vector_data_mixed_constant_and_expression():
    assert vector_data([0, 0, -1]) == [0.0, 0.0, -1.0]
    f = vector_data(["x", 1.0, "x * y"])
    X = np.array([[2.0, 3.0, 0.0]])
    np.testing.assert_allclose(f(X), [[2.0, 1.0, 6.0]])
    assert vector_data(None) is None
