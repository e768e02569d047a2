import dataclasses

import numpy as np
import pytest

from bulktrace.mesh import (
    MeshError,
    boundary_quadrature,
    check_jacobians,
    generate_mesh,
    map_point,
    mesh_volume,
    perturbation_field,
    structured_space,
)

ROOF = {"r_inner": 24.875, "r_outer": 25.125, "theta": 80.0, "length": 50.0}


def test_cylinder_sector_volume_converges():
    exact = 0.5 * np.radians(80.0) * (ROOF["r_outer"] ** 2 - ROOF["r_inner"] ** 2) * 50.0
    errs = []
    for p in (1, 2, 3):
        mesh = generate_mesh("cylinder_sector", (4, 2, 1), p, ROOF)
        errs.append(abs(mesh_volume(mesh, p + 2) / exact - 1))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-5


def test_perturbation_preserves_volume_and_boundary():
    a = generate_mesh("extruded_graph", (3, 3, 2), 2, {"graph": "hypar"}, perturb=False)
    b = generate_mesh("extruded_graph", (3, 3, 2), 2, {"graph": "hypar"}, amplitude=0.2, seed=3)
    assert mesh_volume(b, 5) == pytest.approx(mesh_volume(a, 5), rel=1e-12)
    for tag in a.boundary_tags:
        nodes = a.node_set(tag)
        np.testing.assert_allclose(a.nodes[nodes], b.nodes[nodes], atol=1e-14)
    assert np.abs(a.nodes - b.nodes).max() > 1e-3


def test_perturbation_field_vanishes_on_box(rng):
    s = rng.uniform(0, 1, (50, 3))
    s[:, 1] = 0.0
    assert np.abs(perturbation_field(s, 7)).max() == 0.0
    inner = perturbation_field(rng.uniform(0.2, 0.8, (50, 3)), 7)
    assert np.abs(inner).max() <= 1.0


def test_mesh_is_deterministic():
    a = generate_mesh("extruded_graph", (2, 2, 1), 2, {}, seed=5)
    b = generate_mesh("extruded_graph", (2, 2, 1), 2, {}, seed=5)
    assert np.array_equal(a.nodes, b.nodes)


def test_topology_counts():
    p = 3
    mesh = generate_mesh("cylinder_sector", (2, 3, 1), p, ROOF)
    assert mesh.n_elements == 6
    assert mesh.n_nodes == (2 * p + 1) * (3 * p + 1) * (p + 1)
    assert mesh.elements.shape == (6, (p + 1) ** 3)
    assert mesh.boundary_faces.shape[0] == 2 * (2 * 3 + 2 * 1 + 3 * 1)
    assert set(mesh.levelset_tags) == {"inner", "outer"}


def test_boundary_normals_point_outwards():
    mesh = generate_mesh("cylinder_sector", (2, 2, 1), 2, ROOF, perturb=False)
    fq = boundary_quadrature(mesh, mesh.faces_with_tag("outer"))
    radial = fq.x[..., [0, 2]] / np.linalg.norm(fq.x[..., [0, 2]], axis=-1, keepdims=True)
    np.testing.assert_allclose(np.einsum("fqi,fqi->fq", fq.m[..., [0, 2]], radial), 1.0, atol=1e-4)
    fq = boundary_quadrature(mesh, mesh.faces_with_tag("y_min"))
    np.testing.assert_allclose(fq.m[..., 1], -1.0, atol=1e-12)
    area = fq.weights.sum()
    assert area == pytest.approx(np.radians(80) * 0.5 * (25.125**2 - 24.875**2), rel=1e-3)


def test_periodic_annulus():
    params = {"chart": "annulus", "radii": [0.3, 0.9], "c_range": [-0.1, 0.1]}
    vols = []
    for p in (2, 4):
        mesh = generate_mesh("mapped_box_slab", (6, 2, 1), p, params)
        assert mesh.periodic
        assert "seam_start" not in mesh.boundary_tags and "inner" in mesh.boundary_tags
        vols.append(mesh_volume(mesh, p + 2))
        with pytest.raises(MeshError):
            mesh.node_set("seam_start")
    exact = np.pi * (0.9**2 - 0.3**2) * 0.2
    assert abs(vols[1] / exact - 1) < abs(vols[0] / exact - 1) < 1e-2
    assert abs(vols[1] / exact - 1) < 1e-5


def test_periodic_space_closes():
    sp = structured_space((3, 1, 1), 2, True)
    assert sp.n_nodes == 6 * 3 * 3
    # the last element wraps onto the first column of nodes
    assert set(sp.elements[2]) & set(sp.elements[0])
    with pytest.raises(MeshError):
        structured_space((2, 1, 1), 2, True)


def test_map_point_inverse_consistency():
    mesh = generate_mesh("spherical_shell_sector", (2, 2, 1), 3, {"r_inner": 0.8, "r_outer": 1.2})
    d = map_point(mesh, 1, (0.2, -0.4, 0.1), 2)
    # reproduce the isoparametric map by finite differences
    h = 1e-6
    xp = map_point(mesh, 1, (0.2 + h, -0.4, 0.1), 0).x
    xm = map_point(mesh, 1, (0.2 - h, -0.4, 0.1), 0).x
    np.testing.assert_allclose((xp - xm) / (2 * h), d.J[:, 0], atol=1e-7)
    assert d.detJ > 0
    with pytest.raises(ValueError):
        map_point(mesh, 0, (1.5, 0, 0))


@pytest.mark.parametrize(
    "preset,params",
    [
        ("cylinder_sector", {"r_inner": 2.0, "r_outer": 1.0}),
        ("cylinder_sector", {"theta": 400.0}),
        ("extruded_graph", {"height": -1.0}),
        ("extruded_graph", {"graph": "nope"}),
        ("mapped_box_slab", {"corners": [[0, 0], [0, 1], [1, 1], [1, 0]]}),
        ("mapped_box_slab", {"unknown": 1}),
        ("mapped_box_slab", {"chart": "annulus", "lift": "sphere"}),
        ("nope", {}),
    ],
)
def test_invalid_geometry(preset, params):
    with pytest.raises(MeshError):
        generate_mesh(preset, (2, 2, 1), 2, params)


def test_invalid_divisions():
    with pytest.raises(MeshError):
        generate_mesh("extruded_graph", (0, 2, 1), 2, {})


def test_jacobian_check_on_inverted_mesh():
    from bulktrace.mesh import MeshQualityError

    mesh = generate_mesh("extruded_graph", (2, 2, 1), 2, {})
    assert check_jacobians(mesh) > 0
    mirrored = dataclasses.replace(mesh, nodes=mesh.nodes * np.array([-1.0, 1.0, 1.0]))
    with pytest.raises(MeshQualityError):
        check_jacobians(mirrored)


def test_inverting_perturbation_is_backtracked():
    mesh = generate_mesh("extruded_graph", (2, 2, 1), 2, {}, amplitude=40.0)
    assert check_jacobians(mesh, 4) > 0
    assert 0 <= mesh.perturbation["amplitude"] < 40.0
    assert mesh.perturbation["requested_amplitude"] == 40.0
