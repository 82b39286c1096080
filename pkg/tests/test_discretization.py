import numpy as np
import pytest

from eerds.discretization import (
    PURE_NEUMANN,
    PURE_ROBIN,
    SOME_DIRICHLET,
    BoundaryCondition,
    Field,
    SpeciesField,
    build_mesh,
    build_uniform_mesh,
    h1_seminorm,
    integrate,
    l2_error,
    l2_norm,
    linf_norm,
    write_fields_csv,
)


def test_boundary_condition_kinds():
    assert BoundaryCondition.robin(0.0).kind == "neumann"
    assert BoundaryCondition.robin(2.0).weight == 2.0
    assert BoundaryCondition.dirichlet().weight == 0.0
    with pytest.raises(ValueError):
        BoundaryCondition("periodic")
    with pytest.raises(ValueError):
        BoundaryCondition("robin", -1.0)


@pytest.mark.parametrize(
    "boundary, case",
    [
        (("dirichlet", "neumann"), SOME_DIRICHLET),
        (("neumann", "neumann"), PURE_NEUMANN),
        ((("robin", 0.0), "neumann"), PURE_NEUMANN),
        ((("robin", 1.0), "neumann"), PURE_ROBIN),
    ],
)
def test_case_classification(boundary, case):
    assert build_uniform_mesh(0, 1, 5, boundary).case == case


def test_lumped_weights_sum_to_length():
    mesh = build_mesh([0.0, 0.1, 0.5, 1.3], ("neumann", "neumann"))
    assert mesh.weights.sum() == pytest.approx(1.3)
    np.testing.assert_allclose(mesh.weights, [0.05, 0.25, 0.6, 0.4])


def test_stiffness_three_nodes():
    mesh = build_uniform_mesh(0, 1, 3, ("neumann", "neumann"))
    k = mesh.stiffness_matrix().toarray()
    np.testing.assert_allclose(k, [[2, -2, 0], [-2, 4, -2], [0, -2, 2]])
    np.testing.assert_allclose(k @ np.ones(3), 0, atol=1e-14)


def test_mass_matrix_integrates_products():
    mesh = build_uniform_mesh(0, 2, 11, ("neumann", "neumann"))
    x = mesh.nodes
    # int_0^2 x * 1 dx = 2 exactly for P1 functions
    assert x @ (mesh.mass_matrix() @ np.ones_like(x)) == pytest.approx(2.0)


def test_invalid_meshes():
    with pytest.raises(ValueError):
        build_mesh([0.0, 0.0, 1.0], ("neumann", "neumann"))
    with pytest.raises(ValueError):
        build_uniform_mesh(1, 0, 5, ("neumann", "neumann"))
    with pytest.raises(ValueError):
        build_uniform_mesh(0, 1, 1, ("neumann", "neumann"))


def test_norms_of_linear_function():
    mesh = build_uniform_mesh(0, 1, 21, ("neumann", "neumann"))
    f = mesh.nodes
    assert l2_norm(mesh, f) == pytest.approx(np.sqrt(1 / 3), rel=1e-12)
    assert h1_seminorm(mesh, f) == pytest.approx(1.0)
    assert linf_norm(mesh, f) == 1.0
    assert integrate(mesh, f) == pytest.approx(0.5)
    assert l2_error(mesh, f, lambda x: x) == pytest.approx(0.0, abs=1e-14)


def test_l2_error_interpolation_order():
    errs = []
    for n in (21, 41, 81):
        mesh = build_uniform_mesh(0, 1, n, ("neumann", "neumann"))
        errs.append(l2_error(mesh, np.sin(np.pi * mesh.nodes), lambda x: np.sin(np.pi * x)))
    rates = np.log2(np.array(errs[:-1]) / errs[1:])
    np.testing.assert_allclose(rates, 2.0, atol=0.05)


def test_fields_validate_shapes():
    mesh = build_uniform_mesh(0, 1, 4, ("neumann", "neumann"))
    with pytest.raises(ValueError):
        Field(mesh, np.zeros(3))
    sf = SpeciesField(mesh, np.ones((4, 2)), [-1.0, 2.0])
    np.testing.assert_allclose(sf.charge_density(), 1.0)
    assert sf.species(1).name == "c2"
    other = build_uniform_mesh(0, 2, 4, ("neumann", "neumann"))
    with pytest.raises(ValueError):
        integrate(other, Field(mesh, np.ones(4)))


def test_csv_round_trip(tmp_path):
    mesh = build_uniform_mesh(0, 1, 5, ("neumann", "neumann"))
    vals = np.exp(mesh.nodes) / 3
    path = write_fields_csv(tmp_path / "f.csv", mesh, {"v": vals})
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    np.testing.assert_array_equal(data[:, 1], vals)
