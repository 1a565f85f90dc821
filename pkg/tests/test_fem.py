import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from deformhom import fem
from deformhom.elasticity import isotropic_tensor
from deformhom.errors import SingularSystemError
from deformhom.mesh import (BoundaryTag, CrossCellGeometry, build_macro_mesh, build_rectangle_mesh,
                            build_unit_cell_mesh)

PI = np.pi


def unit_square(n):
    return build_rectangle_mesh(n, (0.0, 0.0), (1.0, 1.0))


def dirichlet_map(mesh, values=None, ncomp=1):
    nodes = mesh.nodes_with_tag(BoundaryTag.OUTER_DIRICHLET)
    vals = None if values is None else values(mesh.nodes[nodes])
    return fem.DofMap(mesh, ncomp, fem.ConstraintSet(dirichlet_nodes=nodes, dirichlet_values=vals))


def l2_error(field, exact):
    qd = fem.quadrature(field.mesh)
    vals, _ = field.at_quadrature()
    diff = vals - exact(qd.points)
    sq = diff**2 if diff.ndim == 2 else np.sum(diff**2, axis=-1)
    return float(np.sqrt(np.sum(qd.weights * sq)))


def test_quadrature_weights_and_bilinear_exactness():
    r = fem.GAUSS_2X2
    assert abs(r.weights.sum() - 1.0) < 1e-15
    # ∫_[0,1]^2 x^a y^b for a, b ≤ 3 (2x2 Gauss is exact up to degree 3 per axis)
    for a in range(4):
        for b in range(4):
            q = np.sum(r.weights * r.points[:, 0] ** a * r.points[:, 1] ** b)
            assert abs(q - 1.0 / ((a + 1) * (b + 1))) < 1e-14


def test_shape_functions_partition_of_unity():
    pts = np.random.default_rng(0).random((50, 2))
    assert np.allclose(fem.shape_values(pts).sum(-1), 1.0)
    assert np.allclose(fem.shape_gradients(pts).sum(-2), 0.0)


def test_laplace_single_interior_node():
    # hand assembly of the Q1 stencil: the centre entry is 4 * (2/3) = 8/3
    mesh = unit_square(2)
    sysm = fem.assemble(mesh, "diffusion", 1.0, dirichlet_map(mesh))
    assert sysm.matrix.shape == (1, 1)
    assert abs(sysm.matrix.toarray()[0, 0] - 8.0 / 3.0) < 1e-14


def test_mass_partition_of_unity():
    mesh = build_unit_cell_mesh(CrossCellGeometry(1.0, 1.0), 6)
    M = fem.mass_matrix(mesh)
    assert abs(M.sum() - 1.0) < 1e-14


def test_elasticity_kernel_has_dimension_three():
    mesh = unit_square(2)
    K = fem.elasticity_matrix(mesh, isotropic_tensor(1.0, 1.0).components).toarray()
    ev = np.linalg.eigvalsh(K)
    assert int(np.sum(np.abs(ev) < 1e-10 * ev.max())) == 3


@pytest.mark.parametrize("form, coeff", [
    ("mass", 1.0), ("diffusion", np.array([[2.0, 0.3], [0.3, 1.0]])),
    ("elasticity", isotropic_tensor(2.0, 0.7).components)])
def test_assembled_matrices_are_symmetric(form, coeff):
    mesh = build_unit_cell_mesh(CrossCellGeometry(1 / 3, 0.5), 12, fitted=True)
    K = fem.assemble(mesh, form, coeff).matrix
    assert abs(K - K.T).max() <= 1e-12 * abs(K).max()


def test_solve_identity():
    dm = fem.DofMap(build_macro_mesh(2))
    e1 = np.zeros(9)
    e1[0] = 1.0
    x = fem.solve(fem.SparseSymmetricSystem(sp.identity(9, format="csr"), e1, dm))
    assert np.array_equal(x, e1)


@settings(max_examples=20, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2))
def test_laplace_patch_test(a, b, c):
    mesh = build_macro_mesh(5)
    lin = lambda x: a + b * x[:, 0] + c * x[:, 1]
    f = fem.solve_field(fem.assemble(mesh, "diffusion", 1.0, dirichlet_map(mesh, lin)))
    assert np.max(np.abs(f.values - lin(mesh.nodes))) < 1e-12


def test_anisotropic_patch_test():
    mesh = unit_square(6)
    D = np.array([[2.0, 0.5], [0.5, 1.0]])
    f = fem.solve_field(fem.assemble(mesh, "diffusion", D, dirichlet_map(mesh, lambda x: x[:, 0])))
    assert np.max(np.abs(f.values - mesh.nodes[:, 0])) < 1e-12


def test_elasticity_patch_test():
    mesh = build_macro_mesh(6)
    B = np.array([[0.1, -0.3], [0.2, 0.05]])
    lin = lambda x: x @ B.T + np.array([0.01, -0.02])
    dm = dirichlet_map(mesh, lin, ncomp=2)
    f = fem.solve_field(fem.assemble(mesh, "elasticity", isotropic_tensor(1.0, 1.0).components, dm))
    assert np.max(np.abs(f.values - lin(mesh.nodes))) < 1e-12


def test_zero_mean_periodic_poisson():
    mesh = build_unit_cell_mesh(CrossCellGeometry(1.0, 1.0), 8)
    dm = fem.DofMap(mesh, 1, fem.ConstraintSet(periodic=True, zero_mean=True))
    rhs = fem.load_vector(mesh, lambda p: np.cos(2 * PI * p[..., 0]) + np.sin(2 * PI * p[..., 1]))
    f = fem.solve_field(fem.assemble(mesh, "diffusion", 1.0, dm, load=rhs))
    mean = fem.integrate(f.at_quadrature()[0], mesh)
    assert abs(mean) <= 1e-12 * fem.norms(f)["L2"]
    assert dm.n_dofs == 8 * 8 + 1


def test_dofmap_counts():
    mesh = build_unit_cell_mesh(CrossCellGeometry(1 / 3, 1 / 3), 12)
    n_slaves = len(mesh.periodic_pairs)
    dm = fem.DofMap(mesh, 2, fem.ConstraintSet(periodic=True, zero_mean=True))
    assert dm.n_dofs == 2 * (mesh.n_nodes - n_slaves) + 2
    macro = build_macro_mesh(4)
    dm = dirichlet_map(macro)
    assert dm.n_dofs == macro.n_nodes - 16


def test_zero_mean_requires_periodic_only():
    mesh = build_macro_mesh(2)
    with pytest.raises(ValueError):
        fem.DofMap(mesh, 1, fem.ConstraintSet(dirichlet_nodes=np.array([0]), zero_mean=True))


def test_singular_system_is_detected():
    mesh = build_unit_cell_mesh(CrossCellGeometry(1.0, 1.0), 4)
    dm = fem.DofMap(mesh, 1, fem.ConstraintSet(periodic=True))  # constants in the kernel
    with pytest.raises(SingularSystemError):
        fem.solve(fem.assemble(mesh, "diffusion", 1.0, dm))


def test_cg_matches_direct():
    mesh = unit_square(10)
    dm = dirichlet_map(mesh)
    s = fem.assemble(mesh, "diffusion", 1.0, dm, load=fem.load_vector(mesh, 1.0))
    x1 = fem.solve(s, "direct")
    x2 = fem.solve(s, "cg", rtol=1e-10)
    assert np.max(np.abs(x1 - x2)) < 1e-9 * np.max(np.abs(x1))


def test_norm_examples():
    cell = build_unit_cell_mesh(CrossCellGeometry(1.0, 1.0), 4)
    n = fem.norms(fem.Field(cell, np.ones(cell.n_nodes)))
    assert abs(n["L2"] - 1.0) < 1e-14 and n["H1_semi"] < 1e-14
    macro = build_macro_mesh(4)
    n = fem.norms(fem.interpolate(macro, lambda x: x[:, 0]))
    assert abs(n["L2"] - np.sqrt(1 / 12)) < 1e-14
    assert abs(n["H1_semi"] - 1.0) < 1e-14


def test_interpolated_sine_norm_converges_quadratically():
    errs = []
    for n in (8, 16, 32):
        f = fem.interpolate(unit_square(n), lambda x: np.sin(PI * x[:, 0]) * np.sin(PI * x[:, 1]))
        errs.append(abs(fem.norms(f)["L2"] - 0.5))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.9)


def test_integrate_examples():
    cell = build_unit_cell_mesh(CrossCellGeometry(1 / 3, 1 / 3), 9)
    assert abs(fem.integrate(1.0, cell) - 5 / 9) < 1e-14
    macro = build_macro_mesh(6)
    assert abs(fem.integrate(lambda p: p[..., 0], macro)) < 1e-15


def test_poisson_manufactured_order():
    exact = lambda p: np.sin(PI * p[..., 0]) * np.sin(PI * p[..., 1])
    errs = []
    for n in (8, 16, 32):
        mesh = unit_square(n)
        rhs = fem.load_vector(mesh, lambda p: 2 * PI**2 * exact(p))
        f = fem.solve_field(fem.assemble(mesh, "diffusion", 1.0, dirichlet_map(mesh), load=rhs))
        errs.append(l2_error(f, exact))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates >= 1.9), rates


def test_elasticity_manufactured_order():
    # u = (s, s) with s = sin(πx) sin(πy) and λ = μ = 1:
    # -div σ = 2μπ² s + (λ+μ)π² (s − cos(πx) cos(πy)) in each component
    lam, mu = 1.0, 1.0
    s = lambda p: np.sin(PI * p[..., 0]) * np.sin(PI * p[..., 1])
    c = lambda p: np.cos(PI * p[..., 0]) * np.cos(PI * p[..., 1])
    exact = lambda p: np.stack([s(p), s(p)], axis=-1)
    force = lambda p: np.stack([2 * mu * PI**2 * s(p) + (lam + mu) * PI**2 * (s(p) - c(p))] * 2, axis=-1)
    errs = []
    for n in (8, 16, 32):
        mesh = unit_square(n)
        rhs = fem.load_vector(mesh, force, 2)
        dm = dirichlet_map(mesh, ncomp=2)
        f = fem.solve_field(fem.assemble(mesh, "elasticity", isotropic_tensor(lam, mu).components, dm, load=rhs))
        errs.append(l2_error(f, exact))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates >= 1.9), rates


def test_field_evaluate_matches_quadrature_values():
    mesh = build_macro_mesh(4)
    f = fem.interpolate(mesh, lambda x: np.column_stack([x[:, 0] * x[:, 1], x[:, 0] - x[:, 1]]))
    vals, grads = f.at_quadrature()
    ev, eg = f.evaluate(fem.quadrature(mesh).points.reshape(-1, 2))
    assert np.allclose(ev, vals.reshape(-1, 2), atol=1e-14)
    assert np.allclose(eg, grads.reshape(-1, 2, 2), atol=1e-14)


def test_recovered_gradient_exact_for_linear():
    mesh = build_macro_mesh(5)
    f = fem.interpolate(mesh, lambda x: 3 * x[:, 0] - 2 * x[:, 1])
    g = fem.recovered_gradient(f)
    assert np.allclose(g.values, [3.0, -2.0], atol=1e-12)


def test_flux_load_is_adjoint_of_gradient():
    mesh = build_macro_mesh(3)
    rng = np.random.default_rng(1)
    v = rng.standard_normal(mesh.n_nodes)
    sigma = rng.standard_normal(fem.quadrature(mesh).weights.shape + (2,))
    _, gv = fem.Field(mesh, v).at_quadrature()
    lhs = float(np.sum(fem.quadrature(mesh).weights * np.sum(sigma * gv, -1)))
    assert abs(fem.flux_load_vector(mesh, sigma) @ v - lhs) < 1e-12
