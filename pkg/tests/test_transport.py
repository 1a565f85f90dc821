import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from deformhom import fem
from deformhom.elasticity import isotropic_tensor, solve_elasticity_cell_problems
from deformhom.errors import NonpositiveJacobianError
from deformhom.mesh import (BoundaryTag, CrossCellGeometry, build_macro_mesh, build_perforated_mesh,
                            build_rectangle_mesh, build_unit_cell_mesh)
from deformhom.transport import (GAMMA_2D, DeformationCoefficients, DiffusionCellSolver,
                                 EffectiveCoefficientSolver, ReactionModel, TransportStepper,
                                 compute_effective_coefficients, compute_F0, micro_deformation_coefficients,
                                 pullback, quad_point_coefficients, solve_diffusion_cell_problems)

D_HAT = 0.5 * np.eye(2)
PI = np.pi


@pytest.fixture(scope="module")
def cross_cells():
    mesh = build_unit_cell_mesh(CrossCellGeometry(1 / 3, 1 / 3), 12, fitted=True)
    return solve_elasticity_cell_problems(isotropic_tensor(1.0, 1.0), mesh)


@pytest.fixture(scope="module")
def full_cells():
    mesh = build_unit_cell_mesh(CrossCellGeometry(1.0, 1.0), 4)
    return solve_elasticity_cell_problems(isotropic_tensor(1.0, 1.0), mesh)


def reference_pullback(F, D_hat):
    Finv = np.linalg.inv(F)
    J = np.linalg.det(F)
    return J, J * Finv @ D_hat @ Finv.T


@pytest.mark.parametrize("s", [0.05, 0.1, 0.2])
def test_dilation_leaves_diffusion_unchanged(s):
    J, D = pullback(((1 + s) * np.eye(2))[None], D_HAT)
    assert abs(J[0] - (1 + s) ** 2) < 1e-14
    assert np.max(np.abs(D[0] - D_HAT)) < 1e-15


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-0.45, 0.45), min_size=4, max_size=4),
       st.floats(0.1, 2.0), st.floats(-0.5, 0.5), st.floats(0.1, 2.0))
def test_pullback_matches_inverse_formula(b, d11, d12, d22):
    F = np.eye(2) + np.array(b).reshape(2, 2)
    D_hat = np.array([[d11, d12], [d12, d22]])
    if np.linalg.eigvalsh(D_hat).min() <= 1e-3:
        return
    J, D = pullback(F[None], D_hat)
    Jr, Dr = reference_pullback(F, D_hat)
    assert abs(J[0] - Jr) < 1e-12
    assert np.max(np.abs(D[0] - Dr)) < 1e-12
    assert abs(D[0, 0, 1] - D[0, 1, 0]) < 1e-12
    assert np.linalg.eigvalsh(D[0]).min() > 0
    # Hadamard bound with ‖F − I‖₂ < 1
    assert J[0] <= GAMMA_2D


def test_compute_F0_examples():
    zero = np.zeros((3, 2, 2))
    c = compute_F0(np.zeros((2, 2)), np.zeros((2, 2)), zero, D_HAT)
    assert np.array_equal(c.F, np.eye(2)) and c.J == 1.0 and np.allclose(c.D, D_HAT)
    G = 0.1 * np.eye(2)
    c = compute_F0(G, G, zero, D_HAT)
    assert abs(c.J - 1.21) < 1e-14 and np.allclose(c.D, D_HAT, atol=1e-15)
    G = np.diag([0.2, 0.0])
    c = compute_F0(G, G, zero, D_HAT)
    assert abs(c.J - 1.2) < 1e-14
    assert np.allclose(c.D, np.diag([0.5 / 1.2, 0.6]), atol=1e-15)


def test_nonpositive_jacobian_is_rejected():
    with pytest.raises(NonpositiveJacobianError):
        G = np.diag([-2.0, 0.0])  # F = diag(-1, 1): a reflection
        compute_F0(G, G, np.zeros((3, 2, 2)), D_HAT)
    with pytest.raises(NonpositiveJacobianError):
        DeformationCoefficients(np.eye(2), 0.0, D_HAT)


def test_micro_coefficients_examples():
    mesh = build_perforated_mesh(1.0, CrossCellGeometry(1.0, 1.0), 4)
    F, J, D = micro_deformation_coefficients(fem.Field(mesh, np.zeros((mesh.n_nodes, 2))), D_HAT)
    assert np.all(F == np.eye(2)) and np.all(J == 1.0) and np.allclose(D, D_HAT)
    F, J, D = micro_deformation_coefficients(fem.Field(mesh, 0.05 * mesh.nodes), D_HAT)
    assert np.allclose(F, 1.05 * np.eye(2), atol=1e-14)
    assert np.allclose(J, 1.1025, atol=1e-14)


def test_micro_coefficients_report_location():
    mesh = build_macro_mesh(2)
    with pytest.raises(NonpositiveJacobianError) as exc:
        u = fem.Field(mesh, np.column_stack([-2.0 * mesh.nodes[:, 0], 0 * mesh.nodes[:, 1]]))
        micro_deformation_coefficients(u, D_HAT, t=0.3)
    rec = exc.value.record()
    assert rec["error"] == "NONPOSITIVE_JACOBIAN" and rec["t"] == 0.3 and len(rec["x"]) == 2


def _constant_D(mesh, D):
    return np.broadcast_to(D, fem.quadrature(mesh).weights.shape + (2, 2)).copy()


def test_full_cell_eta_vanishes(full_cells):
    eta = solve_diffusion_cell_problems(_constant_D(full_cells.mesh, D_HAT), full_cells.mesh)
    assert max(np.abs(e.values).max() for e in eta) < 1e-12
    solver = DiffusionCellSolver(full_cells.mesh)
    e, Ds = solver.solve(_constant_D(full_cells.mesh, D_HAT).reshape(1, -1, 2, 2))
    assert np.abs(e).max() < 1e-12 and np.allclose(Ds[0], D_HAT, atol=1e-14)


def test_cross_eta_lowers_energy_and_respects_swap(cross_cells):
    mesh = cross_cells.mesh
    solver = DiffusionCellSolver(mesh)
    _, Ds = solver.solve(_constant_D(mesh, D_HAT).reshape(1, -1, 2, 2))
    assert Ds[0, 0, 0] < 5 / 9 * 0.5
    assert abs(Ds[0, 0, 0] - Ds[0, 1, 1]) < 1e-12
    assert abs(Ds[0, 0, 1]) < 1e-12
    eta = solve_diffusion_cell_problems(_constant_D(mesh, D_HAT), mesh)
    v2, _ = eta[1].evaluate(mesh.nodes)
    v1, _ = eta[0].evaluate(mesh.nodes[:, ::-1])
    assert np.max(np.abs(v2 - v1)) < 1e-10


def test_batched_solver_matches_sparse_reference(cross_cells):
    rng = np.random.default_rng(3)
    solver = DiffusionCellSolver(cross_cells.mesh, chunk=2)
    grads = 0.05 * rng.standard_normal((3, 2, 2))
    Ds_ref, Js_ref, Ds_list = [], [], []
    for G in grads:
        q = quad_point_coefficients(0, G, cross_cells, D_HAT)
        Js, Ds = compute_effective_coefficients(q)
        Js_ref.append(Js)
        Ds_ref.append(Ds)
        Ds_list.append(q.D.reshape(-1, 2, 2))
    _, Ds = solver.solve(np.stack(Ds_list))
    assert np.max(np.abs(Ds - np.array(Ds_ref))) < 1e-12
    # zero-mean saddle point agrees with the sparse Lagrange-multiplier route
    eta, _ = solver.solve(np.stack(Ds_list[:1]))
    q = quad_point_coefficients(0, grads[0], cross_cells, D_HAT)
    compute_effective_coefficients(q)
    nodal = solver.expand(eta[0])
    assert np.max(np.abs(nodal[0] - q.eta[0].values)) < 1e-10


def test_reduction_at_zero_displacement(cross_cells):
    mesh = build_macro_mesh(2)
    co = EffectiveCoefficientSolver(cross_cells, D_HAT)(fem.Field(mesh, np.zeros((mesh.n_nodes, 2))))
    assert np.allclose(co.J_star, 5 / 9, atol=1e-14)
    _, D_A = DiffusionCellSolver(cross_cells.mesh).solve(_constant_D(cross_cells.mesh, D_HAT).reshape(1, -1, 2, 2))
    assert np.max(np.abs(co.D_star - D_A[0])) < 1e-15
    assert co.margin == 0.0


def test_uniform_dilation_full_cell(full_cells):
    mesh = build_macro_mesh(2)
    co = EffectiveCoefficientSolver(full_cells, D_HAT)(fem.Field(mesh, 0.1 * mesh.nodes))
    assert np.allclose(co.J_star, 1.21, atol=1e-13)
    assert np.allclose(co.D_star, D_HAT, atol=1e-13)


def test_threads_and_centroid_modes(cross_cells):
    mesh = build_macro_mesh(4)
    u = fem.Field(mesh, 0.05 * np.column_stack([mesh.nodes[:, 0] * mesh.nodes[:, 1], mesh.nodes[:, 0] ** 2]))
    serial = EffectiveCoefficientSolver(cross_cells, D_HAT, chunk=8)(u)
    threaded = EffectiveCoefficientSolver(cross_cells, D_HAT, chunk=8, threads=3)(u)
    assert np.array_equal(serial.D_star, threaded.D_star)
    cen = EffectiveCoefficientSolver(cross_cells, D_HAT, granularity="centroid")(u)
    assert np.all(cen.D_star[:, 0] == cen.D_star[:, 3])
    assert np.max(np.abs(cen.D_star - serial.D_star)) < 1e-2
    with pytest.raises(ValueError):
        EffectiveCoefficientSolver(cross_cells, D_HAT, granularity="nodal")


def test_sweep_raises_with_location(cross_cells):
    mesh = build_macro_mesh(2)
    u = fem.Field(mesh, np.column_stack([-2.0 * mesh.nodes[:, 0], 0 * mesh.nodes[:, 1]]))
    with pytest.raises(NonpositiveJacobianError) as exc:
        EffectiveCoefficientSolver(cross_cells, D_HAT)(u, t=0.7)
    e = exc.value
    assert e.t == 0.7 and e.x is not None and e.y is not None and e.margin >= 1.0


def _heat_setup(n, d=1.0, square=True):
    mesh = build_rectangle_mesh(n, (0.0, 0.0), (1.0, 1.0)) if square else build_macro_mesh(n)
    shape = fem.quadrature(mesh).weights.shape
    return mesh, np.ones(shape), np.broadcast_to(d * np.eye(2), shape + (2, 2)).copy()


def test_zero_data_stays_zero():
    mesh, J, D = _heat_setup(4)
    st_ = TransportStepper(mesh)
    s = st_.initial_state(0.0, J, D)
    for _ in range(3):
        s = st_.step(s, J, D, ReactionModel.constant(0.0), 0.1)
    assert np.all(s.values == 0)


def test_crank_nicolson_temporal_order():
    # single Fourier mode: c = exp(-2π² d t) sin(πx) sin(πy)
    n, d, T = 128, 1.0, 0.4
    mesh, J, D = _heat_setup(n, d)
    mode = lambda x: np.sin(PI * x[:, 0]) * np.sin(PI * x[:, 1])
    errs = []
    for dt in (0.02, 0.01, 0.005):
        st_ = TransportStepper(mesh)
        s = st_.initial_state(mode, J, D)
        for _ in range(int(round(T / dt))):
            s = st_.step(s, J, D, ReactionModel.constant(0.0), dt, constant=True)
        exact = np.exp(-2 * PI**2 * d * T) * mode(mesh.nodes)
        errs.append(fem.norms(fem.Field(mesh, s.values[0] - exact))["L2"])
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates >= 1.9), rates


def test_matches_reference_dense_crank_nicolson():
    mesh, J, D = _heat_setup(6, square=False)
    Js = 5 / 9 * J
    st_ = TransportStepper(mesh)
    s = st_.initial_state(0.0, Js, D)
    dt = 0.05
    for _ in range(4):
        s = st_.step(s, Js, D, ReactionModel.constant(1.0), dt)
    # dense reference on the interior nodes
    M = fem.mass_matrix(mesh, 5 / 9).toarray()
    K = fem.stiffness_matrix(mesh, D).toarray()
    b = fem.load_vector(mesh, 5 / 9)
    inner = np.setdiff1d(np.arange(mesh.n_nodes), mesh.nodes_with_tag(BoundaryTag.OUTER_DIRICHLET))
    Mi, Ki = M[np.ix_(inner, inner)], K[np.ix_(inner, inner)]
    c = np.zeros(len(inner))
    for _ in range(4):
        c = sla.solve(Mi / dt + 0.5 * Ki, (Mi / dt - 0.5 * Ki) @ c + b[inner])
    assert np.max(np.abs(s.values[0, inner] - c)) < 1e-12


def test_mass_balance_with_varying_coefficients():
    mesh, J, D = _heat_setup(6, square=False)
    st_ = TransportStepper(mesh)
    s = st_.initial_state(lambda x: 1 - 4 * x[:, 0] ** 2, J, D)
    rng = np.random.default_rng(5)
    for k in range(5):
        Jn = J * (1 + 0.1 * rng.random(J.shape))
        Dn = D * (1 + 0.1 * rng.random(J.shape))[..., None, None]
        s = st_.step(s, Jn, Dn, ReactionModel.constant(1.0), 0.1)
    assert max(b.relative_defect for step in st_.balances for b in step) < 1e-10


def test_cached_factorisation_is_reused():
    mesh, J, D = _heat_setup(6, square=False)
    a, b = TransportStepper(mesh), TransportStepper(mesh)
    sa, sb = a.initial_state(0.0, J, D), b.initial_state(0.0, J, D)
    for _ in range(3):
        sa = a.step(sa, J, D, ReactionModel.constant(1.0), 0.05, constant=True)
        sb = b.step(sb, J, D, ReactionModel.constant(1.0), 0.05)
    assert np.max(np.abs(sa.values - sb.values)) < 1e-14
    assert a._const is not None


def test_picard_is_exact_for_constant_source():
    mesh, J, D = _heat_setup(4, square=False)
    a, b = TransportStepper(mesh, picard=True), TransportStepper(mesh)
    sa, sb = a.initial_state(0.0, J, D), b.initial_state(0.0, J, D)
    sa = a.step(sa, J, D, ReactionModel.constant(1.0), 0.1)
    sb = b.step(sb, J, D, ReactionModel.constant(1.0), 0.1)
    assert np.max(np.abs(sa.values - sb.values)) < 1e-15


def test_micro_cross_interior_positive_after_one_step():
    mesh = build_perforated_mesh(1.0, CrossCellGeometry(1 / 3, 1 / 3), 12)
    shape = fem.quadrature(mesh).weights.shape
    st_ = TransportStepper(mesh)
    J, D = np.ones(shape), np.broadcast_to(D_HAT, shape + (2, 2))
    s = st_.step(st_.initial_state(0.0, J, D), J, D, ReactionModel.constant(1.0), 0.01)
    inner = np.setdiff1d(np.arange(mesh.n_nodes), st_.dirichlet)
    assert np.all(s.values[0, inner] > 0)
    assert np.all(s.values[0, st_.dirichlet] == 0)


def test_multispecies_and_reaction_shapes():
    r = ReactionModel.constant([1.0, 2.0])
    out = r(np.zeros((2, 3, 4)))
    assert out.shape == (2, 3, 4) and np.all(out[1] == 2.0)
    mesh, J, D = _heat_setup(4, square=False)
    st_ = TransportStepper(mesh)
    s = st_.initial_state(0.0, J, D, n_species=2)
    s = st_.step(s, J, D, r, 0.1)
    assert np.allclose(s.values[1], 2 * s.values[0])
    with pytest.raises(ValueError):
        st_.step(s, J, D, r, 0.0)
