"""Deformation-dependent diffusion: pulled-back coefficients, diffusion cell
problems, effective coefficients and Crank-Nicolson transport steps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import fem
from .elasticity import CellSolutionSet, perturbation, spectral_norm_2x2
from .errors import NonpositiveJacobianError, SingularSystemError
from .mesh import BoundaryTag, StructuredQuadMesh

# Hadamard bound on det(I + B) for ‖B‖₂ < 1 in two dimensions
GAMMA_2D = 2.0 * 1.5**2


@dataclass(frozen=True)
class DeformationCoefficients:
    """F, J = det F and D = J F⁻¹ D̂ F⁻ᵀ at one point (or a stack of points)."""

    F: np.ndarray
    J: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.J) <= 0):
            raise NonpositiveJacobianError(np.min(self.J))


def pullback(F: np.ndarray, D_hat: np.ndarray):
    """(J, D) for a stack of deformation gradients ``F`` (..., 2, 2)."""
    J = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    adj = np.empty_like(F)
    adj[..., 0, 0] = F[..., 1, 1]
    adj[..., 1, 1] = F[..., 0, 0]
    adj[..., 0, 1] = -F[..., 0, 1]
    adj[..., 1, 0] = -F[..., 1, 0]
    # adj D̂ adjᵀ written out component-wise (much faster than einsum on 2x2 stacks)
    t = [[adj[..., i, 0] * D_hat[0, k] + adj[..., i, 1] * D_hat[1, k] for k in range(2)] for i in range(2)]
    D = np.empty_like(F)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / J
        for i in range(2):
            for j in range(2):
                D[..., i, j] = (t[i][0] * adj[..., j, 0] + t[i][1] * adj[..., j, 1]) * inv
    return J, D


def compute_F0(grad_u, e_u, grad_chi, D_hat) -> DeformationCoefficients:
    """Coefficients at one macro point and one cell point.

    ``grad_chi`` holds ``∇_y χ_11, ∇_y χ_12, ∇_y χ_22`` at the cell point,
    shape (3, 2, 2).
    """
    G = np.asarray(grad_u, dtype=float).reshape(1, 2, 2)
    e = np.asarray(e_u, dtype=float).reshape(1, 2, 2)
    B = perturbation(G, e, np.asarray(grad_chi, dtype=float).reshape(3, 1, 2, 2))[0, 0]
    F = np.eye(2) + B
    J, D = pullback(F, np.asarray(D_hat, dtype=float))
    if J <= 0:
        raise NonpositiveJacobianError(J, margin=float(spectral_norm_2x2(B)))
    return DeformationCoefficients(F, float(J), D)


def micro_deformation_coefficients(u: fem.Field, D_hat, t: float | None = None):
    """(F, J, D) at every Gauss point of the mesh carrying ``u``."""
    _, G = u.at_quadrature()
    F = np.eye(2) + G
    J, D = pullback(F, np.asarray(D_hat, dtype=float))
    if np.any(J <= 0):
        k = np.unravel_index(np.argmin(J), J.shape)
        x = fem.quadrature(u.mesh).points[k]
        raise NonpositiveJacobianError(J[k], t=t, x=x, margin=float(spectral_norm_2x2(G).max()))
    return F, J, D


class DiffusionCellSolver:
    """Batched solver for the periodic, zero-mean diffusion cell problems.

    The reduced stiffness matrix depends linearly on the three independent
    entries of D₀ at the cell Gauss points, so a sparse operator maps those
    entries directly to dense reduced matrices. Each batch is then solved with
    one dense LAPACK call.
    """

    def __init__(self, mesh: StructuredQuadMesh, chunk: int = 512):
        self.mesh = mesh
        self.chunk = chunk
        dm = fem.DofMap(mesh, 1, fem.ConstraintSet(periodic=True))
        self.dofmap = dm
        nf = dm.n_free
        self.n_free = nf
        qd = fem.quadrature(mesh)
        E, nq = qd.weights.shape
        nc = E * nq
        self.n_points = nc
        self.weights = qd.weights.ravel()
        g = qd.grads.reshape(nc, 4, 2)
        conn = np.repeat(dm.reduced_index[mesh.elements], nq, axis=0)  # (nc, 4)
        w = self.weights
        c = np.arange(nc)

        a = np.broadcast_to(conn[:, :, None], (nc, 4, 4))
        b = np.broadcast_to(conn[:, None, :], (nc, 4, 4))
        cc = np.broadcast_to(c[:, None, None], (nc, 4, 4))
        ga, gb = g[:, :, None, :], g[:, None, :, :]
        v00 = w[:, None, None] * ga[..., 0] * gb[..., 0]
        v01 = w[:, None, None] * (ga[..., 0] * gb[..., 1] + ga[..., 1] * gb[..., 0])
        v11 = w[:, None, None] * ga[..., 1] * gb[..., 1]
        rows = np.tile((a * nf + b).ravel(), 3)
        cols = np.concatenate([cc.ravel(), cc.ravel() + nc, cc.ravel() + 2 * nc])
        self.T = sp.csr_matrix((np.concatenate([v00.ravel(), v01.ravel(), v11.ravel()]), (rows, cols)),
                               shape=(nf * nf, 3 * nc))

        # b_i[a] = -∫ (D e_i) · ∇φ_a
        ra = conn.ravel()
        ca = np.repeat(c, 4)
        wg0, wg1 = (w[:, None] * g[..., 0]).ravel(), (w[:, None] * g[..., 1]).ravel()
        self.R = [
            -sp.csr_matrix((np.concatenate([wg0, wg1]), (np.tile(ra, 2), np.concatenate([ca, ca + nc]))),
                           shape=(nf, 3 * nc)),
            -sp.csr_matrix((np.concatenate([wg0, wg1]), (np.tile(ra, 2), np.concatenate([ca + nc, ca + 2 * nc]))),
                           shape=(nf, 3 * nc)),
        ]
        # gradient at Gauss points: row 2 c + j holds ∂_j
        self.grad_op = sp.csr_matrix(
            (g.transpose(0, 2, 1).ravel(),
             ((2 * c[:, None, None] + np.arange(2)[None, :, None]).repeat(4, axis=2).ravel(),
              np.broadcast_to(conn[:, None, :], (nc, 2, 4)).ravel())),
            shape=(2 * nc, nf))
        self.mean_row = dm.P.T @ fem.load_vector(mesh, 1.0)

    def _components(self, D: np.ndarray) -> np.ndarray:
        return np.concatenate([D[..., 0, 0], D[..., 0, 1], D[..., 1, 1]], axis=-1)

    def solve(self, D: np.ndarray, rtol: float = 1e-10):
        """D: (P, n_points, 2, 2). Returns reduced η (P, 2, n_free) and D* (P, 2, 2)."""
        P = D.shape[0]
        nf = self.n_free
        eta = np.empty((P, 2, nf))
        Dstar = np.empty((P, 2, 2))
        for s in range(0, P, self.chunk):
            Dc = D[s:s + self.chunk]
            p = Dc.shape[0]
            d = self._components(Dc).T  # (3 nc, p)
            K = np.zeros((p, nf + 1, nf + 1))
            K[:, :nf, :nf] = (self.T @ d).T.reshape(p, nf, nf)
            K[:, :nf, nf] = self.mean_row
            K[:, nf, :nf] = self.mean_row
            rhs = np.zeros((p, nf + 1, 2))
            rhs[:, :nf, 0] = (self.R[0] @ d).T
            rhs[:, :nf, 1] = (self.R[1] @ d).T
            try:
                x = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError as exc:
                raise SingularSystemError(f"diffusion cell problem: {exc}") from exc
            res = np.linalg.norm(K @ x - rhs, axis=1)
            bn = np.linalg.norm(rhs, axis=1)
            if not np.all(np.isfinite(x)) or np.any(res > rtol * np.maximum(bn, 1e-300) + 1e-300 * (bn == 0)):
                raise SingularSystemError("diffusion cell problem residual above tolerance")
            et = x[:, :nf, :]  # (p, nf, 2)
            eta[s:s + p] = et.transpose(0, 2, 1)
            Dstar[s:s + p] = self.effective_tensor(Dc, et.transpose(0, 2, 1))
        return eta, Dstar

    def gradients(self, eta: np.ndarray) -> np.ndarray:
        """∇η_i at the cell Gauss points for reduced η (P, 2, nf): (P, 2, n_points, 2)."""
        P = eta.shape[0]
        flat = eta.reshape(P * 2, self.n_free).T
        g = (self.grad_op @ flat).reshape(self.n_points, 2, P, 2)
        return g.transpose(2, 3, 0, 1)

    def effective_tensor(self, D: np.ndarray, eta: np.ndarray) -> np.ndarray:
        V = self.gradients(eta) + np.eye(2)[None, :, None, :]  # (P, 2, nc, 2)
        Ds = np.empty(D.shape[:1] + (2, 2))
        for j in range(2):
            DV0 = D[..., 0, 0] * V[:, j, :, 0] + D[..., 0, 1] * V[:, j, :, 1]
            DV1 = D[..., 1, 0] * V[:, j, :, 0] + D[..., 1, 1] * V[:, j, :, 1]
            for i in range(2):
                Ds[:, i, j] = (V[:, i, :, 0] * DV0 + V[:, i, :, 1] * DV1) @ self.weights
        return 0.5 * (Ds + np.swapaxes(Ds, -1, -2))

    def expand(self, eta: np.ndarray) -> np.ndarray:
        """Nodal values on the cell mesh, (..., n_nodes)."""
        flat = eta.reshape(-1, self.n_free)
        return (self.dofmap.P @ flat.T).T.reshape(eta.shape[:-1] + (self.mesh.n_nodes,))


def solve_diffusion_cell_problems(D0, mesh: StructuredQuadMesh, method: str = "direct"):
    """η_1, η_2 as Fields for a D₀ field given at the cell Gauss points (E, q, 2, 2)."""
    dm = fem.DofMap(mesh, 1, fem.ConstraintSet(periodic=True, zero_mean=True))
    D0 = np.asarray(D0, dtype=float)
    K = fem.stiffness_matrix(mesh, D0)
    Kr, _ = dm.reduce(K, np.zeros(K.shape[0]))
    solver = fem.LinearSolver(Kr, method)
    out = []
    for i in range(2):
        b = -fem.flux_load_vector(mesh, D0[..., :, i])
        _, br = dm.reduce(K, b)
        out.append(fem.Field(mesh, dm.expand(solver.solve(br))))
    return tuple(out)


@dataclass
class QuadPointCoefficients:
    """Cell-level data attached to a single macro quadrature point."""

    index: int
    F: np.ndarray        # (E_cell, q, 2, 2)
    J: np.ndarray        # (E_cell, q)
    D: np.ndarray        # (E_cell, q, 2, 2)
    eta: tuple | None = None
    J_star: float | None = None
    D_star: np.ndarray | None = None


def quad_point_coefficients(index: int, grad_u, cells: CellSolutionSet, D_hat) -> QuadPointCoefficients:
    """Single-point route through the sparse cell solver (reference path)."""
    G = np.asarray(grad_u, dtype=float).reshape(1, 2, 2)
    e = 0.5 * (G + np.swapaxes(G, -1, -2))
    cg = cells.quadrature_gradients()
    shape = cg.shape[1:3]
    B = perturbation(G, e, cg.reshape(3, -1, 2, 2))[0].reshape(shape + (2, 2))
    F = np.eye(2) + B
    J, D = pullback(F, np.asarray(D_hat, dtype=float))
    if np.any(J <= 0):
        raise NonpositiveJacobianError(J.min(), margin=float(spectral_norm_2x2(B).max()))
    q = QuadPointCoefficients(index, F, J, D)
    q.eta = solve_diffusion_cell_problems(D, cells.mesh)
    return q


def compute_effective_coefficients(q: QuadPointCoefficients):
    """J* = ∫ J₀ and D*_ij = ∫ D₀ (e_j + ∇η_j) · (e_i + ∇η_i)."""
    mesh = q.eta[0].mesh
    qd = fem.quadrature(mesh)
    V = np.stack([q.eta[i].at_quadrature()[1] + np.eye(2)[i] for i in range(2)])  # (2, E, q, 2)
    Ds = np.einsum("eq,ieqx,eqxy,jeqy->ij", qd.weights, V, q.D, V)
    q.J_star = float(np.sum(qd.weights * q.J))
    q.D_star = 0.5 * (Ds + Ds.T)
    return q.J_star, q.D_star


@dataclass
class EffectiveCoefficients:
    """J*, D* at every macro Gauss point plus per-step diagnostics."""

    J_star: np.ndarray                 # (E, q)
    D_star: np.ndarray                 # (E, q, 2, 2)
    margin: float = 0.0
    eta: np.ndarray | None = None      # (E, q, 2, n_free) reduced cell solutions
    diagnostics: dict = field(default_factory=dict)


class EffectiveCoefficientSolver:
    """Per-time-level sweep over the macro Gauss points.

    ``granularity="quadrature"`` solves one cell problem pair per macro Gauss
    point. ``"centroid"`` solves one pair per macro element at the element
    centre and copies the result to its Gauss points (an approximation).
    """

    def __init__(self, cells: CellSolutionSet, D_hat, granularity: str = "quadrature",
                 chunk: int = 512, threads: int = 1):
        if granularity not in ("quadrature", "centroid"):
            raise ValueError(f"unknown granularity {granularity!r}")
        self.cells = cells
        self.D_hat = np.asarray(D_hat, dtype=float)
        self.granularity = granularity
        self.cell_solver = DiffusionCellSolver(cells.mesh, chunk)
        self.chi_grads = cells.quadrature_gradients().reshape(3, -1, 2, 2)
        self.threads = max(1, int(threads))
        self.n_sweeps = 0

    def __call__(self, u: fem.Field, t: float | None = None, keep_eta: bool = False) -> EffectiveCoefficients:
        self.n_sweeps += 1
        _, G = u.at_quadrature()
        E, nq = G.shape[:2]
        if self.granularity == "centroid":
            G = np.repeat(G.mean(axis=1, keepdims=True), nq, axis=1)
        Gf = G.reshape(-1, 2, 2)
        step = nq if self.granularity == "centroid" else 1
        pts = np.arange(0, E * nq, step)
        ef = 0.5 * (Gf + np.swapaxes(Gf, -1, -2))
        chunk = self.cell_solver.chunk
        blocks = [pts[s:s + chunk] for s in range(0, len(pts), chunk)]

        def work(idx):
            B = perturbation(Gf[idx], ef[idx], self.chi_grads)
            F = np.eye(2) + B
            J, D = pullback(F, self.D_hat)
            margin = float(spectral_norm_2x2(B).max())
            if np.any(J <= 0):
                p, c = np.unravel_index(np.argmin(J), J.shape)
                cq = fem.quadrature(self.cells.mesh).points.reshape(-1, 2)[c]
                x = fem.quadrature(u.mesh).points.reshape(-1, 2)[idx[p]]
                raise NonpositiveJacobianError(J[p, c], t=t, x=x, y=cq, margin=margin)
            eta, Ds = self.cell_solver.solve(D)
            Js = J @ self.cell_solver.weights
            d0_asym = float(np.abs(D[..., 0, 1] - D[..., 1, 0]).max())
            d0_min = float(_min_eig_sym(D).min())
            return Js, Ds, eta, margin, d0_asym, d0_min

        if self.threads > 1 and len(blocks) > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(self.threads) as pool:
                results = list(pool.map(work, blocks))
        else:
            results = [work(b) for b in blocks]

        Js = np.concatenate([r[0] for r in results])
        Ds = np.concatenate([r[1] for r in results])
        if step > 1:
            Js, Ds = np.repeat(Js, step), np.repeat(Ds, step, axis=0)
        eta = None
        if keep_eta:
            eta = np.concatenate([r[2] for r in results])
            if step > 1:
                eta = np.repeat(eta, step, axis=0)
            eta = eta.reshape(E, nq, 2, -1)
        Ds = Ds.reshape(E, nq, 2, 2)
        diag = {
            "D0_asymmetry": max(r[4] for r in results),
            "D0_min_eig": min(r[5] for r in results),
            "Dstar_asymmetry": float(np.abs(Ds[..., 0, 1] - Ds[..., 1, 0]).max()),
            "Dstar_min_eig": float(_min_eig_sym(Ds).min()),
            "Jstar_min": float(Js.min()),
            "Jstar_max": float(Js.max()),
        }
        return EffectiveCoefficients(Js.reshape(E, nq), Ds, max(r[3] for r in results), eta, diag)


def _min_eig_sym(D: np.ndarray) -> np.ndarray:
    a, b, d = D[..., 0, 0], 0.5 * (D[..., 0, 1] + D[..., 1, 0]), D[..., 1, 1]
    return 0.5 * (a + d) - np.sqrt(0.25 * (a - d) ** 2 + b**2)


@dataclass(frozen=True)
class ReactionModel:
    """Reaction term ``f_d``: maps (N_c, ...) concentrations to (N_c, ...) rates."""

    func: Callable[[np.ndarray], np.ndarray]
    lipschitz: float = 0.0

    def __call__(self, c: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.func(c), dtype=float), c.shape)

    @classmethod
    def constant(cls, value) -> "ReactionModel":
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(lambda c: np.broadcast_to(v.reshape((-1,) + (1,) * (c.ndim - 1)), c.shape), 0.0)


@dataclass
class ConcentrationState:
    """Concentrations (N_c, N) at time t together with that level's J and D."""

    values: np.ndarray
    t: float
    J: np.ndarray
    D: np.ndarray

    @property
    def n_species(self) -> int:
        return self.values.shape[0]


@dataclass
class StepBalance:
    mass_old: float
    mass_new: float
    source: float
    flux: float

    @property
    def defect(self) -> float:
        return (self.mass_new - self.mass_old) - (self.source + self.flux)

    @property
    def relative_defect(self) -> float:
        scale = max(abs(self.mass_new - self.mass_old), abs(self.source), abs(self.flux), 1e-300)
        return abs(self.defect) / scale


class TransportStepper:
    """Crank-Nicolson for ∂_t(J c) − ∇·(D ∇c) = J f(c) with zero outer Dirichlet data.

    The time derivative is differenced conservatively, and the reaction is
    taken at c^n (optionally followed by one Picard correction at the
    midpoint).
    """

    def __init__(self, mesh: StructuredQuadMesh, method: str = "direct", rtol: float = 1e-10,
                 picard: bool = False):
        self.mesh = mesh
        self.method = method
        self.rtol = rtol
        self.picard = picard
        self.dirichlet = mesh.nodes_with_tag(BoundaryTag.OUTER_DIRICHLET)
        self.dofmap = fem.DofMap(mesh, 1, fem.ConstraintSet(dirichlet_nodes=self.dirichlet))
        self._const = None
        self._last = None
        self.balances: list[list[StepBalance]] = []

    def initial_state(self, c0, J, D, t: float = 0.0, n_species: int = 1) -> ConcentrationState:
        c = np.zeros((n_species, self.mesh.n_nodes))
        if callable(c0):
            c[:] = np.asarray(c0(self.mesh.nodes), dtype=float)
        else:
            c[:] = np.asarray(c0, dtype=float).reshape(-1, 1) if np.ndim(c0) else float(c0)
        c[:, self.dirichlet] = 0.0
        return ConcentrationState(c, t, np.asarray(J, float), np.asarray(D, float))

    def _matrices(self, J, D):
        return fem.mass_matrix(self.mesh, J), fem.stiffness_matrix(self.mesh, D)

    def _source(self, J, f_q):
        return fem.load_vector(self.mesh, J * f_q)

    def _at_quadrature(self, values: np.ndarray) -> np.ndarray:
        """(N_c, N) nodal values -> (N_c, E, q)."""
        return np.stack([fem.Field(self.mesh, v).at_quadrature()[0] for v in values])

    def step(self, state: ConcentrationState, J_new, D_new, reaction: ReactionModel, dt: float,
             constant: bool = False) -> ConcentrationState:
        """One step; ``constant=True`` reuses the factorisation of the previous
        constant-coefficient step with the same ``dt``."""
        if dt <= 0:
            raise ValueError("time step must be positive")
        if constant and self._const is not None and self._const[0] == dt:
            _, M0, K0, M1, K1, solver = self._const
        else:
            last = self._last
            if last is not None and last[0] is state.J and last[1] is state.D:
                M0, K0 = last[2], last[3]
            else:
                M0, K0 = self._matrices(state.J, state.D)
            M1, K1 = self._matrices(J_new, D_new)
            self._last = (J_new, D_new, M1, K1)
            Ar, _ = self.dofmap.reduce(M1 / dt + 0.5 * K1, np.zeros(M1.shape[0]))
            solver = fem.LinearSolver(Ar, self.method, self.rtol)
            self._const = (dt, M0, K0, M1, K1, solver) if constant else None
        A = M1 / dt + 0.5 * K1
        B = M0 / dt - 0.5 * K0

        c_old = state.values
        n_sweeps = 2 if self.picard else 1
        f_q = reaction(self._at_quadrature(c_old))
        for sweep in range(n_sweeps):
            new = np.empty_like(c_old)
            sources, rhss = [], []
            for m in range(c_old.shape[0]):
                src = 0.5 * (self._source(J_new, f_q[m]) + self._source(state.J, f_q[m]))
                rhs = B @ c_old[m] + src
                _, br = self.dofmap.reduce(A, rhs)
                new[m] = self.dofmap.expand(solver.solve(br))
                sources.append(src)
                rhss.append(rhs)
            if sweep + 1 < n_sweeps:
                f_q = reaction(self._at_quadrature(0.5 * (c_old + new)))

        step_bal = []
        for m in range(c_old.shape[0]):
            r = A @ new[m] - rhss[m]
            step_bal.append(StepBalance(
                mass_old=float(np.sum(M0 @ c_old[m])),
                mass_new=float(np.sum(M1 @ new[m])),
                source=dt * float(np.sum(sources[m])),
                flux=dt * float(np.sum(r[self.dirichlet])),
            ))
        self.balances.append(step_bal)
        return ConcentrationState(new, state.t + dt, J_new, D_new)

    def mass(self, state: ConcentrationState, weight=None) -> np.ndarray:
        """∫ J c per species, or ∫ weight c when a weight is given."""
        w = state.J if weight is None else np.asarray(weight, dtype=float)
        qd = fem.quadrature(self.mesh)
        return np.einsum("eq,eq,meq->m", qd.weights, np.broadcast_to(w, qd.weights.shape),
                         self._at_quadrature(state.values))


def step_macro_transport(stepper: TransportStepper, state: ConcentrationState, coeffs: EffectiveCoefficients,
                         reaction: ReactionModel, dt: float) -> ConcentrationState:
    return stepper.step(state, coeffs.J_star, coeffs.D_star, reaction, dt)


def step_micro_transport(stepper: TransportStepper, state: ConcentrationState, J_eps, D_eps,
                         reaction: ReactionModel, dt: float) -> ConcentrationState:
    return stepper.step(state, J_eps, D_eps, reaction, dt)
