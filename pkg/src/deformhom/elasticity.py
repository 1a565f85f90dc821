"""Linear elasticity: cell problems, effective tensor, macro/micro solves, C_χ."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fem
from .mesh import BoundaryTag, CrossCellGeometry, StructuredQuadMesh, build_unit_cell_mesh

# (i, j) index pairs of the three independent cell problems
CELL_PAIRS = ((0, 0), (0, 1), (1, 1))
_PAIR_INDEX = np.array([[0, 1], [1, 2]])


def unit_strain(i: int, j: int) -> np.ndarray:
    M = np.zeros((2, 2))
    M[i, j] += 0.5
    M[j, i] += 0.5
    return M


@dataclass(frozen=True, eq=False)
class ElasticityTensor4:
    """Rank-4 tensor ``A[i, j, k, l]`` in two dimensions."""

    components: np.ndarray

    def __post_init__(self):
        c = np.array(self.components, dtype=float)
        if c.shape != (2, 2, 2, 2):
            raise ValueError("expected a (2, 2, 2, 2) array")
        c.setflags(write=False)
        object.__setattr__(self, "components", c)

    def __getitem__(self, idx):
        return self.components[idx]

    def apply(self, B) -> np.ndarray:
        return np.einsum("ijkl,...kl->...ij", self.components, np.asarray(B, dtype=float))

    def energy(self, B) -> np.ndarray:
        B = np.asarray(B, dtype=float)
        return np.einsum("...ij,...ij->...", self.apply(B), B)

    def symmetry_defect(self) -> float:
        c = self.components
        return float(max(np.abs(c - c.transpose(1, 0, 2, 3)).max(),
                         np.abs(c - c.transpose(0, 1, 3, 2)).max(),
                         np.abs(c - c.transpose(2, 3, 0, 1)).max()))

    def mandel(self) -> np.ndarray:
        """3x3 matrix acting on (B11, B22, sqrt2 B12)."""
        idx = ((0, 0), (1, 1), (0, 1))
        s = np.array([1.0, 1.0, np.sqrt(2.0)])
        return np.array([[s[a] * s[b] * self.components[idx[a] + idx[b]] for b in range(3)] for a in range(3)])

    def ellipticity(self) -> float:
        """Largest α with ``A B : B ≥ α |B|²`` on symmetric B."""
        m = self.mandel()
        return float(np.linalg.eigvalsh(0.5 * (m + m.T)).min())


def isotropic_tensor(lam: float, mu: float) -> ElasticityTensor4:
    if lam <= 0 or mu <= 0:
        raise ValueError("Lamé parameters must be positive")
    d = np.eye(2)
    A = (lam * np.einsum("ij,kl->ijkl", d, d)
         + mu * (np.einsum("ik,jl->ijkl", d, d) + np.einsum("il,jk->ijkl", d, d)))
    return ElasticityTensor4(A)


@dataclass(frozen=True, eq=False)
class CellSolutionSet:
    """Correctors χ_11, χ_12, χ_22 (vector fields) on a unit-cell mesh."""

    chi: tuple
    mesh: StructuredQuadMesh
    geometry: CrossCellGeometry
    tensor: ElasticityTensor4

    def field(self, i: int, j: int) -> fem.Field:
        return self.chi[_PAIR_INDEX[i, j]]

    def quadrature_gradients(self) -> np.ndarray:
        """``∇_y χ_p`` at the cell Gauss points, shape (3, E, q, 2, 2)."""
        return np.stack([c.at_quadrature()[1] for c in self.chi])

    def nodal_values(self) -> np.ndarray:
        """(3, N, 2) nodal coefficients."""
        return np.stack([c.values for c in self.chi])


def solve_elasticity_cell_problems(A: ElasticityTensor4, mesh: StructuredQuadMesh,
                                   method: str = "direct", rtol: float = 1e-10) -> CellSolutionSet:
    dm = fem.DofMap(mesh, 2, fem.ConstraintSet(periodic=True, zero_mean=True))
    K = fem.elasticity_matrix(mesh, A.components)
    Kr, _ = dm.reduce(K, np.zeros(K.shape[0]))
    solver = fem.LinearSolver(Kr, method, rtol)
    chi = []
    for i, j in CELL_PAIRS:
        sigma = A.apply(unit_strain(i, j))
        b = -fem.flux_load_vector(mesh, sigma)
        _, br = dm.reduce(K, b)
        chi.append(fem.Field(mesh, dm.expand(solver.solve(br))))
    return CellSolutionSet(tuple(chi), mesh, mesh.geometry, A)


def cell_strains(cells: CellSolutionSet) -> np.ndarray:
    """``M_p + e_y(χ_p)`` at the cell Gauss points, shape (3, E, q, 2, 2)."""
    g = cells.quadrature_gradients()
    e = 0.5 * (g + np.swapaxes(g, -1, -2))
    M = np.stack([unit_strain(i, j) for i, j in CELL_PAIRS])
    return e + M[:, None, None]


def compute_A_star(A: ElasticityTensor4, cells: CellSolutionSet) -> ElasticityTensor4:
    qd = fem.quadrature(cells.mesh)
    S = cell_strains(cells)
    P = np.einsum("eq,peqab,abcd,reqcd->pr", qd.weights, S, A.components, S)
    return ElasticityTensor4(P[_PAIR_INDEX[:, :, None, None], _PAIR_INDEX[None, None, :, :]])


def compute_C_chi(cells: CellSolutionSet) -> float:
    """Max-abs entry of ``∇_y χ_ij`` over all cell Gauss points."""
    return float(np.abs(cells.quadrature_gradients()).max())


@dataclass(frozen=True, eq=False)
class DisplacementField(fem.Field):
    t: float = 0.0


def _as_load(mesh, f_e, scale):
    if f_e is None:
        return np.zeros(2 * mesh.n_nodes)
    if callable(f_e):
        return scale * fem.load_vector(mesh, f_e, 2)
    f = np.asarray(f_e, dtype=float)
    if not np.any(f):
        return np.zeros(2 * mesh.n_nodes)
    return scale * fem.load_vector(mesh, f, 2)


class ElasticitySolver:
    """Quasi-static elasticity with Dirichlet data on the outer boundary.

    The constrained matrix does not change over time, so it is factorised
    once and each time level only re-lifts the boundary values.
    """

    def __init__(self, mesh: StructuredQuadMesh, tensor: ElasticityTensor4, load_scale: float = 1.0,
                 method: str = "direct", rtol: float = 1e-10):
        self.mesh = mesh
        self.tensor = tensor
        self.load_scale = load_scale
        self.dirichlet_nodes = mesh.nodes_with_tag(BoundaryTag.OUTER_DIRICHLET)
        if len(self.dirichlet_nodes) == 0:
            from .errors import SingularSystemError
            raise SingularSystemError("elasticity problem without Dirichlet boundary")
        self.dofmap = fem.DofMap(mesh, 2, fem.ConstraintSet(dirichlet_nodes=self.dirichlet_nodes))
        self.K = fem.elasticity_matrix(mesh, tensor.components)
        Kr, _ = self.dofmap.reduce(self.K, np.zeros(self.K.shape[0]))
        self.solver = fem.LinearSolver(Kr, method, rtol)

    def solve(self, boundary, t: float, f_e=None) -> DisplacementField:
        """``boundary(t, x) -> (n, 2)`` values at the Dirichlet nodes."""
        g = np.asarray(boundary(t, self.mesh.nodes[self.dirichlet_nodes]), dtype=float)
        dm = self.dofmap.with_dirichlet_values(g)
        b = _as_load(self.mesh, f_e, self.load_scale)
        if not np.any(g) and not np.any(b):
            return DisplacementField(self.mesh, np.zeros((self.mesh.n_nodes, 2)), t)
        _, br = dm.reduce(self.K, b)
        return DisplacementField(self.mesh, dm.expand(self.solver.solve(br)), t)


def solve_macro_elasticity(A_star: ElasticityTensor4, f_e, boundary, mesh: StructuredQuadMesh, t: float,
                           solid_area: float = 1.0) -> DisplacementField:
    """Effective elasticity with volume load ``|Y^s| f_e``."""
    return ElasticitySolver(mesh, A_star, solid_area).solve(boundary, t, f_e)


def solve_micro_elasticity(A: ElasticityTensor4, f_e, boundary, mesh: StructuredQuadMesh, t: float) -> DisplacementField:
    return ElasticitySolver(mesh, A, 1.0).solve(boundary, t, f_e)


def spectral_norm_2x2(B: np.ndarray) -> np.ndarray:
    """Largest singular value of a stack of 2x2 matrices (closed form)."""
    fro2 = np.einsum("...ij,...ij->...", B, B)
    det = B[..., 0, 0] * B[..., 1, 1] - B[..., 0, 1] * B[..., 1, 0]
    disc = np.sqrt(np.maximum(fro2**2 - 4.0 * det**2, 0.0))
    return np.sqrt(0.5 * (fro2 + disc))


def macro_strain_data(u: fem.Field):
    """∇u and e(u) at the macro Gauss points, each (E, q, 2, 2)."""
    _, G = u.at_quadrature()
    return G, 0.5 * (G + np.swapaxes(G, -1, -2))


def perturbation(G: np.ndarray, e: np.ndarray, chi_grads: np.ndarray) -> np.ndarray:
    """``∇u + Σ e_ij ∇_y χ_ij`` for macro points (P, 2, 2) × cell points (3, C, 2, 2) -> (P, C, 2, 2)."""
    coef = np.stack([e[:, 0, 0], 2.0 * e[:, 0, 1], e[:, 1, 1]], axis=1)  # (P, 3)
    n = chi_grads.shape[1]
    return G[:, None] + (coef @ chi_grads.reshape(3, -1)).reshape(len(coef), n, 2, 2)


def validity_margin(u: fem.Field, cells: CellSolutionSet, chunk: int = 256) -> float:
    """sup over macro × cell Gauss points of ``‖F₀ − I‖₂``."""
    G, e = macro_strain_data(u)
    G, e = G.reshape(-1, 2, 2), e.reshape(-1, 2, 2)
    cg = cells.quadrature_gradients().reshape(3, -1, 2, 2)
    best = 0.0
    for s in range(0, len(G), chunk):
        B = perturbation(G[s:s + chunk], e[s:s + chunk], cg)
        best = max(best, float(spectral_norm_2x2(B).max()))
    return best


def cell_problem_bundle(geom: CrossCellGeometry, n_div: int, lam: float, mu: float):
    """Convenience: mesh, tensor, cell solutions and A* in one call."""
    mesh = build_unit_cell_mesh(geom, n_div)
    A = isotropic_tensor(lam, mu)
    cells = solve_elasticity_cell_problems(A, mesh)
    return cells, compute_A_star(A, cells)
