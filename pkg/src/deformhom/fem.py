"""Bilinear (Q1) finite elements on structured quadrilateral meshes.

Dofs are numbered ``node * ncomp + component``. Constraints are applied by a
prolongation ``P`` (periodic slaves merged into masters, Dirichlet dofs
dropped) plus a lift vector, and zero-mean conditions by Lagrange multipliers
appended to the reduced system.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SingularSystemError
from .mesh import StructuredQuadMesh, locate_points

_G = 0.5 / np.sqrt(3.0)


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray


# tensor-product order: x fastest, so q = 2 * iy + ix
GAUSS_2X2 = QuadratureRule(
    points=np.array([[0.5 - _G, 0.5 - _G], [0.5 + _G, 0.5 - _G],
                     [0.5 - _G, 0.5 + _G], [0.5 + _G, 0.5 + _G]]),
    weights=np.full(4, 0.25),
)


def shape_values(local: np.ndarray) -> np.ndarray:
    xi, eta = local[..., 0], local[..., 1]
    return np.stack([(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta], axis=-1)


def shape_gradients(local: np.ndarray) -> np.ndarray:
    """Reference-square gradients, shape ``(..., 4, 2)``."""
    xi, eta = local[..., 0], local[..., 1]
    dxi = np.stack([-(1 - eta), 1 - eta, eta, -eta], axis=-1)
    deta = np.stack([-(1 - xi), -xi, xi, 1 - xi], axis=-1)
    return np.stack([dxi, deta], axis=-1)


@dataclass(frozen=True)
class QuadData:
    points: np.ndarray   # (E, q, 2)
    weights: np.ndarray  # (E, q), include the element area
    values: np.ndarray   # (q, 4)
    grads: np.ndarray    # (E, q, 4, 2), physical gradients


def quadrature(mesh: StructuredQuadMesh, rule: QuadratureRule = GAUSS_2X2) -> QuadData:
    key = ("quad", id(rule))
    qd = mesh._cache.get(key)
    if qd is None:
        origin, size = mesh.element_origin, mesh.element_size
        pts = origin[:, None, :] + rule.points[None, :, :] * size[:, None, :]
        w = rule.weights[None, :] * mesh.element_area[:, None]
        vals = shape_values(rule.points)
        g_ref = shape_gradients(rule.points)
        grads = g_ref[None, :, :, :] / size[:, None, None, :]
        qd = QuadData(pts, w, vals, grads)
        mesh._cache[key] = qd
    return qd


def _coefficient_at(coeff, qd: QuadData, default):
    if coeff is None:
        return np.asarray(default, dtype=float)
    if callable(coeff):
        return np.asarray(coeff(qd.points), dtype=float)
    return np.asarray(coeff, dtype=float)


def _grad_product(qd: QuadData, wq: np.ndarray, i: int, j: int) -> np.ndarray:
    """(E, 4, 4) array of ``Σ_q wq ∂_i φ_a ∂_j φ_b``."""
    gi = qd.grads[..., i] * wq[..., None]
    return np.matmul(gi.transpose(0, 2, 1), qd.grads[..., j])


def _flux_product(qd: QuadData, s: np.ndarray) -> np.ndarray:
    """(E, 4) array of ``Σ_q w s_j ∂_j φ_a``."""
    ws = qd.weights[..., None] * s
    return (qd.grads[..., 0] * ws[..., 0:1]).sum(1) + (qd.grads[..., 1] * ws[..., 1:2]).sum(1)


def _scatter_matrix(mesh, local, ncomp):
    E = mesh.n_elements
    dofs = (mesh.elements[:, :, None] * ncomp + np.arange(ncomp)).reshape(E, -1)
    nd = dofs.shape[1]
    rows = np.broadcast_to(dofs[:, :, None], (E, nd, nd)).ravel()
    cols = np.broadcast_to(dofs[:, None, :], (E, nd, nd)).ravel()
    n = mesh.n_nodes * ncomp
    return sp.coo_matrix((local.reshape(E, nd, nd).ravel(), (rows, cols)), shape=(n, n)).tocsr()


def _scatter_vector(mesh, local, ncomp):
    E = mesh.n_elements
    dofs = (mesh.elements[:, :, None] * ncomp + np.arange(ncomp)).ravel()
    return np.bincount(dofs, weights=local.reshape(E * 4 * ncomp), minlength=mesh.n_nodes * ncomp)


def mass_matrix(mesh, coefficient=None, ncomp: int = 1):
    """Weighted mass matrix ``∫ c φ_a φ_b`` (block-diagonal for vectors)."""
    qd = quadrature(mesh)
    c = np.broadcast_to(_coefficient_at(coefficient, qd, 1.0), qd.weights.shape)
    NN = (qd.values[:, :, None] * qd.values[:, None, :]).reshape(len(qd.values), 16)
    local = ((qd.weights * c) @ NN).reshape(-1, 4, 4)
    if ncomp > 1:
        local = local[:, :, None, :, None] * np.eye(ncomp)[None, None, :, None, :]
    return _scatter_matrix(mesh, local, ncomp)


def stiffness_matrix(mesh, coefficient=None):
    """Scalar diffusion matrix ``∫ D ∇φ_b · ∇φ_a``; D scalar or 2x2 per point."""
    qd = quadrature(mesh)
    D = _coefficient_at(coefficient, qd, 1.0)
    if D.shape[-2:] != (2, 2):
        d = np.broadcast_to(D, qd.weights.shape)
        wd = qd.weights * d
        local = _grad_product(qd, wd, 0, 0) + _grad_product(qd, wd, 1, 1)
    else:
        D = np.broadcast_to(D, qd.weights.shape + (2, 2))
        local = sum(_grad_product(qd, qd.weights * D[..., i, j], i, j) for i in range(2) for j in range(2))
    return _scatter_matrix(mesh, local, 1)


def elasticity_matrix(mesh, tensor):
    """``∫ A e(φ_b) : e(φ_a)`` for a constant rank-4 tensor ``A``."""
    qd = quadrature(mesh)
    A = np.asarray(tensor, dtype=float)
    # S[e, a, b, j, n] = ∫ ∂_j φ_a ∂_n φ_b
    S = np.stack([np.stack([_grad_product(qd, qd.weights, j, n) for n in range(2)], -1) for j in range(2)], -2)
    local = np.tensordot(S, A, axes=([3, 4], [1, 3]))  # (E, a, b, k, l)
    local = local.transpose(0, 1, 3, 2, 4)
    return _scatter_matrix(mesh, local, 2)


def load_vector(mesh, values, ncomp: int = 1):
    """``∫ f φ_a`` with f given per quadrature point (or callable/constant)."""
    qd = quadrature(mesh)
    f = _coefficient_at(values, qd, 0.0)
    if ncomp == 1:
        f = np.broadcast_to(f, qd.weights.shape)
        local = (qd.weights * f) @ qd.values
    else:
        f = np.broadcast_to(f, qd.weights.shape + (ncomp,))
        local = np.stack([(qd.weights * f[..., k]) @ qd.values for k in range(ncomp)], axis=-1)
    return _scatter_vector(mesh, local, ncomp)


def flux_load_vector(mesh, flux):
    """``∫ σ : ∇φ_a``; σ has shape (E, q, 2) (scalar) or (E, q, 2, 2) (vector)."""
    qd = quadrature(mesh)
    s = np.asarray(flux, dtype=float)
    if s.shape[-2:] == (2, 2):
        s = np.broadcast_to(s, qd.weights.shape + (2, 2))
        local = np.stack([_flux_product(qd, s[..., k, :]) for k in range(2)], axis=-1)
        return _scatter_vector(mesh, local, 2)
    s = np.broadcast_to(s, qd.weights.shape + (2,))
    local = _flux_product(qd, s)
    return _scatter_vector(mesh, local, 1)


@dataclass(frozen=True)
class ConstraintSet:
    dirichlet_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    dirichlet_values: np.ndarray | None = None
    periodic: bool = False
    zero_mean: bool = False


class DofMap:
    """Node-to-dof table after periodic merging and Dirichlet elimination."""

    def __init__(self, mesh: StructuredQuadMesh, ncomp: int = 1, constraints: ConstraintSet | None = None):
        constraints = constraints or ConstraintSet()
        self.mesh = mesh
        self.ncomp = ncomp
        self.constraints = constraints
        N = mesh.n_nodes
        rep = np.arange(N)
        if constraints.periodic:
            pairs = mesh.periodic_pairs
            if len(pairs) == 0 and mesh.kind == "cell" and mesh.geometry is not None:
                raise SingularSystemError("periodic constraints requested but mesh has no pairs")
            rep[pairs[:, 1]] = pairs[:, 0]
        if constraints.zero_mean and len(constraints.dirichlet_nodes):
            raise ValueError("zero-mean constraint only combines with pure periodic problems")
        dnodes = np.asarray(constraints.dirichlet_nodes, dtype=np.int64)
        if constraints.periodic and np.any(rep[dnodes] != dnodes):
            raise ValueError("a node cannot be both Dirichlet and periodic slave")
        n_full = N * ncomp
        rep_dof = (rep[:, None] * ncomp + np.arange(ncomp)).ravel()
        is_dir = np.zeros(n_full, dtype=bool)
        dir_dofs = (dnodes[:, None] * ncomp + np.arange(ncomp)).ravel()
        is_dir[dir_dofs] = True
        free = np.unique(rep_dof[~is_dir[rep_dof]])
        index = -np.ones(n_full, dtype=np.int64)
        index[free] = np.arange(len(free))
        self.reduced_index = np.where(is_dir[rep_dof], -1, index[rep_dof])
        self.n_free = len(free)
        rows = np.nonzero(self.reduced_index >= 0)[0]
        self.P = sp.csr_matrix((np.ones(len(rows)), (rows, self.reduced_index[rows])),
                               shape=(n_full, self.n_free))
        self.lift = np.zeros(n_full)
        self.dirichlet_dofs = dir_dofs
        if len(dnodes):
            vals = constraints.dirichlet_values
            vals = np.zeros((len(dnodes), ncomp)) if vals is None else np.asarray(vals, float)
            self.lift[dir_dofs] = vals.reshape(len(dnodes), ncomp).ravel()
        self.n_multipliers = ncomp if constraints.zero_mean else 0
        self.mean_rows = None
        if constraints.zero_mean:
            w = load_vector(mesh, 1.0)
            rows = []
            for c in range(ncomp):
                v = np.zeros(n_full)
                v[c::ncomp] = w
                rows.append(self.P.T @ v)
            self.mean_rows = np.array(rows)

    @property
    def n_dofs(self) -> int:
        return self.n_free + self.n_multipliers

    def reduce(self, matrix, rhs):
        K = (self.P.T @ matrix @ self.P).tocsr()
        b = self.P.T @ (rhs - matrix @ self.lift)
        if self.n_multipliers:
            C = sp.csr_matrix(self.mean_rows)
            Z = sp.csr_matrix((self.n_multipliers, self.n_multipliers))
            K = sp.bmat([[K, C.T], [C, Z]], format="csr")
            b = np.concatenate([b, np.zeros(self.n_multipliers)])
        return K, b

    def with_dirichlet_values(self, values) -> "DofMap":
        """Copy sharing the pattern, with new Dirichlet data (cheap re-lift)."""
        new = object.__new__(DofMap)
        new.__dict__.update(self.__dict__)
        vals = np.asarray(values, dtype=float)
        lift = np.zeros_like(self.lift)
        lift[self.dirichlet_dofs] = vals.reshape(-1)
        new.lift = lift
        return new

    def expand(self, x) -> np.ndarray:
        full = self.P @ np.asarray(x)[: self.n_free] + self.lift
        return full if self.ncomp == 1 else full.reshape(-1, self.ncomp)


@dataclass
class SparseSymmetricSystem:
    matrix: sp.spmatrix
    rhs: np.ndarray
    dofmap: DofMap | None = None


def assemble(mesh, form: str, coefficient=None, dofmap: DofMap | None = None, load=None) -> SparseSymmetricSystem:
    """Assemble and constrain one of the forms used here.

    ``form`` is ``"mass"``, ``"diffusion"`` or ``"elasticity"``; ``load`` is a
    full (unconstrained) right-hand side vector.
    """
    if form == "mass":
        ncomp = dofmap.ncomp if dofmap is not None else 1
        K = mass_matrix(mesh, coefficient, ncomp)
    elif form == "diffusion":
        ncomp = 1
        K = stiffness_matrix(mesh, coefficient)
    elif form == "elasticity":
        ncomp = 2
        K = elasticity_matrix(mesh, coefficient)
    else:
        raise ValueError(f"unknown form {form!r}")
    b = np.zeros(K.shape[0]) if load is None else np.asarray(load, dtype=float).ravel()
    if dofmap is None:
        return SparseSymmetricSystem(K, b, None)
    if dofmap.ncomp != ncomp:
        raise ValueError("dofmap component count does not match the form")
    Kr, br = dofmap.reduce(K, b)
    return SparseSymmetricSystem(Kr, br, dofmap)


class LinearSolver:
    """Factorise once, solve many right-hand sides."""

    def __init__(self, matrix, method: str = "direct", rtol: float = 1e-10):
        self.matrix = sp.csc_matrix(matrix)
        self.method = method
        self.rtol = rtol
        if method == "direct":
            try:
                self._lu = spla.splu(self.matrix)
            except RuntimeError as exc:
                raise SingularSystemError(f"factorisation failed: {exc}") from exc
            d = np.abs(self._lu.U.diagonal())
            if d.size and (not np.all(np.isfinite(d)) or d.min() <= 1e-13 * d.max()):
                raise SingularSystemError("matrix is numerically singular (check constraints)")
        elif method == "cg":
            diag = self.matrix.diagonal()
            if np.any(diag <= 0):
                raise SingularSystemError("cg needs a positive diagonal (saddle-point systems need 'direct')")
            self._precond = spla.LinearOperator(self.matrix.shape, matvec=lambda v: v / diag)
        else:
            raise ValueError(f"unknown solver method {method!r}")

    def solve(self, rhs) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if self.method == "direct":
            x = self._lu.solve(rhs)
        else:
            x, info = spla.cg(self.matrix, rhs, rtol=self.rtol * 1e-2, atol=0.0,
                              M=self._precond, maxiter=20 * self.matrix.shape[0])
            if info != 0:
                raise SingularSystemError(f"conjugate gradient did not converge (info={info})")
        r = self.matrix @ x - rhs
        bn = np.linalg.norm(rhs)
        if not np.all(np.isfinite(x)) or np.linalg.norm(r) > self.rtol * max(bn, 1e-300):
            if bn == 0.0 and np.all(np.isfinite(x)) and np.linalg.norm(x) == 0.0:
                return x
            raise SingularSystemError(
                f"residual {np.linalg.norm(r):.3e} exceeds {self.rtol:.1e} x |b| = {bn:.3e}"
            )
        return x


def solve(system: SparseSymmetricSystem, method: str = "direct", rtol: float = 1e-10) -> np.ndarray:
    """Raw solution vector of the (constrained) system."""
    return LinearSolver(system.matrix, method, rtol).solve(system.rhs)


def solve_field(system: SparseSymmetricSystem, method: str = "direct", rtol: float = 1e-10) -> "Field":
    x = solve(system, method, rtol)
    return Field(system.dofmap.mesh, system.dofmap.expand(x))


@dataclass(frozen=True, eq=False)
class Field:
    """Nodal Q1 coefficients (N,) or (N, ncomp) bound to a mesh."""

    mesh: StructuredQuadMesh
    values: np.ndarray

    @property
    def ncomp(self) -> int:
        return 1 if self.values.ndim == 1 else self.values.shape[1]

    def at_quadrature(self):
        """Values (E, q[, c]) and gradients (E, q[, c], 2) at the Gauss points."""
        qd = quadrature(self.mesh)
        v = self.values[self.mesh.elements]  # (E, 4[, c])
        if self.ncomp == 1:
            vals = v @ qd.values.T
            grads = np.stack([(qd.grads[..., j] * v[:, None, :]).sum(-1) for j in range(2)], axis=-1)
        else:
            vals = np.stack([v[..., c] @ qd.values.T for c in range(v.shape[-1])], axis=-1)
            grads = np.stack([np.stack([(qd.grads[..., j] * v[:, None, :, c]).sum(-1) for j in range(2)], -1)
                              for c in range(v.shape[-1])], axis=-2)
        return vals, grads

    def evaluate(self, points, strict: bool = True):
        """Values and gradients at arbitrary points (located on the grid)."""
        elem, local = locate_points(self.mesh, points, strict=strict)
        safe = np.where(elem < 0, 0, elem)
        N = shape_values(local)
        G = shape_gradients(local) / self.mesh.element_size[safe][:, None, :]
        v = self.values[self.mesh.elements[safe]]
        if self.ncomp == 1:
            vals = np.einsum("pa,pa->p", N, v)
            grads = np.einsum("pa,paj->pj", v, G)
        else:
            vals = np.einsum("pa,pac->pc", N, v)
            grads = np.einsum("pac,paj->pcj", v, G)
        if not strict:
            bad = elem < 0
            vals[bad] = np.nan
            grads[bad] = np.nan
        return vals, grads


def integrate(callback, mesh: StructuredQuadMesh) -> float:
    """``∫ g dx`` where g is a callable of the (E, q, 2) Gauss points, an
    (E, q) array of point values, or a constant."""
    qd = quadrature(mesh)
    g = _coefficient_at(callback, qd, 0.0)
    return float(np.sum(qd.weights * np.broadcast_to(g, qd.weights.shape)))


def norms(f: Field) -> dict:
    qd = quadrature(f.mesh)
    vals, grads = f.at_quadrature()
    v2 = vals**2 if f.ncomp == 1 else np.sum(vals**2, axis=-1)
    g2 = np.sum(grads**2, axis=-1) if f.ncomp == 1 else np.sum(grads**2, axis=(-2, -1))
    l2 = float(np.sqrt(np.sum(qd.weights * v2)))
    semi = float(np.sqrt(np.sum(qd.weights * g2)))
    return {"L2": l2, "H1_semi": semi, "H1": float(np.hypot(l2, semi))}


def interpolate(mesh: StructuredQuadMesh, func) -> Field:
    """Nodal interpolant of ``func(nodes) -> (N,) or (N, c)``."""
    return Field(mesh, np.asarray(func(mesh.nodes), dtype=float))


def recovered_gradient(f: Field) -> Field:
    """Continuous nodal gradient by global L2 projection (consistent mass).

    Scalar input gives an (N, 2) field; vector input an (N, 4) field holding
    ``∂_l u_c`` at column ``2 c + l``.
    """
    mesh = f.mesh
    key = ("mass_lu",)
    lu = mesh._cache.get(key)
    if lu is None:
        lu = spla.splu(sp.csc_matrix(mass_matrix(mesh)))
        mesh._cache[key] = lu
    _, grads = f.at_quadrature()
    comps = grads.reshape(grads.shape[0], grads.shape[1], -1)
    cols = [lu.solve(load_vector(mesh, comps[..., k])) for k in range(comps.shape[-1])]
    return Field(mesh, np.column_stack(cols))
