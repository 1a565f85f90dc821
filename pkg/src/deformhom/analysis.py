"""Two-scale correctors, error norms, EOC tables, means and C_χ sweeps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .elasticity import (CellSolutionSet, compute_C_chi, isotropic_tensor, solve_elasticity_cell_problems)
from .mesh import CrossCellGeometry, StructuredQuadMesh, build_unit_cell_mesh, cell_coordinates, locate_points


def restrict_macro_to_perforated(macro: fem.Field, mesh: StructuredQuadMesh) -> fem.Field:
    """Nodal interpolation of a macro FE function onto the perforated mesh."""
    vals, _ = macro.evaluate(mesh.nodes)
    return fem.Field(mesh, vals)


@dataclass
class CorrectorField:
    """First-order corrector ε·w₁ on the perforated mesh.

    ``values``/``grads`` live at the Gauss points of ``mesh`` and include the
    O(1) cell-gradient term of the gradient; ``nodal`` is the nodal
    evaluation used for export.
    """

    mesh: StructuredQuadMesh
    values: np.ndarray
    grads: np.ndarray
    nodal: fem.Field | None = None


def _cell_eval(mesh: StructuredQuadMesh, y: np.ndarray):
    """Element index, shape values and physical shape gradients at cell points."""
    elem, local = locate_points(mesh, y)
    N = fem.shape_values(local)
    G = fem.shape_gradients(local) / mesh.element_size[elem][:, None, :]
    return elem, N, G


def displacement_corrector(u: fem.Field, cells: CellSolutionSet, eps: float,
                           mesh: StructuredQuadMesh) -> CorrectorField:
    """ε u₁ = ε Σ e(u)_ij χ_ij(x/ε) and its gradient at the Gauss points of ``mesh``."""
    x = fem.quadrature(mesh).points.reshape(-1, 2)
    values, grads = _u_corrector_at(u, cells, eps, x)
    shape = fem.quadrature(mesh).weights.shape
    nodal_vals, _ = _u_corrector_at(u, cells, eps, mesh.nodes)
    return CorrectorField(mesh, values.reshape(shape + (2,)), grads.reshape(shape + (2, 2)),
                          fem.Field(mesh, nodal_vals))


def _strain_coefficients(e: np.ndarray) -> np.ndarray:
    """(P, 2, 2) strains -> (P, 3) weights of χ_11, χ_12, χ_22 (χ_21 = χ_12)."""
    return np.stack([e[:, 0, 0], 2.0 * e[:, 0, 1], e[:, 1, 1]], axis=1)


def _u_corrector_at(u: fem.Field, cells: CellSolutionSet, eps: float, x: np.ndarray):
    _, G = u.evaluate(x)
    e = 0.5 * (G + np.swapaxes(G, -1, -2))
    coef = _strain_coefficients(e)                              # (P, 3)
    # ∇_x e(u) from the continuous L2-projected gradient
    R = fem.recovered_gradient(u)                               # columns 2c + l = ∂_l u_c
    _, dR = R.evaluate(x)                                       # (P, 4, 2)
    dG = dR.reshape(-1, 2, 2, 2)                                # [p, c, l, m] = ∂_m ∂_l u_c
    de = 0.5 * (dG + dG.transpose(0, 2, 1, 3))
    dcoef = np.stack([de[:, 0, 0], 2.0 * de[:, 0, 1], de[:, 1, 1]], axis=1)  # (P, 3, 2)

    y = cell_coordinates(x, eps)
    elem, N, Gy = _cell_eval(cells.mesh, y)
    chi = cells.nodal_values()[:, cells.mesh.elements[elem]]    # (3, P, 4, 2)
    chi_val = np.einsum("pa,kpac->kpc", N, chi)                 # (3, P, 2)
    chi_grad = np.einsum("kpac,paj->kpcj", chi, Gy)             # (3, P, 2, 2)
    values = eps * np.einsum("pk,kpc->pc", coef, chi_val)
    grads = (np.einsum("pk,kpcj->pcj", coef, chi_grad)
             + eps * np.einsum("pkj,kpc->pcj", dcoef, chi_val))
    return values, grads


def concentration_corrector(c: fem.Field, eta: np.ndarray, eta_dofmap, cell_mesh: StructuredQuadMesh,
                            eps: float, mesh: StructuredQuadMesh) -> CorrectorField:
    """ε c₁ = ε Σ ∂_i c η_i(x, x/ε) with η taken from the nearest macro Gauss point.

    ``eta`` holds reduced cell solutions (E_macro, q, 2, n_free) and
    ``eta_dofmap`` is the cell dof map they refer to.
    """
    x = fem.quadrature(mesh).points.reshape(-1, 2)
    values, grads = _c_corrector_at(c, eta, eta_dofmap, cell_mesh, eps, x)
    shape = fem.quadrature(mesh).weights.shape
    nodal, _ = _c_corrector_at(c, eta, eta_dofmap, cell_mesh, eps, mesh.nodes)
    return CorrectorField(mesh, values.reshape(shape), grads.reshape(shape + (2,)), fem.Field(mesh, nodal))


def nearest_macro_gauss_point(macro_mesh: StructuredQuadMesh, x: np.ndarray):
    """(element, gauss index) of the macro Gauss point closest to each x."""
    elem, local = locate_points(macro_mesh, x)
    qx = (local[:, 0] >= 0.5).astype(int)
    qy = (local[:, 1] >= 0.5).astype(int)
    return elem, 2 * qy + qx


def _c_corrector_at(c: fem.Field, eta, dofmap, cell_mesh, eps, x):
    _, g = c.evaluate(x)                                        # (P, 2)
    R = fem.recovered_gradient(c)
    _, dR = R.evaluate(x)                                       # (P, 2, 2): [p, i, m] = ∂_m ∂_i c
    me, mq = nearest_macro_gauss_point(c.mesh, x)
    y = cell_coordinates(x, eps)
    elem, N, Gy = _cell_eval(cell_mesh, y)
    red = dofmap.reduced_index[cell_mesh.elements[elem]]       # (P, 4)
    et = eta[me, mq]                                            # (P, 2, n_free)
    loc = np.take_along_axis(et, red[:, None, :], axis=2)       # (P, 2, 4)
    eta_val = np.einsum("pa,pia->pi", N, loc)
    eta_grad = np.einsum("pia,paj->pij", loc, Gy)
    values = eps * np.einsum("pi,pi->p", g, eta_val)
    grads = np.einsum("pi,pij->pj", g, eta_grad) + eps * np.einsum("pim,pi->pm", dR, eta_val)
    return values, grads


def build_correctors(u: fem.Field, c: fem.Field, cells: CellSolutionSet, eta, eta_dofmap, eps: float,
                     mesh: StructuredQuadMesh):
    return (displacement_corrector(u, cells, eps, mesh),
            concentration_corrector(c, eta, eta_dofmap, cells.mesh, eps, mesh))


def error_norms(micro: fem.Field, macro: fem.Field, corrector: CorrectorField | None,
                mesh: StructuredQuadMesh) -> dict:
    """L2 and H1 norms of ``micro − (macro + corrector)`` over the perforated mesh.

    The macro function is evaluated exactly at the Gauss points of ``mesh``.
    """
    qd = fem.quadrature(mesh)
    mv, mg = micro.at_quadrature()
    x = qd.points.reshape(-1, 2)
    Mv, Mg = macro.evaluate(x)
    Mv = Mv.reshape(mv.shape)
    Mg = Mg.reshape(mg.shape)
    ev, eg = mv - Mv, mg - Mg
    if corrector is not None:
        ev = ev - corrector.values
        eg = eg - corrector.grads
    v2 = ev**2 if ev.ndim == 2 else np.sum(ev**2, axis=-1)
    g2 = np.sum(eg.reshape(eg.shape[:2] + (-1,)) ** 2, axis=-1)
    l2 = math.sqrt(float(np.sum(qd.weights * v2)))
    semi = math.sqrt(float(np.sum(qd.weights * g2)))
    return {"L2": l2, "H1_semi": semi, "H1": math.hypot(l2, semi)}


def eoc(errors) -> list:
    """log₂ of consecutive error ratios (one entry fewer than ``errors``)."""
    e = np.asarray(errors, dtype=float)
    return [float(np.log2(e[i - 1] / e[i])) for i in range(1, len(e))]


@dataclass
class EocTable:
    """Rows (quantity, norm, 1/ε, error, eoc); eoc is None on the first level."""

    rows: list = field(default_factory=list)

    def add(self, quantity: str, norm: str, eps_inverse, errors) -> None:
        rates = [None] + eoc(errors)
        for k, err, r in zip(eps_inverse, errors, rates):
            self.rows.append({"quantity": quantity, "norm": norm, "eps_inverse": int(k),
                              "error": float(err), "eoc": r})

    def column(self, quantity: str, norm: str, key: str = "error") -> list:
        return [r[key] for r in self.rows if r["quantity"] == quantity and r["norm"] == norm]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["quantity", "norm", "eps_inverse", "error", "eoc"])
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "error": f"{r['error']:.6e}",
                            "eoc": "" if r["eoc"] is None else f"{r['eoc']:.4f}"})


def eoc_table(errors: dict, eps_inverse) -> EocTable:
    """``errors`` maps (quantity, norm) to a list over the ε levels."""
    table = EocTable()
    for (quantity, norm), seq in errors.items():
        table.add(quantity, norm, eps_inverse, seq)
    return table


def mean_concentration(c: fem.Field, mesh: StructuredQuadMesh | None = None) -> float:
    mesh = c.mesh if mesh is None else mesh
    vals, _ = c.at_quadrature()
    return fem.integrate(vals, mesh) / mesh.area


def c_chi_value(w1: float, w2: float, lam: float, mu: float, n_div: int = 12, fitted: bool = True) -> float:
    mesh = build_unit_cell_mesh(CrossCellGeometry(w1, w2), n_div, fitted=fitted)
    cells = solve_elasticity_cell_problems(isotropic_tensor(lam, mu), mesh)
    return compute_C_chi(cells)


def sensitivity_sweep(kind: str, grid, n_div: int = 12, fitted: bool = True, fixed=None) -> dict:
    """C_χ over a (w1, w2) grid (``kind="geometry"``) or a (λ, μ) grid (``kind="lame"``).

    ``grid`` is the 1D list of values used for both axes. ``fixed`` gives the
    other pair: (λ, μ) for a geometry sweep (default (1, 1)) and (w1, w2) for
    a Lamé sweep (default (1/3, 1/3)).
    """
    vals = [float(v) for v in grid]
    rows = []
    if kind == "geometry":
        lam, mu = fixed or (1.0, 1.0)
        for w1 in vals:
            for w2 in vals:
                rows.append({"w1": w1, "w2": w2, "C_chi": c_chi_value(w1, w2, lam, mu, n_div, fitted)})
    elif kind == "lame":
        w1, w2 = fixed or (1.0 / 3.0, 1.0 / 3.0)
        mesh = build_unit_cell_mesh(CrossCellGeometry(w1, w2), n_div, fitted=fitted)
        for lam in vals:
            for mu in vals:
                cells = solve_elasticity_cell_problems(isotropic_tensor(lam, mu), mesh)
                rows.append({"lambda": lam, "mu": mu, "C_chi": compute_C_chi(cells)})
    else:
        raise ValueError(f"unknown sweep {kind!r}")
    best = min(rows, key=lambda r: r["C_chi"])
    worst = max(rows, key=lambda r: r["C_chi"])
    return {"kind": kind, "n_div": n_div, "fitted": fitted, "rows": rows, "argmin": best, "argmax": worst}


def write_sensitivity_csv(result: dict, path) -> None:
    keys = list(result["rows"][0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in result["rows"]:
            w.writerow([f"{r[k]:.10g}" for k in keys])


@dataclass
class ConvergenceStudy:
    table: EocTable
    eps_inverse: list
    effective: object
    micro: dict
    mean_series: dict


def convergence_study(cfg, eps_inverse, effective=None, micro_runs: dict | None = None) -> ConvergenceStudy:
    """Micro runs over the ε levels compared with the effective run at t_eval."""
    from .driver import run_effective, run_micro
    from .transport import DiffusionCellSolver

    eff = run_effective(cfg) if effective is None else effective
    t_eval = cfg.time.t_eval
    snap = eff.snapshot(t_eval)
    u = snap.displacement
    c = fem.Field(eff.mesh, snap.concentration[0])
    eta_map = DiffusionCellSolver(eff.cells.mesh).dofmap
    errors: dict = {}
    micro = dict(micro_runs or {})
    means = {"macro": [m[0] for m in eff.mean]}
    for k in eps_inverse:
        eps = 1.0 / k
        if k not in micro:
            micro[k] = run_micro(cfg, eps)
        run = micro[k]
        ms = run.snapshot(t_eval)
        ue, ce = ms.displacement, fem.Field(run.mesh, ms.concentration[0])
        cu, cc = build_correctors(u, c, eff.cells, snap.coefficients.eta, eta_map, eps, run.mesh)
        rows = {
            ("displacement", "L2"): error_norms(ue, u, None, run.mesh)["L2"],
            ("displacement", "H1"): error_norms(ue, u, cu, run.mesh)["H1"],
            ("displacement", "H1_nocorrector"): error_norms(ue, u, None, run.mesh)["H1"],
            ("concentration", "L2"): error_norms(ce, c, None, run.mesh)["L2"],
            ("concentration", "H1"): error_norms(ce, c, cc, run.mesh)["H1"],
            ("concentration", "H1_nocorrector"): error_norms(ce, c, None, run.mesh)["H1"],
        }
        for key, val in rows.items():
            errors.setdefault(key, []).append(val)
        means[f"eps_1/{k}"] = [m[0] for m in run.mean]
    return ConvergenceStudy(eoc_table(errors, eps_inverse), list(eps_inverse), eff, micro, means)


def write_mean_timeseries(study: ConvergenceStudy, times, path) -> None:
    labels = list(study.mean_series)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"mean_{k}" for k in labels])
        for i, t in enumerate(times):
            w.writerow([f"{t:.6f}"] + [f"{study.mean_series[k][i]:.12e}" for k in labels])
