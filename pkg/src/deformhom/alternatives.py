"""Two simpler effective models and the current-mass comparison.

Model A keeps the classical constant effective diffusion of the undeformed
cell. Model B transforms that constant tensor with the macroscopic
deformation only. Both share the Crank-Nicolson stepper of the micro-macro
model.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .config import ScenarioConfig
from .driver import (RunRecord, boundary_function, build_cell_problems, initial_values, reaction_from_config,
                     run_effective, run_micro)
from .elasticity import CellSolutionSet, ElasticitySolver, compute_A_star
from .errors import NonpositiveJacobianError
from .mesh import build_macro_mesh
from .transport import DiffusionCellSolver, TransportStepper, pullback


@dataclass(frozen=True)
class ConstantEffectiveDiffusion:
    D_star: np.ndarray
    D_hat: np.ndarray
    solid_area: float
    geometry: tuple


def constant_effective_diffusion(cells: CellSolutionSet, D_hat) -> ConstantEffectiveDiffusion:
    """D*_A from the cell problems with D₀ = D̂ (no deformation)."""
    D_hat = np.asarray(D_hat, dtype=float)
    solver = DiffusionCellSolver(cells.mesh)
    # same pulled-back coefficient as the micro-macro sweep at F = I
    _, D = pullback(np.broadcast_to(np.eye(2), (1, solver.n_points, 2, 2)).copy(), D_hat)
    _, Ds = solver.solve(D)
    return ConstantEffectiveDiffusion(Ds[0], D_hat, cells.mesh.area, (cells.geometry.w1, cells.geometry.w2))


@dataclass
class MassTimeSeries:
    times: list
    masses: dict = field(default_factory=dict)

    def add(self, label: str, values) -> None:
        values = [float(v) for v in values]
        if len(values) != len(self.times):
            raise ValueError("mass series must share the time grid")
        self.masses[label] = values

    def write_csv(self, path) -> None:
        labels = list(self.masses)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"mass_{k}" for k in labels])
            for i, t in enumerate(self.times):
                w.writerow([f"{t:.6f}"] + [f"{self.masses[k][i]:.12e}" for k in labels])


@dataclass
class Trajectory:
    times: list
    concentrations: list       # (N_c, N) per step
    mass: list
    balances: list


def _displacement_gradients(macro, cfg: ScenarioConfig, cells: CellSolutionSet, displacements=None):
    """Yield ∇u at the macro Gauss points for every time level."""
    if displacements is not None:
        for vals in displacements:
            yield fem.Field(macro, vals).at_quadrature()[1]
        return
    A_star = compute_A_star(cells.tensor, cells)
    elastic = ElasticitySolver(macro, A_star, cells.mesh.area, cfg.solver.method, cfg.solver.rtol)
    bd = boundary_function(cfg)
    f_e = np.asarray(cfg.loading.f_e, dtype=float)
    for n in range(cfg.time.n_steps + 1):
        yield elastic.solve(bd, cfg.time.time(n), f_e).at_quadrature()[1]


def _jacobian(G, t):
    F = np.eye(2) + G
    J = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    if np.any(J <= 0):
        raise NonpositiveJacobianError(J.min(), t=t)
    return F, J


def _run_model(cfg, cells, displacements, D_A, deform: bool) -> Trajectory:
    macro = build_macro_mesh(cfg.geometry.macro_n_div)
    stepper = TransportStepper(macro, cfg.solver.method, cfg.solver.rtol, cfg.solver.picard)
    reaction = reaction_from_config(cfg)
    solid = cells.mesh.area
    shape = fem.quadrature(macro).weights.shape
    J_A = np.full(shape, solid)
    D_const = np.broadcast_to(D_A.D_star, shape + (2, 2)).copy()
    traj = Trajectory([], [], [], [])
    state = None
    for n, G in enumerate(_displacement_gradients(macro, cfg, cells, displacements)):
        t = cfg.time.time(n)
        F, J_B = _jacobian(G, t)
        if deform:
            J, D = solid * J_B, pullback(F, D_A.D_star)[1]
        else:
            J, D = J_A, D_const
        if state is None:
            state = stepper.initial_state(initial_values(cfg)[:, None], J, D, n_species=cfg.loading.n_species)
        else:
            state = stepper.step(state, J, D, reaction, cfg.time.dt, constant=not deform)
            state.t = t
            traj.balances.append(stepper.balances[-1])
        traj.times.append(t)
        traj.concentrations.append(state.values.copy())
        # current mass on the deformed domain: |Y^s| ∫ J_B c
        traj.mass.append(stepper.mass(state, weight=solid * J_B))
    return traj


def solve_model_A(cfg: ScenarioConfig, cells: CellSolutionSet | None = None, displacements=None,
                  D_A: ConstantEffectiveDiffusion | None = None) -> tuple[Trajectory, MassTimeSeries]:
    """|Y^s| ∂_t c − ∇·(D*_A ∇c) = |Y^s| f_d; mass weighted by the macro Jacobian."""
    cells = build_cell_problems(cfg) if cells is None else cells
    D_A = constant_effective_diffusion(cells, cfg.material.D_hat) if D_A is None else D_A
    traj = _run_model(cfg, cells, displacements, D_A, deform=False)
    series = MassTimeSeries(traj.times)
    series.add("A", [m[0] for m in traj.mass])
    return traj, series


def solve_model_B(cfg: ScenarioConfig, cells: CellSolutionSet | None = None, displacements=None,
                  D_A: ConstantEffectiveDiffusion | None = None) -> tuple[Trajectory, MassTimeSeries]:
    """|Y^s| ∂_t(J_B c) − ∇·(D*_B ∇c) = |Y^s| J_B f_d with D*_B = J_B F_B⁻¹ D*_A F_B⁻ᵀ."""
    cells = build_cell_problems(cfg) if cells is None else cells
    D_A = constant_effective_diffusion(cells, cfg.material.D_hat) if D_A is None else D_A
    traj = _run_model(cfg, cells, displacements, D_A, deform=True)
    series = MassTimeSeries(traj.times)
    series.add("B", [m[0] for m in traj.mass])
    return traj, series


@dataclass
class MassComparison:
    series: MassTimeSeries
    effective: RunRecord
    model_A: Trajectory
    model_B: Trajectory
    micro: RunRecord | None = None


def compare_masses(cfg: ScenarioConfig, effective: RunRecord | None = None,
                   micro_eps: float | None = None) -> MassComparison:
    """Mass curves of the micro-macro model and models A and B on one time grid."""
    eff = run_effective(cfg) if effective is None else effective
    cells = eff.cells
    D_A = constant_effective_diffusion(cells, cfg.material.D_hat)
    disp = eff.displacements if eff.displacements else None
    traj_A, _ = solve_model_A(cfg, cells, disp, D_A)
    traj_B, _ = solve_model_B(cfg, cells, disp, D_A)
    series = MassTimeSeries(list(eff.times))
    series.add("micromacro", [m[0] for m in eff.mass])
    series.add("A", [m[0] for m in traj_A.mass])
    series.add("B", [m[0] for m in traj_B.mass])
    micro = None
    if micro_eps is not None:
        micro = run_micro(cfg, micro_eps)
        series.add("micro", [m[0] for m in micro.mass])
    return MassComparison(series, eff, traj_A, traj_B, micro)


def dominant_frequency(times, signal, t_min: float = 1.0) -> float:
    """Frequency of the largest non-constant DFT component of the linearly
    detrended signal restricted to ``t ≥ t_min`` (last sample dropped so the
    window spans whole periods)."""
    t = np.asarray(times, dtype=float)
    s = np.asarray(signal, dtype=float)
    keep = t >= t_min - 1e-12
    t, s = t[keep][:-1], s[keep][:-1]
    s = s - np.polyval(np.polyfit(t, s, 1), t)
    spec = np.abs(np.fft.rfft(s))
    freqs = np.fft.rfftfreq(len(s), d=t[1] - t[0])
    k = 1 + int(np.argmax(spec[1:]))
    return float(freqs[k])
