"""Time loops for the effective (micro-macro) model and the microscopic model."""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .config import ScenarioConfig
from .elasticity import (CellSolutionSet, ElasticitySolver, compute_A_star, isotropic_tensor,
                         solve_elasticity_cell_problems, spectral_norm_2x2)
from .errors import NonpositiveJacobianError
from .mesh import (CrossCellGeometry, build_macro_mesh, build_perforated_mesh, build_unit_cell_mesh)
from .transport import (EffectiveCoefficientSolver, ReactionModel, TransportStepper,
                        micro_deformation_coefficients)

_BOUNDARY_TOL = 1e-10


def boundary_displacement(t: float, x, amplitude: float = 0.1, frequency: float = 1.0) -> np.ndarray:
    """Lateral stretching data on ∂Ω for Ω = (-0.5, 0.5)²; x has shape (n, 2) or (2,)."""
    x = np.asarray(x, dtype=float)
    pts = np.atleast_2d(x)
    on_side = np.abs(np.abs(pts[:, 0]) - 0.5) <= _BOUNDARY_TOL
    on_cap = np.abs(np.abs(pts[:, 1]) - 0.5) <= _BOUNDARY_TOL
    if not np.all(on_side | on_cap):
        raise ValueError("boundary data requested away from the boundary")
    s = 0.5 * amplitude * (1.0 - np.cos(2.0 * np.pi * frequency * t))
    out = np.zeros_like(pts)
    out[:, 0] = np.where(on_side & ~on_cap, np.sign(pts[:, 0]) * s * (1.0 - 4.0 * pts[:, 1] ** 2), 0.0)
    return out if x.ndim == 2 else out[0]


def boundary_function(cfg: ScenarioConfig):
    a, f = cfg.loading.amplitude, cfg.loading.frequency
    return lambda t, x: boundary_displacement(t, x, a, f)


def reaction_from_config(cfg: ScenarioConfig) -> ReactionModel:
    vals = np.broadcast_to(np.asarray(cfg.loading.f_d, dtype=float), (cfg.loading.n_species,))
    return ReactionModel.constant(vals)


def initial_values(cfg: ScenarioConfig) -> np.ndarray:
    return np.broadcast_to(np.asarray(cfg.loading.c0, dtype=float), (cfg.loading.n_species,)).copy()


@dataclass
class Snapshot:
    t: float
    displacement: fem.Field
    concentration: np.ndarray          # (N_c, N)
    coefficients: object = None        # EffectiveCoefficients for the effective run


@dataclass
class RunRecord:
    """Per-step history of one run."""

    kind: str
    mesh: object
    times: list = field(default_factory=list)
    mean: list = field(default_factory=list)            # per step, (N_c,)
    mass: list = field(default_factory=list)            # ∫ J c per species
    margin: list = field(default_factory=list)
    jstar_min: list = field(default_factory=list)
    jstar_max: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    balances: list = field(default_factory=list)
    displacements: list = field(default_factory=list)   # nodal (N, 2) per step
    concentrations: list = field(default_factory=list)  # nodal (N_c, N) per step
    snapshots: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)
    cells: CellSolutionSet | None = None
    error: dict | None = None

    def snapshot(self, t: float) -> Snapshot:
        key = min(self.snapshots, key=lambda s: abs(s - t))
        if abs(key - t) > 1e-9:
            raise KeyError(f"no snapshot at t={t}")
        return self.snapshots[key]

    def timeseries_rows(self):
        for k, t in enumerate(self.times):
            yield {
                "t": t,
                "mean_concentration": float(self.mean[k][0]),
                "total_mass": float(self.mass[k][0]),
                "validity_margin": self.margin[k],
                "jstar_min": self.jstar_min[k],
                "jstar_max": self.jstar_max[k],
            }


def _add_time(timings, key, t0):
    timings[key] = timings.get(key, 0.0) + (_time.perf_counter() - t0)


def build_cell_problems(cfg: ScenarioConfig) -> CellSolutionSet:
    geom = CrossCellGeometry(cfg.geometry.w1, cfg.geometry.w2)
    mesh = build_unit_cell_mesh(geom, cfg.geometry.cell_n_div, fitted=cfg.geometry.cell_fitted)
    A = isotropic_tensor(cfg.material.lam, cfg.material.mu)
    return solve_elasticity_cell_problems(A, mesh, cfg.solver.method, cfg.solver.rtol)


def _is_snapshot(cfg, n):
    times = tuple(cfg.output.snapshot_times) + (cfg.time.t_eval,)
    return any(cfg.time.index_of(s) == n for s in times)


def run_effective(cfg: ScenarioConfig, cells: CellSolutionSet | None = None, keep_history: bool = True,
                  n_steps: int | None = None) -> RunRecord:
    """Micro-macro scheme: cell elasticity once, then per step macro elasticity,
    a coefficient sweep over the macro Gauss points and one transport step."""
    timings: dict = {}
    counters = {"cell_elasticity_batches": 0, "macro_elasticity_solves": 0, "coefficient_sweeps": 0,
                "transport_steps": 0}
    t0 = _time.perf_counter()
    if cells is None:
        cells = build_cell_problems(cfg)
    counters["cell_elasticity_batches"] += 1
    A = cells.tensor
    A_star = compute_A_star(A, cells)
    solid = cells.mesh.area
    _add_time(timings, "cell_elasticity", t0)

    macro = build_macro_mesh(cfg.geometry.macro_n_div)
    elastic = ElasticitySolver(macro, A_star, solid, cfg.solver.method, cfg.solver.rtol)
    coeff_solver = EffectiveCoefficientSolver(cells, cfg.material.D_hat, cfg.solver.granularity,
                                              cfg.solver.chunk, cfg.solver.threads)
    stepper = TransportStepper(macro, cfg.solver.method, cfg.solver.rtol, cfg.solver.picard)
    reaction = reaction_from_config(cfg)
    bd = boundary_function(cfg)
    f_e = np.asarray(cfg.loading.f_e, dtype=float)

    rec = RunRecord("effective", macro, cells=cells, counters=counters, timings=timings)
    rec.info = {"A_star": A_star.components.tolist(), "solid_area": solid,
                "cell_geometry": [cells.geometry.w1, cells.geometry.w2],
                "cell_elements": cells.mesh.n_elements, "macro_elements": macro.n_elements}

    def coefficients(u, t, n):
        t1 = _time.perf_counter()
        co = coeff_solver(u, t, keep_eta=_is_snapshot(cfg, n))
        counters["coefficient_sweeps"] += 1
        _add_time(timings, "coefficients", t1)
        return co

    def record(n, u, state, co):
        t = cfg.time.time(n)
        rec.times.append(t)
        rec.mean.append(np.array([fem.integrate(v, macro) for v in stepper._at_quadrature(state.values)]) / macro.area)
        rec.mass.append(stepper.mass(state))
        rec.margin.append(co.margin)
        rec.jstar_min.append(co.diagnostics["Jstar_min"])
        rec.jstar_max.append(co.diagnostics["Jstar_max"])
        rec.diagnostics.append(co.diagnostics)
        if keep_history:
            rec.displacements.append(u.values.copy())
            rec.concentrations.append(state.values.copy())
        if _is_snapshot(cfg, n):
            rec.snapshots[t] = Snapshot(t, u, state.values.copy(), co)

    try:
        t1 = _time.perf_counter()
        u = elastic.solve(bd, 0.0, f_e)
        counters["macro_elasticity_solves"] += 1
        _add_time(timings, "macro_elasticity", t1)
        co = coefficients(u, 0.0, 0)
        state = stepper.initial_state(initial_values(cfg)[:, None], co.J_star, co.D_star,
                                      n_species=cfg.loading.n_species)
        record(0, u, state, co)
        total = cfg.time.n_steps if n_steps is None else n_steps
        for n in range(1, total + 1):
            t = cfg.time.time(n)
            t1 = _time.perf_counter()
            u = elastic.solve(bd, t, f_e)
            counters["macro_elasticity_solves"] += 1
            _add_time(timings, "macro_elasticity", t1)
            co = coefficients(u, t, n)
            t1 = _time.perf_counter()
            state = stepper.step(state, co.J_star, co.D_star, reaction, cfg.time.dt)
            state.t = t
            counters["transport_steps"] += 1
            _add_time(timings, "transport", t1)
            rec.balances.append(stepper.balances[-1])
            record(n, u, state, co)
    except NonpositiveJacobianError as exc:
        rec.error = exc.record()
        exc.partial_record = rec
        raise
    _add_time(timings, "total", t0)
    return rec


def run_micro(cfg: ScenarioConfig, eps: float, n_steps: int | None = None) -> RunRecord:
    """Microscopic Lagrangian model on the ε-perforated domain."""
    timings: dict = {}
    counters = {"micro_elasticity_solves": 0, "transport_steps": 0}
    t0 = _time.perf_counter()
    geom = CrossCellGeometry(cfg.geometry.w1, cfg.geometry.w2)
    mesh = build_perforated_mesh(eps, geom, cfg.geometry.micro_n_div_per_cell)
    A = isotropic_tensor(cfg.material.lam, cfg.material.mu)
    elastic = ElasticitySolver(mesh, A, 1.0, cfg.solver.method, cfg.solver.rtol)
    stepper = TransportStepper(mesh, cfg.solver.method, cfg.solver.rtol, cfg.solver.picard)
    reaction = reaction_from_config(cfg)
    bd = boundary_function(cfg)
    f_e = np.asarray(cfg.loading.f_e, dtype=float)
    D_hat = cfg.material.D_hat
    _add_time(timings, "setup", t0)

    rec = RunRecord("micro", mesh, counters=counters, timings=timings)
    rec.info = {"eps": eps, "micro_elements": mesh.n_elements, "area": mesh.area}

    def record(n, u, state, F, J):
        t = cfg.time.time(n)
        rec.times.append(t)
        rec.mean.append(np.array([fem.integrate(v, mesh) for v in stepper._at_quadrature(state.values)]) / mesh.area)
        rec.mass.append(stepper.mass(state))
        G = F - np.eye(2)
        rec.margin.append(float(spectral_norm_2x2(G).max()))
        rec.jstar_min.append(float(J.min()))
        rec.jstar_max.append(float(J.max()))
        if _is_snapshot(cfg, n):
            rec.snapshots[t] = Snapshot(t, u, state.values.copy())

    try:
        def solve_u(t):
            t1 = _time.perf_counter()
            u = elastic.solve(bd, t, f_e)
            counters["micro_elasticity_solves"] += 1
            _add_time(timings, "micro_elasticity", t1)
            F, J, D = micro_deformation_coefficients(u, D_hat, t)
            return u, F, J, D

        u, F, J, D = solve_u(0.0)
        state = stepper.initial_state(initial_values(cfg)[:, None], J, D, n_species=cfg.loading.n_species)
        record(0, u, state, F, J)
        total = cfg.time.n_steps if n_steps is None else n_steps
        for n in range(1, total + 1):
            t = cfg.time.time(n)
            u, F, J, D = solve_u(t)
            t1 = _time.perf_counter()
            state = stepper.step(state, J, D, reaction, cfg.time.dt)
            state.t = t
            counters["transport_steps"] += 1
            _add_time(timings, "transport", t1)
            rec.balances.append(stepper.balances[-1])
            record(n, u, state, F, J)
    except NonpositiveJacobianError as exc:
        rec.error = exc.record()
        exc.partial_record = rec
        raise
    _add_time(timings, "total", t0)
    return rec
