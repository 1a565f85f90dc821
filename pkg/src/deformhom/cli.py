"""Command-line entry point: ``deformhom <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .config import ScenarioConfig, load_config, with_section
from .errors import DeformhomError

SUBCOMMANDS = ("cell-elasticity", "effective", "micro", "eoc", "sensitivity", "compare-alternatives")


@dataclass
class CommandSpec:
    name: str
    config: ScenarioConfig
    out: Path
    threads: int = 1
    overrides: list = field(default_factory=list)
    force: bool = False


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deformhom", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML scenario file (defaults built in)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads for coefficient sweeps")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. time.dt=0.02")
    common.add_argument("--force", action="store_true", help="overwrite an existing summary.json")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("cell-elasticity", parents=[common], help="cell problems, A* and C_chi")
    sub.add_parser("effective", parents=[common], help="micro-macro model time loop")
    m = sub.add_parser("micro", parents=[common], help="microscopic model on the perforated domain")
    m.add_argument("--eps", required=True, help="scale parameter, e.g. 1/8 or 0.125")
    e = sub.add_parser("eoc", parents=[common], help="convergence study over eps levels")
    e.add_argument("--eps", default=None, help="comma-separated 1/eps values, e.g. 1,2,4,8")
    s = sub.add_parser("sensitivity", parents=[common], help="C_chi sweeps")
    s.add_argument("--sweep", choices=("geometry", "lame"), required=True)
    s.add_argument("--grid", type=int, default=None, help="points per axis")
    c = sub.add_parser("compare-alternatives", parents=[common], help="mass of models A, B and micro-macro")
    c.add_argument("--micro-eps", default=None, help="also include a micro run at this eps")
    return p


def _parse_eps(text: str) -> float:
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _write_csv(path: Path, rows: list) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.12e}" if isinstance(v, float) else v) for k, v in r.items()})


def _summary(spec: CommandSpec, timings: dict, **extra) -> dict:
    cfg = spec.config
    return {
        "command": spec.name,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "dt": cfg.time.dt,
        "tolerances": {"rtol": cfg.solver.rtol, "method": cfg.solver.method},
        "wall_clock": timings,
        "mesh": None,
        "max_validity_margin": None,
        **extra,
    }


def _geometry_info(cells) -> dict:
    return {"w1": cells.geometry.w1, "w2": cells.geometry.w2, "solid_area": cells.mesh.area,
            "cell_grid_lines": [len(cells.mesh.xs), len(cells.mesh.ys)],
            "cell_elements": cells.mesh.n_elements}


def _export_run(rec, out: Path, prefix: str) -> None:
    fields_dir = out / "fields"
    fields_dir.mkdir(exist_ok=True)
    from .vtk import write_vtk
    for t, snap in sorted(rec.snapshots.items()):
        pdata = {"displacement": snap.displacement.values}
        for m, c in enumerate(snap.concentration):
            pdata[f"c{m + 1}"] = c
        cdata = {}
        if snap.coefficients is not None:
            co = snap.coefficients
            cdata = {"J_star": co.J_star.mean(axis=1),
                     "D_star": co.D_star.mean(axis=1).reshape(-1, 4)}
        write_vtk(fields_dir / f"{prefix}_t{t:.4f}.vtk", rec.mesh, pdata, cdata)


def cmd_cell_elasticity(spec: CommandSpec) -> dict:
    from .driver import build_cell_problems
    from .elasticity import compute_A_star, compute_C_chi
    from .vtk import write_vtk
    t0 = time.perf_counter()
    cells = build_cell_problems(spec.config)
    A_star = compute_A_star(cells.tensor, cells)
    c_chi = compute_C_chi(cells)
    (spec.out / "fields").mkdir(exist_ok=True)
    write_vtk(spec.out / "fields" / "cell_chi.vtk", cells.mesh,
              {f"chi_{a}{b}": cells.field(a - 1, b - 1).values for a, b in ((1, 1), (1, 2), (2, 2))})
    rows = [{"i": i + 1, "j": j + 1, "k": k + 1, "l": l + 1, "A_star": float(A_star[i, j, k, l])}
            for i in range(2) for j in range(2) for k in range(2) for l in range(2)]
    _write_csv(spec.out / "A_star.csv", rows)
    return _summary(spec, {"total": time.perf_counter() - t0}, geometry=_geometry_info(cells),
                    mesh={"cell_elements": cells.mesh.n_elements}, A_star=A_star.components.tolist(), C_chi=c_chi,
                    A_star_ellipticity=A_star.ellipticity(), A_star_symmetry_defect=A_star.symmetry_defect())


def cmd_effective(spec: CommandSpec) -> dict:
    from .driver import run_effective
    rec = run_effective(spec.config)
    _write_csv(spec.out / "timeseries.csv", list(rec.timeseries_rows()))
    if spec.config.output.vtk:
        _export_run(rec, spec.out, "effective")
    return _summary(spec, rec.timings, geometry=_geometry_info(rec.cells),
                    mesh={"macro_elements": rec.mesh.n_elements, "cell_elements": rec.cells.mesh.n_elements},
                    max_validity_margin=max(rec.margin), counters=rec.counters,
                    max_balance_defect=max((b.relative_defect for s in rec.balances for b in s), default=0.0))


def cmd_micro(spec: CommandSpec, eps: float) -> dict:
    from .driver import run_micro
    rec = run_micro(spec.config, eps)
    _write_csv(spec.out / "timeseries.csv", list(rec.timeseries_rows()))
    if spec.config.output.vtk:
        _export_run(rec, spec.out, f"micro_eps{eps:.6g}")
    g = spec.config.geometry
    return _summary(spec, rec.timings, eps=eps, geometry={"w1": g.w1, "w2": g.w2},
                    mesh={"micro_elements": rec.mesh.n_elements}, max_validity_margin=max(rec.margin),
                    counters=rec.counters,
                    max_balance_defect=max((b.relative_defect for s in rec.balances for b in s), default=0.0))


def cmd_eoc(spec: CommandSpec, eps_inverse) -> dict:
    t0 = time.perf_counter()
    study = analysis.convergence_study(spec.config, eps_inverse)
    study.table.write_csv(spec.out / "eoc.csv")
    analysis.write_mean_timeseries(study, study.effective.times, spec.out / "mean_timeseries.csv")
    return _summary(spec, {"total": time.perf_counter() - t0}, eps_inverse=list(eps_inverse),
                    geometry=_geometry_info(study.effective.cells),
                    mesh={"macro_elements": study.effective.mesh.n_elements,
                          "micro_elements": {str(k): r.mesh.n_elements for k, r in study.micro.items()}},
                    max_validity_margin=max(study.effective.margin))


def cmd_sensitivity(spec: CommandSpec, sweep: str, grid: int | None) -> dict:
    t0 = time.perf_counter()
    out = spec.config.output
    if sweep == "geometry":
        n = grid or out.sensitivity_geometry_grid
        values = np.linspace(0.01, 0.99, n)
        fixed = (spec.config.material.lam, spec.config.material.mu)
    else:
        n = grid or out.sensitivity_lame_grid
        values = np.linspace(1.0, 20.0, n)
        fixed = (spec.config.geometry.w1, spec.config.geometry.w2)
    res = analysis.sensitivity_sweep(sweep, values, spec.config.solver.c_chi_n_div,
                                     spec.config.geometry.cell_fitted, fixed)
    analysis.write_sensitivity_csv(res, spec.out / f"sensitivity_{sweep}.csv")
    return _summary(spec, {"total": time.perf_counter() - t0}, sweep=sweep, grid=n,
                    geometry={"w1": spec.config.geometry.w1, "w2": spec.config.geometry.w2},
                    mesh={"cell_n_div": res["n_div"]},
                    cell_n_div=res["n_div"], fitted=res["fitted"], argmin=res["argmin"], argmax=res["argmax"])


def cmd_compare(spec: CommandSpec, micro_eps: float | None) -> dict:
    from .alternatives import compare_masses
    t0 = time.perf_counter()
    cmp = compare_masses(spec.config, micro_eps=micro_eps)
    cmp.series.write_csv(spec.out / "mass_comparison.csv")
    if spec.config.output.vtk:
        _export_run(cmp.effective, spec.out, "effective")
    return _summary(spec, {"total": time.perf_counter() - t0}, geometry=_geometry_info(cmp.effective.cells),
                    mass_weighting="|Y^s| * integral of J_B c over the reference domain for models A and B; "
                                   "integral of J* c for the micro-macro model",
                    max_validity_margin=max(cmp.effective.margin))


def dispatch(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ScenarioConfig()
        if args.override:
            cfg = cfg.with_overrides(args.override)
        if args.threads != cfg.solver.threads:
            cfg = with_section(cfg, "solver", threads=args.threads)
        spec = CommandSpec(args.command, cfg, args.out, args.threads, args.override, args.force)
        spec.out.mkdir(parents=True, exist_ok=True)
        summary_path = spec.out / "summary.json"
        if summary_path.exists() and not spec.force:
            raise FileExistsError(f"{summary_path} exists (use --force to overwrite)")
        if args.command == "cell-elasticity":
            summary = cmd_cell_elasticity(spec)
        elif args.command == "effective":
            summary = cmd_effective(spec)
        elif args.command == "micro":
            summary = cmd_micro(spec, _parse_eps(args.eps))
        elif args.command == "eoc":
            levels = [int(k) for k in args.eps.split(",")] if args.eps else list(cfg.geometry.eps_inverse)
            summary = cmd_eoc(spec, levels)
        elif args.command == "sensitivity":
            summary = cmd_sensitivity(spec, args.sweep, args.grid)
        else:
            summary = cmd_compare(spec, _parse_eps(args.micro_eps) if args.micro_eps else None)
        with open(summary_path, "w") as fh:
            json.dump(summary, fh, indent=2, default=float)
        return 0
    except DeformhomError as exc:
        print(json.dumps(exc.record()), file=sys.stderr)
        return 1
    except (ValueError, FileExistsError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
