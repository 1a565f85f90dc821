"""Declarative scenario configuration (TOML) with strict validation."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class GeometryConfig:
    w1: float = 1.0 / 3.0
    w2: float = 1.0 / 3.0
    eps_inverse: tuple = (1, 2, 4, 8, 16)
    cell_n_div: int = 12
    cell_fitted: bool = True
    macro_n_div: int = 32
    micro_n_div_per_cell: int = 12


@dataclass(frozen=True)
class MaterialConfig:
    lam: float = 1.0
    mu: float = 1.0
    d11: float = 0.5
    d12: float = 0.0
    d22: float = 0.5

    @property
    def D_hat(self) -> np.ndarray:
        return np.array([[self.d11, self.d12], [self.d12, self.d22]])


@dataclass(frozen=True)
class LoadingConfig:
    amplitude: float = 0.1
    frequency: float = 1.0
    f_e: tuple = (0.0, 0.0)
    f_d: tuple = (1.0,)
    c0: tuple = (0.0,)
    n_species: int = 1


@dataclass(frozen=True)
class TimeConfig:
    dt: float = 0.01
    T: float = 2.0
    t_eval: float = 1.5

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def time(self, n: int) -> float:
        return n * self.dt

    def index_of(self, t: float) -> int:
        return int(round(t / self.dt))


@dataclass(frozen=True)
class SolverConfig:
    granularity: str = "quadrature"
    method: str = "direct"
    rtol: float = 1e-10
    picard: bool = False
    chunk: int = 512
    threads: int = 1
    c_chi_n_div: int = 12


@dataclass(frozen=True)
class OutputConfig:
    vtk: bool = True
    snapshot_times: tuple = (1.5,)
    sensitivity_geometry_grid: int = 25
    sensitivity_lame_grid: int = 20


@dataclass(frozen=True)
class ScenarioConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    material: MaterialConfig = field(default_factory=MaterialConfig)
    loading: LoadingConfig = field(default_factory=LoadingConfig)
    time: TimeConfig = field(default_factory=TimeConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def with_overrides(self, overrides) -> "ScenarioConfig":
        data = self.to_dict()
        for item in overrides:
            key, _, raw = item.partition("=")
            section, _, name = key.strip().partition(".")
            if section not in data or name not in data[section]:
                raise ValueError(f"unknown config key {key.strip()!r}")
            data[section][name] = _parse_value(raw.strip())
        return from_dict(data)


_SECTIONS = {f.name: f.type for f in fields(ScenarioConfig)}
_CLASSES = {
    "geometry": GeometryConfig, "material": MaterialConfig, "loading": LoadingConfig,
    "time": TimeConfig, "solver": SolverConfig, "output": OutputConfig,
}


def _parse_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def _coerce(cls, name, value):
    default = getattr(cls(), name)
    if isinstance(default, tuple):
        return tuple(value) if isinstance(value, (list, tuple)) else (value,)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"{cls.__name__}.{name} expects a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ValueError(f"{cls.__name__}.{name} expects an integer")
        return value
    if isinstance(default, float):
        return float(value)
    return value


def from_dict(data: dict) -> ScenarioConfig:
    unknown = set(data) - set(_CLASSES)
    if unknown:
        raise ValueError(f"unknown config section(s): {sorted(unknown)}")
    parts = {}
    for section, cls in _CLASSES.items():
        raw = dict(data.get(section, {}))
        names = {f.name for f in fields(cls)}
        bad = set(raw) - names
        if bad:
            raise ValueError(f"unknown key(s) in [{section}]: {sorted(bad)}")
        parts[section] = cls(**{k: _coerce(cls, k, v) for k, v in raw.items()})
    return ScenarioConfig(**parts)


def load_config(path) -> ScenarioConfig:
    with open(path, "rb") as fh:
        return from_dict(tomllib.load(fh))


def validate(cfg: ScenarioConfig) -> None:
    g, m, ld, tm, s = cfg.geometry, cfg.material, cfg.loading, cfg.time, cfg.solver
    for w in (g.w1, g.w2):
        if not 0.0 < w <= 1.0:
            raise ValueError(f"bar width {w} outside (0, 1]")
    for k in g.eps_inverse:
        if int(k) != k or k < 1:
            raise ValueError(f"1/eps must be a positive integer, got {k}")
    if g.cell_n_div < 4 or g.macro_n_div < 2 or g.micro_n_div_per_cell < 2:
        raise ValueError("mesh resolutions too small")
    if m.lam <= 0 or m.mu <= 0:
        raise ValueError("Lamé parameters must be positive")
    if m.d11 <= 0 or m.d11 * m.d22 - m.d12**2 <= 0:
        raise ValueError("reference diffusion tensor must be positive definite")
    if ld.n_species < 1 or len(ld.f_d) not in (1, ld.n_species) or len(ld.c0) not in (1, ld.n_species):
        raise ValueError("f_d and c0 need one entry or one per species")
    if len(ld.f_e) != 2:
        raise ValueError("f_e must have two components")
    if tm.dt <= 0 or tm.T <= 0 or not (0 <= tm.t_eval <= tm.T):
        raise ValueError("invalid time settings")
    if abs(tm.n_steps * tm.dt - tm.T) > 1e-9 * tm.T:
        raise ValueError("T must be an integer multiple of dt")
    if s.granularity not in ("quadrature", "centroid"):
        raise ValueError(f"unknown granularity {s.granularity!r}")
    if s.method not in ("direct", "cg"):
        raise ValueError(f"unknown solver method {s.method!r}")
    if s.rtol <= 0 or s.chunk < 1 or s.threads < 1:
        raise ValueError("invalid solver settings")


def with_section(cfg: ScenarioConfig, section: str, **kw) -> ScenarioConfig:
    """Copy of ``cfg`` with some entries of one section replaced."""
    return replace(cfg, **{section: replace(getattr(cfg, section), **kw)})
