"""Scenario definitions, configuration files and output writers.

Configuration files are INI-like::

    # comment
    [scenario]
    scenario = spinodal
    n = 32
    dt = 1/200
    T = 1
    seed = 42

    [params]
    gamma = 0.01
    M = 0.12            # constant
    nu = 0.001, 0.01    # linear in phi: value at phi = -1, value at phi = +1

    [output]
    directory = out
    every = 10

    [solver]
    linear = lu
    jacobian = lagged

Numbers may be written as fractions ``a/b``.  Unknown sections or keys,
duplicates, malformed numbers and inconsistent values raise
:class:`ConfigError` naming the key and the line.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, fields as dc_fields, replace
from fractions import Fraction
from typing import Callable, Dict, Iterable, Optional, Tuple

import numpy as np

from .assembly import CoefficientModel, ParameterError, Spaces, build_spaces
from .diagnostics import TIMESERIES_COLUMNS
from .fem import AnalyticField, FEField, boundary_values, interpolate
from .manufactured import ExactSolution2D
from .mesh import Mesh, build_periodic_map, build_unit_square_mesh
from .projections import l2_project, maxwell_quasi_project, ritz_project
from .stepper import NewtonConfig, Params, State, StepFailure, Trajectory, run

SCENARIOS = ("manufactured", "spinodal", "lid_driven", "kelvin_helmholtz")
INITIAL_B = ("maxwell", "interpolate")


class ConfigError(ValueError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key '{key}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.key = key
        self.line = line


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class OutputConfig:
    directory: str = "output"
    every: int = 1
    vtk: bool = True


@dataclass(frozen=True)
class SolverConfig:
    linear: str = "lu"
    jacobian: str = "lagged"
    tol_residual: float = 1e-10
    tol_increment: float = 1e-11
    max_iter: int = 30

    def newton(self) -> NewtonConfig:
        return NewtonConfig(tol_residual=self.tol_residual, tol_increment=self.tol_increment,
                            max_iter=self.max_iter, solver=self.linear, jacobian=self.jacobian)


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    n: int
    params: Params
    seed: int = 0
    output: OutputConfig = OutputConfig()
    solver: SolverConfig = SolverConfig()
    initial_B: str = "maxwell"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.n < 2:
            raise ValueError(f"n must be at least 2, got {self.n}")
        if self.initial_B not in INITIAL_B:
            raise ValueError(f"initial_B must be one of {INITIAL_B}")
        if self.output.every < 1:
            raise ValueError("output cadence must be at least 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.params.n_steps  # integrality of T / dt

    @property
    def dt(self) -> float:
        return self.params.dt

    @property
    def T(self) -> float:
        return self.params.T

    @property
    def n_steps(self) -> int:
        return self.params.n_steps


def _number(text: str) -> float:
    text = text.strip()
    if "/" in text:
        a, b = text.split("/", 1)
        return float(Fraction(a.strip()) / Fraction(b.strip()))
    return float(text)


def _integer(text: str) -> int:
    v = int(text.strip())
    return v


def _coefficient(text: str) -> CoefficientModel:
    parts = [p for p in text.split(",")]
    if len(parts) == 1:
        return CoefficientModel.constant(_number(parts[0]))
    if len(parts) == 2:
        return CoefficientModel.linear_in_phi(_number(parts[0]), _number(parts[1]))
    raise ValueError("expected one value or two comma-separated values")


def _boolean(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _choice(options):
    def conv(text):
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {t!r}")
        return t
    return conv


# section -> key -> converter
_GRAMMAR: Dict[str, Dict[str, Callable]] = {
    "scenario": {"scenario": _choice(SCENARIOS), "n": _integer, "dt": _number, "T": _number,
                 "seed": _integer, "initial_B": _choice(INITIAL_B)},
    "params": {"gamma": _number, "mu": _number, "lambda": _number,
               "M": _coefficient, "nu": _coefficient, "sigma": _coefficient},
    "output": {"directory": str.strip, "every": _integer, "vtk": _boolean},
    "solver": {"linear": _choice(("lu", "gmres")), "jacobian": _choice(("fresh", "lagged")),
               "tol_residual": _number, "tol_increment": _number, "max_iter": _integer},
}
_REQUIRED = (("scenario", "scenario"), ("scenario", "n"), ("scenario", "dt"), ("scenario", "T"))


def parse_config(text: str) -> ScenarioConfig:
    """Parse and validate a scenario configuration document."""
    values: Dict[Tuple[str, str], object] = {}
    lines: Dict[Tuple[str, str], int] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", line=lineno)
            section = line[1:-1].strip()
            if section not in _GRAMMAR:
                raise ConfigError(f"unknown section [{section}]", line=lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if section is None:
            raise ConfigError("key outside of any section", key=key, line=lineno)
        if key not in _GRAMMAR[section]:
            raise ConfigError(f"unknown key in [{section}]", key=key, line=lineno)
        if (section, key) in values:
            raise ConfigError(f"duplicate key (first set on line {lines[section, key]})", key=key, line=lineno)
        try:
            values[section, key] = _GRAMMAR[section][key](value)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"malformed value {value!r} ({exc})", key=key, line=lineno) from None
        lines[section, key] = lineno
    for sec, key in _REQUIRED:
        if (sec, key) not in values:
            raise ConfigError(f"missing required key in [{sec}]", key=key)

    def get(sec, key, default):
        return values.get((sec, key), default)

    def fail(key, sec, exc):
        raise ConfigError(str(exc), key=key, line=lines.get((sec, key))) from None

    d = Params()
    try:
        params = Params(gamma=get("params", "gamma", d.gamma), mu=get("params", "mu", d.mu),
                        lam=get("params", "lambda", d.lam), M=get("params", "M", d.M),
                        nu=get("params", "nu", d.nu), sigma=get("params", "sigma", d.sigma),
                        dt=values["scenario", "dt"], T=values["scenario", "T"])
        params.n_steps
    except ParameterError as exc:
        msg = str(exc)
        key = next((k for k in ("dt", "T") if "multiple" in msg), None) or msg.split()[0]
        sec = "scenario" if key in ("dt", "T") else "params"
        fail("lambda" if key == "lam" else key, sec, exc)
    try:
        output = OutputConfig(directory=get("output", "directory", OutputConfig.directory),
                              every=get("output", "every", OutputConfig.every),
                              vtk=get("output", "vtk", OutputConfig.vtk))
        if output.every < 1:
            raise ValueError("output cadence must be at least 1")
    except ValueError as exc:
        fail("every", "output", exc)
    try:
        solver = SolverConfig(**{k: get("solver", k, getattr(SolverConfig, k))
                                 for k in ("linear", "jacobian", "tol_residual", "tol_increment", "max_iter")})
        solver.newton()
    except ValueError as exc:
        fail("max_iter", "solver", exc)
    for key, check, msg in (("n", lambda v: v >= 2, "n must be at least 2"),
                            ("seed", lambda v: 0 <= v < 2 ** 64, "seed must be an unsigned 64-bit integer")):
        if ("scenario", key) in values and not check(values["scenario", key]):
            fail(key, "scenario", msg)
    return ScenarioConfig(scenario=values["scenario", "scenario"], n=values["scenario", "n"], params=params,
                          seed=get("scenario", "seed", 0), output=output, solver=solver,
                          initial_B=get("scenario", "initial_B", "maxwell"))


def _fmt(v) -> str:
    if isinstance(v, CoefficientModel):
        return str(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(cfg: ScenarioConfig) -> str:
    """Inverse of :func:`parse_config` (floats are written with full precision)."""
    p = cfg.params
    sections = {
        "scenario": [("scenario", cfg.scenario), ("n", cfg.n), ("dt", p.dt), ("T", p.T),
                     ("seed", cfg.seed), ("initial_B", cfg.initial_B)],
        "params": [("gamma", p.gamma), ("mu", p.mu), ("lambda", p.lam), ("M", p.M), ("nu", p.nu),
                   ("sigma", p.sigma)],
        "output": [(f.name, getattr(cfg.output, f.name)) for f in dc_fields(OutputConfig)],
        "solver": [(f.name, getattr(cfg.solver, f.name)) for f in dc_fields(SolverConfig)],
    }
    out = []
    for name, items in sections.items():
        out.append(f"[{name}]")
        out.extend(f"{k} = {_fmt(v)}" for k, v in items)
        out.append("")
    return "\n".join(out)


def load_config(path: str) -> ScenarioConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration file {path}: {exc.strerror}") from None
    return parse_config(text)


# ---------------------------------------------------------------------------
# presets

def _lid(mu: float) -> ScenarioConfig:
    return ScenarioConfig(
        scenario="lid_driven", n=120,
        params=Params(gamma=1 / 120, mu=mu, lam=1 / 1000, M=CoefficientModel.constant(0.12),
                      nu=CoefficientModel.linear_in_phi(1 / 1000, 1 / 100),
                      sigma=CoefficientModel.linear_in_phi(50, 150), dt=1e-3, T=9.1),
        output=OutputConfig(directory=f"lid_driven_mu{mu:g}", every=100))


PRESETS: Dict[str, Callable[[], ScenarioConfig]] = {
    "manufactured": lambda: ScenarioConfig(
        scenario="manufactured", n=8, params=Params(dt=1 / 64, T=1.0),
        output=OutputConfig(directory="manufactured", every=8)),
    "spinodal_snapshots": lambda: ScenarioConfig(
        scenario="spinodal", n=150, seed=42, params=Params(gamma=0.01, lam=1.0, dt=1e-3, T=4.0),
        output=OutputConfig(directory="spinodal_snapshots", every=50)),
    "spinodal_energy": lambda: ScenarioConfig(
        scenario="spinodal", n=120, seed=42, params=Params(gamma=0.01, lam=0.01, dt=1e-2, T=1.0),
        output=OutputConfig(directory="spinodal_energy", every=1, vtk=False)),
    "lid_driven_mu2": lambda: _lid(2.0),
    "lid_driven_mu0.6": lambda: _lid(0.6),
    "lid_driven_mu0.1": lambda: _lid(0.1),
    "kelvin_helmholtz": lambda: ScenarioConfig(
        scenario="kelvin_helmholtz", n=150,
        params=Params(gamma=0.01, mu=1.0, lam=1e-4, M=CoefficientModel.constant(0.01),
                      nu=CoefficientModel.constant(1e-3), sigma=CoefficientModel.constant(1.0),
                      dt=1e-3, T=1.6),
        output=OutputConfig(directory="kelvin_helmholtz", every=100)),
}


def preset(name: str, **overrides) -> ScenarioConfig:
    """A shipped scenario; ``overrides`` replace top-level config fields or Params fields."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    cfg = PRESETS[name]()
    pkeys = {f.name for f in dc_fields(Params)}
    p_over = {k: v for k, v in overrides.items() if k in pkeys}
    c_over = {k: v for k, v in overrides.items() if k not in pkeys}
    return replace(cfg, params=replace(cfg.params, **p_over), **c_over)


# ---------------------------------------------------------------------------
# spaces, initial data and boundary data

def scenario_spaces(cfg: ScenarioConfig, mesh: Optional[Mesh] = None) -> Spaces:
    mesh = mesh or build_unit_square_mesh(cfg.n)
    if cfg.scenario == "kelvin_helmholtz":
        # periodic in x; only u2 is prescribed on the horizontal walls
        return build_spaces(mesh, velocity_dirichlet={1: ("y0", "y1")}, B_dirichlet=("y0", "y1"),
                            periodic=build_periodic_map(mesh))
    return build_spaces(mesh)


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def splitmix64(seed: int, count: int) -> np.ndarray:
    """First ``count`` outputs of the SplitMix64 generator started at ``seed``."""
    with np.errstate(over="ignore"):
        z = np.uint64(seed) + _GOLDEN * np.arange(1, count + 1, dtype=np.uint64)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def uniform_noise(seed: int, count: int) -> np.ndarray:
    """Uniform samples in [-1, 1) from the top 53 bits of SplitMix64 outputs."""
    return 2.0 * (splitmix64(seed, count) >> np.uint64(11)).astype(float) * 2.0 ** -53 - 1.0


def _tanh_field(center: Callable, dcenter_dx: Callable, width: float) -> AnalyticField:
    """tanh((y - center(x)) / width) with its gradient."""
    def value(x, y):
        return np.tanh((y - center(x)) / width)

    def grad(x, y):
        s = 1.0 - np.tanh((y - center(x)) / width) ** 2
        return np.stack(np.broadcast_arrays(-s * dcenter_dx(x) / width, s / width), axis=-1)
    return AnalyticField(value, grad=grad)


def kh_interface(gamma: float) -> AnalyticField:
    return _tanh_field(lambda x: 0.5 + 0.01 * np.sin(2 * np.pi * x),
                       lambda x: 0.02 * np.pi * np.cos(2 * np.pi * x), np.sqrt(2.0) * gamma)


def lid_interface() -> AnalyticField:
    return _tanh_field(lambda x: 0.5 + 0.0 * x, lambda x: 0.0 * x, 0.01)


def _vector_field(fx: Callable, fy: Callable) -> AnalyticField:
    return AnalyticField(lambda x, y: np.stack(np.broadcast_arrays(fx(x, y), fy(x, y)), axis=-1))


def _constant_vector(a: float, b: float) -> AnalyticField:
    return AnalyticField(lambda x, y: np.stack(np.broadcast_arrays(a + 0.0 * x, b + 0.0 * y), axis=-1),
                         curl=lambda x, y: np.zeros(np.broadcast(x, y).shape))


def _project_B(cfg: ScenarioConfig, B0: AnalyticField, u0, spaces: Spaces) -> np.ndarray:
    if cfg.initial_B == "interpolate":
        return interpolate(B0, spaces.B).coefficients
    return maxwell_quasi_project(B0, u0, spaces.B).coefficients


def initial_state(cfg: ScenarioConfig, spaces: Spaces) -> State:
    """Discrete initial data for a scenario at t = 0."""
    nphi = spaces.phi.n_dofs
    zero_u = _constant_vector(0.0, 0.0)
    omega = np.zeros(nphi)
    p = np.zeros(spaces.p.n_dofs)
    if cfg.scenario == "manufactured":
        f0 = ExactSolution2D(cfg.params.gamma).fields(0.0)
        phi = ritz_project(f0["phi"], spaces.phi).coefficients
        omega = interpolate(f0["omega"], spaces.phi).coefficients
        u = l2_project(f0["u"], spaces.u).coefficients
        B = _project_B(cfg, f0["B"], f0["u"], spaces)
    elif cfg.scenario == "spinodal":
        phi = -0.05 + 0.001 * uniform_noise(cfg.seed, nphi)
        u = np.zeros(spaces.u.n_dofs)
        B = np.zeros(spaces.B.n_dofs)
    elif cfg.scenario == "lid_driven":
        phi = ritz_project(lid_interface(), spaces.phi).coefficients
        u = np.zeros(spaces.u.n_dofs)
        B = _project_B(cfg, _constant_vector(1.0, 0.0), zero_u, spaces)
    else:
        interface = kh_interface(cfg.params.gamma)
        phi = ritz_project(interface, spaces.phi).coefficients
        u0 = _vector_field(interface.value, lambda x, y: 0.0 * x)
        u = l2_project(u0, spaces.u).coefficients
        B = _project_B(cfg, _constant_vector(1.0, 0.0), u0, spaces)
    return State(t=0.0, phi=phi, omega=omega, u=u, p=p, B=B, spaces=spaces)


def lid_velocity() -> AnalyticField:
    """(7x(x-1), 0) on the top wall, zero on the others."""
    return _vector_field(lambda x, y: np.where(np.abs(y - 1.0) < 1e-12, 7 * x * (x - 1), 0.0),
                         lambda x, y: 0.0 * x)


def apply_scenario_bcs(scenario, spaces: Spaces, t: float = 0.0) -> Dict[str, np.ndarray]:
    """Values on the constrained velocity and field dofs at time ``t``."""
    name = scenario.scenario if isinstance(scenario, ScenarioConfig) else scenario
    if name == "manufactured":
        return ExactSolution2D().boundary_data_at(t, spaces.u, spaces.B)
    zeros_u = np.zeros(len(spaces.u.dirichlet))
    if name == "spinodal":
        return {"u": zeros_u, "B": np.zeros(len(spaces.B.dirichlet))}
    if name == "lid_driven":
        return {"u": boundary_values(lid_velocity(), spaces.u),
                "B": boundary_values(_constant_vector(1.0, 0.0), spaces.B)}
    if name == "kelvin_helmholtz":
        return {"u": zeros_u, "B": boundary_values(_constant_vector(-1.0, 0.0), spaces.B)}
    raise ValueError(f"unknown scenario {name!r}")


# ---------------------------------------------------------------------------
# writers

@dataclass(frozen=True, eq=False)
class VtkSnapshot:
    """Vertex values of all fields at one time."""

    t: float
    phi: np.ndarray
    omega: np.ndarray
    p: np.ndarray
    u: np.ndarray      # (n_vertices, 2)
    B: np.ndarray      # (n_vertices, 2)

    def __post_init__(self):
        n = len(self.phi)
        for name in ("omega", "p", "u", "B"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries, expected {n}")
        for name in ("phi", "omega", "p", "u", "B"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")


def _vertex_scalar(mesh: Mesh, local_dofs: np.ndarray, coef: np.ndarray) -> np.ndarray:
    out = np.zeros(mesh.n_vertices)
    out[mesh.cells] = coef[local_dofs]
    return out


def vertex_average(fe: FEField) -> np.ndarray:
    """Mean over incident cells of the field evaluated at each vertex."""
    mesh = fe.dofmap.mesh
    vals = fe.at(np.eye(3))                      # (nc, 3, ...) at the cell's own vertices
    vals = vals.reshape(mesh.n_cells * 3, -1)
    idx = mesh.cells.ravel()
    count = np.bincount(idx, minlength=mesh.n_vertices)
    out = np.stack([np.bincount(idx, weights=vals[:, k], minlength=mesh.n_vertices)
                    for k in range(vals.shape[1])], axis=-1)
    return out / count[:, None]


def snapshot(state: State) -> VtkSnapshot:
    sp_ = state.spaces
    mesh = sp_.mesh
    ud = sp_.u.cell_dofs
    u = np.stack([_vertex_scalar(mesh, ud[:, 0:3], state.u), _vertex_scalar(mesh, ud[:, 4:7], state.u)], axis=-1)
    return VtkSnapshot(t=state.t,
                       phi=_vertex_scalar(mesh, sp_.phi.cell_dofs, state.phi),
                       omega=_vertex_scalar(mesh, sp_.phi.cell_dofs, state.omega),
                       p=_vertex_scalar(mesh, sp_.p.cell_dofs, state.p),
                       u=u, B=vertex_average(state.field("B")))


def _g(v: float) -> str:
    return f"{v:.9g}"


def vtk_text(snap: VtkSnapshot, mesh: Mesh, title: str = "chmhd") -> str:
    nv, nc = mesh.n_vertices, mesh.n_cells
    out = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
           "FIELD FieldData 1", "TIME 1 1 double", _g(snap.t),
           f"POINTS {nv} double"]
    out += [f"{_g(x)} {_g(y)} 0" for x, y in mesh.vertices]
    out.append(f"CELLS {nc} {4 * nc}")
    out += [f"3 {a} {b} {c}" for a, b, c in mesh.cells]
    out.append(f"CELL_TYPES {nc}")
    out += ["5"] * nc
    out.append(f"POINT_DATA {nv}")
    for name in ("phi", "omega", "p"):
        out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        out += [_g(v) for v in getattr(snap, name)]
    for name in ("u", "B"):
        out.append(f"VECTORS {name} double")
        out += [f"{_g(a)} {_g(b)} 0" for a, b in getattr(snap, name)]
    return "\n".join(out) + "\n"


def write_vtk(snap: VtkSnapshot, mesh: Mesh, path: str) -> str:
    """Legacy ASCII VTK unstructured grid with the snapshot's vertex data."""
    text = vtk_text(snap, mesh)
    try:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write VTK file {path}: {exc.strerror}") from exc
    return path


def write_timeseries(rows: Iterable[dict], path: str) -> str:
    """CSV with one row per diagnostic step."""
    try:
        with open(path, "w", encoding="ascii", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TIMESERIES_COLUMNS)
            for r in rows:
                w.writerow([int(r["step"])] + [repr(float(r[c])) for c in TIMESERIES_COLUMNS[1:]])
    except OSError as exc:
        raise OSError(f"cannot write time series {path}: {exc.strerror}") from exc
    return path


def read_timeseries(path: str) -> list:
    with open(path, encoding="ascii", newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# driver

def run_scenario(cfg: ScenarioConfig, out_dir: Optional[str] = None, n_steps: Optional[int] = None,
                 write: bool = True) -> Trajectory:
    """Run a scenario; writes ``timeseries.csv`` and ``state_XXXXXX.vtk`` files to ``out_dir``."""
    out_dir = cfg.output.directory if out_dir is None else out_dir
    spaces = scenario_spaces(cfg)
    state0 = initial_state(cfg, spaces)
    params = cfg.params
    forcing = None
    if cfg.scenario == "manufactured":
        exact = ExactSolution2D(params.gamma)
        forcing = lambda t: exact.forcing(t, params)  # noqa: E731
        bc = lambda t: apply_scenario_bcs(cfg, spaces, t)  # noqa: E731
    else:
        fixed = apply_scenario_bcs(cfg, spaces)
        bc = lambda t: fixed  # noqa: E731

    def write_state(k, state):
        write_vtk(snapshot(state), spaces.mesh, os.path.join(out_dir, f"state_{k:06d}.vtk"))

    series = os.path.join(out_dir, "timeseries.csv")
    if write:
        os.makedirs(out_dir, exist_ok=True)
    on_output = write_state if write and cfg.output.vtk else None
    try:
        traj = run(state0, params, n_steps, forcing=forcing, bc=bc, every=cfg.output.every,
                   on_output=on_output, cfg=cfg.solver.newton())
    except StepFailure as exc:
        if write and exc.partial is not None:
            write_timeseries(exc.partial.rows, series)
        raise
    if write:
        write_timeseries(traj.rows, series)
    return traj
