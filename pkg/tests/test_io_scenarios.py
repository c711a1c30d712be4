import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from chmhd.assembly import CoefficientModel
from chmhd.diagnostics import TIMESERIES_COLUMNS, energy_decay_defects
from chmhd.fem import FEField, constant_field
from chmhd.io_scenarios import (PRESETS, ConfigError, OutputConfig, ScenarioConfig, VtkSnapshot,
                                apply_scenario_bcs, initial_state, kh_interface, load_config, parse_config,
                                preset, read_timeseries, run_scenario, scenario_spaces, serialize_config,
                                snapshot, splitmix64, uniform_noise, vertex_average, vtk_text, write_timeseries,
                                write_vtk)
from chmhd.mesh import build_unit_square_mesh
from chmhd.stepper import Params

MINIMAL = """
[scenario]
scenario = manufactured
n = 8
dt = 1/64
T = 1
"""


# -- configuration ---------------------------------------------------------------------

def test_minimal_config_fills_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.n == 8 and cfg.dt == 1 / 64 and cfg.n_steps == 64
    assert cfg.params.gamma == 1.0 and cfg.params.M == CoefficientModel.constant(1.0)
    assert cfg.solver.linear == "lu" and cfg.solver.tol_residual == 1e-10 and cfg.solver.max_iter == 30
    assert cfg.output == OutputConfig()


def test_full_config():
    cfg = parse_config("""
    # lid
    [scenario]
    scenario = lid_driven
    n = 16
    dt = 0.001   # trailing comment
    T = 0.01
    [params]
    gamma = 1/120
    lambda = 0.001
    nu = 0.001, 0.01
    [output]
    directory = somewhere
    every = 5
    vtk = false
    [solver]
    linear = gmres
    jacobian = fresh
    """)
    assert cfg.params.gamma == pytest.approx(1 / 120) and cfg.params.lam == 0.001
    assert cfg.params.nu == CoefficientModel.linear_in_phi(0.001, 0.01)
    assert cfg.output == OutputConfig("somewhere", 5, False)
    assert cfg.solver.newton().solver == "gmres" and cfg.solver.newton().jacobian == "fresh"


def test_non_integral_step_count_rejected():
    with pytest.raises(ConfigError) as info:
        parse_config(MINIMAL.replace("dt = 1/64", "dt = 0.3"))
    assert info.value.key in ("dt", "T")


@pytest.mark.parametrize("text, key, line", [
    (MINIMAL + "[params]\ngamma = -1\n", "gamma", 8),
    (MINIMAL + "[params]\ngamma = abc\n", "gamma", 8),
    (MINIMAL + "[params]\nkappa = 1\n", "kappa", 8),
    (MINIMAL + "n = 9\n", "n", 7),
    (MINIMAL.replace("n = 8", "n = 1"), "n", 4),
    (MINIMAL + "[output]\nevery = 0\n", "every", 8),
    (MINIMAL + "[solver]\nlinear = cholesky\n", "linear", 8),
])
def test_errors_name_key_and_line(text, key, line):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.key == key and info.value.line == line
    assert f"line {line}" in str(info.value) and key in str(info.value)


def test_missing_and_unknown_section():
    with pytest.raises(ConfigError, match="T"):
        parse_config(MINIMAL.replace("T = 1", ""))
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config(MINIMAL + "[plot]\n")


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_round_trip(name):
    cfg = preset(name)
    text = serialize_config(cfg)
    assert parse_config(text) == cfg
    assert serialize_config(parse_config(text)) == text


@given(st.integers(2, 64), st.integers(1, 1000), st.integers(1, 20),
       st.floats(1e-3, 10.0, allow_nan=False), st.integers(0, 2 ** 64 - 1))
def test_round_trip_fixed_point(n, inv_dt, steps, gamma, seed):
    dt = 1.0 / inv_dt
    cfg = ScenarioConfig(scenario="spinodal", n=n, seed=seed, params=Params(gamma=gamma, dt=dt, T=steps * dt))
    again = parse_config(serialize_config(cfg))
    assert again == cfg


def test_load_config(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text(MINIMAL)
    assert load_config(str(path)) == parse_config(MINIMAL)
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(str(tmp_path / "missing.ini"))


def test_preset_overrides():
    cfg = preset("spinodal_snapshots", n=16, dt=0.01, T=0.05)
    assert cfg.n == 16 and cfg.n_steps == 5 and cfg.params.gamma == 0.01
    with pytest.raises(KeyError):
        preset("nope")


# -- noise --------------------------------------------------------------------------------

def test_splitmix64_reference_values():
    # first outputs of SplitMix64 seeded with 0
    assert [int(v) for v in splitmix64(0, 3)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_noise_range_and_determinism():
    a = uniform_noise(42, 5000)
    assert np.array_equal(a, uniform_noise(42, 5000))
    assert not np.array_equal(a, uniform_noise(43, 5000))
    assert a.min() >= -1 and a.max() < 1
    assert abs(a.mean()) < 0.05


# -- initial data and boundary data --------------------------------------------------------

def spinodal_cfg(seed=42, n=16):
    return ScenarioConfig(scenario="spinodal", n=n, seed=seed, params=Params(dt=0.01, T=0.01))


def test_spinodal_initial_state():
    cfg = spinodal_cfg()
    s = initial_state(cfg, scenario_spaces(cfg))
    from chmhd.diagnostics import discrete_mass
    assert abs(discrete_mass(s) + 0.05) <= 0.001
    assert np.abs(s.phi + 0.05).max() <= 0.001
    assert np.array_equal(s.phi, initial_state(cfg, scenario_spaces(cfg)).phi)
    assert np.all(s.omega == 0) and np.all(s.u == 0) and np.all(s.B == 0)


def test_lid_initial_state():
    cfg = preset("lid_driven_mu2", n=120)
    s = initial_state(cfg, scenario_spaces(cfg))
    v = s.spaces.mesh.vertices
    assert np.all(s.phi[np.isclose(v[:, 1], 0.9)] > 0.999)
    assert np.all(s.phi[np.isclose(v[:, 1], 0.1)] < -0.999)
    assert np.all(s.u == 0)


def test_kh_interface_velocity_zero():
    f = kh_interface(0.01)
    x = np.linspace(0, 1, 33)
    y = 0.5 + 0.01 * np.sin(2 * np.pi * x)
    assert np.abs(f.value(x, y)).max() <= 1e-14


def test_lid_boundary_data():
    cfg = preset("lid_driven_mu2", n=4)
    spaces = scenario_spaces(cfg)
    bc = apply_scenario_bcs(cfg, spaces)
    u = spaces.u
    coords = np.concatenate([u.node_coords, u.node_coords])
    top_mid = np.flatnonzero(np.isclose(coords[:, 0], 0.5) & np.isclose(coords[:, 1], 1.0))
    vals = dict(zip(u.dirichlet, bc["u"]))
    assert vals[top_mid[0]] == pytest.approx(-1.75) and vals[top_mid[1]] == 0.0
    mesh = spaces.mesh
    edges = spaces.B.dof_edges[spaces.B.dirichlet]
    a, b = mesh.vertices[mesh.edges[edges, 0]], mesh.vertices[mesh.edges[edges, 1]]
    assert np.allclose(bc["B"], (b - a)[:, 0], atol=1e-15)


def test_kh_constrains_only_vertical_velocity():
    cfg = preset("kelvin_helmholtz", n=8)
    spaces = scenario_spaces(cfg)
    u = spaces.u
    assert np.all(u.dirichlet >= u.n_scalar)
    coords = u.node_coords[u.dirichlet - u.n_scalar]
    assert np.all(np.isclose(coords[:, 1], 0) | np.isclose(coords[:, 1], 1))
    bc = apply_scenario_bcs(cfg, spaces)
    assert np.all(bc["u"] == 0)
    assert len(spaces.u.periodic) > 0


# -- writers ----------------------------------------------------------------------------------

def parse_vtk(text):
    lines = text.splitlines()
    i = lines.index(next(s for s in lines if s.startswith("POINTS")))
    nv = int(lines[i].split()[1])
    pts = np.array([[float(v) for v in s.split()] for s in lines[i + 1:i + 1 + nv]])
    j = lines.index(next(s for s in lines if s.startswith("CELLS")))
    nc = int(lines[j].split()[1])
    cells = np.array([[int(v) for v in s.split()] for s in lines[j + 1:j + 1 + nc]])
    k = lines.index(f"CELL_TYPES {nc}")
    types = lines[k + 1:k + 1 + nc]
    return pts, cells, types


def zero_snapshot(nv):
    z = np.zeros(nv)
    return VtkSnapshot(0.0, z, z, z, np.zeros((nv, 2)), np.zeros((nv, 2)))


def test_vtk_single_square(tmp_path):
    mesh = build_unit_square_mesh(1)
    path = write_vtk(zero_snapshot(4), mesh, str(tmp_path / "a.vtk"))
    text = open(path).read()
    pts, cells, types = parse_vtk(text)
    assert len(pts) == 4 and len(cells) == 2 and types == ["5", "5"]
    assert np.all(cells[:, 0] == 3)
    assert "DATASET UNSTRUCTURED_GRID" in text
    for name in ("SCALARS phi", "SCALARS omega", "SCALARS p", "VECTORS u", "VECTORS B"):
        assert name in text


def test_vtk_coordinates_round_trip():
    mesh = build_unit_square_mesh(7)
    pts, cells, _ = parse_vtk(vtk_text(zero_snapshot(mesh.n_vertices), mesh))
    assert np.abs(pts[:, :2] - mesh.vertices).max() <= 1e-9
    assert np.all(pts[:, 2] == 0)
    assert np.array_equal(cells[:, 1:], mesh.cells)


def test_vtk_deterministic(tmp_path):
    cfg = spinodal_cfg(n=4)
    s = initial_state(cfg, scenario_spaces(cfg))
    a = write_vtk(snapshot(s), s.spaces.mesh, str(tmp_path / "a.vtk"))
    b = write_vtk(snapshot(s), s.spaces.mesh, str(tmp_path / "b.vtk"))
    assert open(a, "rb").read() == open(b, "rb").read()


def test_snapshot_validation():
    with pytest.raises(ValueError):
        VtkSnapshot(0.0, np.zeros(3), np.zeros(2), np.zeros(3), np.zeros((3, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        VtkSnapshot(0.0, np.array([0, np.nan, 0]), np.zeros(3), np.zeros(3), np.zeros((3, 2)), np.zeros((3, 2)))


def test_vertex_average_reproduces_lowest_order_fields():
    cfg = spinodal_cfg(n=6)
    spaces = scenario_spaces(cfg)
    from chmhd.fem import interpolate
    fe = interpolate(lambda x, y: np.stack([1 - 2 * y, 0.5 + 2 * x], -1), spaces.B)
    v = spaces.mesh.vertices
    assert np.abs(vertex_average(fe) - np.stack([1 - 2 * v[:, 1], 0.5 + 2 * v[:, 0]], -1)).max() <= 1e-12


def test_vertex_average_matches_direct_loop(rng):
    cfg = spinodal_cfg(n=3)
    spaces = scenario_spaces(cfg)
    fe = FEField(spaces.B, rng.standard_normal(spaces.B.n_dofs))
    mesh = spaces.mesh
    acc = np.zeros((mesh.n_vertices, 2))
    cnt = np.zeros(mesh.n_vertices)
    for c, cell in enumerate(mesh.cells):
        for j, v in enumerate(cell):
            bary = np.zeros((1, 3))
            bary[0, j] = 1.0
            acc[v] += fe.at(bary)[c, 0]
            cnt[v] += 1
    assert np.abs(vertex_average(fe) - acc / cnt[:, None]).max() <= 1e-13


def test_snapshot_constant_velocity():
    cfg = spinodal_cfg(n=4)
    s = initial_state(cfg, scenario_spaces(cfg))
    from chmhd.fem import interpolate
    from dataclasses import replace
    u = interpolate(constant_field([0.3, -0.2]), s.spaces.u).coefficients
    snap = snapshot(replace(s, u=u))
    assert np.allclose(snap.u, [0.3, -0.2], atol=1e-14)


def test_empty_timeseries(tmp_path):
    path = write_timeseries([], str(tmp_path / "ts.csv"))
    assert open(path).read() == ",".join(TIMESERIES_COLUMNS) + "\n"
    assert read_timeseries(path) == []


def test_unwritable_paths(tmp_path):
    bad = str(tmp_path / "missing" / "x.csv")
    with pytest.raises(OSError, match="x.csv"):
        write_timeseries([], bad)
    with pytest.raises(OSError, match="x.vtk"):
        write_vtk(zero_snapshot(4), build_unit_square_mesh(1), str(tmp_path / "missing" / "x.vtk"))


# -- driver ---------------------------------------------------------------------------------

def test_spinodal_run_outputs(tmp_path):
    cfg = ScenarioConfig(scenario="spinodal", n=8, seed=7, params=Params(dt=0.01, T=0.04),
                         output=OutputConfig(every=2))
    traj = run_scenario(cfg, str(tmp_path))
    files = sorted(os.listdir(tmp_path))
    assert files == ["state_000000.vtk", "state_000002.vtk", "state_000004.vtk", "timeseries.csv"]
    rows = read_timeseries(str(tmp_path / "timeseries.csv"))
    assert [r["step"] for r in rows] == [0, 2, 4]
    assert rows == [{k: r[k] for k in TIMESERIES_COLUMNS} for r in traj.rows]
    m0 = rows[0]["mass"]
    assert all(abs(r["mass"] - m0) <= 1e-10 * abs(m0) for r in rows)
    every_step = run_scenario(cfg, write=False, n_steps=4)
    full = every_step.rows
    assert len(full) == 3


def test_energy_column_non_increasing(tmp_path):
    cfg = ScenarioConfig(scenario="spinodal", n=8, seed=7, params=Params(dt=0.01, T=0.05))
    traj = run_scenario(cfg, str(tmp_path))
    E = np.array([r["E_algorithm"] for r in traj.rows])
    assert np.all(np.diff(E) <= 1e-8 * (1 + E[0]))
    assert np.all(energy_decay_defects(traj.rows, cfg.dt) <= 1e-8 * (1 + E[0]))


def test_vtk_disabled(tmp_path):
    cfg = ScenarioConfig(scenario="spinodal", n=4, params=Params(dt=0.01, T=0.02),
                         output=OutputConfig(vtk=False))
    run_scenario(cfg, str(tmp_path))
    assert os.listdir(tmp_path) == ["timeseries.csv"]
