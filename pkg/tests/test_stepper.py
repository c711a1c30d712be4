import numpy as np
import pytest

from chmhd.assembly import ParameterError, build_monolithic, build_spaces
from chmhd.diagnostics import discrete_energy, discrete_mass, energy_decay_defects
from chmhd.io_scenarios import ScenarioConfig, apply_scenario_bcs, initial_state, preset, scenario_spaces
from chmhd.manufactured import ExactSolution2D
from chmhd.mesh import build_unit_square_mesh
from chmhd.stepper import (NewtonConfig, Params, State, StepFailure, newton_solve, run, step, zero_state)


@pytest.fixture(scope="module")
def manufactured():
    cfg = preset("manufactured", n=8)
    spaces = scenario_spaces(cfg)
    return cfg, spaces, initial_state(cfg, spaces)


def manufactured_step(manufactured, cfg_newton):
    cfg, spaces, s0 = manufactured
    exact = ExactSolution2D()
    return step(s0, cfg.params, exact.forcing(cfg.dt, cfg.params), apply_scenario_bcs(cfg, spaces, cfg.dt),
                cfg_newton)


def spinodal(n=8, dt=0.01, gamma=1.0, steps=1, seed=3):
    cfg = ScenarioConfig(scenario="spinodal", n=n, seed=seed, params=Params(dt=dt, T=dt * steps, gamma=gamma))
    spaces = scenario_spaces(cfg)
    return cfg, spaces, initial_state(cfg, spaces)


# -- single steps --------------------------------------------------------------------

@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_rest_state_is_fixed_point(sign):
    spaces = build_spaces(build_unit_square_mesh(4))
    z = zero_state(spaces)
    s0 = State(t=0.0, phi=np.full_like(z.phi, sign), omega=z.omega, u=z.u, p=z.p, B=z.B, spaces=spaces)
    s1, rep = step(s0, Params(dt=0.1))
    assert np.abs(s1.phi - sign).max() <= 1e-14
    for f in ("omega", "u", "p", "B"):
        assert np.abs(getattr(s1, f)).max() <= 1e-14
    assert rep.newton_iters == 0


def test_manufactured_step_newton_iterations(manufactured):
    _, _, rep = (None,) + manufactured_step(manufactured, NewtonConfig(jacobian="fresh"))
    assert rep.newton_iters <= 5
    assert rep.final_residual <= 1e-10


def test_newton_quadratic_convergence(manufactured):
    _, rep = manufactured_step(manufactured, NewtonConfig(jacobian="fresh"))
    h = rep.residual_history
    assert rep.factorizations == rep.newton_iters
    for r0, r1 in zip(h[1:], h[2:]):
        if r0 > 1e-6:
            assert r1 <= r0 ** 2


def test_lagged_and_fresh_agree(manufactured):
    a, _ = manufactured_step(manufactured, NewtonConfig(jacobian="fresh"))
    b, rep = manufactured_step(manufactured, NewtonConfig(jacobian="lagged"))
    assert rep.factorizations <= rep.newton_iters
    assert np.abs(a.vector() - b.vector()).max() <= 1e-9


def test_gmres_matches_lu(manufactured):
    a, _ = manufactured_step(manufactured, NewtonConfig(solver="lu"))
    b, _ = manufactured_step(manufactured, NewtonConfig(solver="gmres"))
    assert np.abs(a.vector() - b.vector()).max() <= 1e-8


def test_linear_problem_needs_one_iteration():
    """With phi = 0 throughout, the cubic term and its Jacobian vanish."""
    cfg = preset("lid_driven_mu2", n=4, dt=0.01, T=0.01)
    spaces = scenario_spaces(cfg)
    s0 = zero_state(spaces)
    s1, rep = step(s0, Params(dt=0.01), None, apply_scenario_bcs("lid_driven", spaces))
    assert np.abs(s1.phi).max() == 0
    assert np.abs(s1.u).max() > 0.1
    assert rep.newton_iters == 1


def test_step_satisfies_system(manufactured):
    cfg, spaces, s0 = manufactured
    exact = ExactSolution2D()
    forcing, bc = exact.forcing(cfg.dt, cfg.params), apply_scenario_bcs(cfg, spaces, cfg.dt)
    s1, _ = step(s0, cfg.params, forcing, bc)
    system = build_monolithic(s0, cfg.params, spaces, forcing, bc)
    x = system.layout.join({f: getattr(s1, f) for f in ("phi", "omega", "u", "p", "B")})
    assert np.linalg.norm(system.residual(x)) <= 1e-10


def test_spinodal_step_energy_does_not_increase():
    _, spaces, s0 = spinodal(gamma=0.05, n=16)
    s1, _ = step(s0, Params(dt=0.01, gamma=0.05), None, apply_scenario_bcs("spinodal", spaces))
    assert discrete_energy(s1, Params(dt=0.01, gamma=0.05)).total <= discrete_energy(s0, Params(dt=0.01,
                                                                                                gamma=0.05)).total


def test_newton_failure_reports_residual(manufactured):
    cfg, spaces, s0 = manufactured
    system = build_monolithic(s0, cfg.params, spaces, ExactSolution2D().forcing(cfg.dt, cfg.params),
                              apply_scenario_bcs(cfg, spaces, cfg.dt))
    with pytest.raises(StepFailure) as info:
        newton_solve(system, s0, NewtonConfig(max_iter=1, tol_residual=1e-30, tol_increment=0.0))
    assert info.value.residual > 0


def test_newton_config_validation():
    with pytest.raises(ValueError):
        NewtonConfig(max_iter=0)
    with pytest.raises(ValueError):
        NewtonConfig(jacobian="secant")
    with pytest.raises(ValueError):
        NewtonConfig(solver="cg")


# -- params ----------------------------------------------------------------------------

@pytest.mark.parametrize("field", ["gamma", "mu", "lam", "dt", "T"])
def test_params_reject_nonpositive(field):
    with pytest.raises(ParameterError):
        Params(**{field: 0.0})


def test_params_step_count():
    assert Params(dt=1 / 64, T=1.0).n_steps == 64
    with pytest.raises(ParameterError):
        Params(dt=0.3, T=1.0).n_steps


# -- time loop ------------------------------------------------------------------------

def test_zero_steps_returns_initial():
    cfg, _, s0 = spinodal()
    traj = run(s0, cfg.params, n_steps=0)
    assert traj.state is s0
    assert len(traj.rows) == 1 and traj.reports == []


def test_spinodal_run_conserves_mass_and_energy():
    cfg, _, s0 = spinodal(steps=5)
    traj = run(s0, cfg.params)
    m0 = traj.rows[0]["mass"]
    assert all(abs(r["mass"] - m0) <= 1e-10 * abs(m0) for r in traj.rows)
    assert abs(discrete_mass(traj.state) - m0) <= 1e-10 * abs(m0)
    e0 = traj.rows[0]["E_algorithm"]
    assert np.all(energy_decay_defects(traj.rows, cfg.dt) <= 1e-8 * (1 + e0))
    assert [r["step"] for r in traj.rows] == list(range(6))
    assert traj.state.t == pytest.approx(5 * cfg.dt, abs=1e-15)


def test_output_cadence():
    cfg, _, s0 = spinodal(steps=5)
    seen = []
    traj = run(s0, cfg.params, every=2, on_output=lambda k, s: seen.append(k))
    assert seen == [0, 2, 4, 5]
    assert [r["step"] for r in traj.rows] == [0, 2, 4, 5]


def test_run_is_deterministic():
    cfg, _, s0 = spinodal(steps=3)
    a, b = run(s0, cfg.params), run(s0, cfg.params)
    assert np.array_equal(a.state.vector(), b.state.vector())
    assert a.rows == b.rows


def test_failure_carries_partial_trajectory():
    cfg, _, s0 = spinodal(steps=3)
    calls = []

    def bc(t):
        calls.append(t)
        if len(calls) == 2:
            return {"u": np.full(len(s0.spaces.u.dirichlet), np.nan),
                    "B": np.zeros(len(s0.spaces.B.dirichlet))}
        return apply_scenario_bcs("spinodal", s0.spaces)
    with pytest.raises(StepFailure) as info:
        run(s0, cfg.params, bc=bc)
    assert info.value.step == 2
    assert len(info.value.partial.rows) == 2
    assert info.value.partial.state.t == pytest.approx(cfg.dt)
