import numpy as np
import pytest
from hypothesis import given, strategies as st

from chmhd.assembly import build_spaces
from chmhd.diagnostics import (NORMS, discrete_energy, discrete_mass, energy_decay_defects, rate_table,
                               terminal_errors, timeseries_row)
from chmhd.fem import constant_field, interpolate
from chmhd.manufactured import ExactSolution2D
from chmhd.mesh import build_unit_square_mesh
from chmhd.stepper import Params, State, zero_state


@pytest.fixture(scope="module")
def spaces():
    return build_spaces(build_unit_square_mesh(8))


def with_fields(spaces, **kw):
    z = zero_state(spaces)
    d = {f: getattr(z, f) for f in ("phi", "omega", "u", "p", "B")}
    d.update(kw)
    return State(t=kw.pop("t", 0.0), spaces=spaces, **d)


# -- mass -----------------------------------------------------------------------------

def test_mass_of_constant(spaces):
    assert discrete_mass(with_fields(spaces, phi=np.ones(spaces.phi.n_dofs))) == pytest.approx(1.0, abs=1e-14)


def test_mass_of_x(spaces):
    phi = spaces.phi.node_coords[:, 0].copy()
    assert discrete_mass(with_fields(spaces, phi=phi)) == pytest.approx(0.5, abs=1e-14)


def test_mass_of_antisymmetric(spaces):
    x = spaces.phi.node_coords[:, 0]
    phi = np.sin(2 * np.pi * x) + (x - 0.5) ** 3
    assert abs(discrete_mass(with_fields(spaces, phi=phi))) <= 1e-14


# -- energy ---------------------------------------------------------------------------

def test_energy_pure_phase(spaces):
    e = discrete_energy(with_fields(spaces, phi=np.ones(spaces.phi.n_dofs)))
    assert e.total == pytest.approx(0.0, abs=1e-14)


def test_energy_zero_phase(spaces):
    e = discrete_energy(with_fields(spaces))
    assert e.potential == pytest.approx(0.25, abs=1e-14)
    assert e.total == pytest.approx(0.25, abs=1e-14)


def test_energy_magnetic(spaces):
    B = interpolate(constant_field([1.0, 0.0]), spaces.B).coefficients
    e = discrete_energy(with_fields(spaces, phi=np.ones(spaces.phi.n_dofs), B=B), Params(mu=2.0))
    assert e.magnetic == pytest.approx(0.25, abs=1e-12)


def test_energy_scaling(spaces, rng):
    phi = rng.uniform(-1, 1, spaces.phi.n_dofs)
    s = with_fields(spaces, phi=phi)
    unit = discrete_energy(s)
    scaled = discrete_energy(s, Params(lam=3.0, gamma=0.5))
    assert scaled.interface == pytest.approx(1.5 * unit.interface, rel=1e-13)
    assert scaled.potential == pytest.approx(6.0 * unit.potential, rel=1e-13)
    parts = [scaled.interface, scaled.potential, scaled.kinetic, scaled.magnetic]
    assert scaled.total == pytest.approx(sum(parts), rel=1e-14)


def test_timeseries_row_and_defects(spaces):
    s = with_fields(spaces, phi=np.ones(spaces.phi.n_dofs))
    row = timeseries_row(3, s)
    assert row["step"] == 3 and row["mass"] == pytest.approx(1.0)
    assert energy_decay_defects([row, row], 0.1) == pytest.approx([0.0], abs=1e-14)


# -- error norms -------------------------------------------------------------------------

def test_terminal_errors_self_comparison(spaces, rng):
    s = with_fields(spaces, phi=rng.standard_normal(spaces.phi.n_dofs), u=rng.standard_normal(spaces.u.n_dofs),
                    p=rng.standard_normal(spaces.p.n_dofs), B=rng.standard_normal(spaces.B.n_dofs))
    exact = {f: s.field(f) for f in ("phi", "u", "p", "B")}
    errs = terminal_errors(s, exact)
    assert set(errs) == set(NORMS)
    assert max(errs.values()) <= 1e-12


def test_terminal_errors_zero_state(spaces):
    errs = terminal_errors(with_fields(spaces), ExactSolution2D().fields(1.0))
    assert errs["phi_L2"] == pytest.approx(np.cos(1.0) * 3 / 8, rel=1e-8)


# -- rate tables --------------------------------------------------------------------------

def table(e1, e2, key="u_H1"):
    return rate_table([(0.125, {key: e1}), (0.0625, {key: e2})], norms=(key,))


def test_rates():
    assert table(4.0, 1.0).finest_rates()["u_H1"] == pytest.approx(2.0)
    assert round(table(3.02e-1, 1.52e-1).finest_rates()["u_H1"], 2) == 0.99
    assert round(table(1.30e-1, 3.44e-2).finest_rates()["u_H1"], 2) == 1.92


def test_first_row_has_no_rate():
    t = table(1.0, 0.5)
    assert t.rates[0] is None
    assert t.to_csv().splitlines()[1].endswith(",")
    assert rate_table([(0.5, {"u_H1": 1.0})], norms=("u_H1",)).finest_rates() == {}


def test_non_halving_rejected():
    with pytest.raises(ValueError):
        rate_table([(0.125, {"x": 1.0}), (0.1, {"x": 0.5})], norms=("x",))


@given(st.floats(1e-6, 1e3), st.floats(1e-6, 1e3), st.floats(1e-3, 1e3))
def test_rates_scale_invariant(e1, e2, c):
    a = table(e1, e2).finest_rates()["u_H1"]
    b = table(c * e1, c * e2).finest_rates()["u_H1"]
    assert a == pytest.approx(b, abs=1e-9)
