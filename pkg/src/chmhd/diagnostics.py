"""Mass, energy, error norms and convergence-rate tables."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .fem import error_norm
from .quadrature import quadrature_rule

NORM_QUAD_DEGREE = 8
# exact for every diagnostic integrand (|u|^2 with cubic bubbles is the highest)
DIAGNOSTIC_QUAD_DEGREE = 6
NORMS = ("phi_L2", "phi_H1", "u_L2", "u_H1", "B_L2", "B_Hcurl", "p_L2")
TIMESERIES_COLUMNS = ("step", "t", "mass", "E_system", "E_algorithm",
                      "grad_omega_sq", "grad_u_sq", "curl_B_sq")


@dataclass(frozen=True)
class EnergyBreakdown:
    interface: float
    potential: float
    kinetic: float
    magnetic: float

    @property
    def total(self) -> float:
        return self.interface + self.potential + self.kinetic + self.magnetic


def _integral(field, what: str, degree: int = DIAGNOSTIC_QUAD_DEGREE, fn=None) -> float:
    """Integral of fn(field evaluated as ``what``) over the mesh (default: squared magnitude)."""
    q = quadrature_rule(degree)
    vals = field.at(q.points, what)
    det = field.dofmap.mesh.jacobians()[1]
    if fn is None:
        vals = vals.reshape(vals.shape[0], vals.shape[1], -1)
        vals = np.sum(vals * vals, axis=-1)
    else:
        vals = fn(vals)
    return float(np.einsum("q,c,cq->", q.weights, det, vals))


def discrete_mass(state) -> float:
    """Integral of the discrete phase field."""
    return _integral(state.field("phi"), "value", 2, fn=lambda v: v)


def discrete_energy(state, params=None) -> EnergyBreakdown:
    """Interface, double-well, kinetic and magnetic energy.

    With ``params`` None all constants are 1.
    """
    lam, gamma, mu = (1.0, 1.0, 1.0) if params is None else (params.lam, params.gamma, params.mu)
    phi = state.field("phi")
    return EnergyBreakdown(
        interface=0.5 * lam * gamma * _integral(phi, "grad"),
        potential=lam / (4 * gamma) * _integral(phi, "value", fn=lambda v: (v * v - 1.0) ** 2),
        kinetic=0.5 * _integral(state.field("u"), "value"),
        magnetic=0.5 / mu * _integral(state.field("B"), "value"),
    )


def dissipation_terms(state) -> Dict[str, float]:
    """Squared norms of grad omega, grad u and curl B at one time level."""
    return {"grad_omega_sq": _integral(state.field("omega"), "grad"),
            "grad_u_sq": _integral(state.field("u"), "grad"),
            "curl_B_sq": _integral(state.field("B"), "curl")}


def timeseries_row(step: int, state, previous=None, params=None) -> dict:
    row = {"step": step, "t": state.t, "mass": discrete_mass(state),
           "E_system": discrete_energy(state, params).total,
           "E_algorithm": discrete_energy(state).total}
    row.update(dissipation_terms(state))
    return row


def energy_decay_defects(rows: Sequence[dict], dt: float) -> np.ndarray:
    """E^{k+1} - E^k + dt (|grad omega|^2 + |grad u|^2 + |curl B|^2)^{k+1} for consecutive rows."""
    E = np.array([r["E_algorithm"] for r in rows])
    diss = np.array([r["grad_omega_sq"] + r["grad_u_sq"] + r["curl_B_sq"] for r in rows])
    return E[1:] - E[:-1] + dt * diss[1:]


def terminal_errors(state, exact) -> Dict[str, float]:
    """Seven error norms of ``state`` against a dict of exact fields (AnalyticField or FEField)."""
    d = NORM_QUAD_DEGREE
    return {
        "phi_L2": error_norm(state.field("phi"), exact["phi"], "L2", d),
        "phi_H1": error_norm(state.field("phi"), exact["phi"], "H1_semi", d),
        "u_L2": error_norm(state.field("u"), exact["u"], "L2", d),
        "u_H1": error_norm(state.field("u"), exact["u"], "H1_semi", d),
        "B_L2": error_norm(state.field("B"), exact["B"], "L2", d),
        "B_Hcurl": error_norm(state.field("B"), exact["B"], "Hcurl", d),
        "p_L2": error_norm(state.field("p"), exact["p"], "L2", d),
    }


@dataclass
class RateTable:
    h: List[float]
    errors: List[Dict[str, float]]
    rates: List[Optional[Dict[str, float]]]
    norms: Tuple[str, ...] = NORMS

    def finest_rates(self) -> Dict[str, float]:
        if len(self.h) < 2:
            return {}
        return self.rates[-1]

    def rows(self):
        for h, e, r in zip(self.h, self.errors, self.rates):
            yield h, e, r

    def to_csv(self) -> str:
        head = ["h"] + [c for k in self.norms for c in (k, f"{k}_rate")]
        lines = [",".join(head)]
        for h, e, r in self.rows():
            cells = [f"{h:.10g}"]
            for k in self.norms:
                cells.append(f"{e[k]:.6e}")
                cells.append("" if r is None else f"{r[k]:.4f}")
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def rate_table(runs: Sequence[Tuple[float, Dict[str, float]]], norms: Sequence[str] = NORMS) -> RateTable:
    """Observed orders log2(e_{i-1}/e_i) between consecutive levels with h halving."""
    hs = [float(h) for h, _ in runs]
    for a, b in zip(hs, hs[1:]):
        if not np.isclose(a / b, 2.0, rtol=1e-9, atol=0):
            raise ValueError(f"mesh sizes must halve between levels, got {a} then {b}")
    errs = [dict(e) for _, e in runs]
    rates: List[Optional[Dict[str, float]]] = [None]
    for e0, e1 in zip(errs, errs[1:]):
        rates.append({k: float(np.log2(e0[k] / e1[k])) for k in norms})
    return RateTable(hs, errs, rates, tuple(norms))
