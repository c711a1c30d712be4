"""Smooth 2D exact solution on the unit square and the source terms that make it exact.

With ``c = cos t``::

    phi = c cos^2(pi x) cos^2(pi y)
    u   = c (pi sin(2 pi y) sin^2(pi x), -pi sin(2 pi x) sin^2(pi y))
    p   = c (2x - 2)(2y - 1)
    B   = c (sin(pi x) cos(pi y), -sin(pi y) cos(pi x))

and ``omega = -gamma lap(phi) + (phi^3 - phi)/gamma``, so the chemical
potential equation needs no source.  All callables take broadcastable arrays
``x, y`` and a scalar ``t``; vector quantities carry a trailing axis of size 2.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from .fem import AnalyticField, DofMap, boundary_values

PI = np.pi


# k-th derivative of cos^2(pi s) and of sin^2(pi s)
def _X(s, k=0):
    if k == 0:
        return np.cos(PI * s) ** 2
    c = (-PI, -2 * PI ** 2, 4 * PI ** 3, 8 * PI ** 4)[k - 1]
    return c * (np.sin if k % 2 else np.cos)(2 * PI * s)


def _S(s, k=0):
    if k == 0:
        return np.sin(PI * s) ** 2
    c = (PI, 2 * PI ** 2, -4 * PI ** 3, -8 * PI ** 4)[k - 1]
    return c * (np.sin if k % 2 else np.cos)(2 * PI * s)


def _vec(a, b):
    a, b = np.broadcast_arrays(a, b)
    return np.stack([a, b], axis=-1)


def _constant(model, name):
    if model is None:
        return 1.0
    if hasattr(model, "is_constant"):
        if not model.is_constant:
            raise ValueError(f"manufactured forcing needs a constant {name}")
        return model.v1
    return float(model)


@dataclass(frozen=True)
class ExactSolution2D:
    gamma: float = 1.0

    # -- phase field --------------------------------------------------------
    def phi(self, x, y, t):
        return np.cos(t) * _X(x) * _X(y)

    def phi_t(self, x, y, t):
        return -np.sin(t) * _X(x) * _X(y)

    def grad_phi(self, x, y, t):
        c = np.cos(t)
        return _vec(c * _X(x, 1) * _X(y), c * _X(x) * _X(y, 1))

    def lap_phi(self, x, y, t):
        return np.cos(t) * (_X(x, 2) * _X(y) + _X(x) * _X(y, 2))

    def _grad_lap_phi(self, x, y, t):
        c = np.cos(t)
        return _vec(c * (_X(x, 3) * _X(y) + _X(x, 1) * _X(y, 2)),
                    c * (_X(x, 2) * _X(y, 1) + _X(x) * _X(y, 3)))

    def _bilap_phi(self, x, y, t):
        return np.cos(t) * (_X(x, 4) * _X(y) + 2 * _X(x, 2) * _X(y, 2) + _X(x) * _X(y, 4))

    def omega(self, x, y, t):
        f = self.phi(x, y, t)
        return -self.gamma * self.lap_phi(x, y, t) + (f ** 3 - f) / self.gamma

    def grad_omega(self, x, y, t):
        f = self.phi(x, y, t)[..., None]
        return -self.gamma * self._grad_lap_phi(x, y, t) + (3 * f ** 2 - 1) * self.grad_phi(x, y, t) / self.gamma

    def lap_omega(self, x, y, t):
        f = self.phi(x, y, t)
        g = self.grad_phi(x, y, t)
        lap_cubic = 3 * f ** 2 * self.lap_phi(x, y, t) + 6 * f * np.sum(g * g, axis=-1)
        return -self.gamma * self._bilap_phi(x, y, t) + (lap_cubic - self.lap_phi(x, y, t)) / self.gamma

    # -- velocity and pressure ---------------------------------------------
    def u(self, x, y, t):
        c = np.cos(t)
        return _vec(c * _S(x) * _S(y, 1), -c * _S(x, 1) * _S(y))

    def u_t(self, x, y, t):
        s = -np.sin(t)
        return _vec(s * _S(x) * _S(y, 1), -s * _S(x, 1) * _S(y))

    def grad_u(self, x, y, t):
        """Rows are components, columns are derivative directions."""
        c = np.cos(t)
        g = np.empty(np.broadcast(x, y).shape + (2, 2))
        g[..., 0, 0] = c * _S(x, 1) * _S(y, 1)
        g[..., 0, 1] = c * _S(x) * _S(y, 2)
        g[..., 1, 0] = -c * _S(x, 2) * _S(y)
        g[..., 1, 1] = -c * _S(x, 1) * _S(y, 1)
        return g

    def lap_u(self, x, y, t):
        c = np.cos(t)
        return _vec(c * (_S(x, 2) * _S(y, 1) + _S(x) * _S(y, 3)),
                    -c * (_S(x, 3) * _S(y) + _S(x, 1) * _S(y, 2)))

    def p(self, x, y, t):
        return np.cos(t) * (2 * x - 2) * (2 * y - 1)

    def grad_p(self, x, y, t):
        c = np.cos(t)
        return _vec(c * 2 * (2 * y - 1), c * 2 * (2 * x - 2))

    # -- magnetic field -----------------------------------------------------
    def B(self, x, y, t):
        c = np.cos(t)
        return _vec(c * np.sin(PI * x) * np.cos(PI * y), -c * np.sin(PI * y) * np.cos(PI * x))

    def B_t(self, x, y, t):
        s = -np.sin(t)
        return _vec(s * np.sin(PI * x) * np.cos(PI * y), -s * np.sin(PI * y) * np.cos(PI * x))

    def grad_B(self, x, y, t):
        c = np.cos(t)
        g = np.empty(np.broadcast(x, y).shape + (2, 2))
        g[..., 0, 0] = c * PI * np.cos(PI * x) * np.cos(PI * y)
        g[..., 0, 1] = -c * PI * np.sin(PI * x) * np.sin(PI * y)
        g[..., 1, 0] = c * PI * np.sin(PI * y) * np.sin(PI * x)
        g[..., 1, 1] = -c * PI * np.cos(PI * y) * np.cos(PI * x)
        return g

    def curl_B(self, x, y, t):
        return 2 * PI * np.cos(t) * np.sin(PI * x) * np.sin(PI * y)

    # -- source terms -------------------------------------------------------
    def forcing_at(self, x, y, t, params) -> Dict[str, np.ndarray]:
        """Residuals of the phase, momentum and induction equations at (x, y, t)."""
        if abs(params.gamma - self.gamma) > 0:
            raise ValueError("params.gamma differs from the exact solution's gamma")
        gamma, lam, mu = params.gamma, params.lam, params.mu
        M = _constant(params.M, "mobility")
        nu = _constant(params.nu, "viscosity")
        sigma = _constant(params.sigma, "conductivity")

        u = self.u(x, y, t)
        gphi = self.grad_phi(x, y, t)
        f_phi = self.phi_t(x, y, t) + np.sum(gphi * u, axis=-1) - gamma * M * self.lap_omega(x, y, t)

        gu = self.grad_u(x, y, t)
        conv = np.einsum("...ad,...d->...a", gu, u)
        B = self.B(x, y, t)
        J = self.curl_B(x, y, t)
        lorentz = _vec(J * B[..., 1], -J * B[..., 0]) / mu
        f_u = (self.u_t(x, y, t) + conv - nu * self.lap_u(x, y, t) + self.grad_p(x, y, t)
               + lorentz - lam * self.omega(x, y, t)[..., None] * gphi)

        # w = u x B (scalar); curl of a scalar w is (dw/dy, -dw/dx)
        gB = self.grad_B(x, y, t)
        dw = (gu[..., 0, :] * B[..., 1, None] + u[..., 0, None] * gB[..., 1, :]
              - gu[..., 1, :] * B[..., 0, None] - u[..., 1, None] * gB[..., 0, :])
        curl_w = _vec(dw[..., 1], -dw[..., 0])
        f_B = self.B_t(x, y, t) + 2 * PI ** 2 * B / (mu * sigma) - curl_w
        return {"phi": f_phi, "u": f_u, "B": f_B}

    def forcing(self, t: float, params) -> "Forcing":
        """Sources frozen at time t."""
        return Forcing(self, t, params)

    # -- analytic fields at a fixed time -------------------------------------
    def fields(self, t: float) -> Dict[str, AnalyticField]:
        return {
            "phi": AnalyticField(lambda x, y: self.phi(x, y, t), grad=lambda x, y: self.grad_phi(x, y, t)),
            "omega": AnalyticField(lambda x, y: self.omega(x, y, t), grad=lambda x, y: self.grad_omega(x, y, t)),
            "u": AnalyticField(lambda x, y: self.u(x, y, t), grad=lambda x, y: self.grad_u(x, y, t)),
            "p": AnalyticField(lambda x, y: self.p(x, y, t), grad=lambda x, y: self.grad_p(x, y, t)),
            "B": AnalyticField(lambda x, y: self.B(x, y, t), curl=lambda x, y: self.curl_B(x, y, t)),
        }

    def boundary_data_at(self, t: float, u_space: DofMap, B_space: DofMap) -> Dict[str, np.ndarray]:
        """Zero velocity trace and tangential edge integrals of B on constrained edges."""
        return {"u": np.zeros(len(u_space.dirichlet)),
                "B": boundary_values(self.fields(t)["B"], B_space)}


class Forcing:
    """Manufactured sources at a fixed time; ``evaluate`` computes all three at once."""

    def __init__(self, exact: ExactSolution2D, t: float, params):
        self.exact, self.t, self.params = exact, t, params

    def evaluate(self, x, y) -> Dict[str, np.ndarray]:
        return self.exact.forcing_at(x, y, self.t, self.params)

    def phi(self, x, y):
        return self.evaluate(x, y)["phi"]

    def u(self, x, y):
        return self.evaluate(x, y)["u"]

    def B(self, x, y):
        return self.evaluate(x, y)["B"]
