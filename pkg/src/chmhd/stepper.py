"""Time stepping: one convex-splitting step solved by Newton on the monolithic system.

Only the cubic term of the chemical potential equation is nonlinear in the new
unknowns, so each Newton iteration reuses the linear block values and adds the
cubic Jacobian on its own sub-block before refactorizing.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .assembly import CoefficientModel, FIELDS, ParameterError, Spaces, build_monolithic
from .fem import FEField
from .linalg import FactorizationError, gmres_solve, lu_factor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Params:
    gamma: float = 1.0
    mu: float = 1.0
    lam: float = 1.0
    M: CoefficientModel = CoefficientModel.constant(1.0)
    nu: CoefficientModel = CoefficientModel.constant(1.0)
    sigma: CoefficientModel = CoefficientModel.constant(1.0)
    dt: float = 1e-2
    T: float = 1.0

    def __post_init__(self):
        for name in ("gamma", "mu", "lam", "dt", "T"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("M", "nu", "sigma"):
            m = getattr(self, name)
            if min(m.v1, m.v2) <= 0:
                raise ParameterError(f"{name} must be positive on [-1, 1], got {m}")

    @property
    def n_steps(self) -> int:
        n = int(round(self.T / self.dt))
        if abs(n * self.dt - self.T) > 1e-12:
            raise ParameterError(f"T = {self.T} is not an integer multiple of dt = {self.dt}")
        return n


@dataclass(frozen=True)
class NewtonConfig:
    tol_residual: float = 1e-10
    tol_increment: float = 1e-11
    max_iter: int = 30
    solver: str = "lu"
    jacobian: str = "fresh"
    refresh_ratio: float = 0.1

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.jacobian not in ("fresh", "lagged"):
            raise ValueError(f"unknown Jacobian policy {self.jacobian!r}")
        if self.solver not in ("lu", "gmres"):
            raise ValueError(f"unknown linear solver {self.solver!r}")


@dataclass(frozen=True)
class StepReport:
    newton_iters: int
    final_residual: float
    linear_solves: int
    residual_history: tuple = ()
    factorizations: int = 0


class StepFailure(RuntimeError):
    def __init__(self, message: str, residual: float = np.nan, step: Optional[int] = None,
                 partial=None):
        super().__init__(message)
        self.residual = residual
        self.step = step
        self.partial = partial


@dataclass(frozen=True, eq=False)
class State:
    t: float
    phi: np.ndarray
    omega: np.ndarray
    u: np.ndarray
    p: np.ndarray
    B: np.ndarray
    spaces: Spaces = field(repr=False, default=None)

    def field(self, name: str) -> FEField:
        return FEField(self.spaces.space(name), getattr(self, name))

    def vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, f) for f in FIELDS])


def zero_state(spaces: Spaces, t: float = 0.0) -> State:
    z = {f: np.zeros(spaces.space(f).n_dofs) for f in FIELDS}
    return State(t=t, spaces=spaces, **z)


def _factorize(J, solver: str) -> Callable[[np.ndarray], np.ndarray]:
    if solver == "lu":
        lu = lu_factor(J)

        def solve(b):
            x = lu.solve(b)
            if not np.all(np.isfinite(x)):
                raise FactorizationError("sparse LU produced non-finite values")
            return x
        return solve

    def solve(b):
        x, rep = gmres_solve(J, b, tol=1e-12, preconditioner="ilut")
        if not rep.converged:
            raise FactorizationError(f"GMRES stalled at relative residual {rep.residual_norm:.3e}")
        return x
    return solve


def newton_solve(system, initial_guess, cfg: NewtonConfig = NewtonConfig(), cache: Optional[dict] = None):
    """Solve ``A x + cubic(x) = b``; returns (x, StepReport).

    ``initial_guess`` is a full monolithic vector or a :class:`State`; its
    Dirichlet entries are overwritten by the system's boundary values.  The
    stopping test uses the 2-norm of the full residual with Dirichlet rows
    removed.

    With ``cfg.jacobian == "fresh"`` every iteration factorizes the
    bubble-condensed Jacobian at the current iterate (plain Newton).  With
    ``"lagged"`` a factorization kept in ``cache`` is reused, across steps
    too, and refreshed whenever an iteration reduces the residual by less
    than ``cfg.refresh_ratio``.  The residual itself is always exact.
    """
    layout = system.layout
    if isinstance(initial_guess, State):
        initial_guess = layout.join({f: getattr(initial_guess, f) for f in FIELDS})
    cache = {} if cache is None else cache
    x = np.array(initial_guess, float)
    x[layout.dirichlet] = system.dirichlet_values
    history: List[float] = []
    solves = factorizations = growth = 0
    refresh = cfg.jacobian == "fresh" or "solve" not in cache
    for it in range(cfg.max_iter + 1):
        r = system.residual(x)
        rn = float(np.linalg.norm(r))
        history.append(rn)
        if not np.isfinite(rn):
            raise StepFailure("Newton residual is not finite", residual=rn)
        if rn <= cfg.tol_residual:
            return x, StepReport(it, rn, solves, tuple(history), factorizations)
        if len(history) > 1:
            ratio = rn / history[-2]
            if cfg.jacobian == "lagged" and ratio > cfg.refresh_ratio:
                refresh = True
            growth = growth + 1 if ratio > 10 else 0
            if growth >= 2:
                raise StepFailure(f"Newton diverging (residual {rn:.3e})", residual=rn)
        if it == cfg.max_iter:
            break
        if refresh or cfg.jacobian == "fresh":
            cache["solve"] = _factorize(system.reduced_jacobian(x).tocsc(), cfg.solver)
            factorizations += 1
            refresh = False
        dx = system.newton_increment(r, cache["solve"])
        solves += 1
        x += dx
        system.normalize_pressure(x)
        if np.linalg.norm(dx) <= cfg.tol_increment:
            rn = float(np.linalg.norm(system.residual(x)))
            history.append(rn)
            log.debug("Newton stopped on increment with residual %.3e", rn)
            return x, StepReport(it + 1, rn, solves, tuple(history), factorizations)
    raise StepFailure(f"Newton did not converge in {cfg.max_iter} iterations (residual {history[-1]:.3e})",
                      residual=history[-1])


class Stepper:
    """Advances a :class:`State` by one step for fixed spaces and parameters."""

    def __init__(self, spaces: Spaces, params: Params, cfg: NewtonConfig = NewtonConfig()):
        self.spaces = spaces
        self.params = params
        self.cfg = cfg
        self._factor_cache: dict = {}

    def step(self, state: State, forcing=None, bc: Optional[Dict[str, np.ndarray]] = None,
             t_new: Optional[float] = None):
        system = build_monolithic(state, self.params, self.spaces, forcing, bc)
        layout = system.layout
        x, report = newton_solve(system, state, self.cfg, self._factor_cache)
        parts = layout.split(x)
        t = state.t + self.params.dt if t_new is None else t_new
        new = State(t=t, spaces=self.spaces, **{f: parts[f].copy() for f in FIELDS})
        return new, report


def step(state_k: State, params: Params, forcing=None, bc_data=None, cfg: NewtonConfig = NewtonConfig()):
    """One step of the scheme from ``state_k`` (whose ``spaces`` define the discretization)."""
    return Stepper(state_k.spaces, params, cfg).step(state_k, forcing, bc_data)


@dataclass
class Trajectory:
    rows: List[dict]
    state: State
    reports: List[StepReport]


def run(initial: State, params: Params, n_steps: Optional[int] = None, *,
        forcing: Optional[Callable[[float], object]] = None,
        bc: Optional[Callable[[float], Dict[str, np.ndarray]]] = None,
        every: int = 1, monitor: Optional[Callable] = None,
        on_output: Optional[Callable[[int, State], None]] = None,
        cfg: NewtonConfig = NewtonConfig()) -> Trajectory:
    """Time loop.

    ``forcing(t)`` and ``bc(t)`` give source terms and boundary data at the new
    time level.  ``monitor(k, state, previous, params)`` returns a diagnostics row
    (default: :func:`chmhd.diagnostics.timeseries_row`), recorded every ``every``
    steps and at step 0.  A failing step raises :class:`StepFailure` carrying the
    step index and the partial trajectory.
    """
    from .diagnostics import timeseries_row

    monitor = monitor or timeseries_row
    n_steps = params.n_steps if n_steps is None else int(n_steps)
    stepper = Stepper(initial.spaces, params, cfg)
    rows = [monitor(0, initial, None, params)]
    reports: List[StepReport] = []
    if on_output:
        on_output(0, initial)
    state = initial
    t0 = initial.t
    for k in range(n_steps):
        t_new = t0 + (k + 1) * params.dt
        try:
            new, rep = stepper.step(state, forcing(t_new) if forcing else None, bc(t_new) if bc else None,
                                    t_new=t_new)
        except (StepFailure, FactorizationError) as exc:
            raise StepFailure(f"step {k + 1} failed: {exc}", residual=getattr(exc, "residual", np.nan),
                              step=k + 1, partial=Trajectory(rows, state, reports)) from exc
        reports.append(rep)
        if (k + 1) % every == 0 or k + 1 == n_steps:
            rows.append(monitor(k + 1, new, state, params))
            if on_output:
                on_output(k + 1, new)
        state = new
    return Trajectory(rows, state, reports)
