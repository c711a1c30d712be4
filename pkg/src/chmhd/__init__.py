"""Finite element solver for the 2D Cahn-Hilliard-MHD system with a convex-splitting time scheme."""
from .assembly import CoefficientModel, Spaces, build_spaces
from .diagnostics import discrete_energy, discrete_mass, rate_table, terminal_errors
from .io_scenarios import ScenarioConfig, initial_state, parse_config, preset, run_scenario
from .manufactured import ExactSolution2D
from .mesh import build_unit_square_mesh
from .stepper import NewtonConfig, Params, State, StepFailure, run, step

__all__ = ["CoefficientModel", "Spaces", "build_spaces", "discrete_energy", "discrete_mass", "rate_table",
           "terminal_errors", "ScenarioConfig", "initial_state", "parse_config", "preset", "run_scenario",
           "ExactSolution2D", "build_unit_square_mesh", "NewtonConfig", "Params", "State", "StepFailure",
           "run", "step"]
__version__ = "0.1.0"
