"""Malliavin calculus and stochastic maximum principle toolkit for jump diffusions."""
from .noise import LevyModel, PathSource, Paths, TimeGrid, generate_paths
from .sde import Control, FiltrationSpec, linear_coefficients, simulate_state, SimulationError, AdmissibilityError
from .linear import DomainError

__all__ = ["LevyModel", "PathSource", "Paths", "TimeGrid", "generate_paths", "Control", "FiltrationSpec",
           "linear_coefficients", "simulate_state", "SimulationError", "AdmissibilityError", "DomainError"]
__version__ = "0.1.0"
