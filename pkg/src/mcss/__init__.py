"""Mixed optimal control and stopping under nonlinear expectations with jumps.

Two numerical routes to the value function: controlled reflected backward
induction on a Markov-chain lattice (``control.solve_value``) and an explicit
finite-difference HJBVI solver (``pide.solve_hjbvi``).  ``verify`` checks the
structural theorems on generated instances.
"""

from .errors import (ConfigurationError, DimensionError, DomainError, MCSSError, NumericError,
                     SchemeError, ValidationError)
from .model import ProblemSpec, builtin_registry, check_assumptions
from .forward import Lattice, TimeGrid, build_lattice, simulate_paths
from .bsde import Policy, StoppingRule, solve_bsde, solve_rbsde
from .control import ValueSurface, dpp_check, solve_value
from .pide import PIDEScheme, SpatialGrid, cross_validate, solve_hjbvi, viscosity_residual

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "DimensionError", "DomainError", "MCSSError", "NumericError",
    "SchemeError", "ValidationError", "ProblemSpec", "builtin_registry", "check_assumptions",
    "Lattice", "TimeGrid", "build_lattice", "simulate_paths", "Policy", "StoppingRule",
    "solve_bsde", "solve_rbsde", "ValueSurface", "dpp_check", "solve_value", "PIDEScheme",
    "SpatialGrid", "cross_validate", "solve_hjbvi", "viscosity_residual",
]
