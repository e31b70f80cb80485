"""
Numerical engine of the periodic evaluation solver.

It includes:
- The stochastic factor market and its path simulation (`market`).
- Convex trading constraints and their support functions (`constraints`).
- The modified one-period utility and its conjugate (`utility`).
- The dual problem over constraint and completion parameters (`dual`).
- The dynamic-programming operator and its fixed point (`fixedpoint`).
- Periodic policies, rollouts and verification statistics (`policy_sim`).
"""

from .constraints import ConstraintKind, ConstraintSet
from .errors import PortfolioError
from .fixedpoint import (
    FixedPointResult,
    LogFixedPointResult,
    log_fixed_point,
    solve_fixed_point,
)
from .grid import GridFeedback, ValueGrid
from .market import FactorModel, OUFactor, validate_model
from .policy_sim import PeriodicPolicy, build_periodic_policy, rollout
from .settings import SolverSettings
from .utility import ModifiedUtility, UtilitySpec

__all__ = [
    "ConstraintKind",
    "ConstraintSet",
    "FactorModel",
    "FixedPointResult",
    "GridFeedback",
    "LogFixedPointResult",
    "ModifiedUtility",
    "OUFactor",
    "PeriodicPolicy",
    "PortfolioError",
    "SolverSettings",
    "UtilitySpec",
    "ValueGrid",
    "build_periodic_policy",
    "log_fixed_point",
    "rollout",
    "solve_fixed_point",
    "validate_model",
]
