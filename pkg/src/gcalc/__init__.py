"""Numerical toolkit for G-expectations, conditional G-expectations and G-martingale decompositions."""

from .cylinder import CylinderConfig, backward_eval, conditional_at, conditional_process
from .gpde import GridFunction, SolverConfig, gnormal_expect, solve_gheat
from .model import (
    GCalcError,
    TimePartition,
    VolatilityBand,
    conjugate_exponent,
    g_of,
    nondegeneracy,
    series_constant,
)
from .payoff import PayoffExpr, constant_payoff, parse_payoff

__version__ = "0.1.0"

__all__ = [
    "CylinderConfig",
    "GCalcError",
    "GridFunction",
    "PayoffExpr",
    "SolverConfig",
    "TimePartition",
    "VolatilityBand",
    "__version__",
    "backward_eval",
    "conditional_at",
    "conditional_process",
    "conjugate_exponent",
    "constant_payoff",
    "g_of",
    "gnormal_expect",
    "nondegeneracy",
    "parse_payoff",
    "series_constant",
    "solve_gheat",
]
