"""Homogenisation of second-order elliptic problems in thin domains with
rapidly oscillating, slowly modulated cross-sections.

Modules: ``expr`` (expression language), ``geometry`` (cross-sections and
reference maps), ``measure`` (mu_eps and mu_* quadrature), ``fem`` (Q1
assembly and CG), ``cell`` (cell problems and effective coefficients),
``limit1d`` (the effective 1D problem), ``epssolve`` (the full problem),
``study`` (convergence studies and reports).
"""
from .cell import CellSolver, CoefficientSet, solve_cell_problem
from .epssolve import solve_eps_problem
from .errors import ThinHomogError
from .expr import parse
from .geometry import GeometryModel
from .limit1d import solve_effective
from .study import StudyConfig, run_study

__version__ = "0.1.0"

__all__ = [
    "CellSolver", "CoefficientSet", "GeometryModel", "StudyConfig", "ThinHomogError",
    "parse", "run_study", "solve_cell_problem", "solve_effective", "solve_eps_problem",
]
