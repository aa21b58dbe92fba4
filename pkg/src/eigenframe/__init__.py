"""Symbolic-numeric toolkit for conservation-law systems with prescribed
eigenvector fields: builds the eigenvalue system of a frame, classifies its
solution structure, integrates the reduced systems, and reconstructs fluxes.
"""

from .expr import Expr, parse_expr, differentiate, evaluate, simplify
from .geometry import Frame, Connection, RiemannChart, Tolerances, make_frame, build_connection, build_chart
from .analysis import LambdaSystem, CaseReport, ReducedSystem, build_lambda_system, classify_case

__all__ = [
    "Expr", "parse_expr", "differentiate", "evaluate", "simplify",
    "Frame", "Connection", "RiemannChart", "Tolerances",
    "make_frame", "build_connection", "build_chart",
    "LambdaSystem", "CaseReport", "ReducedSystem",
    "build_lambda_system", "classify_case",
]

__version__ = "0.1.0"
