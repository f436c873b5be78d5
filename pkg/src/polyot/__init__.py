"""Wasserstein fitting of polylines to point clouds.

The transport cost between a weighted point cloud and a measure spread
along a polyline is computed by maximising a concave dual functional over
Laguerre-cell weights; the polyline vertices can then be optimised to
minimise that cost.
"""
__version__ = "0.1.0"

from .errors import (AdmmMaxIterations, DegenerateInput, InnerSolveFailed, IoError,
                     LineSearchFailure, NearTangentCrossing, ParseError, PolyotError, StaleDual,
                     TraceStall, ZeroTotalLength, ZeroTotalMass)
from .measures import (AtomicMeasure, PolylineMeasure, check_genericity, density_from_lengths,
                       normalize)
from .power_diagram import ADJACENCY, BRUTE_FORCE, NeighborOracle, build_oracle
from .shape import (AdmmConfig, KinematicConstraints, ShapeConfig, ShapeGradient,
                    barycenter_diagnostic, metric_diagonal, optimize_polyline,
                    project_kinematic, shape_gradient)
from .solvers import ConvergenceHistory, SolverConfig, solve, solve_first_order, wolfe_line_search
from .transport import (SegmentTrace, SparseHessian, TransportEvaluation, evaluate,
                        gershgorin_bound, hessian, next_crossing, trace_polyline)

__all__ = [
    "AdmmConfig", "AdmmMaxIterations", "ADJACENCY", "AtomicMeasure", "BRUTE_FORCE",
    "ConvergenceHistory", "DegenerateInput", "InnerSolveFailed", "IoError",
    "KinematicConstraints", "LineSearchFailure", "NearTangentCrossing", "NeighborOracle",
    "ParseError", "PolylineMeasure", "PolyotError", "SegmentTrace", "ShapeConfig",
    "ShapeGradient", "SolverConfig", "SparseHessian", "StaleDual", "TraceStall",
    "TransportEvaluation", "ZeroTotalLength", "ZeroTotalMass", "barycenter_diagnostic",
    "build_oracle", "check_genericity", "density_from_lengths", "evaluate", "gershgorin_bound",
    "hessian", "metric_diagonal", "next_crossing", "normalize", "optimize_polyline",
    "project_kinematic", "shape_gradient", "solve", "solve_first_order", "trace_polyline",
    "wolfe_line_search",
]
