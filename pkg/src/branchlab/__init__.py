"""Learning-to-branch toolkit for mixed-integer linear programs.

Pipeline: synthetic instance generation, branch and bound with pluggable
branching policies, hybrid expert data collection, upper-envelope data
selection, bipartite graph-network imitation, and dual-integral evaluation.
"""

from .bnb import Budget, DualTrace, SolveResult, SolveStatus, cumulative_reward, dual_integral, solve
from .instances import (
    InstanceFamilySpec,
    MilpInstance,
    generate_instance,
    lp_relaxation,
    parse_instance,
    serialize_instance,
)
from .simplex import BoundOverride, LpSolution, LpStatus, SimplexSolver

__all__ = [
    "Budget",
    "BoundOverride",
    "DualTrace",
    "InstanceFamilySpec",
    "LpSolution",
    "LpStatus",
    "MilpInstance",
    "SimplexSolver",
    "SolveResult",
    "SolveStatus",
    "cumulative_reward",
    "dual_integral",
    "generate_instance",
    "lp_relaxation",
    "parse_instance",
    "serialize_instance",
    "solve",
]

__version__ = "0.1.0"
