"""Optimisation of adhesive-foot climbing trajectories.

Modules map one-to-one onto pipeline stages: ``geometry`` (composite Bezier
curves), ``kinematics`` (leg model and motion bounds), ``constraints``
(foot-structure policy and climbable sampler), ``surrogate`` (force oracle
and GRU models), ``strategies`` (the seven objective functionals),
``optimizer`` (NSGA-II and redundancy-hierarchical selection) and ``cli``.
"""

from .constraints import FootSpec, build_policy, sample_climbable, validate
from .geometry import ControlPolygon, CompositeTrajectory, complete_polygon, evaluate, sample
from .kinematics import LegModel, MotionBounds, default_leg, paper_bounds, solve_bounds
from .optimizer import FootTrajectoryOptimizer, ParetoFront, RhsConfig, nsga2, rhs_select
from .surrogate import GruForceRegressor, OracleParams, dilate_loss, oracle_forces, soft_dtw

__version__ = "0.1.0"

__all__ = [
    "CompositeTrajectory",
    "ControlPolygon",
    "FootSpec",
    "FootTrajectoryOptimizer",
    "GruForceRegressor",
    "LegModel",
    "MotionBounds",
    "OracleParams",
    "ParetoFront",
    "RhsConfig",
    "build_policy",
    "complete_polygon",
    "default_leg",
    "dilate_loss",
    "evaluate",
    "nsga2",
    "oracle_forces",
    "paper_bounds",
    "rhs_select",
    "sample",
    "sample_climbable",
    "soft_dtw",
    "solve_bounds",
    "validate",
]
