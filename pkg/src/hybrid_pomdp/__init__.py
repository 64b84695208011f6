"""Hierarchical belief-space planning for systems with hybrid dynamics.

Modules
-------
hybrid_model
    Modes, guard regions, local models and the hybrid belief.
hybrid_filter
    Belief prediction, mode transition estimates and the EKF-bank update.
direct_planner
    Knot-point transcription of belief-space planning solved by SQP.
hierarchical_planner
    Mode-sequence enumeration, subgoal selection and plan ranking.
stabilizer
    B-LQR tracking of a nominal plan and the closed execution loop.
domains
    Walled navigation and planar assembly benchmarks with simulators.
cli
    Seeded experiments, aggregation and trajectory files.
"""

from .config import CostWeights, DirectConfig, HierarchicalConfig
from .direct_planner import BeliefTrajectory, plan_direct
from .domains import DOMAINS, Simulator, assembly_domain, get_domain, simulate_step, walled_domain
from .errors import HybridPlanningError
from .hierarchical_planner import HighLevelPlan, hellinger, rank_and_plan
from .hybrid_filter import FilterConfig, filter_step
from .hybrid_model import (
    Box,
    GaussianComponent,
    GoalRegion,
    GuardSet,
    HybridBelief,
    LocalModel,
    TransitionGraph,
    build_model,
    mode_membership,
    most_likely_mode,
)
from .stabilizer import ExperimentRecord, ReplanPolicy, execute

__version__ = "0.1.0"

__all__ = [
    "BeliefTrajectory",
    "Box",
    "CostWeights",
    "DOMAINS",
    "DirectConfig",
    "ExperimentRecord",
    "FilterConfig",
    "GaussianComponent",
    "GoalRegion",
    "GuardSet",
    "HierarchicalConfig",
    "HighLevelPlan",
    "HybridBelief",
    "HybridPlanningError",
    "LocalModel",
    "ReplanPolicy",
    "Simulator",
    "TransitionGraph",
    "assembly_domain",
    "build_model",
    "execute",
    "filter_step",
    "get_domain",
    "hellinger",
    "mode_membership",
    "most_likely_mode",
    "plan_direct",
    "rank_and_plan",
    "simulate_step",
    "walled_domain",
]
