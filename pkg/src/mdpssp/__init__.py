"""Maximize cumulative clicks over a browse session by planning on a per-user MDP."""
from .core import MdpModel, Plan, StateValueTable, expected_bl, expected_ctr, expected_ipv, survival_distribution
from .planner import (
    PlannerConfig,
    beam_search_dedup_plan,
    beam_search_plan,
    brute_force_plan,
    greedy_dedup_plan,
    greedy_plan,
    perturb_model,
    ssp_plan,
    ssp_plan_dedup,
)

__version__ = "0.1.0"
