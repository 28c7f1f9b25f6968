"""Sound branch-and-bound verification of piecewise-linear conditions."""

from .bnb import (
    And,
    Atom,
    BnbConfig,
    Or,
    Query,
    Verdict,
    VerdictStatus,
    branch_and_bound,
    find_violations,
    minimize_lower_bound,
    negate,
    verdict_from_dict,
    verdict_to_dict,
)
from .bounds import output_bounds
from .conditions import (
    check_condition1,
    check_condition2_filtered,
    check_condition2_plain,
    check_condition3,
    check_safety_direct,
    region_query,
)
from .graph import ExprGraph, GraphBuilder

__all__ = [
    "And",
    "Atom",
    "BnbConfig",
    "ExprGraph",
    "GraphBuilder",
    "Or",
    "Query",
    "Verdict",
    "VerdictStatus",
    "branch_and_bound",
    "check_condition1",
    "check_condition2_filtered",
    "check_condition2_plain",
    "check_condition3",
    "check_safety_direct",
    "find_violations",
    "minimize_lower_bound",
    "negate",
    "output_bounds",
    "region_query",
    "verdict_from_dict",
    "verdict_to_dict",
]
