"""Overlap-aware source permutation and online query scheduling."""

from .cost import (
    PREFIX_AVERAGE,
    SEQUENTIAL,
    CostResult,
    PermState,
    QuerySpec,
    SourceProfile,
    avg_query_rate,
    permutation_time_cost,
    query_rate,
)
from .lattice import (
    LatticeCell,
    StatsSnapshot,
    dump_snapshot,
    parse_snapshot,
    snapshot_from_cells,
)
from .permutation import (
    TABLE_ALGO_ORDER,
    PermCandidate,
    approx_bound,
    baseline_order,
    brute_force_opt,
    greedy_by_rate,
    refine_order,
)
from .scheduler import RunConfig, RunResult, run_query
from .simulator import Universe, UniverseConfig, demo_universe, generate

__all__ = [
    "PREFIX_AVERAGE",
    "SEQUENTIAL",
    "CostResult",
    "PermState",
    "QuerySpec",
    "SourceProfile",
    "avg_query_rate",
    "permutation_time_cost",
    "query_rate",
    "LatticeCell",
    "StatsSnapshot",
    "dump_snapshot",
    "parse_snapshot",
    "snapshot_from_cells",
    "TABLE_ALGO_ORDER",
    "PermCandidate",
    "approx_bound",
    "baseline_order",
    "brute_force_opt",
    "greedy_by_rate",
    "refine_order",
    "RunConfig",
    "RunResult",
    "run_query",
    "Universe",
    "UniverseConfig",
    "demo_universe",
    "generate",
]
