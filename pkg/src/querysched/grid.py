"""Benchmark grid: seeded conditions, CSV reporting, reference checks.

A grid varies one axis at a time away from a default condition and runs
every configured algorithm over a shared seed list, reporting the mean
and standard deviation of the simulated retrieval time per (condition,
algorithm).  Output is byte-stable for a fixed config.  The module also
ships the verification routine for the bundled three-source instance,
which sweeps the target count over its whole range and compares the
exhaustive-search optimum against the expected piecewise table and curve
crossing point.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

from .cost import SEQUENTIAL, QuerySpec, permutation_time_cost
from .detection import DetectionOutcome, initial_detection
from .lattice import StatsSnapshot
from .permutation import TABLE_ALGO_ORDER, brute_force_opt
from .scheduler import RunConfig, RunResult, run_query
from .simulator import (
    SCOPE_ALL,
    SCOPE_FOCUS,
    ReplicationModel,
    ScopedProbe,
    Universe,
    UniverseConfig,
    VennModel,
    demo_universe,
    generate,
)

CSV_HEADER = "condition,algorithm,mean_time_ms,stddev_ms,shortfall_count"

AXIS_NAMES = ("k_fraction", "query_threads", "n_sources", "query_split", "detection_overhead")


@dataclass(frozen=True)
class GridSpec:
    universe: UniverseConfig
    run: RunConfig
    k_fraction: float = 0.8
    axes: tuple[tuple[str, tuple[float, ...]], ...] = ()
    algorithms: tuple[str, ...] = TABLE_ALGO_ORDER
    seeds: tuple[int, ...] = tuple(range(101, 111))

    def conditions(self) -> list[tuple[str, float]]:
        out = []
        for axis, values in self.axes:
            if axis not in AXIS_NAMES:
                raise ValueError(f"unknown grid axis {axis!r}")
            for v in values:
                out.append((axis, v))
        return out


def desk_universe_config(
    n_sources: int = 50,
    n_distinct: int = 600,
    total_tuples: int = 3000,
    query_split: float = 0.5,
) -> UniverseConfig:
    """Desk-scale default universe: small enough for second-scale runs."""
    return UniverseConfig(
        n_sources=n_sources,
        n_distinct=n_distinct,
        total_tuples=total_tuples,
        overlap=ReplicationModel(
            style="chained",
            mean_depth=total_tuples / n_distinct,
            max_depth=9,
            chains=4,
            chain_skew=0.2,
            popularity_alpha=0.0,
            split_skew=0.25,
        ),
        access_ms=(5.0, 25.0),
        per_tuple_ms=(0.02, 0.42),
        query_split=query_split,
    )


def default_grid() -> GridSpec:
    return GridSpec(
        universe=desk_universe_config(),
        run=RunConfig(),
        axes=(("k_fraction", (0.2, 0.4, 0.6, 0.8)),),
    )


_DETECTION_CACHE: dict[tuple, DetectionOutcome] = {}


def offline_stats(universe: Universe, run: RunConfig) -> DetectionOutcome:
    """Initial detection for a universe, cached per (universe, thresholds)."""
    key = (
        universe.config,
        universe.seed,
        universe.unavailable,
        run.prune_threshold,
        run.prune_relative,
    )
    hit = _DETECTION_CACHE.get(key)
    if hit is None:
        probe = ScopedProbe(universe, SCOPE_ALL)
        hit = initial_detection(
            probe, run.prune_threshold, relative=run.prune_relative
        )
        _DETECTION_CACHE[key] = hit
    return hit


def scaled_universe(ucfg: UniverseConfig, n_sources: int) -> UniverseConfig:
    """Resize the source count at fixed tuple totals.

    Overlap families scale with the source count so that tuples spread
    over more, individually smaller sources instead of leaving the extra
    sources empty.
    """
    overlap = ucfg.overlap
    if isinstance(overlap, ReplicationModel) and overlap.style == "chained":
        factor = n_sources / ucfg.n_sources
        overlap = replace(overlap, chains=max(2, round(overlap.chains * factor)))
    return replace(ucfg, n_sources=n_sources, overlap=overlap)


def run_condition(
    spec: GridSpec, axis: str, value: float, algo: str, seed: int
) -> RunResult:
    """One deterministic cell of the grid."""
    ucfg = spec.universe
    run = spec.run
    k_fraction = spec.k_fraction
    if axis == "k_fraction":
        k_fraction = float(value)
    elif axis == "query_threads":
        run = replace(run, query_threads=int(value))
    elif axis == "n_sources":
        ucfg = scaled_universe(ucfg, int(value))
    elif axis == "query_split":
        ucfg = replace(ucfg, query_split=float(value))
    elif axis == "detection_overhead":
        run = replace(run, detection_overhead=float(value))
    else:
        raise ValueError(f"unknown grid axis {axis!r}")

    universe = generate(ucfg, seed)
    stats = offline_stats(universe, run)
    focus_count = universe.truth.distinct_in_scope(SCOPE_FOCUS)
    k = max(1, int(round(k_fraction * focus_count)))
    query = QuerySpec(SCOPE_FOCUS, k)
    return run_query(algo, query, universe, stats.snapshot, run, seed=seed)


def run_grid(spec: GridSpec, out_path: str | Path, trace_dir: str | Path | None = None) -> str:
    """Run the whole grid and write the CSV; returns the CSV text."""
    lines = [CSV_HEADER]
    trace_root = Path(trace_dir) if trace_dir is not None else None
    if trace_root is not None:
        trace_root.mkdir(parents=True, exist_ok=True)
    for axis, value in spec.conditions():
        condition = f"{axis}={value:g}"
        for algo in spec.algorithms:
            times = []
            shortfalls = 0
            for seed in spec.seeds:
                result = run_condition(spec, axis, value, algo, seed)
                times.append(result.simulated_time_ms)
                shortfalls += int(result.shortfall)
                if trace_root is not None:
                    name = f"{axis}_{value:g}_{algo}_{seed}.json".replace("|", "_")
                    (trace_root / name).write_text(result.to_json() + "\n")
            mean = statistics.fmean(times)
            stddev = statistics.pstdev(times) if len(times) > 1 else 0.0
            lines.append(
                "%s,%s,%.6f,%.6f,%d" % (condition, algo, mean, stddev, shortfalls)
            )
    text = "\n".join(lines) + "\n"
    Path(out_path).write_text(text)
    return text


# -- reference-instance verification ----------------------------------------

#: Expected optimal prefix by target-count range for the bundled demo
#: instance: (upper bound of k, optimal order).
DEMO_OPTIMAL_TABLE: tuple[tuple[int, tuple[int, ...]], ...] = (
    (50, (0,)),
    (96, (0, 1)),
    (125, (1,)),
    (190, (1, 2)),
    (200, (1, 2, 0)),
)
#: Expected crossing point (k, time_ms) of the two demo retrieval curves.
DEMO_CROSSPOINT = (96.8, 106.4)
DEMO_CROSSPOINT_TOL = 0.5


def demo_table_order(k: int) -> tuple[int, ...]:
    for upper, order in DEMO_OPTIMAL_TABLE:
        if k <= upper:
            return order
    raise ValueError(f"k={k} outside the table range")


@dataclass(frozen=True)
class DemoReport:
    matches: int
    total: int
    mismatched_k: tuple[int, ...]
    crosspoint: tuple[float, float]
    crosspoint_ok: bool

    @property
    def passed(self) -> bool:
        return self.matches == self.total and self.crosspoint_ok

    def render(self) -> str:
        lines = [
            "optimal-prefix table: %d/%d match" % (self.matches, self.total),
        ]
        if self.mismatched_k:
            lines.append("mismatched k: %s" % ", ".join(map(str, self.mismatched_k)))
        lines.append(
            "curve crosspoint: (%.4f, %.4f) expected (%.1f, %.1f) tol %.1f -> %s"
            % (
                self.crosspoint[0],
                self.crosspoint[1],
                DEMO_CROSSPOINT[0],
                DEMO_CROSSPOINT[1],
                DEMO_CROSSPOINT_TOL,
                "ok" if self.crosspoint_ok else "MISMATCH",
            )
        )
        lines.append("result: %s" % ("pass" if self.passed else "FAIL"))
        return "\n".join(lines)


def _curve_segments(order: Sequence[int], snapshot: StatsSnapshot) -> list[tuple[float, float, float]]:
    """Piecewise-linear (k_start, time_start, slope) segments of one order."""
    from .cost import CoverageWalk

    walk = CoverageWalk(snapshot)
    segments = []
    k0 = 0.0
    t0 = 0.0
    for s in order:
        res = walk.residual(s)
        full = snapshot.scan_cost_ms(s)
        if res > 0:
            segments.append((k0, t0, full / res))
            k0 += res
            t0 += full
        walk.append(s)
    return segments


def _curve_time(segments: list[tuple[float, float, float]], k: float) -> float:
    t = None
    for k0, t0, slope in segments:
        if k >= k0:
            t = t0 + (k - k0) * slope
    if t is None:
        raise ValueError("k below first segment")
    return t


def demo_crosspoint(universe: Universe) -> tuple[float, float]:
    """First genuine crossing of the two reference retrieval curves."""
    snapshot = universe.truth_snapshot(SCOPE_ALL)
    seg_a = _curve_segments((0, 1, 2), snapshot)
    seg_b = _curve_segments((1, 2, 0), snapshot)
    breakpoints = sorted({k for k, _, _ in seg_a + seg_b} | {200.0})
    prev_k = 1.0
    prev_diff = _curve_time(seg_a, 1.0) - _curve_time(seg_b, 1.0)
    for k in [k for k in breakpoints if k > 1.0]:
        diff = _curve_time(seg_a, k) - _curve_time(seg_b, k)
        if prev_diff == 0.0:
            return prev_k, _curve_time(seg_a, prev_k)
        if diff * prev_diff < 0:
            # Linear interpolation inside the segment gives the exact root.
            frac = prev_diff / (prev_diff - diff)
            k_star = prev_k + frac * (k - prev_k)
            return k_star, _curve_time(seg_b, k_star)
        prev_k, prev_diff = k, diff
    raise ValueError("curves do not cross")


def verify_demo_instance() -> DemoReport:
    """Check exhaustive-search optima against the reference table."""
    universe = demo_universe()
    snapshot = universe.truth_snapshot(SCOPE_ALL)
    matches = 0
    mismatched = []
    for k in range(1, 201):
        _, best_cost, shortfall = brute_force_opt(k, snapshot, SEQUENTIAL)
        expected = permutation_time_cost(demo_table_order(k), snapshot, k, SEQUENTIAL)
        if (
            not shortfall
            and not expected.shortfall
            and abs(expected.time_ms - best_cost) <= 1e-9 * max(1.0, best_cost)
        ):
            matches += 1
        else:
            mismatched.append(k)
    cross = demo_crosspoint(universe)
    cross_ok = (
        abs(cross[0] - DEMO_CROSSPOINT[0]) <= DEMO_CROSSPOINT_TOL
        and abs(cross[1] - DEMO_CROSSPOINT[1]) <= DEMO_CROSSPOINT_TOL
    )
    return DemoReport(matches, 200, tuple(mismatched), cross, cross_ok)


# -- config (de)serialization ------------------------------------------------

def grid_from_json(payload: Mapping) -> GridSpec:
    u = payload.get("universe", {})
    overlap_cfg = u.get("overlap", {})
    if "cells" in overlap_cfg:
        overlap: ReplicationModel | VennModel = VennModel.from_mapping(
            {int(m, 0) if isinstance(m, str) else int(m): c for m, c in overlap_cfg["cells"].items()}
        )
    else:
        overlap = ReplicationModel(
            style=overlap_cfg.get("style", "chained"),
            mean_depth=float(overlap_cfg.get("mean_depth", 5.0)),
            max_depth=int(overlap_cfg.get("max_depth", 9)),
            chains=int(overlap_cfg.get("chains", 4)),
            chain_skew=float(overlap_cfg.get("chain_skew", 0.2)),
            popularity_alpha=float(overlap_cfg.get("popularity_alpha", 0.0)),
            split_skew=float(overlap_cfg.get("split_skew", 0.25)),
        )
    universe = UniverseConfig(
        n_sources=int(u.get("sources", 50)),
        n_distinct=int(u.get("distinct", 600)),
        total_tuples=int(u.get("total", 3000)),
        overlap=overlap,
        access_ms=tuple(u.get("access_ms", (5.0, 25.0))),
        per_tuple_ms=tuple(u.get("per_tuple_ms", (0.02, 0.42))),
        query_split=float(u.get("query_split", 0.5)),
    )
    r = payload.get("run", {})
    run = RunConfig(
        query_threads=int(r.get("query_threads", 1)),
        overlap_floor=float(r.get("overlap_floor", 0.05)),
        prune_threshold=float(r.get("prune_threshold", 0.005)),
        prune_relative=bool(r.get("prune_relative", True)),
        detection_base_ms=float(r.get("detection_base_ms", 1.5)),
        detection_overhead=float(r.get("detection_overhead", 1.0)),
        detection_batch=int(r.get("detection_batch", 1)),
        planner_unit_ms=float(r.get("planner_unit_ms", 0.01)),
        charge_planner_online=bool(r.get("charge_planner_online", False)),
        fast_sweep=bool(r.get("fast_sweep", False)),
        fallback_ratio=float(r.get("fallback_ratio", 1.0)),
    )
    axes = tuple(
        (name, tuple(float(v) for v in values))
        for name, values in payload.get("axes", {}).items()
    )
    return GridSpec(
        universe=universe,
        run=run,
        k_fraction=float(payload.get("k_fraction", 0.8)),
        axes=axes,
        algorithms=tuple(payload.get("algorithms", TABLE_ALGO_ORDER)),
        seeds=tuple(int(s) for s in payload.get("seeds", range(101, 111))),
    )


def load_grid(path: str | Path) -> GridSpec:
    return grid_from_json(json.loads(Path(path).read_text()))
