"""Permutation construction: greedy selection, swap refinement, baselines.

The planner grows a source order greedily by residual query rate, then
sweeps it head to tail looking for profitable swaps between an ordered
source and a larger-cardinality source drawn from the unselected set or
from later positions.  Swap candidates are ranked by their overlap ratio
with the anchor and filtered by a floor, since swapping sources that
barely intersect cannot change which order wins.  A brute-force oracle
over all covering prefixes is included for small universes, together with
the analytic approximation bound used to sanity-check sweep output.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .cost import SEQUENTIAL, CoverageWalk, PermState
from .lattice import StatsSnapshot

ALGO_RANDOM = "random"
ALGO_MAX_TUPLES = "max_tuples"
ALGO_MAX_RESIDUAL = "max_residual"
ALGO_MIN_UNIT_COST = "min_unit_cost"
ALGO_MIN_RESIDUAL_COST = "min_residual_cost"
ALGO_SEQUENTIAL = "sequential"
ALGO_ONLINE = "online"
ALGO_FULL_KNOWLEDGE = "full_knowledge"

BASELINE_ALGOS = (
    ALGO_RANDOM,
    ALGO_MAX_TUPLES,
    ALGO_MAX_RESIDUAL,
    ALGO_MIN_UNIT_COST,
    ALGO_MIN_RESIDUAL_COST,
)
#: Reporting order for benchmark tables.
TABLE_ALGO_ORDER = BASELINE_ALGOS + (ALGO_SEQUENTIAL, ALGO_ONLINE, ALGO_FULL_KNOWLEDGE)

DEFAULT_OVERLAP_FLOOR = 0.05
ORACLE_SOURCE_BOUND = 9


class PinnedSwapError(ValueError):
    """Attempted to move a source out of the already-dispatched prefix."""


class OracleSizeError(ValueError):
    """Universe too large for exhaustive search."""


class WorkMeter:
    """Counts planner evaluations so sweep effort can be charged as time."""

    __slots__ = ("ops",)

    def __init__(self) -> None:
        self.ops = 0

    def add(self, n: int = 1) -> None:
        self.ops += n


@dataclass(frozen=True)
class PermCandidate:
    """A candidate order with its covered-tuple total and average rate."""

    order: tuple[int, ...]
    unselected: frozenset[int]
    covered: float
    avg_rate: float

    def state(self, pinned: int = 0, version: int = 0) -> PermState:
        return PermState(self.order, self.unselected, pinned, version)


def intersections_with_prefix(
    order: Sequence[int], targets: Iterable[int], snapshot: StatsSnapshot
) -> dict[int, float]:
    """Covered-tuple count of each target w.r.t. the given prefix."""
    return {t: snapshot.intersect_count(order, t) for t in targets}


def covered_total(order: Sequence[int], snapshot: StatsSnapshot) -> float:
    """Total residual tuples the order can deliver."""
    walk = CoverageWalk(snapshot)
    total = 0.0
    for s in order:
        total += walk.residual(s)
        walk.append(s)
    return total


def _order_stats(order: Sequence[int], snapshot: StatsSnapshot) -> tuple[float, float]:
    walk = CoverageWalk(snapshot)
    res_sum = 0.0
    scan_sum = 0.0
    for s in order:
        res_sum += walk.residual(s)
        scan_sum += snapshot.scan_cost_ms(s)
        walk.append(s)
    return res_sum, scan_sum


def _candidate(order: Sequence[int], unselected: Iterable[int], snapshot: StatsSnapshot) -> PermCandidate:
    res_sum, scan_sum = _order_stats(order, snapshot)
    avg = res_sum / scan_sum if scan_sum > 0 else 0.0
    return PermCandidate(tuple(order), frozenset(unselected), res_sum, avg)


def trim_to_cover(
    order: Sequence[int],
    unselected: Iterable[int],
    k: float,
    snapshot: StatsSnapshot,
    pinned: int = 0,
) -> PermCandidate:
    """Drop trailing sources beyond the minimal covering prefix.

    Never trims into the pinned prefix: dispatched sources stay in the
    order even when the target is already covered without them.
    """
    walk = CoverageWalk(snapshot)
    cum = 0.0
    keep = len(order)
    for pos, s in enumerate(order):
        cum += walk.residual(s)
        walk.append(s)
        if cum >= k:
            keep = pos + 1
            break
    keep = max(keep, pinned)
    kept = tuple(order[:keep])
    moved = set(order[keep:])
    return _candidate(kept, set(unselected) | moved, snapshot)


def append_source(
    order: Sequence[int],
    unselected: Iterable[int],
    source: int,
    snapshot: StatsSnapshot,
) -> PermCandidate:
    """Move one unselected source to the tail of the order."""
    unsel = set(unselected)
    if source not in unsel:
        raise ValueError(f"source {source} is not unselected")
    unsel.discard(source)
    return _candidate(tuple(order) + (source,), unsel, snapshot)


def swap_source(
    order: Sequence[int],
    unselected: Iterable[int],
    pos: int,
    incoming: int,
    pinned: int = 0,
) -> tuple[tuple[int, ...], frozenset[int]]:
    """Replace the source at ``pos`` with ``incoming`` and cut the tail.

    The outgoing source and every source ranked behind it return to the
    unselected set; ``incoming`` may come from the unselected set or from
    one of those tail positions.  Raises :class:`PinnedSwapError` for
    positions inside the pinned prefix.
    """
    if pos < pinned:
        raise PinnedSwapError("pinned")
    if not 0 <= pos < len(order):
        raise ValueError("position out of range")
    outgoing = order[pos]
    tail = set(order[pos + 1 :])
    unsel = set(unselected)
    if incoming in unsel:
        unsel.discard(incoming)
    elif incoming in tail:
        tail.discard(incoming)
    else:
        raise ValueError(f"source {incoming} not available for swapping in")
    new_order = tuple(order[:pos]) + (incoming,)
    unsel |= tail
    unsel.add(outgoing)
    return new_order, frozenset(unsel)


def overlap_ranked(
    anchor: int,
    candidates: Iterable[int],
    snapshot: StatsSnapshot,
    overlap_floor: float,
    meter: WorkMeter | None = None,
) -> list[tuple[int, float]]:
    """Candidates sorted by overlap ratio with the anchor, descending.

    The ratio is the estimated shared-tuple count divided by the anchor's
    cardinality; entries below ``overlap_floor`` are discarded.  An
    anchor with no tuples yields no candidates.
    """
    anchor_card = snapshot.cardinalities[anchor]
    if anchor_card <= 0:
        return []
    ranked = []
    for j in sorted(candidates):
        if j == anchor:
            continue
        if meter is not None:
            meter.add()
        ratio = snapshot.pair_overlap(anchor, j) / anchor_card
        if ratio >= overlap_floor:
            ranked.append((j, ratio))
    ranked.sort(key=lambda item: (-item[1], item[0]))
    return ranked


def greedy_by_rate(
    k: float,
    order: Sequence[int],
    unselected: Iterable[int],
    snapshot: StatsSnapshot,
    pinned: int = 0,
    meter: WorkMeter | None = None,
) -> PermCandidate:
    """Extend (or trim) an order until it covers ``k`` residual tuples.

    Each round appends the unselected source with the highest residual
    query rate, ties broken by lowest id.  Zero-rate sources are never
    appended, so an under-covering universe ends with the shortfall left
    to the caller.  An order that already over-covers is trimmed instead.
    """
    walk = CoverageWalk(snapshot)
    res_sum = 0.0
    scan_sum = 0.0
    for s in order:
        res_sum += walk.residual(s)
        scan_sum += snapshot.scan_cost_ms(s)
        walk.append(s)
    if res_sum >= k:
        return trim_to_cover(order, unselected, k, snapshot, pinned)

    new_order = list(order)
    unsel = sorted(set(unselected))
    while res_sum < k and unsel:
        best = -1
        best_rate = 0.0
        for s in unsel:
            if meter is not None:
                meter.add()
            rate = walk.rate(s)
            if rate > best_rate:
                best_rate = rate
                best = s
        if best < 0:
            break
        res_sum += walk.residual(best)
        scan_sum += snapshot.scan_cost_ms(best)
        walk.append(best)
        new_order.append(best)
        unsel.remove(best)
    avg = res_sum / scan_sum if scan_sum > 0 else 0.0
    return PermCandidate(tuple(new_order), frozenset(unsel), res_sum, avg)


def improve_position(
    k: float,
    order: Sequence[int],
    unselected: Iterable[int],
    pos: int,
    snapshot: StatsSnapshot,
    overlap_floor: float = DEFAULT_OVERLAP_FLOOR,
    pinned: int = 0,
    meter: WorkMeter | None = None,
    top_overlap_only: bool = False,
) -> PermCandidate | None:
    """Best rebuild obtained by swapping the source at ``pos``.

    Tries each ranked candidate with more tuples than the anchor, replays
    the greedy extension on the remainder and keeps the rebuild with the
    highest average rate.  Returns None when no candidate qualifies; the
    caller compares the winner against its incumbent.  With
    ``top_overlap_only`` the candidate list collapses to the maximal
    overlap ratio, trading sweep quality for an order less work.
    """
    anchor = order[pos]
    unsel = frozenset(unselected)
    pool = unsel | set(order[pos + 1 :])
    anchor_card = snapshot.cardinalities[anchor]
    ranked = overlap_ranked(anchor, pool, snapshot, overlap_floor, meter)
    if top_overlap_only and ranked:
        top = ranked[0][1]
        ranked = [item for item in ranked if item[1] >= top]
    best: PermCandidate | None = None
    for j, _ratio in ranked:
        if anchor_card >= snapshot.cardinalities[j]:
            continue
        swapped_order, swapped_unsel = swap_source(order, unsel, pos, j, pinned)
        cand = greedy_by_rate(k, swapped_order, swapped_unsel, snapshot, pinned, meter)
        if best is None or cand.avg_rate > best.avg_rate:
            best = cand
    if best is not None and best.avg_rate > 0.0:
        return best
    return None


def refine_order(
    k: float,
    snapshot: StatsSnapshot,
    universe: Iterable[int] | None = None,
    *,
    pinned_order: Sequence[int] = (),
    overlap_floor: float = DEFAULT_OVERLAP_FLOOR,
    publish: Callable[[PermCandidate], None] | None = None,
    snapshot_provider: Callable[[], StatsSnapshot] | None = None,
    meter: WorkMeter | None = None,
    top_overlap_only: bool = False,
) -> PermCandidate:
    """Greedy construction followed by the head-to-tail swap sweep.

    Publishes the initial greedy order and every adopted improvement.
    Pinned (already dispatched) positions are never swapped.  When a
    ``snapshot_provider`` is given and its version moves mid-sweep, the
    incumbent is re-evaluated under the fresh snapshot and the sweep
    restarts from the first unpinned position.
    """
    if universe is None:
        ids = range(snapshot.n_sources)
    else:
        ids = sorted(universe)
    pinned = len(pinned_order)
    unselected = frozenset(ids) - set(pinned_order)
    incumbent = greedy_by_rate(k, tuple(pinned_order), unselected, snapshot, pinned, meter)
    if publish is not None:
        publish(incumbent)

    pos = pinned
    while pos < len(incumbent.order):
        if snapshot_provider is not None:
            latest = snapshot_provider()
            if latest.version != snapshot.version:
                snapshot = latest
                incumbent = greedy_by_rate(
                    k, incumbent.order, incumbent.unselected, snapshot, pinned, meter
                )
                if publish is not None:
                    publish(incumbent)
                pos = pinned
                continue
        cand = improve_position(
            k,
            incumbent.order,
            incumbent.unselected,
            pos,
            snapshot,
            overlap_floor,
            pinned,
            meter,
            top_overlap_only,
        )
        if cand is not None and cand.avg_rate > incumbent.avg_rate:
            incumbent = cand
            if publish is not None:
                publish(incumbent)
        pos += 1
    return incumbent


def baseline_order(
    kind: str,
    snapshot: StatsSnapshot,
    seed: int | None = None,
    meter: WorkMeter | None = None,
) -> tuple[int, ...]:
    """Full-universe dispatch order for one of the baseline policies."""
    ids = list(range(snapshot.n_sources))
    if kind == ALGO_RANDOM:
        if seed is None:
            raise ValueError("random baseline requires a seed")
        rng = random.Random(seed)
        rng.shuffle(ids)
        return tuple(ids)
    if kind == ALGO_MAX_TUPLES:
        return tuple(sorted(ids, key=lambda s: (-snapshot.cardinalities[s], s)))
    if kind == ALGO_MIN_UNIT_COST:
        def unit_cost(s: int) -> float:
            card = snapshot.cardinalities[s]
            return snapshot.scan_cost_ms(s) / card if card > 0 else float("inf")

        return tuple(sorted(ids, key=lambda s: (unit_cost(s), s)))
    if kind in (ALGO_MAX_RESIDUAL, ALGO_MIN_RESIDUAL_COST):
        walk = CoverageWalk(snapshot)
        remaining = ids[:]
        out = []
        while remaining:
            if kind == ALGO_MAX_RESIDUAL:
                pick = max(remaining, key=lambda s: (walk.residual(s), -s))
            else:
                def residual_cost(s: int) -> float:
                    res = walk.residual(s)
                    return snapshot.scan_cost_ms(s) / res if res > 0 else float("inf")

                pick = min(remaining, key=lambda s: (residual_cost(s), s))
            if meter is not None:
                meter.add(len(remaining))
            out.append(pick)
            remaining.remove(pick)
            walk.append(pick)
        return tuple(out)
    raise ValueError(f"unknown baseline {kind!r}")


def approx_bound(k: float, snapshot: StatsSnapshot) -> float:
    """Analytic worst-case ratio of the sweep's cost to the optimum.

    Sources are ranked by raw rate (cardinality over full scan time,
    overlap ignored); the bound is the target count times the total scan
    time of the universe, divided by the universe's total tuple count
    times the scan time of the minimal raw-cardinality prefix covering
    the target.  Values below 1 clamp to 1 (a single source is trivially
    optimal for itself).
    """
    n = snapshot.n_sources
    cards = snapshot.cardinalities
    scans = [snapshot.scan_cost_ms(s) for s in range(n)]

    def raw_rate(s: int) -> float:
        return cards[s] / scans[s] if scans[s] > 0 else 0.0

    ranked = sorted(range(n), key=lambda s: (-raw_rate(s), s))
    covered = 0.0
    prefix_scan = 0.0
    for s in ranked:
        prefix_scan += scans[s]
        covered += cards[s]
        if covered >= k:
            break
    total_tuples = sum(cards)
    total_scan = sum(scans)
    if total_tuples <= 0 or prefix_scan <= 0:
        return 1.0
    return max(1.0, k * total_scan / (total_tuples * prefix_scan))


def format_order(order: Sequence[int], pinned: int = 0) -> str:
    """Serialize an order as comma lists with a bar after the pinned prefix."""
    head = ",".join(str(s) for s in order[:pinned])
    tail = ",".join(str(s) for s in order[pinned:])
    return f"{head}|{tail}"


def parse_order(text: str) -> tuple[tuple[int, ...], int]:
    """Inverse of :func:`format_order`; returns (order, pinned)."""
    if "|" not in text:
        raise ValueError("missing pinned-prefix marker")
    head, tail = text.split("|", 1)
    pinned = tuple(int(x) for x in head.split(",") if x != "")
    rest = tuple(int(x) for x in tail.split(",") if x != "")
    return pinned + rest, len(pinned)


def _residual_table(snapshot: StatsSnapshot) -> list[list[float]]:
    """residual[source][prefix_mask] for every subset of a small universe."""
    n = snapshot.n_sources
    size = 1 << n
    table = [[0.0] * size for _ in range(n)]
    for s in range(n):
        card = snapshot.cardinalities[s]
        row = table[s]
        cells = snapshot._cells_by_source[s]
        for mask in range(size):
            covered = 0.0
            for cmask, value in cells:
                if cmask & mask:
                    covered += value
            row[mask] = max(0.0, card - covered)
    return table


def brute_force_opt(
    k: float,
    snapshot: StatsSnapshot,
    model: str = SEQUENTIAL,
    max_sources: int = ORACLE_SOURCE_BOUND,
) -> tuple[tuple[int, ...], float, bool]:
    """Exhaustive minimum over all covering prefixes of the universe.

    Returns (order, cost, shortfall).  Equal-cost orders resolve to the
    lexicographically smallest.  Refuses universes beyond ``max_sources``.
    """
    n = snapshot.n_sources
    if n > max_sources:
        raise OracleSizeError("oracle size bound")
    residual = _residual_table(snapshot)
    scan = [snapshot.scan_cost_ms(s) for s in range(n)]
    total_coverage = covered_total(range(n), snapshot)
    if total_coverage < k:
        order = tuple(range(n))
        return order, sum(scan), True

    tol = 1e-9
    best_cost = float("inf")
    best_order: tuple[int, ...] = ()

    # Depth-first over prefixes in ascending-id order; the first minimum
    # found is therefore the lexicographic winner among ties.
    stack: list[tuple[tuple[int, ...], int, float, float, float]] = [((), 0, 0.0, 0.0, 0.0)]
    while stack:
        prefix, mask, cum, seq_time, scan_sum = stack.pop()
        for s in range(n - 1, -1, -1):
            if mask & (1 << s):
                continue
            res = residual[s][mask]
            new_prefix = prefix + (s,)
            if cum + res >= k and res > 0.0:
                if model == SEQUENTIAL:
                    cost = seq_time + scan[s] * (k - cum) / res
                else:
                    cost = k * (scan_sum + scan[s]) / (cum + res)
                if cost < best_cost - tol or (
                    cost <= best_cost + tol and list(new_prefix) < list(best_order)
                ):
                    if cost < best_cost:
                        best_cost = cost
                    best_order = new_prefix
            else:
                nxt_time = seq_time + scan[s]
                if model == SEQUENTIAL and nxt_time > best_cost + tol:
                    continue
                stack.append((new_prefix, mask | (1 << s), cum + res, nxt_time, scan_sum + scan[s]))
    return best_order, best_cost, False
