"""Cost model shared by every planner: query rates and retrieval times.

Two time-cost accountings are exposed.  The default ``sequential`` model
walks the permutation source by source, charging each fully scanned source
its whole access-plus-transfer time and the final source a pro-rata share
of it (full time divided by its residual tuples, times the tuples still
needed).  The ``prefix-average`` model instead divides the target count by
the average rate of the covering prefix.  The two disagree on multi-source
prefixes; the sequential model is the default because it is the one that
matches the piecewise-linear retrieval curves the planner optimizes
against (the bundled demo instance reproduces its published optimal-prefix
table only under this model).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .lattice import StatsSnapshot, member_sources

SEQUENTIAL = "sequential"
PREFIX_AVERAGE = "prefix-average"
COST_MODELS = (SEQUENTIAL, PREFIX_AVERAGE)


@dataclass(frozen=True)
class SourceProfile:
    """One source's identity, latency figures and result-tuple count."""

    id: int
    access_ms: float
    per_tuple_ms: float
    cardinality: int

    def __post_init__(self) -> None:
        if self.id < 0:
            raise ValueError("source id must be nonnegative")
        if self.access_ms < 0:
            raise ValueError("access time must be nonnegative")
        if self.per_tuple_ms <= 0:
            raise ValueError("per-tuple transfer time must be positive")
        if self.cardinality < 0:
            raise ValueError("cardinality must be nonnegative")


@dataclass(frozen=True)
class QuerySpec:
    """A request for ``k`` distinct result tuples under a named predicate."""

    predicate_id: str
    k: int

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be at least 1")


@dataclass(frozen=True)
class PermState:
    """An ordered selection of sources plus the unselected remainder.

    The first ``pinned`` entries of ``order`` have already been dispatched
    and must never be reordered or dropped by later rewrites.
    """

    order: tuple[int, ...]
    unselected: frozenset[int]
    pinned: int = 0
    version: int = 0

    def __post_init__(self) -> None:
        if self.pinned < 0 or self.pinned > len(self.order):
            raise ValueError("pinned prefix exceeds order length")
        seen = set(self.order)
        if len(seen) != len(self.order):
            raise ValueError("duplicate source in order")
        if seen & self.unselected:
            raise ValueError("order and unselected overlap")

    @property
    def universe(self) -> frozenset[int]:
        return frozenset(self.order) | self.unselected


def query_rate(profile: SourceProfile, intersect_count: float) -> float:
    """Residual tuples per millisecond of full scan time.

    A source whose results are fully covered by earlier sources rates 0;
    so does the degenerate empty-and-free source (cardinality 0 with zero
    access time), which keeps it out of every greedy selection.
    """
    if intersect_count > profile.cardinality:
        raise ValueError("intersection exceeds cardinality")
    return rate_from_parts(
        profile.access_ms, profile.per_tuple_ms, profile.cardinality, intersect_count
    )


def rate_from_parts(
    access_ms: float, per_tuple_ms: float, cardinality: float, intersect_count: float
) -> float:
    denom = access_ms + per_tuple_ms * cardinality
    if denom <= 0.0:
        return 0.0
    residual = cardinality - intersect_count
    if residual <= 0.0:
        return 0.0
    return residual / denom


class CoverageWalk:
    """Incremental residual bookkeeping while a permutation grows.

    Marks lattice cells as covered when any of their sources joins the
    prefix and keeps per-source covered amounts, so appending a source and
    querying residuals are both cheap inside greedy loops.
    """

    __slots__ = ("snapshot", "_covered_cells", "_covered_amt", "_cell_rows")

    def __init__(self, snapshot: StatsSnapshot):
        self.snapshot = snapshot
        self._cell_rows = snapshot._cells_by_source
        self._covered_cells: set[int] = set()
        self._covered_amt = [0.0] * snapshot.n_sources

    def clone(self) -> "CoverageWalk":
        other = CoverageWalk.__new__(CoverageWalk)
        other.snapshot = self.snapshot
        other._cell_rows = self._cell_rows
        other._covered_cells = set(self._covered_cells)
        other._covered_amt = list(self._covered_amt)
        return other

    def covered_for(self, source: int) -> float:
        return self._covered_amt[source]

    def residual(self, source: int) -> float:
        # Clamped at zero: estimated cells may briefly overshoot a freshly
        # detected cardinality, and a negative residual is meaningless.
        return max(0.0, self.snapshot.cardinalities[source] - self._covered_amt[source])

    def rate(self, source: int) -> float:
        snap = self.snapshot
        return rate_from_parts(
            snap.access_ms[source],
            snap.per_tuple_ms[source],
            snap.cardinalities[source],
            self._covered_amt[source],
        )

    def scan_cost(self, source: int) -> float:
        return self.snapshot.scan_cost_ms(source)

    def append(self, source: int) -> None:
        for mask, value in self._cell_rows[source]:
            if mask in self._covered_cells:
                continue
            self._covered_cells.add(mask)
            for s in member_sources(mask):
                self._covered_amt[s] += value


def walk_residuals(order: Sequence[int], snapshot: StatsSnapshot) -> list[float]:
    """Residual tuple count of each source at its position in ``order``."""
    walk = CoverageWalk(snapshot)
    out = []
    for s in order:
        out.append(walk.residual(s))
        walk.append(s)
    return out


def avg_query_rate(order: Sequence[int], snapshot: StatsSnapshot) -> float:
    """Total residual tuples over total scan time for the given prefix."""
    if not order:
        raise ValueError("empty permutation")
    residuals = walk_residuals(order, snapshot)
    scan = sum(snapshot.scan_cost_ms(s) for s in order)
    if scan <= 0.0:
        return 0.0
    return sum(residuals) / scan


@dataclass(frozen=True)
class CostResult:
    time_ms: float
    covered: float
    prefix_len: int
    shortfall: bool


def permutation_time_cost(
    order: Sequence[int],
    snapshot: StatsSnapshot,
    k: float,
    model: str = SEQUENTIAL,
) -> CostResult:
    """Time to collect ``k`` distinct tuples along ``order``.

    Truncates at the minimal covering prefix.  If the whole permutation
    cannot cover ``k`` the result carries the cost of scanning everything
    plus the ``shortfall`` flag instead of raising.
    """
    if model not in COST_MODELS:
        raise ValueError(f"unknown cost model {model!r}")
    if k <= 0:
        raise ValueError("k must be positive")
    walk = CoverageWalk(snapshot)
    cum = 0.0
    seq_time = 0.0
    residual_sum = 0.0
    scan_sum = 0.0
    for pos, s in enumerate(order):
        res = walk.residual(s)
        full = snapshot.scan_cost_ms(s)
        residual_sum += res
        scan_sum += full
        if cum + res >= k and res > 0.0:
            seq_time += full * (k - cum) / res
            if model == SEQUENTIAL:
                return CostResult(seq_time, cum + res, pos + 1, False)
            avg = residual_sum / scan_sum if scan_sum > 0 else 0.0
            return CostResult(k / avg, cum + res, pos + 1, False)
        seq_time += full
        cum += res
        walk.append(s)
    time = scan_sum
    return CostResult(time, cum, len(order), True)
