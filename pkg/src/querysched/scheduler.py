"""Deterministic event-driven execution of a query over a universe.

Three logical workers share two versioned slots.  The statistics worker
publishes refreshed snapshots as its counting queries complete; the
planner is the sole writer of the permutation slot and re-plans whenever
the statistics version or the dispatched prefix moves; the executor's
query threads consume the permutation head, pin every source they
dispatch and deduplicate arriving tuples against a shared seen-set.  All
of it is driven by one event loop keyed on (time, worker class, thread
id), so a run is a pure function of its inputs.  Planner compute is free
on the simulated clock by default; the sequential strategy instead
charges the initial sweep at a configured per-operation rate before the
first dispatch, and a config switch charges it online as well.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass

from .cost import PermState, QuerySpec, SEQUENTIAL
from .detection import DetectionTiming, online_detection_plan, prior_query_snapshot
from .lattice import StatsSnapshot
from .permutation import (
    ALGO_FULL_KNOWLEDGE,
    ALGO_ONLINE,
    ALGO_SEQUENTIAL,
    BASELINE_ALGOS,
    WorkMeter,
    baseline_order,
    covered_total,
    refine_order,
)
from .shared import StopLatch, VersionedSlot
from .simulator import ScopedProbe, SourceUnavailable, Universe

_PRIO_STATS = 0
_PRIO_QUERY = 2


@dataclass(frozen=True)
class RunConfig:
    query_threads: int = 1
    overlap_floor: float = 0.05
    prune_threshold: float = 0.005
    prune_relative: bool = True
    detection_base_ms: float = 1.5
    detection_overhead: float = 1.0
    detection_batch: int = 1
    planner_unit_ms: float = 0.01
    charge_planner_online: bool = False
    fast_sweep: bool = False  # swap only against the top-overlap candidate
    fallback_ratio: float = 1.0
    cost_model: str = SEQUENTIAL

    def timing(self) -> DetectionTiming:
        return DetectionTiming(
            base_ms=self.detection_base_ms,
            overhead_factor=self.detection_overhead,
            batch_size=self.detection_batch,
        )


@dataclass(frozen=True)
class SourceTrace:
    source: int
    dispatch_ms: float
    arrival_ms: float
    new_tuples: int
    duplicate_tuples: int


@dataclass(frozen=True)
class RunResult:
    algo: str
    k: int
    tuples_retrieved: int
    distinct_tuples: int
    simulated_time_ms: float
    planner_time_ms: float
    shortfall: bool
    per_source_trace: tuple[SourceTrace, ...]
    detections: int
    stats_versions: int
    perm_versions: int

    def to_json(self) -> str:
        payload = {
            "algo": self.algo,
            "k": self.k,
            "tuples_retrieved": self.tuples_retrieved,
            "distinct_tuples": self.distinct_tuples,
            "simulated_time_ms": round(self.simulated_time_ms, 6),
            "planner_time_ms": round(self.planner_time_ms, 6),
            "shortfall": self.shortfall,
            "detections": self.detections,
            "stats_versions": self.stats_versions,
            "perm_versions": self.perm_versions,
            "trace": [
                {
                    "source": t.source,
                    "dispatch_ms": round(t.dispatch_ms, 6),
                    "arrival_ms": round(t.arrival_ms, 6),
                    "new": t.new_tuples,
                    "dup": t.duplicate_tuples,
                }
                for t in self.per_source_trace
            ],
        }
        return json.dumps(payload, sort_keys=True)


@dataclass
class _ThreadState:
    source: int = -1
    stream: tuple[int, ...] = ()
    cursor: int = 0
    dispatch_ms: float = 0.0
    new_tuples: int = 0
    dup_tuples: int = 0
    last_event_ms: float = 0.0
    done: bool = False


class _Planner:
    """Sole writer of the permutation slot; replans lazily on demand."""

    def __init__(
        self,
        k: float,
        stats_slot: VersionedSlot[StatsSnapshot],
        config: RunConfig,
        meter: WorkMeter,
    ):
        self.k = k
        self.stats_slot = stats_slot
        self.config = config
        self.meter = meter
        self.slot: VersionedSlot[PermState] | None = None
        self._planned_stats_version = -1
        self._planned_pinned = -1

    def current(self, dispatched: tuple[int, ...]) -> tuple[PermState, int]:
        """Re-plan if stats or the pinned prefix moved; return plan + work."""
        snapshot, stats_version = self.stats_slot.read()
        if (
            self.slot is not None
            and stats_version == self._planned_stats_version
            and len(dispatched) == self._planned_pinned
        ):
            return self.slot.read()[0], 0
        before = self.meter.ops
        candidate = refine_order(
            self.k,
            snapshot,
            range(snapshot.n_sources),
            pinned_order=dispatched,
            overlap_floor=self.config.overlap_floor,
            meter=self.meter,
            top_overlap_only=self.config.fast_sweep,
        )
        work = self.meter.ops - before
        # Publish a full-universe order: estimates can overstate the
        # covering prefix, and the executor must always find a next
        # source until the target or the universe is exhausted.  The
        # tail continues greedily by rate, dead sources last by id.
        order = _extend_to_full(candidate.order, snapshot, self.meter)
        state = PermState(order, frozenset(), pinned=len(dispatched))
        if self.slot is None:
            self.slot = VersionedSlot(state)
        else:
            self.slot.publish(state)
        self._planned_stats_version = stats_version
        self._planned_pinned = len(dispatched)
        return self.slot.read()[0], work


def _extend_to_full(
    order: tuple[int, ...], snapshot: StatsSnapshot, meter: WorkMeter | None = None
) -> tuple[int, ...]:
    """Append the unselected remainder: greedy by rate, then dead by id."""
    from .cost import CoverageWalk

    n = snapshot.n_sources
    remaining = sorted(set(range(n)) - set(order))
    if not remaining:
        return order
    walk = CoverageWalk(snapshot)
    for s in order:
        walk.append(s)
    tail: list[int] = []
    while remaining:
        best = -1
        best_rate = 0.0
        for s in remaining:
            if meter is not None:
                meter.add()
            rate = walk.rate(s)
            if rate > best_rate:
                best_rate = rate
                best = s
        if best < 0:
            break
        tail.append(best)
        walk.append(best)
        remaining.remove(best)
    return order + tuple(tail) + tuple(remaining)


def run_query(
    algo: str,
    query: QuerySpec,
    universe: Universe,
    initial: StatsSnapshot,
    config: RunConfig = RunConfig(),
    seed: int = 0,
) -> RunResult:
    """Execute one query run under the named strategy.

    ``initial`` is the offline statistics snapshot (ground truth is
    substituted internally for the full-knowledge strategy).  The result
    is deterministic in (algo, query, universe, initial, config, seed).
    """
    if algo in BASELINE_ALGOS:
        return _run_fixed_order(algo, query, universe, initial, config, seed)
    if algo == ALGO_FULL_KNOWLEDGE:
        truth = universe.truth_snapshot(query.predicate_id)
        return _run_adaptive(algo, query, universe, truth, config, online_stats=False)
    if algo == ALGO_ONLINE:
        return _run_adaptive(algo, query, universe, initial, config, online_stats=True)
    if algo == ALGO_SEQUENTIAL:
        return _run_adaptive(
            algo, query, universe, initial, config, online_stats=True, charge_first_sweep=True
        )
    raise ValueError(f"unknown algorithm {algo!r}")


def _run_fixed_order(
    algo: str,
    query: QuerySpec,
    universe: Universe,
    initial: StatsSnapshot,
    config: RunConfig,
    seed: int,
) -> RunResult:
    prior = prior_query_snapshot(initial, config.fallback_ratio)
    order = baseline_order(algo, prior, seed=seed)
    executor = _Executor(query, universe, config)
    executor.run_fixed(order)
    return executor.result(algo, planner_time=0.0, detections=0, stats_versions=1, perm_versions=1)


def _all_source_hint(initial: StatsSnapshot, config: RunConfig) -> tuple[int, ...]:
    """Offline all-source permutation used as the detection order."""
    full_coverage = covered_total(range(initial.n_sources), initial)
    candidate = refine_order(
        max(full_coverage, 1.0),
        initial,
        range(initial.n_sources),
        overlap_floor=config.overlap_floor,
    )
    missing = [s for s in range(initial.n_sources) if s not in set(candidate.order)]
    return candidate.order + tuple(sorted(missing))


def _run_adaptive(
    algo: str,
    query: QuerySpec,
    universe: Universe,
    initial: StatsSnapshot,
    config: RunConfig,
    *,
    online_stats: bool,
    charge_first_sweep: bool = False,
) -> RunResult:
    stop = StopLatch()
    meter = WorkMeter()
    detections = 0

    if online_stats:
        probe = ScopedProbe(universe, query.predicate_id)
        hint = _all_source_hint(initial, config)
        plan = online_detection_plan(
            query, initial, hint, probe, config.timing(),
            fallback_ratio=config.fallback_ratio,
        )
        _, prior, _ = next(plan)
    else:
        plan = None
        prior = initial

    stats_slot: VersionedSlot[StatsSnapshot] = VersionedSlot(prior, version=1)
    planner = _Planner(query.k, stats_slot, config, meter)

    qe_start = 0.0
    planner_charge = 0.0
    if charge_first_sweep:
        _, work = planner.current(())
        planner_charge = work * config.planner_unit_ms
        qe_start = planner_charge

    executor = _Executor(query, universe, config)
    stats_versions = 1

    events: list[tuple[float, int, int, int]] = []
    seq = 0

    def push(time_ms: float, prio: int, tid: int) -> None:
        nonlocal seq
        heapq.heappush(events, (time_ms, prio, tid, seq))
        seq += 1

    # A source answers one request at a time: a counting query in flight
    # delays the executor's contact with that source and an executor scan
    # stalls the stats worker.  Bookings hold the probe-side busy windows;
    # scan ownership lives in the executor.
    probe_busy_until: dict[int, float] = {}
    pending: tuple[float, StatsSnapshot, int] | None = None
    sc_in_flight = False

    def pull_next_detection() -> None:
        nonlocal pending
        if plan is None:
            pending = None
            return
        try:
            cost, snapshot, target = next(plan)
        except StopIteration:
            pending = None
            return
        pending = (cost, snapshot, target)

    def try_start_detection(now_ms: float) -> None:
        """Begin the pending probe unless its source is being scanned."""
        nonlocal sc_in_flight
        if sc_in_flight or pending is None or stop.is_set():
            return
        cost, _snapshot, target = pending
        if target >= 0 and executor.scanning(target):
            return  # retried after any scan completes
        sc_in_flight = True
        if target >= 0:
            probe_busy_until[target] = now_ms + cost
        push(now_ms + cost, _PRIO_STATS, -1)

    pull_next_detection()
    try_start_detection(0.0)
    for tid in range(config.query_threads):
        push(qe_start, _PRIO_QUERY, tid)

    while events and not stop.is_set():
        time_ms, prio, tid, _ = heapq.heappop(events)
        if prio == _PRIO_STATS:
            sc_in_flight = False
            if pending is not None:
                stats_slot.publish(pending[1])
                stats_versions += 1
                detections += 1
            pull_next_detection()
            try_start_detection(time_ms)
            continue
        # query-thread event: either a dispatch (idle) or one tuple arrival
        state = executor.threads[tid]
        if state.source < 0:
            plan_state, work = planner.current(tuple(executor.dispatched))
            delay = work * config.planner_unit_ms if config.charge_planner_online else 0.0
            started = executor.dispatch(
                tid, plan_state, time_ms + delay, probe_busy_until
            )
            if started is None:
                state.done = True
                state.last_event_ms = time_ms
                if all(t.done for t in executor.threads):
                    break
            else:
                push(started, _PRIO_QUERY, tid)
        else:
            source = state.source
            finished = executor.on_tuple(tid, time_ms, stop)
            if stop.is_set():
                break
            if finished:
                try_start_detection(time_ms)
                push(time_ms, _PRIO_QUERY, tid)  # same-time dispatch of next source
            else:
                push(time_ms + universe.sources[source].per_tuple_ms, _PRIO_QUERY, tid)

    perm_versions = 1 if planner.slot is None else planner.slot.version + 1
    return executor.result(
        algo,
        planner_time=planner_charge,
        detections=detections,
        stats_versions=stats_versions,
        perm_versions=perm_versions,
    )


class _Executor:
    """Query-thread bookkeeping: dispatch, dedup, trace, termination."""

    def __init__(self, query: QuerySpec, universe: Universe, config: RunConfig):
        self.query = query
        self.universe = universe
        self.config = config
        self.scope = query.predicate_id
        self.threads = [_ThreadState() for _ in range(config.query_threads)]
        self.dispatched: list[int] = []
        self.seen: set[int] = set()
        self.distinct = 0
        self.transferred = 0
        self.traces: list[SourceTrace] = []
        self.end_ms = 0.0
        self.reached_target = False

    # -- dispatch -----------------------------------------------------

    def next_source(self, plan: PermState) -> int | None:
        taken = set(self.dispatched)
        for s in plan.order:
            if s not in taken:
                return s
        return None

    def scanning(self, source: int) -> bool:
        return any(t.source == source for t in self.threads)

    def dispatch(
        self,
        tid: int,
        plan: PermState,
        now_ms: float,
        probe_busy_until: dict[int, float] | None = None,
    ) -> float | None:
        """Start the next undispatched source; None when exhausted.

        Contact waits for any in-flight counting query on that source.
        """
        source = self.next_source(plan)
        if source is None:
            return None
        state = self.threads[tid]
        self.dispatched.append(source)
        start_ms = now_ms
        if probe_busy_until is not None:
            start_ms = max(start_ms, probe_busy_until.get(source, 0.0))
        state.source = source
        state.cursor = 0
        state.dispatch_ms = start_ms
        state.new_tuples = 0
        state.dup_tuples = 0
        src = self.universe.sources[source]
        try:
            state.stream = self.universe.tuple_stream(source, self.scope)
        except SourceUnavailable:
            state.stream = ()
        contact_done = start_ms + src.access_ms
        state.last_event_ms = contact_done
        if not state.stream:
            self._finish_source(tid, contact_done)
            return contact_done  # next event is the follow-up dispatch
        return contact_done + src.per_tuple_ms  # first tuple arrival

    def on_tuple(self, tid: int, now_ms: float, stop: StopLatch) -> bool:
        """Process one tuple arrival; True when the source is finished."""
        state = self.threads[tid]
        tuple_id = state.stream[state.cursor]
        state.cursor += 1
        state.last_event_ms = now_ms
        self.transferred += 1
        if tuple_id in self.seen:
            state.dup_tuples += 1
        else:
            self.seen.add(tuple_id)
            state.new_tuples += 1
            self.distinct += 1
            if self.distinct >= self.query.k:
                self.reached_target = True
                self.end_ms = now_ms
                self._finish_source(tid, now_ms)
                self._flush_active(now_ms, skip=tid)
                stop.set()
                return True
        if state.cursor >= len(state.stream):
            self._finish_source(tid, now_ms)
            return True
        return False

    def run_fixed(self, order: tuple[int, ...]) -> None:
        """Execute a fixed dispatch order without planner or stats events."""
        events: list[tuple[float, int, int]] = []
        seq = 0
        cursor = 0
        stop = StopLatch()

        def dispatch(tid: int, now: float) -> None:
            nonlocal cursor, seq
            if cursor >= len(order):
                self.threads[tid].done = True
                self.threads[tid].last_event_ms = max(
                    self.threads[tid].last_event_ms, now
                )
                return
            source = order[cursor]
            cursor += 1
            state = self.threads[tid]
            self.dispatched.append(source)
            state.source = source
            state.cursor = 0
            state.dispatch_ms = now
            state.new_tuples = 0
            state.dup_tuples = 0
            src = self.universe.sources[source]
            try:
                state.stream = self.universe.tuple_stream(source, self.scope)
            except SourceUnavailable:
                state.stream = ()
            contact = now + src.access_ms
            state.last_event_ms = contact
            if not state.stream:
                self._finish_source(tid, contact)
                dispatch(tid, contact)
            else:
                heapq.heappush(events, (contact + src.per_tuple_ms, tid, seq))
                seq += 1

        for tid in range(self.config.query_threads):
            dispatch(tid, 0.0)
        while events and not stop.is_set():
            now, tid, _ = heapq.heappop(events)
            finished = self.on_tuple(tid, now, stop)
            if stop.is_set():
                break
            state = self.threads[tid]
            if finished:
                dispatch(tid, now)
            else:
                heapq.heappush(
                    events, (now + self.universe.sources[state.source].per_tuple_ms, tid, seq)
                )
                seq += 1

    # -- bookkeeping ---------------------------------------------------

    def _finish_source(self, tid: int, arrival_ms: float) -> None:
        state = self.threads[tid]
        self.traces.append(
            SourceTrace(state.source, state.dispatch_ms, arrival_ms, state.new_tuples, state.dup_tuples)
        )
        state.source = -1
        state.stream = ()
        state.last_event_ms = arrival_ms

    def _flush_active(self, now_ms: float, skip: int) -> None:
        for tid, state in enumerate(self.threads):
            if tid != skip and state.source >= 0:
                self._finish_source(tid, min(state.last_event_ms, now_ms))

    def result(
        self,
        algo: str,
        planner_time: float,
        detections: int,
        stats_versions: int,
        perm_versions: int,
    ) -> RunResult:
        if self.reached_target:
            total = self.end_ms
        else:
            total = max((t.last_event_ms for t in self.threads), default=0.0)
            self.end_ms = total
        return RunResult(
            algo=algo,
            k=self.query.k,
            tuples_retrieved=self.transferred,
            distinct_tuples=self.distinct,
            simulated_time_ms=total,
            planner_time_ms=planner_time,
            shortfall=not self.reached_target,
            per_source_trace=tuple(self.traces),
            detections=detections,
            stats_versions=stats_versions,
            perm_versions=perm_versions,
        )
