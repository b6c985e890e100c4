"""Two-stage statistics collection against simulator ground truth."""

import pytest

from querysched.cost import QuerySpec
from querysched.detection import (
    DetectionTiming,
    initial_detection,
    online_detection,
    online_detection_plan,
    prior_query_snapshot,
    scale_partial_cardinalities,
)
from querysched.lattice import DETECTED, ESTIMATED, PRUNED
from querysched.simulator import (
    SCOPE_ALL,
    SCOPE_FOCUS,
    ReplicationModel,
    ScopedProbe,
    UniverseConfig,
    demo_universe,
    generate,
)

DEMO_EXACT = {0b001: 10, 0b010: 80, 0b100: 60, 0b011: 35, 0b101: 5, 0b110: 10, 0b111: 0}


def residuals_ok(snapshot, rel=1e-6):
    for s in range(snapshot.n_sources):
        total = sum(
            c.value
            for m, c in snapshot.cells.items()
            if c.provenance != PRUNED and (m >> s) & 1
        )
        target = snapshot.cardinalities[s]
        if abs(total - target) > rel * max(target, 1.0):
            return False, s, total, target
    return True, None, None, None


class TestInitialDetection:
    def test_zero_threshold_reproduces_reference_lattice(self):
        probe = ScopedProbe(demo_universe(), SCOPE_ALL)
        out = initial_detection(probe, 0.0)
        got = {m: c.value for m, c in out.snapshot.cells.items()}
        assert got == pytest.approx(DEMO_EXACT)
        # Everything except the deepest cell is detected outright.
        assert out.snapshot.cells[0b011].provenance == DETECTED
        assert out.snapshot.cells[0b111].provenance == ESTIMATED

    def test_single_source_needs_no_solver(self):
        config = UniverseConfig(
            n_sources=1,
            n_distinct=30,
            total_tuples=30,
            overlap=ReplicationModel(style="uniform", mean_depth=1.0, max_depth=1),
        )
        u = generate(config, 2)
        out = initial_detection(ScopedProbe(u, SCOPE_ALL), 0.0)
        assert {m: c.value for m, c in out.snapshot.cells.items()} == {0b1: 30.0}

    def test_zero_threshold_matches_truth_on_random_universes(self):
        for seed, n in [(0, 3), (1, 5), (2, 7), (3, 9)]:
            config = UniverseConfig(
                n_sources=n,
                n_distinct=70,
                total_tuples=210,
                overlap=ReplicationModel(style="uniform", mean_depth=3.0, max_depth=min(5, n)),
            )
            u = generate(config, seed)
            out = initial_detection(ScopedProbe(u, SCOPE_ALL), 0.0)
            truth = u.truth.cells(SCOPE_ALL)
            got = {m: c.value for m, c in out.snapshot.cells.items() if c.value > 0}
            assert got == pytest.approx(truth)

    def test_pruning_marks_cells_and_keeps_detected_values(self):
        # Threshold at 20% of the universe (50 tuples): the smallest
        # source's singleton estimate is pruned before detection, the two
        # larger ones are detected, and no pair survives the next round.
        u = demo_universe()
        out = initial_detection(ScopedProbe(u, SCOPE_ALL), 0.2)
        cells = out.snapshot.cells
        assert cells[0b001].provenance == PRUNED
        assert cells[0b001].value == 0.0
        assert cells[0b010].provenance == DETECTED
        assert cells[0b010].value == 80.0
        assert cells[0b100].value == 60.0
        assert all(c.provenance == PRUNED for m, c in cells.items() if bin(m).count("1") == 2)
        assert out.snapshot.prune_threshold == 0.2

    def test_detected_value_below_threshold_is_kept(self):
        # The exclusive mass of the first source (10) sits below the 12.5
        # threshold, but its pre-detection estimate (the cardinality) does
        # not, so it is detected and the exact value is never re-pruned.
        u = demo_universe()
        out = initial_detection(ScopedProbe(u, SCOPE_ALL), 0.05)
        cells = out.snapshot.cells
        assert cells[0b001].provenance == DETECTED
        assert cells[0b001].value == 10.0

    def test_unavailable_source_zeroed_not_fatal(self):
        u = demo_universe().with_unavailable([1])
        out = initial_detection(ScopedProbe(u, SCOPE_ALL), 0.0)
        assert out.unavailable == (1,)
        assert out.snapshot.cardinalities[1] == 0.0
        # Every cell touching the dead source reads zero; its row stays
        # consistent even though its partners' rows degrade.
        for m, c in out.snapshot.cells.items():
            if (m >> 1) & 1:
                assert c.value == 0.0
        assert out.snapshot.cells[0b100].value == 60.0

    def test_sampling_scales_counts(self):
        config = UniverseConfig(
            n_sources=4,
            n_distinct=400,
            total_tuples=800,
            overlap=ReplicationModel(style="uniform", mean_depth=2.0, max_depth=3),
        )
        u = generate(config, 8)
        probe = ScopedProbe(u, SCOPE_ALL, sample_rate=0.5, sample_seed=8)
        out = initial_detection(probe, 0.0, sample_rate=0.5)
        truth_cards = [u.cardinality(s, SCOPE_ALL) for s in range(4)]
        for s in range(4):
            assert out.snapshot.cardinalities[s] == pytest.approx(truth_cards[s], rel=0.25)

    def test_zero_threshold_refuses_large_universe(self):
        config = UniverseConfig(
            n_sources=20,
            n_distinct=40,
            total_tuples=60,
            overlap=ReplicationModel(style="uniform", mean_depth=1.5, max_depth=2),
        )
        u = generate(config, 1)
        with pytest.raises(ValueError, match="2\\^"):
            initial_detection(ScopedProbe(u, SCOPE_ALL), 0.0)


class TestCardinalityScaling:
    def test_single_ratio(self):
        got = scale_partial_cardinalities({0: 50.0}, [100.0, 200.0], [0, 1])
        assert got[1] == pytest.approx(100.0)

    def test_identity_ratios(self):
        initial = [40.0, 60.0, 80.0]
        got = scale_partial_cardinalities({0: 40.0, 1: 60.0}, initial, [0, 1, 2])
        assert got == pytest.approx(initial)

    def test_two_ratio_average(self):
        got = scale_partial_cardinalities(
            {0: 40.0, 1: 60.0}, [100.0, 100.0, 100.0], [0, 1, 2]
        )
        assert got[2] == pytest.approx(50.0)

    def test_zero_initial_detected_is_skipped(self):
        got = scale_partial_cardinalities(
            {0: 10.0, 1: 30.0}, [0.0, 100.0, 100.0], [0, 1, 2]
        )
        assert got[2] == pytest.approx(30.0)

    def test_fallback_when_no_usable_ratio(self):
        got = scale_partial_cardinalities({0: 5.0}, [0.0, 80.0], [0, 1], fallback_ratio=1.0)
        assert got == pytest.approx([5.0, 80.0])


class TestOnlineDetection:
    def make_universe(self, split=1.0, seed=7):
        return demo_universe(seed=seed, query_split=split)

    def test_stop_before_any_detection_yields_prior_only(self):
        u = self.make_universe()
        initial = initial_detection(ScopedProbe(u, SCOPE_ALL), 0.0).snapshot
        stream = list(
            online_detection(
                QuerySpec(SCOPE_FOCUS, 50),
                initial,
                (0, 1, 2),
                lambda: True,
                ScopedProbe(u, SCOPE_FOCUS),
            )
        )
        assert len(stream) == 1
        prior = prior_query_snapshot(initial)
        assert stream[0].cardinalities == prior.cardinalities

    def test_query_matching_everything_converges_to_initial(self):
        u = self.make_universe(split=1.0)
        initial = initial_detection(ScopedProbe(u, SCOPE_ALL), 0.0).snapshot
        snaps = list(
            online_detection(
                QuerySpec(SCOPE_FOCUS, 50),
                initial,
                (0, 1, 2),
                lambda: False,
                ScopedProbe(u, SCOPE_FOCUS),
            )
        )
        live = {m: c.value for m, c in initial.cells.items() if c.provenance != PRUNED}
        for snap in snaps:
            if snap.stage == "online-substage-1":
                got = {m: c.value for m, c in snap.cells.items() if c.provenance != PRUNED}
                for m, v in live.items():
                    assert got[m] == pytest.approx(v, rel=1e-6, abs=1e-6)

    def test_half_split_final_snapshot_matches_focus_truth(self):
        u = self.make_universe(split=0.5, seed=11)
        initial = initial_detection(ScopedProbe(u, SCOPE_ALL), 0.0).snapshot
        snaps = list(
            online_detection(
                QuerySpec(SCOPE_FOCUS, 50),
                initial,
                (0, 1, 2),
                lambda: False,
                ScopedProbe(u, SCOPE_FOCUS),
            )
        )
        final = snaps[-1]
        assert final.stage == "final"
        truth = u.truth.cells(SCOPE_FOCUS)
        for m, c in final.cells.items():
            if c.provenance == PRUNED:
                continue
            assert c.value == pytest.approx(truth.get(m, 0.0), abs=1e-9)

    def test_residuals_within_tolerance_on_every_snapshot(self):
        u = self.make_universe(split=0.5, seed=13)
        initial = initial_detection(ScopedProbe(u, SCOPE_ALL), 0.0).snapshot
        for snap in online_detection(
            QuerySpec(SCOPE_FOCUS, 50),
            initial,
            (0, 1, 2),
            lambda: False,
            ScopedProbe(u, SCOPE_FOCUS),
        ):
            ok, s, total, target = residuals_ok(snap)
            assert ok, (snap.stage, s, total, target)

    def test_substage2_detects_in_descending_gap_order(self):
        u = self.make_universe(split=0.5, seed=17)
        initial = initial_detection(ScopedProbe(u, SCOPE_ALL), 0.0).snapshot
        plan = online_detection_plan(
            QuerySpec(SCOPE_FOCUS, 50),
            initial,
            (0, 1, 2),
            ScopedProbe(u, SCOPE_FOCUS),
            DetectionTiming(),
        )
        entry_estimates = None
        detected_order = []
        prev_known = set()
        for _cost, snap, _src in plan:
            if snap.stage in ("online-substage-2", "final"):
                if entry_estimates is None and snap.stage == "online-substage-2":
                    pass
                known = {m for m, c in snap.cells.items() if c.provenance == DETECTED}
                new = known - prev_known
                detected_order.extend(sorted(new))
                prev_known = known
        # Recompute the entry gaps: estimates right after the last
        # cardinality detection vs the offline values.
        sub1 = []
        plan2 = online_detection_plan(
            QuerySpec(SCOPE_FOCUS, 50),
            initial,
            (0, 1, 2),
            ScopedProbe(u, SCOPE_FOCUS),
            DetectionTiming(),
        )
        for _cost, snap, _src in plan2:
            sub1.append(snap)
            if len(sub1) == 1 + initial.n_sources:
                break
        entry = sub1[-1]
        live = {m: c.value for m, c in initial.cells.items() if c.provenance != PRUNED}
        gaps = {
            m: abs(entry.cells[m].value - live[m]) for m in live
        }
        seen_gaps = [gaps[m] for m in detected_order if m in gaps]
        assert all(a >= b - 1e-9 for a, b in zip(seen_gaps, seen_gaps[1:]))

    def test_detection_plan_reports_probed_sources(self):
        u = self.make_universe()
        initial = initial_detection(ScopedProbe(u, SCOPE_ALL), 0.0).snapshot
        plan = online_detection_plan(
            QuerySpec(SCOPE_FOCUS, 50),
            initial,
            (2, 0, 1),
            ScopedProbe(u, SCOPE_FOCUS),
            DetectionTiming(base_ms=4.0, overhead_factor=1.5),
        )
        steps = list(plan)
        assert steps[0][0] == 0.0 and steps[0][2] == -1
        # Cardinality probes follow the hinted order at the stretched cost.
        assert [s for _c, _snap, s in steps[1:4]] == [2, 0, 1]
        assert steps[1][0] == pytest.approx(6.0)
        # Cell probes name a member source of the probed cell.
        for cost, snap, src in steps[4:]:
            assert src in range(3)

    def test_batched_cell_detection(self):
        u = self.make_universe(split=0.5, seed=19)
        initial = initial_detection(ScopedProbe(u, SCOPE_ALL), 0.0).snapshot
        timing = DetectionTiming(base_ms=2.0, batch_size=4)
        steps = list(
            online_detection_plan(
                QuerySpec(SCOPE_FOCUS, 50),
                initial,
                (0, 1, 2),
                ScopedProbe(u, SCOPE_FOCUS),
                timing,
            )
        )
        final = steps[-1][1]
        assert final.stage == "final"
        live = [m for m, c in initial.cells.items() if c.provenance != PRUNED]
        cell_steps = steps[1 + initial.n_sources :]
        assert len(cell_steps) == (len(live) + 3) // 4
