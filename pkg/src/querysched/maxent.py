"""Entropy-based fill-in for undetected lattice cells.

Given per-source totals and a set of already-detected cells, estimates the
free cells by maximizing ``-sum(w * log(w))`` subject to one linear row per
source: the cells containing that source must add up to its total.  The
stationarity conditions factor as ``w = exp(-1) * prod(mu_i)`` over the
sources in the cell's mask, so the solver runs multiplicative row scaling
(iterative proportional fitting) seeded at ``exp(-1)``; each row update is
an exact coordinate step on the convex dual, which converges to the global
optimum whenever the rows are consistent.

Passing ``prior`` switches the seed to the prior values, in which case the
same iteration computes the generalized-KL projection of the prior onto
the row constraints, i.e. the estimate closest to the prior that matches
the new totals.  That variant backs the per-query refresh, where earlier
estimates act as the prior.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np

from .lattice import member_sources

log = logging.getLogger(__name__)

DEFAULT_REL_TOL = 1e-6
DEFAULT_MAX_ITER = 10_000


class MaxEntError(RuntimeError):
    """Raised when row scaling cannot satisfy the constraint rows.

    Carries the per-row absolute residuals and the last iterate, so
    pipelines can degrade to the best-effort estimates.
    """

    def __init__(
        self,
        message: str,
        residuals: dict[int, float],
        values: dict[int, float] | None = None,
    ):
        super().__init__(message)
        self.residuals = residuals
        self.values = values or {}


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    max_rel_residual: float
    clamped_sources: tuple[int, ...]
    skipped_sources: tuple[int, ...] = ()


def solve(
    constraints: Mapping[int, float],
    known_cells: Mapping[int, float],
    free_cells: Iterable[int],
    *,
    prior: Mapping[int, float] | None = None,
    rel_tol: float = DEFAULT_REL_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    on_clamp: Callable[[int, float], None] | None = None,
    warm_start: Mapping[int, float] | None = None,
) -> tuple[dict[int, float], SolveReport]:
    """Estimate free cell values under per-source sum constraints.

    ``constraints`` maps source id to its total; ``known_cells`` hold fixed
    and are subtracted from the rows they belong to.  Negative row
    residuals (detected cells overshooting a total) are clamped to zero
    and reported through ``on_clamp`` rather than failing.  Raises
    :class:`MaxEntError` when the residuals have not dropped below
    ``rel_tol`` (relative to each row total) after ``max_iter`` sweeps.
    """
    free = sorted(set(int(m) for m in free_cells))
    for m in free:
        if m in known_cells:
            raise ValueError(f"cell {m:#x} is both known and free")

    residuals: dict[int, float] = {}
    clamped: list[int] = []
    for s, total in sorted(constraints.items()):
        used = sum(v for m, v in known_cells.items() if (m >> s) & 1)
        resid = float(total) - used
        if resid < 0:
            clamped.append(s)
            if on_clamp is not None:
                on_clamp(s, resid)
            resid = 0.0
        residuals[s] = resid

    membership = {m: [s for s in member_sources(m) if s in residuals] for m in free}
    for m, srcs in membership.items():
        if not srcs:
            raise ValueError(f"free cell {m:#x} appears in no constraint")

    # A zero-residual row forces all its free cells to zero; removing them
    # can zero out further rows, so propagate to a fixed point.
    forced: set[int] = set()
    changed = True
    while changed:
        changed = False
        for s, resid in residuals.items():
            if resid == 0.0:
                for m in free:
                    if m not in forced and (m >> s) & 1:
                        forced.add(m)
                        changed = True

    active = [m for m in free if m not in forced]
    values = {m: 0.0 for m in forced}
    if not active:
        bad = tuple(
            s
            for s, r in sorted(residuals.items())
            if r > rel_tol * max(float(constraints[s]), 1.0)
        )
        worst = max(
            (
                r / max(float(constraints[s]), 1.0)
                for s, r in residuals.items()
            ),
            default=0.0,
        )
        return values, SolveReport(0, worst, tuple(clamped), bad)

    index = {m: i for i, m in enumerate(active)}
    if prior is not None:
        w = np.array([max(float(prior.get(m, 0.0)), 0.0) for m in active])
    else:
        w = np.full(len(active), math.exp(-1.0))
    if warm_start is not None:
        # A warm start is only valid inside the same multiplicative family:
        # strictly positive wherever the seed is, zero where it is zero.
        seeded = np.array([float(warm_start.get(m, -1.0)) for m in active])
        if np.all((seeded > 0) | (w == 0.0)) and np.all(seeded >= 0):
            w = np.where(w == 0.0, 0.0, seeded)

    # Rows with no free support, or whose whole support is pinned at zero
    # (zero prior), are vacuous for the optimization: no choice of free
    # values can move them.  Their residual is reported, not fatal.
    rows: list[tuple[int, np.ndarray, float]] = []
    skipped: list[int] = []
    for s, resid in sorted(residuals.items()):
        idx = np.array([index[m] for m in active if (m >> s) & 1], dtype=np.intp)
        reachable = idx.size > 0 and float(w[idx].sum()) > 0.0
        if reachable:
            rows.append((s, idx, resid))
        elif resid > rel_tol * max(float(constraints[s]), 1.0):
            skipped.append(s)
            log.debug("row %d residual %.6g is unreachable from the prior", s, resid)

    def residual_state() -> float:
        worst = 0.0
        for s, idx, target in rows:
            scale = max(float(constraints[s]), 1.0)
            worst = max(worst, abs(float(w[idx].sum()) - target) / scale)
        return worst

    def scaling_phase(budget: int) -> float:
        nonlocal iterations
        worst = math.inf
        window_best = math.inf
        steps = 0
        for _ in range(budget):
            iterations += 1
            steps += 1
            for _s, idx, target in rows:
                got = float(w[idx].sum())
                # Subnormal row sums would blow the factor up to inf;
                # leave such rows to the residual check, not to nans.
                if got > 1e-300 and math.isfinite(got):
                    w[idx] *= target / got
            worst = residual_state()
            if worst <= rel_tol or iterations >= max_iter:
                break
            # Plateaued residuals mean inconsistent rows; boundary-bound
            # systems keep improving a few percent per window.
            if steps % 64 == 0:
                if worst >= window_best * 0.99:
                    break
                window_best = worst
        return worst

    # Alternate cheap multiplicative sweeps with damped Newton steps on
    # the dual.  Solutions on the nonnegativity boundary are reachable
    # only asymptotically in this family, so after each stalled round the
    # cells vanishing against the row scale are pinned to zero and the
    # reduced system is polished again.
    iterations = 0
    worst_rel = math.inf
    min_target = min((t for _s, _idx, t in rows if t > 0), default=1.0)
    for pin_scale in (0.0, 1e-8, 1e-6, 1e-4, 1e-2):
        if not rows:
            worst_rel = 0.0
            break
        worst_rel = scaling_phase(min(400, max_iter))
        if worst_rel <= rel_tol or iterations >= max_iter:
            break
        worst_rel = _newton_phase(w, rows, constraints, rel_tol, max_iter, residual_state)
        if worst_rel <= rel_tol:
            break
        threshold = pin_scale * min_target
        pinned = (w > 0.0) & (w < threshold)
        if not pinned.any():
            continue
        w[pinned] = 0.0
        kept = []
        for s, idx, t in rows:
            if float(w[idx].sum()) > 0.0:
                kept.append((s, idx, t))
            elif t > rel_tol * max(float(constraints[s]), 1.0):
                # Pinning emptied a row that still wants mass: the system
                # was not feasible in the nonnegative orthant there.
                skipped.append(s)
                log.debug("row %d lost its support to pinning (target %.6g)", s, t)
        rows = kept

    if worst_rel > rel_tol:
        values.update({m: float(w[index[m]]) for m in active})
        raise MaxEntError(
            "row scaling did not converge",
            {s: abs(float(w[idx].sum()) - t) for s, idx, t in rows},
            values,
        )

    values.update({m: float(w[index[m]]) for m in active})
    return values, SolveReport(iterations, worst_rel, tuple(clamped), tuple(skipped))


def _newton_phase(w, rows, constraints, rel_tol, max_iter, residual_state) -> float:
    """Damped Newton steps on the dual until the rows balance or stall.

    The dual objective is ``sum(w) + lambda . b`` with gradient
    ``b - A w`` and Hessian ``A diag(w) A^T``; cells keep the
    multiplicative form ``w *= exp(-A^T delta)`` so zero cells stay zero.
    """
    targets = np.array([t for _s, _idx, t in rows])
    incidence = np.zeros((len(rows), w.size))
    for r, (_s, idx, _t) in enumerate(rows):
        incidence[r, idx] = 1.0
    lam = np.zeros(len(rows))

    worst = residual_state()
    best = float(w.sum() + lam @ targets)
    stagnant = 0
    best_resid = worst
    stale = 0
    for _ in range(min(max_iter, 120)):
        if worst <= rel_tol:
            break
        # On infeasible rows the dual is unbounded: h keeps shrinking
        # while the residual plateaus.  Stop chasing it.
        if worst < best_resid * 0.99:
            best_resid = worst
            stale = 0
        else:
            stale += 1
            if stale >= 8:
                break
        # Minimize the dual h = sum(w) + lambda.b: gradient b - Aw, so
        # the Newton step moves along the solved (Aw - b) direction.
        grad = incidence @ w - targets
        hess = (incidence * w) @ incidence.T
        ridge = 1e-12 * max(float(np.trace(hess)), 1.0)
        try:
            delta = np.linalg.solve(hess + ridge * np.eye(len(rows)), grad)
        except np.linalg.LinAlgError:
            break
        stepped = False
        slack = 1e-12 * max(1.0, abs(best))
        for alpha in (1.0, 0.5, 0.25, 0.125, 0.0625):
            shift = np.clip(incidence.T @ (alpha * delta), -500, 500)
            trial = w * np.exp(-shift)
            if not np.all(np.isfinite(trial)):
                continue
            lam_trial = lam + alpha * delta
            value = float(trial.sum() + lam_trial @ targets)
            if value <= best + slack:
                w[:] = trial
                lam = lam_trial
                stepped = value < best
                best = min(best, value)
                break
        if stepped:
            stagnant = 0
        else:
            stagnant += 1
            if stagnant >= 3:
                break
        worst = residual_state()
    return worst


def entropy(values: Iterable[float]) -> float:
    """``-sum(w * log(w))`` with the 0*log(0)=0 convention."""
    total = 0.0
    for v in values:
        if v > 0.0:
            total -= v * math.log(v)
    return total
