"""Deterministic post-processing that turns a raw commitment guess into a feasible one.

Three stages run in order: surgical repair (min-up/min-down and capacity),
economic repair (switch off surplus expensive units) and head/tail trimming of
lightly loaded block ends. Every change is recorded in a RepairTrace.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import Generator, UcInstance, check_schedule, compute_blocks, net_load, row_is_valid
from .dispatch import (Dispatch, DispatchInfeasible, balance_violation, economic_dispatch, total_cost,
                       try_dispatch)
from .formulation import MilpProblem, build_uc_milp
from .lp import LpProblem

REASONS = ("min_up", "min_down", "capacity", "ramp", "economic", "trim", "revert")
COST_TOL = 1e-9
VIOLATION_TOL = 1e-7  # MW of balance slack treated as zero
PROJECT_NODE_LIMIT = 5000


class CapacityExhausted(RuntimeError):
    """Even with every unit online, capacity plus storage cannot meet net load."""

    def __init__(self, hour: int):
        super().__init__(f"net load at hour {hour} exceeds total capacity plus storage discharge")
        self.hour = hour


class RepairFailed(RuntimeError):
    """No dispatchable schedule was reached."""


@dataclass(frozen=True)
class RepairConfig:
    """Heuristic knobs. ``None`` margins default to the storage discharge rating."""

    mu_margin: float | None = None
    eps_margin: float | None = None
    window: int = 4
    util_threshold: float | None = None  # default 0.4 * window
    order_key: Callable[[Generator], float] | None = None

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        for m in (self.mu_margin, self.eps_margin):
            if m is not None and m < 0:
                raise ValueError("margins must be >= 0")

    def margins(self, instance: UcInstance) -> tuple[float, float]:
        dis = instance.storage.p_discharge_max
        mu = dis if self.mu_margin is None else self.mu_margin
        eps = dis if self.eps_margin is None else self.eps_margin
        return mu, eps

    @property
    def threshold(self) -> float:
        return 0.4 * self.window if self.util_threshold is None else self.util_threshold

    def key(self, g: Generator) -> float:
        return (self.order_key or (lambda gen: gen.order_key))(g)


@dataclass(frozen=True)
class Edit:
    gen: int
    start: int
    end: int
    value: int
    reason: str

    def to_dict(self) -> dict:
        return {"gen": self.gen, "start": self.start, "end": self.end,
                "change": "0->1" if self.value else "1->0", "reason": self.reason}


@dataclass
class RepairTrace:
    edits: list[Edit] = field(default_factory=list)

    def replay(self, schedule) -> np.ndarray:
        s = np.array(schedule, dtype=np.int8, copy=True)
        for e in self.edits:
            s[e.gen, e.start:e.end + 1] = e.value
        return s

    def extend(self, other: "RepairTrace") -> None:
        self.edits.extend(other.edits)

    def record(self, before: np.ndarray, after: np.ndarray, reason: str) -> None:
        """Append edits for every run of changed entries between two schedules."""
        for i in np.flatnonzero(np.any(before != after, axis=1)):
            diff = before[i] != after[i]
            t = 0
            T = len(diff)
            while t < T:
                if not diff[t]:
                    t += 1
                    continue
                v = int(after[i, t])
                u = t
                while u + 1 < T and diff[u + 1] and after[i, u + 1] == v:
                    u += 1
                self.edits.append(Edit(int(i), t, u, v, reason))
                t = u + 1

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for e in self.edits:
                fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")

    def __len__(self) -> int:
        return len(self.edits)


# ---------------------------------------------------------------------- helpers

def _min_time(g: Generator, kind: str) -> int:
    return g.min_up if kind == "on" else g.min_down


def enforce_min_times(row: np.ndarray, g: Generator) -> np.ndarray:
    """Extend short blocks forward until every min-up/min-down requirement holds."""
    row = np.array(row, dtype=np.int8, copy=True)
    T = len(row)
    if T == 0:
        return row
    if row[0] != g.init_status:
        need = (g.min_up if g.init_status else g.min_down) - g.init_duration
        if need > 0:
            row[:need] = g.init_status
    while True:
        bad = None
        for b in compute_blocks(row, g.init_status, g.init_duration):
            if b.end < T - 1 and b.effective_length < _min_time(g, b.kind):
                bad = b
                break
        if bad is None:
            return row
        extra = _min_time(g, bad.kind) - bad.credit
        row[bad.start:bad.start + extra] = 1 if bad.kind == "on" else 0


def _turn_on_interval(row: np.ndarray, g: Generator, t: int) -> np.ndarray | None:
    """Shortest valid on-interval covering hour ``t`` inside its off-block.

    Ties prefer intervals touching an existing on-block, then the one centred
    closest to ``t``, then the earliest.
    """
    T = len(row)
    a = t
    while a > 0 and row[a - 1] == 0:
        a -= 1
    b = t
    while b < T - 1 and row[b + 1] == 0:
        b += 1
    for length in range(1, b - a + 2):
        best = None
        for x in range(max(a, t - length + 1), min(t, b - length + 1) + 1):
            y = x + length - 1
            cand = row.copy()
            cand[x:y + 1] = 1
            if not row_is_valid(cand, g):
                continue
            touches = (x == a and (a > 0 or g.init_status == 1)) or (y == b and b < T - 1)
            score = (0 if touches else 1, abs((x + y) / 2 - t), x)
            if best is None or score < best[0]:
                best = (score, cand)
        if best is not None:
            return best[1]
    return None


def _removal_candidates(row: np.ndarray, t: int) -> list[tuple[int, int]]:
    """Whole-block or block-shrinking removals that switch hour ``t`` off."""
    T = len(row)
    a = t
    while a > 0 and row[a - 1] == 1:
        a -= 1
    b = t
    while b < T - 1 and row[b + 1] == 1:
        b += 1
    cands = {(a, b), (a, t), (t, b)}
    return sorted(cands, key=lambda r: (r[1] - r[0], r[0]))


class _Evaluator:
    """Dispatch-and-cost helper bound to one built model."""

    def __init__(self, instance: UcInstance, problem: MilpProblem | None):
        self.instance = instance
        self.problem = problem or build_uc_milp(instance)

    def cost(self, s: np.ndarray) -> tuple[Dispatch | None, float]:
        try:
            d = economic_dispatch(self.instance, s, self.problem)
        except DispatchInfeasible:
            return None, np.inf
        return d, total_cost(self.instance, s, d)


def _accepts(new_cost: float, cur_cost: float) -> bool:
    if not np.isfinite(new_cost):
        return False
    return new_cost <= cur_cost + COST_TOL * max(1.0, abs(cur_cost))


# ------------------------------------------------------------------ the stages

def surgical_repair(instance: UcInstance, schedule, config: RepairConfig = RepairConfig(),
                    capacity_pass: bool = True) -> tuple[np.ndarray, RepairTrace]:
    """Fix min-up/min-down violations, then add cheap units until margins hold.

    Phase 1 extends every short on-block (or off-block) forward to its minimum
    length, crediting the initial status. Phase 2 walks the hours in order and
    switches on the cheapest idle units, each as a whole valid block covering the
    hour, until online capacity is at least net load plus ``mu`` and ramp-up
    capacity at least the ramp requirement plus ``mu``. Hours with non-positive
    net load, and non-positive ramp requirement for the ramp test, are skipped.

    Raises:
        CapacityExhausted: all units online still leave net load above capacity
            plus storage discharge at some hour.
    """
    s0 = check_schedule(instance, schedule).copy()
    trace = RepairTrace()
    s = s0.copy()
    for i, g in enumerate(instance.generators):
        before = s.copy()
        s[i] = enforce_min_times(s[i], g)
        if np.any(before[i] != s[i]):
            grew = np.any((before[i] == 0) & (s[i] == 1))
            trace.record(before, s, "min_up" if grew else "min_down")
    if not capacity_pass:
        return s, trace

    mu, _ = config.margins(instance)
    series = net_load(instance)
    L, R = series.net_load, series.ramp_req
    pmax = instance.gen_array("p_max")
    ru = instance.gen_array("ramp_up")
    order = sorted(range(instance.n_gen), key=lambda k: (config.key(instance.generators[k]), k))
    for t in range(instance.horizon):
        tried: set[int] = set()
        while True:
            cap = float(pmax @ s[:, t])
            rcap = float(ru @ s[:, t])
            # surplus hours (L_t <= 0) need no thermal headroom
            short_cap = L[t] > 0 and cap < L[t] + mu
            short_ramp = L[t] > 0 and R[t] > 0 and rcap < R[t] + mu
            if not (short_cap or short_ramp):
                break
            pick = None
            for i in order:
                if s[i, t] == 1 or i in tried:
                    continue
                tried.add(i)
                new_row = _turn_on_interval(s[i], instance.generators[i], t)
                if new_row is not None:
                    pick = (i, new_row)
                    break
            if pick is None:
                break
            i, new_row = pick
            before = s.copy()
            s[i] = new_row
            trace.record(before, s, "capacity" if short_cap else "ramp")
        if float(pmax @ s[:, t]) + instance.storage.p_discharge_max < L[t] - 1e-9:
            if float(pmax.sum()) + instance.storage.p_discharge_max < L[t] - 1e-9:
                raise CapacityExhausted(t)
    return s, trace


def economic_repair(instance: UcInstance, schedule, config: RepairConfig = RepairConfig(),
                    problem: MilpProblem | None = None) -> tuple[np.ndarray, RepairTrace]:
    """Switch off the most expensive surplus units hour by hour.

    A unit goes off at hour t only if capacity stays at least net load minus
    ``eps`` at every hour it is removed from, the edit keeps or shrinks whole
    blocks without breaking min-up/min-down, and the batch of edits for the hour
    still dispatches at no higher cost. Failed batches are reverted.
    """
    s = check_schedule(instance, schedule).copy()
    trace = RepairTrace()
    ev = _Evaluator(instance, problem)
    _, eps = config.margins(instance)
    L = instance.net_load
    pmax = instance.gen_array("p_max")
    _, cur_cost = ev.cost(s)
    order = sorted(range(instance.n_gen),
                   key=lambda k: (-config.key(instance.generators[k]), -k))
    for t in range(instance.horizon):
        before = s.copy()
        for i in order:
            if s[i, t] == 0:
                continue
            g = instance.generators[i]
            for a, b in _removal_candidates(s[i], t):
                cap_after = pmax @ s[:, a:b + 1] - pmax[i]
                if np.any(cap_after < L[a:b + 1] - eps):
                    continue
                cand = s[i].copy()
                cand[a:b + 1] = 0
                if not row_is_valid(cand, g):
                    continue
                s[i] = cand
                break
        if np.array_equal(before, s):
            continue
        trace.record(before, s, "economic")
        _, new_cost = ev.cost(s)
        if _accepts(new_cost, cur_cost):
            cur_cost = new_cost
        else:
            trace.record(s, before, "revert")
            s = before
    return s, trace


def utilization(p_row: np.ndarray, g: Generator, start: int, end: int) -> float:
    span = g.p_max - g.p_min
    if span <= 0:
        return 0.0
    return float(np.sum((p_row[start:end + 1] - g.p_min) / span))


def head_tail_trim(instance: UcInstance, schedule, dispatch: Dispatch,
                   config: RepairConfig = RepairConfig(),
                   problem: MilpProblem | None = None) -> tuple[np.ndarray, RepairTrace]:
    """Switch off the first/last ``window`` hours of lightly used on-blocks.

    Utilization of a window is the summed fraction of the unit's dispatchable
    range in use. Windows under the threshold are trimmed when the shortened
    block still meets min-up/min-down and the schedule still dispatches at no
    higher cost; otherwise the trim is reverted.
    """
    s = check_schedule(instance, schedule).copy()
    trace = RepairTrace()
    ev = _Evaluator(instance, problem)
    w = config.window
    thr = config.threshold
    d = dispatch
    cur_cost = total_cost(instance, s, d)
    for i, g in enumerate(instance.generators):
        spans = [(b.start, b.end) for b in compute_blocks(s[i]) if b.kind == "on"]
        for t0, t1 in spans:
            for side in ("head", "tail"):
                on = np.flatnonzero(s[i, t0:t1 + 1]) + t0
                if len(on) == 0:
                    break
                a, b = int(on[0]), int(on[-1])
                if side == "head":
                    lo, hi = a, min(a + w - 1, b)
                else:
                    lo, hi = max(b - w + 1, a), b
                if utilization(d.p[i], g, lo, hi) >= thr:
                    continue
                cand = s[i].copy()
                cand[lo:hi + 1] = 0
                if not row_is_valid(cand, g):
                    continue
                before = s.copy()
                s[i] = cand
                trace.record(before, s, "trim")
                new_d, new_cost = ev.cost(s)
                if _accepts(new_cost, cur_cost):
                    d, cur_cost = new_d, new_cost
                else:
                    trace.record(s, before, "revert")
                    s = before
    return s, trace


def _escalation_moves(instance: UcInstance, s: np.ndarray, t: int):
    """Single-unit edits touching hour ``t``: turn-ons, and removals that may split a block."""
    for i, g in enumerate(instance.generators):
        row = s[i]
        if row[t] == 0:
            new_row = _turn_on_interval(row, g, t)
            if new_row is not None:
                yield i, new_row
            continue
        spans = set(_removal_candidates(row, t))
        md = _min_time(g, "down")
        for x in range(max(0, t - md + 1), t + 1):
            spans.add((x, min(len(row) - 1, x + md - 1)))
        for a, b in sorted(spans, key=lambda r: (r[1] - r[0], r[0])):
            if not np.all(row[a:b + 1] == 1):
                continue
            cand = row.copy()
            cand[a:b + 1] = 0
            if row_is_valid(cand, g):
                yield i, cand


def _escalate(instance: UcInstance, s: np.ndarray, ev: _Evaluator, config: RepairConfig,
              trace: RepairTrace) -> tuple[np.ndarray, Dispatch | None]:
    """Greedy single-unit edits until the schedule dispatches.

    Progress is the least total power-balance slack the commitment needs. Each
    round scores every turn-on or removal touching an unbalanced hour or a
    neighbour and applies the edit with the largest strict decrease, ties going
    to the cheaper unit. Gives up when no edit helps.
    """
    rank = {k: r for r, k in enumerate(sorted(
        range(instance.n_gen), key=lambda k: (config.key(instance.generators[k]), k)))}
    T = instance.horizon
    viol, hourly = balance_violation(instance, s, ev.problem)
    for _ in range(4 * instance.n_gen * T):
        if viol <= VIOLATION_TOL:
            d = try_dispatch(instance, s, ev.problem)
            if d is not None:
                return s, d
        bad = np.flatnonzero(hourly > VIOLATION_TOL) if np.isfinite(viol) else np.arange(T)
        hours = sorted({h + k for h in bad.tolist() for k in (-1, 0, 1)} & set(range(T)))
        best = None
        seen = set()
        for t in hours:
            for i, row in _escalation_moves(instance, s, t):
                sig = (i, row.tobytes())
                if sig in seen:
                    continue
                seen.add(sig)
                cand = s.copy()
                cand[i] = row
                v, hv = balance_violation(instance, cand, ev.problem)
                turn_on = row.sum() > s[i].sum()
                key = (-v, -rank[i] if turn_on else rank[i])
                if v < viol - VIOLATION_TOL and (best is None or key > best[0]):
                    best = (key, cand, v, hv)
        if best is None:
            break
        _, cand, viol, hourly = best
        trace.record(s, cand, "capacity")
        s = cand
    d = try_dispatch(instance, s, ev.problem) if viol <= VIOLATION_TOL else None
    return s, d


def _project(instance: UcInstance, s: np.ndarray, ev: _Evaluator
             ) -> tuple[np.ndarray, Dispatch | None]:
    """Last resort: a feasible schedule at small Hamming distance from ``s``.

    Branch and bound on the UC constraints with objective sum |u - s|, stopped
    at its first incumbent. Finds a schedule whenever the instance is feasible
    and the node budget suffices.
    """
    from .milp import solve_bnb

    base = ev.problem
    c = np.zeros(base.lp.n_cols)
    c[base.block("u")] = 1.0 - 2.0 * s.ravel()
    lp = LpProblem(c, base.lp.A, base.lp.row_lb, base.lp.row_ub, base.lp.col_lb, base.lp.col_ub)
    proj = MilpProblem(lp, base.integer_cols, base.names, instance)
    res = solve_bnb(proj, gap=np.inf, heuristics=False, node_limit=PROJECT_NODE_LIMIT)
    if not res.feasible:
        return s, None
    out = res.schedule.astype(np.int8)
    return out, try_dispatch(instance, out, base)


def repair_pipeline(instance: UcInstance, schedule, config: RepairConfig = RepairConfig(),
                    problem: MilpProblem | None = None
                    ) -> tuple[np.ndarray, Dispatch, RepairTrace]:
    """Surgical, economic and trim stages with dispatch checks in between.

    The capacity pass of the surgical stage runs only when the min-time fixed
    schedule does not already dispatch. Economic repair and trimming then repeat
    until neither changes the schedule, so the result is a fixed point of the
    whole pipeline.

    Raises:
        CapacityExhausted: the instance is infeasible even with all units on.
        RepairFailed: no dispatchable schedule was found.
    """
    s_in = check_schedule(instance, schedule).copy()
    ev = _Evaluator(instance, problem)
    trace = RepairTrace()

    s, tr = surgical_repair(instance, s_in, config, capacity_pass=False)
    trace.extend(tr)
    d, cost = ev.cost(s)
    if d is None:
        s, tr = surgical_repair(instance, s, config, capacity_pass=True)
        trace.extend(tr)
        d, cost = ev.cost(s)
    if d is None:
        s, d = _escalate(instance, s, ev, config, trace)
        if d is None:
            before = s.copy()
            s, d = _project(instance, s, ev)
            trace.record(before, s, "capacity")
        if d is None:
            raise RepairFailed("no dispatchable schedule reached")
        cost = total_cost(instance, s, d)

    for _ in range(instance.n_gen * instance.horizon + 1):
        s2, tr = economic_repair(instance, s, config, ev.problem)
        trace.extend(tr)
        d2, _ = ev.cost(s2)
        s3, tr = head_tail_trim(instance, s2, d2, config, ev.problem)
        trace.extend(tr)
        if np.array_equal(s3, s):
            break
        s = s3
        d, cost = ev.cost(s)
    return s, d, trace
