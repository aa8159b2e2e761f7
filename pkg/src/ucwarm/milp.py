"""Branch-and-bound over commitment variables, plus an exhaustive oracle."""
from __future__ import annotations

import csv
import heapq
import itertools
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import UcInstance, row_is_valid, validate_schedule
from .dispatch import (DispatchInfeasible, Dispatch, commitment_cost, economic_dispatch,
                       total_cost)
from .formulation import MilpProblem, build_uc_milp
from .lp import OPTIMAL, INFEASIBLE, highs_result
from .repair import enforce_min_times

log = logging.getLogger(__name__)

DEFAULT_GAP = 0.0025
INT_TOL = 1e-6
GAP_FLOOR = 1e-9
BRUTE_FORCE_BUDGET = 24
HEURISTIC_EVERY = 10  # nodes between rounding-heuristic attempts

STATUS_OPTIMAL = "Optimal"
STATUS_AT_GAP = "FeasibleAtGap"
STATUS_INFEASIBLE = "Infeasible"
STATUS_TIME_LIMIT = "TimeLimit"
STATUS_FEASIBLE = "Feasible"  # a verified schedule with no proven bound


class BudgetExceeded(ValueError):
    pass


FixationMap = dict  # {(i, t): 0 | 1}


@dataclass
class MilpResult:
    status: str
    schedule: np.ndarray | None = None
    dispatch: Dispatch | None = None
    objective: float = float("inf")
    bound: float = -float("inf")
    gap: float = float("inf")
    nodes: int = 0
    wall_time: float = 0.0
    warm_rejected: bool = False
    fixation_relaxed: bool = False
    root_infeasible: bool = False
    warm_fallback: bool = False
    node_log: list[dict] = field(default_factory=list, repr=False)

    @property
    def feasible(self) -> bool:
        return self.schedule is not None

    def write_node_log(self, path: str | Path) -> None:
        keys = ["node", "depth", "bound", "incumbent", "fractional"]
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=keys)
            wr.writeheader()
            wr.writerows(self.node_log)


def achieved_gap(objective: float, bound: float) -> float:
    return max(0.0, (objective - bound) / max(abs(objective), GAP_FLOOR))


@dataclass(order=True)
class _Node:
    bound: float
    seq: int
    depth: int = field(compare=False)
    fixes: tuple = field(compare=False)  # ((col, value), ...)


def _apply_fixation(problem: MilpProblem, lb: np.ndarray, ub: np.ndarray,
                    fixed: FixationMap | None) -> bool:
    """Pin fixed commitments into (lb, ub); False if a fix contradicts forced bounds."""
    ok = True
    for (i, t), val in (fixed or {}).items():
        if not (0 <= i < problem.n_gen and 0 <= t < problem.horizon):
            raise KeyError(f"fixation key {(i, t)} outside the commitment grid")
        c = problem.col("u", i, t)
        v = float(val)
        if v < lb[c] or v > ub[c]:
            ok = False
        lb[c] = ub[c] = v
    return ok


def check_warm(problem: MilpProblem, warm) -> tuple[np.ndarray, Dispatch, float] | None:
    inst = problem.instance
    schedule = warm[0] if isinstance(warm, tuple) else warm
    try:
        s = np.asarray(schedule, dtype=np.int8)
        if not validate_schedule(inst, s).empty:
            return None
        d = economic_dispatch(inst, s, problem)
    except (ValueError, DispatchInfeasible):
        return None
    return s, d, total_cost(inst, s, d)


def solve_bnb(problem: MilpProblem, gap: float = DEFAULT_GAP, warm=None,
              fixed: FixationMap | None = None, node_limit: int | None = None,
              time_limit: float | None = None, heuristics: bool = True) -> MilpResult:
    """LP-based branch and bound on the commitment variables.

    Nodes are explored depth-first (rounding direction first) until the first
    incumbent, then best-bound. Branching picks the most fractional u, ties to
    the lowest (generator, hour). The search stops once the relative gap
    (objective - bound) / max(|objective|, 1e-9) is at most ``gap``.

    ``warm`` is a schedule or a ``(schedule, dispatch)`` pair; it is verified by
    validate_schedule and economic dispatch and seeds the incumbent, otherwise it
    is ignored and ``warm_rejected`` is set. ``fixed`` maps (i, t) to 0/1 and is
    applied as column bounds before the root solve. ``heuristics=False`` turns
    off the periodic rounding heuristic, which scores schedules by true cost and
    so only suits the cost objective.
    """
    t_start = time.monotonic()
    inst = problem.instance
    N, T = problem.n_gen, problem.horizon
    lp = problem.lp
    ucols = problem.integer_cols
    res = MilpResult(status=STATUS_INFEASIBLE)

    base_lb = lp.col_lb.copy()
    base_ub = lp.col_ub.copy()
    fix_ok = _apply_fixation(problem, base_lb, base_ub, fixed)

    inc_obj = np.inf
    inc_sched = None
    inc_disp = None
    if warm is not None:
        checked = check_warm(problem, warm)
        if checked is None:
            res.warm_rejected = True
            log.info("warm start rejected: not a feasible schedule")
        else:
            inc_sched, inc_disp, inc_obj = checked

    def finish(status: str, bound: float) -> MilpResult:
        res.status = status
        if inc_sched is not None:
            res.schedule, res.dispatch, res.objective = inc_sched, inc_disp, inc_obj
            res.bound = min(bound, inc_obj)
            res.gap = achieved_gap(inc_obj, res.bound)
        else:
            res.bound = bound
        res.wall_time = time.monotonic() - t_start
        return res

    if not fix_ok:
        # fixation contradicts the initial-condition forcing: the fixed problem is empty
        res.root_infeasible = True
        inc_sched = None
        return finish(STATUS_INFEASIBLE, np.inf)

    h = problem.highs()
    h.clearSolver()
    all_cols = np.arange(lp.n_cols, dtype=np.int32)
    h.changeColsBounds(lp.n_cols, all_cols, base_lb, base_ub)
    u_idx = ucols.astype(np.int32)
    u_lb0, u_ub0 = base_lb[ucols], base_ub[ucols]

    seq = itertools.count()
    stack: list[_Node] = [_Node(-np.inf, next(seq), 0, ())]
    heap: list[_Node] = []
    plunging = inc_sched is None
    inc_x = None
    last_bound = -np.inf
    status = None

    while stack or heap:
        frontier = [n.bound for n in stack] + ([heap[0].bound] if heap else [])
        gbound = max(min(frontier), last_bound)
        if inc_obj < np.inf and achieved_gap(inc_obj, gbound) <= gap:
            status = STATUS_OPTIMAL if achieved_gap(inc_obj, gbound) <= GAP_FLOOR else STATUS_AT_GAP
            break
        if node_limit is not None and res.nodes >= node_limit:
            status = STATUS_TIME_LIMIT
            break
        if time_limit is not None and time.monotonic() - t_start >= time_limit:
            status = STATUS_TIME_LIMIT
            break
        node = stack.pop() if plunging and stack else (heapq.heappop(heap) if heap else stack.pop())
        last_bound = gbound
        if node.bound >= inc_obj - _prune_tol(inc_obj):
            continue

        lo, hi = u_lb0.copy(), u_ub0.copy()
        for c, v in node.fixes:
            lo[c] = hi[c] = v
        h.changeColsBounds(len(u_idx), u_idx, lo, hi)
        h.run()
        sol = highs_result(h, lp.n_cols, lp.c)
        res.nodes += 1
        n_frac = 0
        if sol.status == OPTIMAL:
            uval = sol.x[ucols]
            frac = np.abs(uval - np.round(uval))
            n_frac = int(np.count_nonzero(frac > INT_TOL))
        res.node_log.append({
            "node": res.nodes - 1, "depth": node.depth, "bound": gbound,
            "incumbent": inc_obj, "fractional": n_frac,
        })
        if sol.status != OPTIMAL:
            if res.nodes == 1 and sol.status == INFEASIBLE:
                # the fixed problem is empty; an outside incumbent proves nothing about it
                res.root_infeasible = True
                inc_sched = None
                return finish(STATUS_INFEASIBLE, np.inf)
            continue
        obj = sol.objective
        if obj >= inc_obj - _prune_tol(inc_obj):
            continue
        if n_frac == 0:
            inc_obj, inc_x = obj, sol.x
            inc_sched = np.round(uval).astype(np.int8).reshape(N, T)
            inc_disp = None
            if plunging:
                plunging = False
                for n in stack:
                    heapq.heappush(heap, n)
                stack = []
            continue
        if heuristics and (res.nodes == 1 or res.nodes % HEURISTIC_EVERY == 0):
            found = _round_up(problem, uval)
            if found is not None and found[2] < inc_obj - _prune_tol(inc_obj):
                inc_sched, inc_disp, inc_obj = found
                inc_x = None
                if plunging:
                    plunging = False
                    for n in stack:
                        heapq.heappush(heap, n)
                    stack = []
                if node.bound >= inc_obj - _prune_tol(inc_obj) or obj >= inc_obj - _prune_tol(inc_obj):
                    continue
        # most fractional, lowest index on ties
        dist = np.abs(uval - 0.5)
        k = int(np.argmin(dist))
        c = k  # position within u block
        val = uval[k]
        up = _Node(obj, next(seq), node.depth + 1, node.fixes + ((c, 1.0),))
        down = _Node(obj, next(seq), node.depth + 1, node.fixes + ((c, 0.0),))
        first, second = (up, down) if val >= 0.5 else (down, up)
        if plunging:
            stack.append(second)
            stack.append(first)
        else:
            heapq.heappush(heap, first)
            heapq.heappush(heap, second)
    else:
        status = STATUS_OPTIMAL

    if inc_sched is not None and inc_disp is None:
        inc_disp, inc_obj = _redispatch(problem, inc_sched, inc_x, inc_obj)
    if status == STATUS_OPTIMAL and not stack and not heap:
        if inc_sched is None:
            return finish(STATUS_INFEASIBLE, np.inf)
        return finish(STATUS_OPTIMAL, inc_obj)
    frontier = [n.bound for n in stack] + [n.bound for n in heap]
    bound = max(min(frontier), last_bound) if frontier else inc_obj
    return finish(status, bound)


def _round_up(problem: MilpProblem, uval: np.ndarray):
    """Commit every unit with positive LP commitment, repair min times, dispatch."""
    inst = problem.instance
    s = (uval.reshape(problem.n_gen, problem.horizon) > INT_TOL).astype(np.int8)
    for i, g in enumerate(inst.generators):
        s[i] = enforce_min_times(s[i], g)
    try:
        d = economic_dispatch(inst, s, problem)
    except DispatchInfeasible:
        return None
    return s, d, total_cost(inst, s, d)


def _prune_tol(inc: float) -> float:
    return 1e-9 * max(1.0, abs(inc)) if np.isfinite(inc) else 0.0


def _redispatch(problem: MilpProblem, s: np.ndarray, x, obj: float):
    """Exact dispatch and cost for an integral incumbent found in the tree."""
    inst = problem.instance
    try:
        d = economic_dispatch(inst, s, problem)
    except DispatchInfeasible:  # pragma: no cover - integral LP point is dispatchable
        from .dispatch import dispatch_from_x
        return dispatch_from_x(problem, x), obj
    return d, total_cost(inst, s, d)


def solve_uc(instance: UcInstance, **kw) -> MilpResult:
    return solve_bnb(build_uc_milp(instance), **kw)


# ---------------------------------------------------------------- exhaustive oracle

def _valid_rows(gen, T: int) -> np.ndarray:
    rows = np.array(list(itertools.product((0, 1), repeat=T)), dtype=np.int8)
    keep = [row_is_valid(r, gen) for r in rows]
    return rows[np.array(keep, dtype=bool)]


def _dispatch_lower_bound(instance: UcInstance, S: np.ndarray) -> np.ndarray:
    """Per-candidate lower bound on variable cost; S has shape (K, N, T)."""
    pmin = instance.gen_array("p_min")
    pmax = instance.gen_array("p_max")
    cvar = instance.gen_array("c_var")
    need = np.maximum(instance.net_load - instance.storage.p_discharge_max, 0.0)
    base = np.einsum("i,kit->kt", pmin, S)
    cost = np.einsum("i,kit->k", cvar * pmin, S)
    rest = np.maximum(need[None, :] - base, 0.0)
    for i in np.argsort(cvar, kind="stable"):
        take = np.minimum(rest, (pmax[i] - pmin[i]) * S[:, i, :])
        cost += cvar[i] * take.sum(axis=1)
        rest -= take
    return cost


def brute_force_uc(instance: UcInstance) -> MilpResult:
    """Exact optimum by enumerating every commitment matrix.

    Candidates failing the structural check are dropped; the rest are visited in
    order of a valid cost lower bound and evaluated by economic dispatch until the
    bound reaches the best cost found. Requires N*T <= 24 and c_var >= 0.
    """
    t0 = time.monotonic()
    N, T = instance.n_gen, instance.horizon
    if N * T > BRUTE_FORCE_BUDGET:
        raise BudgetExceeded(f"N*T = {N * T} exceeds the enumeration budget of {BRUTE_FORCE_BUDGET}")
    if np.any(instance.gen_array("c_var") < 0):
        raise ValueError("brute_force_uc needs non-negative variable costs")
    per_gen = [_valid_rows(g, T) for g in instance.generators]
    idx = np.array(list(itertools.product(*[range(len(r)) for r in per_gen])), dtype=np.int64)
    res = MilpResult(status=STATUS_INFEASIBLE, gap=0.0)
    if idx.size == 0:
        res.wall_time = time.monotonic() - t0
        return res
    S = np.stack([per_gen[i][idx[:, i]] for i in range(N)], axis=1)
    cap = np.einsum("i,kit->kt", instance.gen_array("p_max"), S) + instance.storage.p_discharge_max
    S = S[np.all(cap >= instance.net_load - 1e-9, axis=1)]
    if len(S) == 0:
        res.wall_time = time.monotonic() - t0
        return res
    fixed = np.array([commitment_cost(instance, s) for s in S])
    lower = fixed + _dispatch_lower_bound(instance, S)
    order = np.lexsort((np.arange(len(S)), lower))
    problem = build_uc_milp(instance)
    best = np.inf
    for k in order:
        if lower[k] >= best - 1e-9:
            break
        res.nodes += 1
        try:
            d = economic_dispatch(instance, S[k], problem)
        except DispatchInfeasible:
            continue
        cost = total_cost(instance, S[k], d)
        if cost < best - 1e-12:
            best = cost
            res.schedule, res.dispatch = S[k].copy(), d
    if res.schedule is not None:
        res.status = STATUS_OPTIMAL
        res.objective = res.bound = best
    res.wall_time = time.monotonic() - t0
    return res
