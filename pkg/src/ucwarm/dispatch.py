"""Economic dispatch for a fixed commitment and total-cost accounting."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .core import UcInstance, check_schedule, startups
from .formulation import MilpProblem, build_uc_milp, commitment_bounds
from .lp import OPTIMAL, LpProblem, highs_result, solve_lp

BALANCE_TOL = 1e-6


class DispatchInfeasible(Exception):
    """No dispatch serves the load under the given commitment.

    ``hour`` is the first hour at which the balance cannot be met given all
    earlier hours; it is computed on first access.
    """

    def __init__(self, instance: UcInstance, schedule: np.ndarray, problem: MilpProblem,
                 reason: str = ""):
        super().__init__(reason or "economic dispatch infeasible")
        self._args = (instance, schedule, problem)
        self._hour: int | None | bool = False
        self.reason = reason

    @property
    def hour(self) -> int | None:
        if self._hour is False:
            self._hour = _first_infeasible_hour(*self._args)
        return self._hour


@dataclass(frozen=True, eq=False)
class Dispatch:
    p: np.ndarray
    charge: np.ndarray
    discharge: np.ndarray
    soc: np.ndarray
    curtail: np.ndarray

    def to_csv(self, path: str | Path) -> None:
        N, T = self.p.shape
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t"] + [f"p{i}" for i in range(N)]
                        + ["charge", "discharge", "soc", "curtail"])
            for t in range(T):
                wr.writerow([t] + [repr(float(v)) for v in self.p[:, t]]
                            + [repr(float(a[t])) for a in
                               (self.charge, self.discharge, self.soc, self.curtail)])


def dispatch_from_x(problem: MilpProblem, x: np.ndarray) -> Dispatch:
    N, T = problem.n_gen, problem.horizon
    p = x[problem.block("p")].reshape(N, T)
    parts = {k: x[problem.block(k)].copy() for k in ("charge", "discharge", "soc", "curtail")}
    return Dispatch(p=np.maximum(p, 0.0), **parts)


def _solve_fixed(problem: MilpProblem, lb: np.ndarray, ub: np.ndarray, backend: str):
    if backend == "highs":
        h = problem.highs("ed")
        h.clearSolver()
        h.changeColsBounds(len(lb), np.arange(len(lb), dtype=np.int32), lb, ub)
        h.run()
        return highs_result(h, problem.lp.n_cols, problem.lp.c)
    return solve_lp(problem.lp.with_col_bounds(lb, ub), backend=backend)


def economic_dispatch(instance: UcInstance, schedule, problem: MilpProblem | None = None,
                      backend: str = "highs") -> Dispatch:
    """Least-cost dispatch of the committed units.

    Solves the UC formulation with u, v and w pinned to the schedule. This LP is
    the authoritative feasibility test for a schedule.

    Raises:
        DispatchInfeasible: the schedule cannot serve the load.
    """
    s = check_schedule(instance, schedule)
    problem = problem or build_uc_milp(instance)
    lb, ub = commitment_bounds(problem, s)
    base_lb, base_ub = problem.lp.col_lb, problem.lp.col_ub
    u = problem.block("u")
    if np.any(lb[u] < base_lb[u]) or np.any(ub[u] > base_ub[u]):
        raise DispatchInfeasible(instance, s, problem, "initial min-up/min-down forcing violated")
    sol = _solve_fixed(problem, lb, ub, backend)
    if sol.status != OPTIMAL:
        raise DispatchInfeasible(instance, s, problem, f"dispatch LP {sol.status}")
    return dispatch_from_x(problem, sol.x)


def balance_violation(instance: UcInstance, schedule, problem: MilpProblem | None = None
                      ) -> tuple[float, np.ndarray]:
    """Least total power-balance slack under the commitment, and its hourly split.

    Zero exactly when the schedule dispatches; every other constraint stays hard.
    Infinite when even slack cannot reconcile the pinned commitment (for
    example a violated initial forcing).
    """
    s = check_schedule(instance, schedule)
    problem = problem or build_uc_milp(instance)
    T = instance.horizon
    lb, ub = commitment_bounds(problem, s)
    base = problem.lp
    u = problem.block("u")
    if np.any(lb[u] < base.col_lb[u]) or np.any(ub[u] > base.col_ub[u]):
        return np.inf, np.full(T, np.inf)
    m, n = base.A.shape
    E = sp.csr_matrix((np.ones(T), (np.arange(T), np.arange(T))), shape=(m, T))
    lp = LpProblem(np.concatenate([np.zeros(n), np.ones(2 * T)]), sp.hstack([base.A, E, -E]).tocsr(),
                   base.row_lb, base.row_ub, np.concatenate([lb, np.zeros(2 * T)]),
                   np.concatenate([ub, np.full(2 * T, np.inf)]))
    sol = solve_lp(lp, backend="highs")
    if sol.status != OPTIMAL:
        return np.inf, np.full(T, np.inf)
    hourly = sol.x[n:n + T] + sol.x[n + T:]
    return float(sol.objective), hourly


def try_dispatch(instance: UcInstance, schedule, problem: MilpProblem | None = None,
                 backend: str = "highs") -> Dispatch | None:
    try:
        return economic_dispatch(instance, schedule, problem, backend)
    except DispatchInfeasible:
        return None


def _first_infeasible_hour(instance: UcInstance, s: np.ndarray, problem: MilpProblem) -> int | None:
    cap = instance.gen_array("p_max") @ s + instance.storage.p_discharge_max
    L = instance.net_load
    short = np.flatnonzero(cap < L - 1e-9)
    floor = instance.gen_array("p_min") @ s - instance.storage.p_charge_max - instance.profiles.load
    surplus = np.flatnonzero(floor > 1e-9)
    simple = sorted(set(short.tolist()) | set(surplus.tolist()))
    first_simple = simple[0] if simple else None

    # bisect on the prefix of balance rows that can be met simultaneously
    T = instance.horizon
    lb, ub = commitment_bounds(problem, s)
    lb[problem.col("soc", T - 1)] = 0.0
    base = problem.lp

    def prefix_ok(h: int) -> bool:
        rlb = base.row_lb.copy()
        rub = base.row_ub.copy()
        rlb[h + 1:T] = -np.inf
        rub[h + 1:T] = np.inf
        lp = type(base)(base.c, base.A, rlb, rub, lb, ub)
        return solve_lp(lp, backend="highs").status == OPTIMAL

    lo, hi = 0, T - 1
    if prefix_ok(hi):
        return first_simple
    while lo < hi:
        mid = (lo + hi) // 2
        if prefix_ok(mid):
            lo = mid + 1
        else:
            hi = mid
    return lo if first_simple is None else min(lo, first_simple)


def commitment_cost(instance: UcInstance, schedule) -> float:
    s = np.asarray(schedule, dtype=float)
    v = startups(instance, schedule)
    return float(instance.gen_array("c_noload") @ s.sum(axis=1)
                 + instance.gen_array("c_startup") @ v.sum(axis=1))


def total_cost(instance: UcInstance, schedule, dispatch: Dispatch) -> float:
    """Variable plus no-load plus startup cost; a unit on at t=0 and t=1 pays no startup."""
    var = float(np.sum(instance.gen_array("c_var")[:, None] * dispatch.p))
    return var + commitment_cost(instance, schedule)
