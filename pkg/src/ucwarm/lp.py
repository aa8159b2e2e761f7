"""Linear programs with bounded variables and range rows.

Two solver routes share one problem type: a dense bounded-variable revised
simplex written here (``backend="simplex"``) and the HiGHS library
(``backend="highs"``), which the dispatch and branch-and-bound code use by
default because it is orders of magnitude faster on UC-sized models.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"
UNBOUNDED = "Unbounded"

TOL_FEAS = 1e-7
TOL_OBJ = 1e-8
TOL_PIVOT = 1e-9
TOL_DUAL = 1e-9
BLAND_AFTER_DEGENERATE = 1000
REFACTOR_EVERY = 50
ITER_CAP_FACTOR = 50


class NumericalFailure(RuntimeError):
    """Pivoting stalled past the iteration cap; the problem is likely ill-conditioned."""


@dataclass(frozen=True, eq=False)
class LpProblem:
    """minimize c @ x  s.t.  row_lb <= A @ x <= row_ub,  col_lb <= x <= col_ub."""

    c: np.ndarray
    A: sp.csr_matrix
    row_lb: np.ndarray
    row_ub: np.ndarray
    col_lb: np.ndarray
    col_ub: np.ndarray

    def __post_init__(self):
        m, n = self.A.shape
        if self.c.shape != (n,) or self.col_lb.shape != (n,) or self.col_ub.shape != (n,):
            raise ValueError("column data does not match constraint matrix width")
        if self.row_lb.shape != (m,) or self.row_ub.shape != (m,):
            raise ValueError("row bounds do not match constraint matrix height")
        if np.any(self.col_lb > self.col_ub) or np.any(self.row_lb > self.row_ub):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def n_rows(self) -> int:
        return self.A.shape[0]

    @property
    def n_cols(self) -> int:
        return self.A.shape[1]

    def with_col_bounds(self, col_lb: np.ndarray, col_ub: np.ndarray) -> "LpProblem":
        return LpProblem(self.c, self.A, self.row_lb, self.row_ub,
                         np.asarray(col_lb, float), np.asarray(col_ub, float))

    def with_objective(self, c: np.ndarray) -> "LpProblem":
        return LpProblem(np.asarray(c, float), self.A, self.row_lb, self.row_ub,
                         self.col_lb, self.col_ub)


def make_lp(c, A, row_lb, row_ub, col_lb, col_ub) -> LpProblem:
    return LpProblem(
        c=np.asarray(c, dtype=float),
        A=sp.csr_matrix(A, dtype=float),
        row_lb=np.asarray(row_lb, dtype=float),
        row_ub=np.asarray(row_ub, dtype=float),
        col_lb=np.asarray(col_lb, dtype=float),
        col_ub=np.asarray(col_ub, dtype=float),
    )


@dataclass(frozen=True, eq=False)
class LpSolution:
    status: str
    x: np.ndarray | None
    objective: float
    iterations: int

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def max_violation(problem: LpProblem, x: np.ndarray) -> float:
    """Largest absolute bound or row violation of ``x``."""
    ax = problem.A @ x
    parts = [
        np.maximum(problem.col_lb - x, 0.0),
        np.maximum(x - problem.col_ub, 0.0),
        np.maximum(problem.row_lb - ax, 0.0),
        np.maximum(ax - problem.row_ub, 0.0),
    ]
    return float(max((p.max() if p.size else 0.0) for p in parts))


def solve_lp(problem: LpProblem, backend: str = "simplex") -> LpSolution:
    if backend == "simplex":
        sol = _RevisedSimplex(problem).solve()
        _add_work(sol.iterations)
        return sol
    if backend == "highs":
        return _solve_highs(problem)
    raise ValueError(f"unknown LP backend {backend!r}")


# ----------------------------------------------------------------- revised simplex

class _RevisedSimplex:
    """Bounded-variable revised simplex on  A x - s = 0,  l <= (x, s) <= u.

    Phase 1 adds artificial columns only for rows violated by the starting
    point. Pricing is Dantzig's rule until BLAND_AFTER_DEGENERATE degenerate
    pivots have occurred, then Bland's rule. The basis inverse is kept dense with
    product-form updates and refactorized every REFACTOR_EVERY pivots.
    """

    def __init__(self, problem: LpProblem):
        self.p = problem
        self.iterations = 0
        self.degenerate = 0

    def solve(self) -> LpSolution:
        p = self.p
        m, n = p.A.shape
        A = p.A.toarray()
        cap = ITER_CAP_FACTOR * (m + n) + 10

        lo_x, hi_x = p.col_lb.copy(), p.col_ub.copy()
        x0 = np.where(np.isfinite(lo_x), lo_x, np.where(np.isfinite(hi_x), hi_x, 0.0))
        ax = A @ x0
        s0 = np.clip(ax, p.row_lb, p.row_ub)
        resid = ax - s0
        art_rows = np.flatnonzero(np.abs(resid) > 0.0)
        k = len(art_rows)

        # columns: x (n), s (m), artificials (k)
        M = np.zeros((m, n + m + k))
        M[:, :n] = A
        M[:, n:n + m] = -np.eye(m)
        sign = -np.sign(resid[art_rows])
        M[art_rows, n + m + np.arange(k)] = sign
        lo = np.concatenate([lo_x, p.row_lb, np.zeros(k)])
        hi = np.concatenate([hi_x, p.row_ub, np.full(k, np.inf)])
        z = np.concatenate([x0, s0, np.abs(resid[art_rows])])

        basis = np.empty(m, dtype=int)
        basis[:] = n + np.arange(m)
        basis[art_rows] = n + m + np.arange(k)
        self.M, self.lo, self.hi, self.z, self.basis = M, lo, hi, z, basis
        self.is_basic = np.zeros(n + m + k, dtype=bool)
        self.is_basic[basis] = True
        self._refactor()

        if k:
            c1 = np.zeros(n + m + k)
            c1[n + m:] = 1.0
            status = self._run(c1, cap)
            if status != OPTIMAL:
                raise NumericalFailure("phase 1 did not converge")
            infeas = float(self.z[n + m:].sum())
            if infeas > TOL_FEAS:
                return LpSolution(INFEASIBLE, None, np.nan, self.iterations)
            self.hi[n + m:] = 0.0
            nb_art = ~self.is_basic[n + m:]
            self.z[n + m:][nb_art] = 0.0

        c2 = np.concatenate([p.c, np.zeros(m + k)])
        status = self._run(c2, cap)
        if status == UNBOUNDED:
            return LpSolution(UNBOUNDED, None, -np.inf, self.iterations)
        x = self.z[:n].copy()
        return LpSolution(OPTIMAL, x, float(p.c @ x), self.iterations)

    def _refactor(self):
        B = self.M[:, self.basis]
        self.Binv = np.linalg.inv(B)
        nb = ~self.is_basic
        rhs = -(self.M[:, nb] @ self.z[nb])
        self.z[self.basis] = self.Binv @ rhs
        self.since_refactor = 0

    def _run(self, c: np.ndarray, cap: int) -> str:
        M, lo, hi, z = self.M, self.lo, self.hi, self.z
        free_nb = np.isinf(lo) & np.isinf(hi)
        while True:
            if self.iterations >= cap:
                raise NumericalFailure(f"iteration cap {cap} reached")
            basis = self.basis
            y = c[basis] @ self.Binv
            d = c - y @ M
            nb = ~self.is_basic
            at_lo = nb & (z <= lo + TOL_FEAS) & (lo < hi)
            at_hi = nb & (z >= hi - TOL_FEAS) & (lo < hi)
            mid = nb & ~at_lo & ~at_hi & (lo < hi)
            score = np.zeros_like(d)
            cand_up = (at_lo & (d < -TOL_DUAL)) | (mid & (d < -TOL_DUAL))
            cand_dn = (at_hi & (d > TOL_DUAL)) | (mid & (d > TOL_DUAL))
            # a free variable may sit at 0 and move either way
            cand_up |= free_nb & nb & (d < -TOL_DUAL)
            cand_dn |= free_nb & nb & (d > TOL_DUAL)
            cand = cand_up | cand_dn
            if not cand.any():
                return OPTIMAL
            if self.degenerate >= BLAND_AFTER_DEGENERATE:
                q = int(np.flatnonzero(cand)[0])
            else:
                score[cand] = np.abs(d[cand])
                q = int(np.argmax(score))
            direction = 1.0 if cand_up[q] else -1.0

            alpha = self.Binv @ M[:, q]
            rate = -direction * alpha  # d(xB)/d(theta)
            xb = z[basis]
            lob, hib = lo[basis], hi[basis]
            theta = hi[q] - lo[q]  # bound flip distance
            leave = -1
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = np.full(len(basis), np.inf)
                dec = rate < -TOL_PIVOT
                inc = rate > TOL_PIVOT
                ratios[dec] = (xb[dec] - lob[dec]) / -rate[dec]
                ratios[inc] = (hib[inc] - xb[inc]) / rate[inc]
            ratios = np.maximum(ratios, 0.0)
            rmin = ratios.min() if len(ratios) else np.inf
            if rmin < theta:
                ties = np.flatnonzero(ratios <= rmin + 1e-12)
                if self.degenerate >= BLAND_AFTER_DEGENERATE:
                    leave = int(ties[np.argmin(basis[ties])])
                else:
                    leave = int(ties[np.argmax(np.abs(alpha[ties]))])
                theta = ratios[leave]
            if not np.isfinite(theta):
                return UNBOUNDED

            self.iterations += 1
            if theta <= 1e-12:
                self.degenerate += 1
            z[q] += direction * theta
            z[basis] = xb + rate * theta
            if leave < 0:
                continue
            out = basis[leave]
            z[out] = lob[leave] if rate[leave] < 0 else hib[leave]
            self.is_basic[out] = False
            self.is_basic[q] = True
            basis[leave] = q
            piv = alpha[leave]
            row = self.Binv[leave] / piv
            self.Binv -= np.outer(alpha, row)
            self.Binv[leave] = row
            self.since_refactor += 1
            if self.since_refactor >= REFACTOR_EVERY:
                self._refactor()


# --------------------------------------------------------------------------- HiGHS

def highs_model(problem: LpProblem):
    import highspy

    inf = highspy.kHighsInf
    lp = highspy.HighsLp()
    A = problem.A.tocsc()
    lp.num_col_ = problem.n_cols
    lp.num_row_ = problem.n_rows
    lp.col_cost_ = problem.c
    lp.col_lower_ = np.where(np.isinf(problem.col_lb), -inf, problem.col_lb)
    lp.col_upper_ = np.where(np.isinf(problem.col_ub), inf, problem.col_ub)
    lp.row_lower_ = np.where(np.isinf(problem.row_lb), -inf, problem.row_lb)
    lp.row_upper_ = np.where(np.isinf(problem.row_ub), inf, problem.row_ub)
    lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
    lp.a_matrix_.start_ = A.indptr
    lp.a_matrix_.index_ = A.indices
    lp.a_matrix_.value_ = A.data
    return lp


def new_highs():
    import highspy

    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    h.setOptionValue("threads", 1)
    h.setOptionValue("random_seed", 0)
    h.setOptionValue("primal_feasibility_tolerance", 1e-9)
    h.setOptionValue("dual_feasibility_tolerance", 1e-9)
    return h


_work = threading.local()


def work_count() -> int:
    """Simplex iterations spent in this thread so far; a deterministic effort clock."""
    return getattr(_work, "iters", 0)


def _add_work(iters: int) -> None:
    _work.iters = work_count() + int(iters)


def highs_result(h, n_cols: int, c: np.ndarray) -> LpSolution:
    import highspy

    st = h.getModelStatus()
    iters = int(h.getInfo().simplex_iteration_count)
    _add_work(iters)
    if st == highspy.HighsModelStatus.kOptimal:
        x = np.array(h.getSolution().col_value[:n_cols])
        return LpSolution(OPTIMAL, x, float(c @ x), iters)
    if st == highspy.HighsModelStatus.kInfeasible:
        return LpSolution(INFEASIBLE, None, np.nan, iters)
    if st in (highspy.HighsModelStatus.kUnbounded, highspy.HighsModelStatus.kUnboundedOrInfeasible):
        # presolve may not separate the two cases; re-run without it to decide
        h.setOptionValue("presolve", "off")
        h.run()
        st = h.getModelStatus()
        if st == highspy.HighsModelStatus.kInfeasible:
            return LpSolution(INFEASIBLE, None, np.nan, iters)
        return LpSolution(UNBOUNDED, None, -np.inf, iters)
    raise NumericalFailure(f"HiGHS returned {h.modelStatusToString(st)}")


def _solve_highs(problem: LpProblem) -> LpSolution:
    h = new_highs()
    h.passModel(highs_model(problem))
    h.run()
    return highs_result(h, problem.n_cols, problem.c)


# ---------------------------------------------------------------------- MPS dump

def write_mps(problem: LpProblem, path: str | Path, name: str = "LP") -> None:
    """Write a free-format MPS file (fixed column order, 12 significant digits)."""
    f12 = "{:.12g}".format
    lines = [f"NAME {name}", "ROWS", " N OBJ"]
    kinds = []
    for i in range(problem.n_rows):
        lb, ub = problem.row_lb[i], problem.row_ub[i]
        if lb == ub:
            k = "E"
        elif np.isfinite(lb) and np.isfinite(ub):
            k = "G"  # range stored in RANGES
        elif np.isfinite(lb):
            k = "G"
        elif np.isfinite(ub):
            k = "L"
        else:
            k = "N"
        kinds.append(k)
        lines.append(f" {k} R{i}")
    lines.append("COLUMNS")
    A = problem.A.tocsc()
    for j in range(problem.n_cols):
        if problem.c[j] != 0:
            lines.append(f" C{j} OBJ {f12(problem.c[j])}")
        for ptr in range(A.indptr[j], A.indptr[j + 1]):
            lines.append(f" C{j} R{A.indices[ptr]} {f12(A.data[ptr])}")
    lines.append("RHS")
    for i, k in enumerate(kinds):
        rhs = problem.row_ub[i] if k == "L" else problem.row_lb[i]
        if k != "N" and rhs != 0:
            lines.append(f" RHS R{i} {f12(rhs)}")
    ranges = [i for i, k in enumerate(kinds) if k == "G"
              and np.isfinite(problem.row_ub[i]) and problem.row_lb[i] != problem.row_ub[i]]
    if ranges:
        lines.append("RANGES")
        for i in ranges:
            lines.append(f" RNG R{i} {f12(problem.row_ub[i] - problem.row_lb[i])}")
    lines.append("BOUNDS")
    for j in range(problem.n_cols):
        lb, ub = problem.col_lb[j], problem.col_ub[j]
        if lb == ub:
            lines.append(f" FX BND C{j} {f12(lb)}")
            continue
        if np.isinf(lb) and np.isinf(ub):
            lines.append(f" FR BND C{j}")
            continue
        if np.isinf(lb):
            lines.append(f" MI BND C{j}")
        elif lb != 0:
            lines.append(f" LO BND C{j} {f12(lb)}")
        if np.isfinite(ub):
            lines.append(f" UP BND C{j} {f12(ub)}")
    lines.append("ENDATA")
    Path(path).write_text("\n".join(lines) + "\n")
