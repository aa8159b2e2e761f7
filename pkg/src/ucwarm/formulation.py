"""UC MILP construction (three-binary commitment formulation, copper plate)."""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .core import UcInstance
from .lp import LpProblem


@dataclass(frozen=True, eq=False)
class MilpProblem:
    """An LP relaxation plus the indices of its binary columns.

    Column layout, with N generators and horizon T (all blocks row-major in
    generator then hour): u, v, w, p (N*T each), then charge, discharge, soc and
    curtail (T each).
    """

    lp: LpProblem
    integer_cols: np.ndarray
    names: tuple[str, ...]
    instance: UcInstance
    _local: threading.local = field(default_factory=threading.local, repr=False)

    @property
    def n_gen(self) -> int:
        return self.instance.n_gen

    @property
    def horizon(self) -> int:
        return self.instance.horizon

    def block(self, name: str) -> slice:
        N, T = self.n_gen, self.horizon
        nt = N * T
        offsets = {"u": 0, "v": nt, "w": 2 * nt, "p": 3 * nt}
        if name in offsets:
            return slice(offsets[name], offsets[name] + nt)
        k = ("charge", "discharge", "soc", "curtail").index(name)
        start = 4 * nt + k * T
        return slice(start, start + T)

    def col(self, name: str, i: int, t: int | None = None) -> int:
        """Column index of ``name`` for generator ``i`` at hour ``t`` (storage: col(name, t))."""
        if t is None:
            return self.block(name).start + i
        return self.block(name).start + i * self.horizon + t

    def highs(self, role: str = "bnb"):
        """Thread-local persistent HiGHS instance holding this model, one per ``role``."""
        from .lp import highs_model, new_highs

        cache = self._local.__dict__.setdefault("highs", {})
        h = cache.get(role)
        if h is None:
            h = new_highs()
            h.passModel(highs_model(self.lp))
            cache[role] = h
        return h


def expected_size(instance: UcInstance) -> int:
    return 4 * instance.n_gen * instance.horizon + 4 * instance.horizon


def build_uc_milp(instance: UcInstance) -> MilpProblem:
    """Assemble the unit-commitment MILP for ``instance``.

    Constraints: power balance with storage and curtailment, output bands tied to
    commitment, ramp limits with startup/shutdown allowances, commitment logic,
    min-up/min-down windows with initial-condition forcing, storage energy
    recursion with terminal SOC floor, and curtailment capped by renewables.
    """
    N, T = instance.n_gen, instance.horizon
    nt = N * T
    n = 4 * nt + 4 * T
    st = instance.storage
    gens = instance.generators
    L = instance.net_load

    U, V, W, P = 0, nt, 2 * nt, 3 * nt
    CH, DIS, SOC, CUR = 4 * nt, 4 * nt + T, 4 * nt + 2 * T, 4 * nt + 3 * T

    def ix(base, i, t):
        return base + i * T + t

    rows, cols, vals = [], [], []
    rlb, rub = [], []
    r = 0

    def add_row(entries, lo, hi):
        nonlocal r
        for c, v in entries:
            rows.append(r)
            cols.append(c)
            vals.append(v)
        rlb.append(lo)
        rub.append(hi)
        r += 1

    inf = np.inf
    # (a) balance
    for t in range(T):
        e = [(ix(P, i, t), 1.0) for i in range(N)]
        e += [(DIS + t, 1.0), (CH + t, -1.0), (CUR + t, -1.0)]
        add_row(e, L[t], L[t])

    for i, g in enumerate(gens):
        for t in range(T):
            # (b) output band
            add_row([(ix(P, i, t), 1.0), (ix(U, i, t), -g.p_min)], 0.0, inf)
            add_row([(ix(P, i, t), 1.0), (ix(U, i, t), -g.p_max)], -inf, 0.0)
            # (c) ramping
            if t == 0:
                add_row([(ix(P, i, 0), 1.0), (ix(V, i, 0), -g.startup_ramp)],
                        -inf, g.init_power + g.ramp_up * g.init_status)
                add_row([(ix(P, i, 0), -1.0), (ix(U, i, 0), -g.ramp_down),
                         (ix(W, i, 0), -g.shutdown_ramp)], -inf, -g.init_power)
            else:
                add_row([(ix(P, i, t), 1.0), (ix(P, i, t - 1), -1.0),
                         (ix(U, i, t - 1), -g.ramp_up), (ix(V, i, t), -g.startup_ramp)],
                        -inf, 0.0)
                add_row([(ix(P, i, t - 1), 1.0), (ix(P, i, t), -1.0),
                         (ix(U, i, t), -g.ramp_down), (ix(W, i, t), -g.shutdown_ramp)],
                        -inf, 0.0)
            # (d) logic
            e = [(ix(U, i, t), 1.0), (ix(V, i, t), -1.0), (ix(W, i, t), 1.0)]
            if t == 0:
                add_row(e, float(g.init_status), float(g.init_status))
            else:
                add_row(e + [(ix(U, i, t - 1), -1.0)], 0.0, 0.0)
            # (e) minimum up / down windows
            up = [(ix(V, i, tau), 1.0) for tau in range(max(0, t - g.min_up + 1), t + 1)]
            add_row(up + [(ix(U, i, t), -1.0)], -inf, 0.0)
            dn = [(ix(W, i, tau), 1.0) for tau in range(max(0, t - g.min_down + 1), t + 1)]
            add_row(dn + [(ix(U, i, t), 1.0)], -inf, 1.0)

    # (f) storage energy recursion
    for t in range(T):
        e = [(SOC + t, 1.0), (CH + t, -st.eff_charge), (DIS + t, 1.0 / st.eff_discharge)]
        if t == 0:
            add_row(e, st.soc_init, st.soc_init)
        else:
            add_row(e + [(SOC + t - 1, -1.0)], 0.0, 0.0)

    A = sp.csr_matrix((vals, (rows, cols)), shape=(r, n))

    lb = np.zeros(n)
    ub = np.zeros(n)
    ub[U:P] = 1.0
    for i, g in enumerate(gens):
        ub[ix(P, i, 0):ix(P, i, 0) + T] = g.p_max
        if g.init_status == 1 and g.init_duration < g.min_up:
            k = min(T, g.min_up - g.init_duration)
            lb[ix(U, i, 0):ix(U, i, 0) + k] = 1.0
        if g.init_status == 0 and g.init_duration < g.min_down:
            k = min(T, g.min_down - g.init_duration)
            ub[ix(U, i, 0):ix(U, i, 0) + k] = 0.0
    ub[CH:CH + T] = st.p_charge_max
    ub[DIS:DIS + T] = st.p_discharge_max
    ub[SOC:SOC + T] = st.energy_cap
    # (f) terminal state of charge floor
    lb[SOC + T - 1] = st.soc_init
    # (g) curtailment limited to available renewables
    ub[CUR:CUR + T] = instance.profiles.solar + instance.profiles.wind

    c = np.zeros(n)
    for i, g in enumerate(gens):
        c[ix(P, i, 0):ix(P, i, 0) + T] = g.c_var
        c[ix(U, i, 0):ix(U, i, 0) + T] = g.c_noload
        c[ix(V, i, 0):ix(V, i, 0) + T] = g.c_startup

    names = []
    for base in ("u", "v", "w", "p"):
        names += [f"{base}[{i},{t}]" for i in range(N) for t in range(T)]
    for base in ("charge", "discharge", "soc", "curtail"):
        names += [f"{base}[{t}]" for t in range(T)]

    lp = LpProblem(c=c, A=A, row_lb=np.array(rlb, float), row_ub=np.array(rub, float),
                   col_lb=lb, col_ub=ub)
    return MilpProblem(lp=lp, integer_cols=np.arange(U, V), names=tuple(names), instance=instance)


def commitment_bounds(problem: MilpProblem, schedule: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column bounds with u, v, w pinned to ``schedule`` and its transitions."""
    from .core import shutdowns, startups

    inst = problem.instance
    s = np.asarray(schedule, dtype=float)
    lb = problem.lp.col_lb.copy()
    ub = problem.lp.col_ub.copy()
    for name, vals in (("u", s), ("v", startups(inst, s)), ("w", shutdowns(inst, s))):
        sl = problem.block(name)
        flat = np.asarray(vals, dtype=float).ravel()
        lb[sl] = flat
        ub[sl] = flat
    return lb, ub
