"""Confidence-based fixation and the warm-started MILP solve."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import UcInstance
from .formulation import MilpProblem, build_uc_milp
from .milp import (DEFAULT_GAP, STATUS_FEASIBLE, FixationMap, MilpResult, check_warm,
                   solve_bnb)
from .predictor import ProbabilityTensor

TAU_HIGH = 0.98
TAU_LOW = 0.02


@dataclass(frozen=True)
class WarmStartOptions:
    gap: float = DEFAULT_GAP
    tau_low: float = TAU_LOW
    tau_high: float = TAU_HIGH
    fixation: bool = True
    warm: bool = True
    relax_fraction: float = 0.1
    node_limit: int | None = None
    time_limit: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.tau_low < self.tau_high <= 1.0:
            raise ValueError("need 0 <= tau_low < tau_high <= 1")


def _probs(p) -> np.ndarray:
    return p.probs if isinstance(p, ProbabilityTensor) else np.asarray(p, dtype=float)


def fix_by_confidence(probs, tau_low: float = TAU_LOW, tau_high: float = TAU_HIGH) -> FixationMap:
    """Map (i, t) to 1 where prob >= tau_high and to 0 where prob <= tau_low."""
    if not 0.0 <= tau_low < tau_high <= 1.0:
        raise ValueError("need 0 <= tau_low < tau_high <= 1")
    P = _probs(probs)
    fixed: FixationMap = {}
    for i, t in zip(*np.nonzero(P >= tau_high)):
        fixed[(int(i), int(t))] = 1
    for i, t in zip(*np.nonzero(P <= tau_low)):
        fixed[(int(i), int(t))] = 0
    return dict(sorted(fixed.items()))


def relax_fixation(fixed: FixationMap, probs, tau_low: float, tau_high: float,
                   fraction: float = 0.1) -> FixationMap:
    """Drop the ``fraction`` of fixed entries whose probabilities sit closest to their threshold."""
    if not fixed:
        return {}
    P = _probs(probs)

    def margin(item):
        (i, t), v = item
        return (P[i, t] - tau_high if v == 1 else tau_low - P[i, t], i, t)

    ranked = sorted(fixed.items(), key=margin)
    k = max(1, math.ceil(fraction * len(ranked)))
    return dict(sorted(ranked[k:]))


def warm_start_solve(instance: UcInstance, repaired=None, probs=None,
                     options: WarmStartOptions = WarmStartOptions(),
                     problem: MilpProblem | None = None) -> MilpResult:
    """Branch and bound seeded by a repaired schedule and pruned by confident fixations.

    ``repaired`` is a schedule or (schedule, dispatch) pair; it becomes the
    incumbent only when it dispatches. If the fixed problem is infeasible, the
    solve is retried once with the least confident tenth of the fixations
    released, and ``fixation_relaxed`` is set on the result. If that also fails
    and the seed dispatches, the seed is returned with status ``Feasible`` and
    ``warm_fallback`` set.
    """
    problem = problem or build_uc_milp(instance)
    warm = repaired if options.warm else None
    fixed = None
    if options.fixation and probs is not None:
        fixed = fix_by_confidence(probs, options.tau_low, options.tau_high)
    kw = dict(gap=options.gap, node_limit=options.node_limit, time_limit=options.time_limit)
    res = solve_bnb(problem, warm=warm, fixed=fixed, **kw)
    if not (res.root_infeasible and fixed):
        return res
    first_nodes, first_time = res.nodes, res.wall_time
    looser = relax_fixation(fixed, probs, options.tau_low, options.tau_high,
                            options.relax_fraction)
    res = solve_bnb(problem, warm=warm, fixed=looser, **kw)
    res.fixation_relaxed = True
    res.nodes += first_nodes
    res.wall_time += first_time
    if not res.feasible and warm is not None:
        checked = check_warm(problem, warm)
        if checked is not None:
            res.schedule, res.dispatch, res.objective = checked
            res.status, res.warm_fallback = STATUS_FEASIBLE, True
            res.gap = np.inf
    return res
