"""M1-M6 ablation runner, metrics and CSV reporting.

Every variant starts from the predictor's probabilities for one instance and
ends with a dispatched schedule (or an infeasible record). The baseline is a
cold branch-and-bound solve at the same gap, so only within-run ratios mean
anything.
"""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .core import UcInstance
from .dispatch import DispatchInfeasible, economic_dispatch, total_cost
from .formulation import build_uc_milp
from .lp import work_count
from .milp import DEFAULT_GAP, solve_bnb
from .predictor import (NormStats, Params, PredictorConfig, ProbabilityTensor, predict_logits,
                        threshold_schedule)
from .repair import CapacityExhausted, RepairConfig, RepairFailed, repair_pipeline
from .warmstart import TAU_HIGH, TAU_LOW, WarmStartOptions, warm_start_solve

log = logging.getLogger(__name__)

RESULT_COLUMNS = ["instance_id", "variant", "feasible", "cost", "baseline_cost", "or_",
                  "time_s", "baseline_time_s", "tr_pct", "nodes", "baseline_nodes"]


@dataclass(frozen=True)
class VariantSpec:
    label: str
    post_processing: bool
    warm_start: bool
    threshold_fixation: bool


VARIANTS = {
    "M1": VariantSpec("M1", False, False, False),
    "M2": VariantSpec("M2", True, False, False),
    "M3": VariantSpec("M3", False, True, False),
    "M4": VariantSpec("M4", False, True, True),
    "M5": VariantSpec("M5", True, True, False),
    "M6": VariantSpec("M6", True, True, True),
}


@dataclass(frozen=True)
class HarnessOptions:
    """``clock="wall"`` times stages in seconds; ``"lp"`` counts simplex iterations instead.

    The iteration clock is reproducible bit for bit, wall time is not.
    """

    gap: float = DEFAULT_GAP
    tau: float = 0.5
    tau_low: float = TAU_LOW
    tau_high: float = TAU_HIGH
    repair: RepairConfig = field(default_factory=RepairConfig)
    clock: str = "wall"
    node_limit: int | None = None

    def __post_init__(self):
        if self.clock not in ("wall", "lp"):
            raise ValueError("clock must be 'wall' or 'lp'")

    def now(self) -> float:
        return time.monotonic() if self.clock == "wall" else float(work_count())


@dataclass
class VariantResult:
    instance_id: str
    variant: str
    feasible: bool
    cost: float
    time: float
    nodes: int = 0
    schedule: np.ndarray | None = field(default=None, repr=False)
    error: str = ""


@dataclass
class BaselineResult:
    instance_id: str
    feasible: bool
    cost: float
    time: float
    nodes: int
    schedule: np.ndarray | None = field(default=None, repr=False)


@dataclass
class Metrics:
    variant: str
    feasibility_pct: float
    or_quartiles: tuple[float, float, float]
    tr_median_pct: float
    tr_aggregate_pct: float
    records: list[dict] = field(repr=False, default_factory=list)


# ---------------------------------------------------------------------- running

def run_baseline(instance: UcInstance, options: HarnessOptions = HarnessOptions()) -> BaselineResult:
    t0 = options.now()
    res = solve_bnb(build_uc_milp(instance), gap=options.gap, node_limit=options.node_limit)
    return BaselineResult(instance.id, res.feasible, res.objective if res.feasible else np.nan,
                          options.now() - t0, res.nodes, res.schedule)


def run_variant(instance: UcInstance, probs: ProbabilityTensor, spec: VariantSpec,
                options: HarnessOptions = HarnessOptions(), predict_time: float = 0.0
                ) -> VariantResult:
    """Run one pipeline variant; stage failures become an infeasible record.

    The recorded time covers thresholding through the final dispatch, plus
    ``predict_time`` for producing ``probs``.
    """
    t0 = options.now()
    problem = build_uc_milp(instance)
    schedule = threshold_schedule(probs, options.tau)
    out = VariantResult(instance.id, spec.label, False, np.nan, 0.0)
    try:
        warm = None
        if spec.post_processing:
            schedule, disp, _ = repair_pipeline(instance, schedule, options.repair, problem)
            warm = (schedule, disp)
        elif spec.warm_start:
            warm = schedule  # seeded only if it dispatches as is
        if spec.warm_start:
            ws = WarmStartOptions(gap=options.gap, tau_low=options.tau_low,
                                  tau_high=options.tau_high, fixation=spec.threshold_fixation,
                                  node_limit=options.node_limit)
            res = warm_start_solve(instance, warm, probs, ws, problem)
            out.nodes = res.nodes
            if res.feasible:
                out.feasible, out.cost, out.schedule = True, res.objective, res.schedule
        else:
            disp = economic_dispatch(instance, schedule, problem)
            out.feasible, out.cost, out.schedule = True, total_cost(instance, schedule, disp), schedule
    except (DispatchInfeasible, CapacityExhausted, RepairFailed) as exc:
        out.error = type(exc).__name__
    out.time = options.now() - t0 + predict_time
    return out


@dataclass
class ModelPredictor:
    """Picklable wrapper turning an instance into a ProbabilityTensor."""

    params: Params
    stats: NormStats
    config: PredictorConfig

    def __call__(self, instance: UcInstance) -> ProbabilityTensor:
        return predict_logits(self.params, instance.profiles, self.stats, self.config)


@dataclass
class Evaluation:
    results: list[VariantResult]
    baselines: dict[str, BaselineResult]
    metrics: dict[str, Metrics]


def _evaluate_one(args) -> tuple[BaselineResult, list[VariantResult]]:
    instance, predictor, labels, options = args
    base = run_baseline(instance, options)
    t0 = options.now()
    probs = predictor(instance)
    pt = options.now() - t0
    rows = [run_variant(instance, probs, VARIANTS[v], options, pt) for v in labels]
    return base, rows


def evaluate(instances: Iterable[UcInstance], predictor: Callable[[UcInstance], ProbabilityTensor],
             variants: Iterable[str] = tuple(VARIANTS), options: HarnessOptions = HarnessOptions(),
             workers: int = 1) -> Evaluation:
    """Baseline plus every requested variant on every instance, merged by instance order."""
    instances = list(instances)
    labels = list(variants)
    for v in labels:
        if v not in VARIANTS:
            raise KeyError(f"unknown variant {v!r}")
    jobs = [(inst, predictor, labels, options) for inst in instances]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            outs = list(pool.map(_evaluate_one, jobs))
    else:
        outs = [_evaluate_one(j) for j in jobs]
    baselines = {b.instance_id: b for b, _ in outs}
    results = [r for _, rows in outs for r in rows]
    metrics = {v: compute_metrics([r for r in results if r.variant == v], baselines)
               for v in labels}
    return Evaluation(results, baselines, metrics)


# ---------------------------------------------------------------------- metrics

def _record(r: VariantResult, b: BaselineResult) -> dict:
    or_ = r.cost / b.cost if (r.feasible and b.feasible and b.cost != 0) else np.nan
    if r.feasible and b.feasible and b.cost == 0:
        or_ = 1.0 if r.cost == 0 else np.inf
    tr = 100.0 * r.time / b.time if b.time > 0 else np.nan
    return {
        "instance_id": r.instance_id, "variant": r.variant, "feasible": int(r.feasible),
        "cost": r.cost, "baseline_cost": b.cost, "or_": or_, "time_s": r.time,
        "baseline_time_s": b.time, "tr_pct": tr, "nodes": r.nodes, "baseline_nodes": b.nodes,
    }


def compute_metrics(results: list[VariantResult], baselines: dict[str, BaselineResult]) -> Metrics:
    """O.R. quartiles over feasible instances, T.R. in percent, feasibility percent.

    Instances whose baseline is itself infeasible are left out of every figure.
    """
    records = []
    for r in results:
        if r.instance_id not in baselines:
            raise KeyError(f"no baseline record for instance {r.instance_id!r}")
        records.append(_record(r, baselines[r.instance_id]))
    label = results[0].variant if results else ""
    scored = [rec for rec in records if baselines[rec["instance_id"]].feasible]
    feas = 100.0 * np.mean([rec["feasible"] for rec in scored]) if scored else float("nan")
    ors = np.array([rec["or_"] for rec in scored if rec["feasible"]], dtype=float)
    q = tuple(float(x) for x in np.percentile(ors, [25, 50, 75])) if len(ors) else (np.nan,) * 3
    trs = np.array([rec["tr_pct"] for rec in scored], dtype=float)
    tr_med = float(np.nanmedian(trs)) if len(trs) else float("nan")
    vt = sum(rec["time_s"] for rec in scored)
    bt = sum(rec["baseline_time_s"] for rec in scored)
    tr_agg = 100.0 * vt / bt if bt > 0 else float("nan")
    return Metrics(label, float(feas), q, tr_med, tr_agg, records)


def or_cdf(metrics: Metrics) -> list[tuple[float, float]]:
    """Empirical CDF points (O.R., fraction <= O.R.) over feasible instances, unclipped."""
    ors = np.sort([rec["or_"] for rec in metrics.records if rec["feasible"]
                   and np.isfinite(rec["or_"])])
    n = len(ors)
    return [(float(v), (k + 1) / n) for k, v in enumerate(ors)]


# ---------------------------------------------------------------------- output

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_results_csv(evaluation: Evaluation, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(RESULT_COLUMNS)
        for m in evaluation.metrics.values():
            for rec in m.records:
                wr.writerow([_fmt(rec[c]) for c in RESULT_COLUMNS])


def write_cdf_csv(evaluation: Evaluation, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["variant", "or_", "cdf"])
        for v, m in evaluation.metrics.items():
            for x, f in or_cdf(m):
                wr.writerow([v, repr(x), repr(f)])


def summary_table(evaluation: Evaluation) -> str:
    lines = [f"{'variant':<8}{'T.R.%':>9}{'O.R.25':>10}{'O.R.50':>10}{'O.R.75':>10}{'%Feas':>8}"]
    for v, m in evaluation.metrics.items():
        q = m.or_quartiles
        lines.append(f"{v:<8}{m.tr_median_pct:>9.2f}{q[0]:>10.4f}{q[1]:>10.4f}{q[2]:>10.4f}"
                     f"{m.feasibility_pct:>8.1f}")
    return "\n".join(lines)
