import csv
import pickle

import numpy as np
import pytest

from ucwarm.datagen import desk_system, perturb_profiles, small_random_instance, with_profiles
from ucwarm.dispatch import economic_dispatch, total_cost
from ucwarm.harness import (RESULT_COLUMNS, VARIANTS, BaselineResult, HarnessOptions,
                            ModelPredictor, VariantResult, compute_metrics, evaluate, or_cdf,
                            run_baseline, run_variant, write_cdf_csv, write_results_csv)
from ucwarm.milp import solve_uc
from ucwarm.predictor import PredictorConfig, ProbabilityTensor, fit_norm_stats, init_params


def base(iid, cost=100.0, time=2.0, feasible=True):
    return BaselineResult(iid, feasible, cost, time, 10)


class OraclePredictor:
    """Probabilities from a noisy copy of the cold-solve schedule."""

    def __init__(self, flip=0.05, seed=0):
        self.flip, self.seed = flip, seed

    def __call__(self, instance):
        s = solve_uc(instance).schedule
        rng = np.random.default_rng(self.seed)
        flips = rng.random(s.shape) < self.flip
        s = np.where(flips, 1 - s, s)
        return ProbabilityTensor.from_probs(np.where(s == 1, 0.995, 0.005))


def test_variant_table():
    combos = {(v.post_processing, v.warm_start, v.threshold_fixation) for v in VARIANTS.values()}
    assert len(combos) == 6
    assert VARIANTS["M1"] == VARIANTS["M1"].__class__("M1", False, False, False)
    assert VARIANTS["M6"].post_processing and VARIANTS["M6"].threshold_fixation


def test_identical_variant_scores_one():
    baselines = {f"i{k}": base(f"i{k}", 100.0 + k, 1.0 + k) for k in range(4)}
    results = [VariantResult(k, "M5", True, b.cost, b.time) for k, b in baselines.items()]
    m = compute_metrics(results, baselines)
    assert m.or_quartiles == (1.0, 1.0, 1.0)
    assert m.tr_median_pct == pytest.approx(100.0) and m.tr_aggregate_pct == pytest.approx(100.0)
    assert m.feasibility_pct == 100.0


def test_one_of_four_infeasible():
    baselines = {f"i{k}": base(f"i{k}") for k in range(4)}
    results = [VariantResult(f"i{k}", "M1", k != 2, 100.0 if k != 2 else np.nan, 1.0)
               for k in range(4)]
    assert compute_metrics(results, baselines).feasibility_pct == pytest.approx(75.0)


def test_infeasible_baseline_excluded():
    baselines = {"a": base("a"), "b": base("b", feasible=False, cost=np.nan)}
    results = [VariantResult("a", "M2", True, 101.0, 1.0), VariantResult("b", "M2", False, np.nan, 1.0)]
    m = compute_metrics(results, baselines)
    assert m.feasibility_pct == 100.0 and m.or_quartiles[1] == pytest.approx(1.01)


def test_missing_baseline():
    with pytest.raises(KeyError):
        compute_metrics([VariantResult("x", "M1", True, 1.0, 1.0)], {})


def test_cdf_monotone_and_unclipped():
    costs = [99.0, 100.0, 100.5, 102.0, 110.0]
    baselines = {f"i{k}": base(f"i{k}") for k in range(5)}
    results = [VariantResult(f"i{k}", "M6", True, c, 1.0) for k, c in enumerate(costs)]
    m = compute_metrics(results, baselines)
    pts = or_cdf(m)
    assert pts[0][0] == pytest.approx(0.99)
    assert all(a[0] <= b[0] and a[1] < b[1] for a, b in zip(pts, pts[1:]))
    assert pts[-1][1] == 1.0
    ors = np.array([r["or_"] for r in m.records])
    assert tuple(np.percentile(ors, [25, 50, 75])) == m.or_quartiles


def test_m1_on_feasible_prediction_costs_ed():
    inst = desk_system()
    ref = solve_uc(inst)
    probs = ProbabilityTensor.from_probs(np.where(ref.schedule == 1, 0.9, 0.1))
    r = run_variant(inst, probs, VARIANTS["M1"])
    d = economic_dispatch(inst, ref.schedule)
    assert r.feasible and r.cost == pytest.approx(total_cost(inst, ref.schedule, d), rel=1e-12)


def test_stage_failure_becomes_record():
    inst = desk_system()
    probs = ProbabilityTensor.from_probs(np.full((10, 24), 0.01))
    r = run_variant(inst, probs, VARIANTS["M1"])
    assert not r.feasible and r.error == "DispatchInfeasible"


def test_m2_feasible_under_random_predictions(rng):
    done = 0
    for k in range(30):
        inst = small_random_instance(rng, 3, 8, id=f"h{k}")
        if not solve_uc(inst).feasible:
            continue
        probs = ProbabilityTensor.from_probs(rng.random((3, 8)))
        assert run_variant(inst, probs, VARIANTS["M2"]).feasible
        done += 1
    assert done >= 10


def test_m6_never_worse_than_m2():
    opts = HarnessOptions()
    pred = OraclePredictor(flip=0.08)
    desk = desk_system()
    for seed in range(4):
        inst = with_profiles(desk, perturb_profiles(desk.profiles, 50 + seed), f"p{seed}")
        probs = pred(inst)
        m2 = run_variant(inst, probs, VARIANTS["M2"], opts)
        m6 = run_variant(inst, probs, VARIANTS["M6"], opts)
        assert m2.feasible and m6.feasible
        assert m6.cost <= m2.cost * (1 + opts.gap) + 1e-9


def test_evaluate_csv_deterministic_under_lp_clock(tmp_path):
    desk = desk_system()
    insts = [with_profiles(desk, perturb_profiles(desk.profiles, s), f"e{s}") for s in (70, 72)]
    opts = HarnessOptions(clock="lp")
    paths = []
    for rep in range(2):
        ev = evaluate(insts, OraclePredictor(), ("M1", "M2", "M6"), opts)
        paths.append(tmp_path / f"r{rep}.csv")
        write_results_csv(ev, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()
    rows = list(csv.DictReader(open(paths[0])))
    assert list(rows[0]) == RESULT_COLUMNS and len(rows) == 6
    write_cdf_csv(ev, tmp_path / "cdf.csv")
    assert open(tmp_path / "cdf.csv").readline().strip() == "variant,or_,cdf"


def test_unknown_variant_and_clock():
    with pytest.raises(KeyError):
        evaluate([], OraclePredictor(), ("M7",))
    with pytest.raises(ValueError):
        HarnessOptions(clock="cpu")


def test_baseline_scores_itself_one():
    inst = desk_system()
    b = run_baseline(inst)
    r = VariantResult(inst.id, "M3", True, b.cost, b.time)
    assert compute_metrics([r], {inst.id: b}).or_quartiles == (1.0, 1.0, 1.0)


def test_model_predictor_pickles():
    cfg = PredictorConfig(T=24, n_gen=10, d_model=8, heads=2, ffn_dim=8, cls_hidden=8)
    inst = desk_system()
    pred = ModelPredictor(init_params(cfg), fit_norm_stats([inst.profiles]), cfg)
    again = pickle.loads(pickle.dumps(pred))
    assert np.array_equal(pred(inst).logits, again(inst).logits)
    assert pred(inst).logits.shape == (10, 24)
