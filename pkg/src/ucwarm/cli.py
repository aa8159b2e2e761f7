"""Command line entry point: generate, train, predict, repair, solve, evaluate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .core import load_instance
from .datagen import Dataset, PerturbParams, desk_system, generate_dataset
from .dispatch import total_cost
from .harness import (VARIANTS, HarnessOptions, ModelPredictor, evaluate, summary_table,
                      write_cdf_csv, write_results_csv)
from .milp import DEFAULT_GAP
from .predictor import (PredictorConfig, ProbabilityTensor, fit_norm_stats, load_checkpoint,
                        normalize_profiles, predict, save_checkpoint, train)
from .repair import RepairConfig, repair_pipeline
from .warmstart import TAU_HIGH, TAU_LOW, WarmStartOptions, warm_start_solve


def _xy(samples):
    return [s.instance.profiles for s in samples], np.stack([s.schedule for s in samples])


def cmd_generate(a) -> int:
    base = [load_instance(p) for p in a.base] if a.base else [desk_system(a.horizon)]
    ds = generate_dataset(base, a.count, gap=a.gap, seed=a.seed, params=PerturbParams(),
                          workers=1 if a.serial else a.workers)
    ds.save(a.out)
    print(f"{len(ds.samples)} labeled instances -> {a.out} "
          f"(discarded {ds.meta.get('discarded', 0)})")
    return 0


def cmd_train(a) -> int:
    ds = Dataset.load(a.data)
    train_s, val_s = ds.split("train"), ds.split("validation")
    prof_t, Y_t = _xy(train_s)
    stats = fit_norm_stats(prof_t)
    inst = train_s[0].instance
    cfg = PredictorConfig(T=inst.horizon, n_gen=inst.n_gen, d_model=a.d_model, layers=a.layers,
                          heads=a.heads, ffn_dim=2 * a.d_model, cls_hidden=2 * a.d_model,
                          lr=a.lr, epochs=a.epochs, batch_size=a.batch_size, seed=a.seed)
    X_t = np.stack([normalize_profiles(p, stats) for p in prof_t])
    X_v = Y_v = None
    if val_s:
        prof_v, Y_v = _xy(val_s)
        X_v = np.stack([normalize_profiles(p, stats) for p in prof_v])
    params, tlog = train(X_t, Y_t, cfg, X_v, Y_v)
    for e, loss in enumerate(tlog.epoch_loss):
        acc = tlog.val_accuracy[e] if e < len(tlog.val_accuracy) else float("nan")
        print(f"epoch {e + 1:3d} loss {loss:.5f} val_acc {acc:.4f}")
    save_checkpoint(a.out, params, cfg, stats)
    return 0


def _probs_for(a, instance) -> ProbabilityTensor | None:
    if getattr(a, "probs", None):
        _, pt = ProbabilityTensor.from_json(Path(a.probs).read_text())
        return pt
    if getattr(a, "checkpoint", None):
        params, cfg, stats = load_checkpoint(a.checkpoint)
        return predict(params, instance.profiles, stats, cfg)[1]
    return None


def cmd_predict(a) -> int:
    instance = load_instance(a.instance)
    params, cfg, stats = load_checkpoint(a.checkpoint)
    schedule, pt = predict(params, instance.profiles, stats, cfg, a.tau)
    Path(a.out).write_text(pt.to_json(instance.id))
    if a.schedule_out:
        Path(a.schedule_out).write_text(json.dumps({"schedule": schedule.tolist()}))
    return 0


def _read_schedule(path: str) -> np.ndarray:
    data = json.loads(Path(path).read_text())
    return np.array(data["schedule"] if isinstance(data, dict) else data, dtype=np.int8)


def cmd_repair(a) -> int:
    instance = load_instance(a.instance)
    if a.schedule:
        s = _read_schedule(a.schedule)
    else:
        pt = _probs_for(a, instance)
        if pt is None:
            raise SystemExit("repair needs --schedule, --probs or --checkpoint")
        s = (pt.probs > a.tau).astype(np.int8)
    s, d, trace = repair_pipeline(instance, s, RepairConfig(window=a.window))
    Path(a.out).write_text(json.dumps({"schedule": s.tolist(),
                                       "cost": total_cost(instance, s, d)}))
    if a.trace:
        trace.to_jsonl(a.trace)
    if a.dispatch_csv:
        d.to_csv(a.dispatch_csv)
    print(f"cost {total_cost(instance, s, d):.6f}, {len(trace)} edits")
    return 0


def cmd_solve(a) -> int:
    instance = load_instance(a.instance)
    pt = _probs_for(a, instance)
    warm = None
    if pt is not None and not a.no_warm:
        s = (pt.probs > a.tau).astype(np.int8)
        if a.repair:
            s, d, _ = repair_pipeline(instance, s)
            warm = (s, d)
        else:
            warm = s
    opts = WarmStartOptions(gap=a.gap, tau_low=a.tau_low, tau_high=a.tau_high,
                            fixation=not a.no_fixation, warm=not a.no_warm,
                            node_limit=a.node_limit, time_limit=a.time_limit)
    res = warm_start_solve(instance, warm, pt, opts)
    if a.node_log:
        res.write_node_log(a.node_log)
    out = {"status": res.status, "objective": res.objective, "bound": res.bound, "gap": res.gap,
           "nodes": res.nodes, "wall_time": res.wall_time,
           "fixation_relaxed": res.fixation_relaxed, "warm_rejected": res.warm_rejected,
           "warm_fallback": res.warm_fallback,
           "schedule": res.schedule.tolist() if res.feasible else None}
    text = json.dumps(out)
    if a.out:
        Path(a.out).write_text(text)
    if a.dispatch_csv and res.feasible:
        res.dispatch.to_csv(a.dispatch_csv)
    print(f"{res.status} objective {res.objective:.6f} nodes {res.nodes}")
    return 0


def cmd_evaluate(a) -> int:
    ds = Dataset.load(a.data)
    samples = ds.split(a.split) if a.split != "all" else ds.samples
    if a.limit:
        samples = samples[:a.limit]
    params, cfg, stats = load_checkpoint(a.checkpoint)
    opts = HarnessOptions(gap=a.gap, tau=a.tau, tau_low=a.tau_low, tau_high=a.tau_high,
                          clock=a.clock, node_limit=a.node_limit)
    ev = evaluate([s.instance for s in samples], ModelPredictor(params, stats, cfg),
                  a.variants, opts, workers=1 if a.serial else a.workers)
    write_results_csv(ev, a.out)
    if a.cdf:
        write_cdf_csv(ev, a.cdf)
    print(summary_table(ev))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ucwarm", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("generate", help="perturb base instances and label them")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--gap", type=float, default=DEFAULT_GAP)
    g.add_argument("--base", nargs="*", help="instance JSON files (default: bundled system)")
    g.add_argument("--horizon", type=int, default=24)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--serial", action="store_true")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train the commitment predictor")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--d-model", type=int, default=32)
    t.add_argument("--layers", type=int, default=2)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--epochs", type=int, default=60)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="write the probability tensor for an instance")
    p.add_argument("--instance", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--schedule-out")
    p.set_defaults(fn=cmd_predict)

    r = sub.add_parser("repair", help="repair a schedule or thresholded prediction")
    r.add_argument("--instance", required=True)
    r.add_argument("--schedule")
    r.add_argument("--probs")
    r.add_argument("--checkpoint")
    r.add_argument("--tau", type=float, default=0.5)
    r.add_argument("--window", type=int, default=4)
    r.add_argument("--out", required=True)
    r.add_argument("--trace", help="write edits as JSON lines")
    r.add_argument("--dispatch-csv")
    r.set_defaults(fn=cmd_repair)

    s = sub.add_parser("solve", help="branch and bound, optionally warm-started")
    s.add_argument("--instance", required=True)
    s.add_argument("--probs")
    s.add_argument("--checkpoint")
    s.add_argument("--tau", type=float, default=0.5)
    s.add_argument("--repair", action="store_true", help="repair the prediction before seeding")
    s.add_argument("--node-limit", type=int)
    s.add_argument("--time-limit", type=float)
    s.add_argument("--out")
    s.add_argument("--dispatch-csv")
    _solver_flags(s)
    s.set_defaults(fn=cmd_solve)

    e = sub.add_parser("evaluate", help="run the M1-M6 ablation against the cold baseline")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    e.add_argument("--split", default="test", choices=["train", "validation", "test", "all"])
    e.add_argument("--limit", type=int)
    e.add_argument("--tau", type=float, default=0.5)
    e.add_argument("--out", default="results.csv")
    e.add_argument("--cdf", help="write O.R. CDF points per variant")
    e.add_argument("--clock", default="wall", choices=["wall", "lp"],
                   help="wall seconds, or simplex iterations (reproducible)")
    e.add_argument("--node-limit", type=int)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--serial", action="store_true", help="one process, for clean timings")
    _solver_flags(e, warm_flags=False)
    e.set_defaults(fn=cmd_evaluate)
    return ap


def _solver_flags(p, warm_flags: bool = True) -> None:
    p.add_argument("--gap", type=float, default=DEFAULT_GAP)
    p.add_argument("--tau-high", type=float, default=TAU_HIGH)
    p.add_argument("--tau-low", type=float, default=TAU_LOW)
    if warm_flags:
        p.add_argument("--no-fixation", action="store_true")
        p.add_argument("--no-warm", action="store_true")
        p.add_argument("--node-log", help="write the branch-and-bound node log as CSV")


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING)
    return a.fn(a)


if __name__ == "__main__":
    sys.exit(main())
