"""Synthetic instances, profile perturbation and labeled dataset assembly."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import (Profiles, Storage, UcInstance, dumps_instance, instance_from_dict,
                   make_generator, make_instance, validate_schedule)
from .dispatch import economic_dispatch
from .milp import DEFAULT_GAP, solve_uc

log = logging.getLogger(__name__)

# id, p_min, p_max, c_var, c_noload, c_startup, min_up, min_down, ramp, init_on, init_dur, init_p
DESK_UNITS = [
    (0, 150, 400, 8.0, 300, 5000, 8, 8, 160, 1, 12, 300),
    (1, 100, 300, 12.0, 250, 3000, 6, 6, 120, 1, 10, 200),
    (2, 80, 250, 14.0, 200, 2500, 5, 5, 110, 1, 8, 150),
    (3, 60, 200, 20.0, 150, 1200, 4, 4, 100, 1, 6, 100),
    (4, 50, 180, 22.0, 140, 1000, 4, 3, 100, 0, 5, 0),
    (5, 40, 150, 25.0, 120, 900, 3, 3, 90, 0, 4, 0),
    (6, 20, 100, 35.0, 80, 300, 2, 2, 80, 0, 3, 0),
    (7, 15, 80, 40.0, 60, 250, 2, 1, 70, 0, 2, 0),
    (8, 10, 60, 55.0, 40, 150, 1, 1, 60, 0, 2, 0),
    (9, 5, 50, 70.0, 30, 100, 1, 1, 50, 0, 1, 0),
]

DESK_STORAGE = Storage(energy_cap=200.0, p_charge_max=50.0, p_discharge_max=50.0,
                       eff_charge=0.92, eff_discharge=0.92, soc_init=100.0)


def desk_profiles(T: int = 24) -> Profiles:
    """Deterministic daily shapes: evening-peaking load, midday solar, night-heavy wind."""
    h = np.arange(T) % 24
    load = 780 + 260 * np.exp(-((h - 18.5) / 3.5) ** 2) + 120 * np.exp(-((h - 10) / 3.0) ** 2) \
        - 80 * np.exp(-((h - 3.5) / 2.5) ** 2)
    solar = 260 * np.clip(np.sin(np.pi * (h - 6) / 13), 0, None)
    wind = 140 + 70 * np.cos(2 * np.pi * (h - 2) / 24)
    return Profiles(load=load, solar=solar, wind=wind)


def desk_system(T: int = 24, id: str = "desk") -> UcInstance:
    """Bundled 10-unit system with a single aggregated storage resource."""
    gens = []
    for (i, pmin, pmax, cv, cn, cs, mu, md, ramp, on, dur, p0) in DESK_UNITS:
        gens.append(make_generator(
            id=i, c_var=cv, c_noload=cn, c_startup=cs, p_min=pmin, p_max=pmax,
            min_up=mu, min_down=md, ramp_up=ramp, ramp_down=ramp, startup_ramp=None,
            init_status=on, init_duration=dur, init_power=p0))
    prof = desk_profiles(T)
    return make_instance(gens, DESK_STORAGE, prof.load, prof.solar, prof.wind, id=id)


def small_random_instance(rng: np.random.Generator, n_gen: int = 3, T: int = 6,
                          id: str = "small", storage: bool = True) -> UcInstance:
    """Random tiny instance for oracle comparisons (not guaranteed feasible)."""
    gens = []
    for i in range(n_gen):
        pmax = float(rng.uniform(40, 120))
        pmin = float(rng.uniform(0.1, 0.5) * pmax)
        ramp = float(rng.uniform(0.4, 1.0) * pmax)
        on = int(rng.integers(0, 2))
        gens.append(make_generator(
            id=i, c_var=float(rng.uniform(5, 40)), c_noload=float(rng.uniform(10, 200)),
            c_startup=float(rng.uniform(20, 600)), p_min=round(pmin, 3), p_max=round(pmax, 3),
            min_up=int(rng.integers(1, 4)), min_down=int(rng.integers(1, 4)),
            ramp_up=round(ramp, 3), ramp_down=round(ramp, 3), startup_ramp=None,
            init_status=on, init_duration=int(rng.integers(0, 4)),
            init_power=round(pmin, 3) if on else 0.0))
    total = sum(g.p_max for g in gens)
    load = rng.uniform(0.2, 0.75, T) * total
    solar = np.clip(rng.normal(0.05, 0.05, T), 0, None) * total
    wind = np.clip(rng.normal(0.05, 0.05, T), 0, None) * total
    st = Storage(energy_cap=40.0, p_charge_max=15.0, p_discharge_max=15.0,
                 eff_charge=0.9, eff_discharge=0.9, soc_init=20.0) if storage else Storage()
    return make_instance(gens, st, load, solar, wind, id=id)


# ------------------------------------------------------------------- perturbation

@dataclass(frozen=True)
class PerturbParams:
    load_scale: tuple[float, float] = (0.85, 1.15)
    solar_scale: tuple[float, float] = (0.4, 1.6)
    wind_scale: tuple[float, float] = (0.3, 1.8)
    noise: float = 0.04  # relative sd of smooth hourly noise
    smooth: int = 3  # moving-average window of the noise, hours
    p_zero_net_load: float = 0.05
    p_full_renewable: float = 0.05
    full_renewable_mode: str = "energy"  # "energy" | "hourly"

    @classmethod
    def identity(cls) -> "PerturbParams":
        return cls((1.0, 1.0), (1.0, 1.0), (1.0, 1.0), 0.0, 1, 0.0, 0.0)


def _smooth_noise(rng: np.random.Generator, T: int, sd: float, window: int) -> np.ndarray:
    raw = rng.normal(0.0, sd, T + window - 1)
    if window <= 1:
        return raw[:T]
    kernel = np.ones(window) / np.sqrt(window)
    return np.convolve(raw, kernel, mode="valid")


def perturb_profiles(profiles: Profiles, seed: int, params: PerturbParams = PerturbParams()) -> Profiles:
    """Scale each series, add smooth relative noise, and sometimes emit a stress case.

    Stress cases: renewables rescaled so that the minimum net load is exactly
    zero, or so that renewable energy equals load energy over the horizon
    (per hour with ``full_renewable_mode="hourly"``). Deterministic per seed.
    """
    rng = np.random.default_rng(seed)
    T = profiles.horizon
    out = {}
    for name, (lo, hi) in (("load", params.load_scale), ("solar", params.solar_scale),
                           ("wind", params.wind_scale)):
        base = np.asarray(getattr(profiles, name), dtype=float)
        scale = rng.uniform(lo, hi)
        noise = _smooth_noise(rng, T, params.noise, params.smooth)
        out[name] = np.clip(base * scale * (1.0 + noise), 0.0, None)
    u = rng.uniform()
    ren = out["solar"] + out["wind"]
    if u < params.p_zero_net_load and np.any(ren > 0):
        pos = ren > 0
        k = np.min(out["load"][pos] / ren[pos])
        out["solar"], out["wind"] = out["solar"] * k, out["wind"] * k
    elif u < params.p_zero_net_load + params.p_full_renewable and np.any(ren > 0):
        if params.full_renewable_mode == "hourly":
            k = np.divide(out["load"], ren, out=np.zeros(T), where=ren > 0)
        else:
            k = out["load"].sum() / ren.sum()
        out["solar"], out["wind"] = out["solar"] * k, out["wind"] * k
    return Profiles(**out)


def with_profiles(instance: UcInstance, profiles: Profiles, id: str) -> UcInstance:
    return make_instance(instance.generators, instance.storage, profiles.load,
                         profiles.solar, profiles.wind, id=id)


def perturbed_instances(base: list[UcInstance], count: int, seed: int,
                        params: PerturbParams = PerturbParams()) -> list[UcInstance]:
    """Unlabeled perturbations, cycling through ``base``; same seeding as generate_dataset."""
    ss = np.random.SeedSequence(seed)
    out = []
    for k in range(count):
        b = base[k % len(base)]
        child = int(ss.spawn(1)[0].generate_state(1)[0])
        out.append(with_profiles(b, perturb_profiles(b.profiles, child, params), f"{b.id}-{k:06d}"))
    return out


# ------------------------------------------------------------------------ dataset

class LabelingFailure(RuntimeError):
    pass


@dataclass
class LabeledSample:
    instance: UcInstance
    schedule: np.ndarray
    objective: float
    gap: float


@dataclass
class Dataset:
    samples: list[LabeledSample]
    splits: dict[str, list[int]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[LabeledSample]:
        return [self.samples[k] for k in self.splits.get(name, [])]

    def save(self, root: str | Path) -> None:
        root = Path(root)
        (root / "instances").mkdir(parents=True, exist_ok=True)
        (root / "labels").mkdir(parents=True, exist_ok=True)
        for s in self.samples:
            (root / "instances" / f"{s.instance.id}.json").write_text(dumps_instance(s.instance))
            label = {"schedule": s.schedule.tolist(), "objective": s.objective, "gap": s.gap}
            (root / "labels" / f"{s.instance.id}.json").write_text(json.dumps(label, sort_keys=True))
        manifest = dict(self.meta)
        manifest["ids"] = [s.instance.id for s in self.samples]
        manifest["splits"] = self.splits
        (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))

    @classmethod
    def load(cls, root: str | Path) -> "Dataset":
        root = Path(root)
        manifest = json.loads((root / "manifest.json").read_text())
        samples = []
        for iid in manifest["ids"]:
            inst = instance_from_dict(json.loads((root / "instances" / f"{iid}.json").read_text()))
            lab = json.loads((root / "labels" / f"{iid}.json").read_text())
            samples.append(LabeledSample(inst, np.array(lab["schedule"], dtype=np.int8),
                                         float(lab["objective"]), float(lab["gap"])))
        splits = manifest.pop("splits")
        manifest.pop("ids")
        return cls(samples, splits, manifest)


def _label(args) -> LabeledSample | None:
    instance, gap = args
    res = solve_uc(instance, gap=gap)
    if not res.feasible:
        return None
    return LabeledSample(instance, res.schedule, res.objective, res.gap)


def split_indices(n: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> dict[str, list[int]]:
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": sorted(perm[:n_train].tolist()),
        "validation": sorted(perm[n_train:n_train + n_val].tolist()),
        "test": sorted(perm[n_train + n_val:].tolist()),
    }


def generate_dataset(base: list[UcInstance], count: int, gap: float = DEFAULT_GAP, seed: int = 0,
                     params: PerturbParams = PerturbParams(), workers: int = 1) -> Dataset:
    """Perturb base instances and label each with a branch-and-bound solve at ``gap``.

    Infeasible perturbations are discarded and resampled. Output order depends only
    on the arguments, never on ``workers``.
    """
    meta = {"seed": seed, "count": count, "gap": gap, "params": _params_dict(params),
            "base_ids": [b.id for b in base]}
    if count == 0:
        return Dataset([], split_indices(0, seed), meta)
    samples: list[LabeledSample] = []
    attempts = 0
    failures = 0
    ss = np.random.SeedSequence(seed)
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        while len(samples) < count:
            need = count - len(samples)
            batch = []
            for _ in range(need):
                b = base[attempts % len(base)]
                child = int(ss.spawn(1)[0].generate_state(1)[0])
                prof = perturb_profiles(b.profiles, child, params)
                batch.append((with_profiles(b, prof, f"{b.id}-{attempts:06d}"), gap))
                attempts += 1
            labeled = list(pool.map(_label, batch)) if pool else [_label(a) for a in batch]
            for lab in labeled:
                if lab is None:
                    failures += 1
                    log.info("discarded infeasible perturbation")
                elif len(samples) < count:
                    samples.append(lab)
            if attempts >= 10 and failures / attempts > 0.5:
                raise LabelingFailure(
                    f"{failures} of {attempts} perturbations infeasible; parameters too aggressive")
    finally:
        if pool:
            pool.shutdown()
    meta["attempts"] = attempts
    meta["discarded"] = failures
    return Dataset(samples, split_indices(len(samples), seed), meta)


def _params_dict(p: PerturbParams) -> dict:
    return {k: getattr(p, k) for k in p.__dataclass_fields__}


def check_label(sample: LabeledSample) -> bool:
    if not validate_schedule(sample.instance, sample.schedule).empty:
        return False
    economic_dispatch(sample.instance, sample.schedule)
    return True
