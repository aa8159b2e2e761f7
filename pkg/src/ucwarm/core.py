"""Problem data model, instance file I/O, block decomposition and schedule checks.

Time indices are 0-based throughout the package; block end points are inclusive.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable

import numpy as np


class InstanceParseError(ValueError):
    """Raised when an instance file is not valid JSON or misses required keys."""


class InstanceValidationError(ValueError):
    """Raised when instance data violates a model invariant.

    The ``path`` attribute names the offending field, e.g. ``generators[2].p_min``.
    """

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class Generator:
    id: int
    c_var: float
    c_noload: float
    c_startup: float
    p_min: float
    p_max: float
    min_up: int
    min_down: int
    ramp_up: float
    ramp_down: float
    startup_ramp: float
    init_status: int
    init_duration: int
    init_power: float

    @property
    def shutdown_ramp(self) -> float:
        return max(self.p_min, self.ramp_down)

    @property
    def order_key(self) -> float:
        """Full-load average cost used to rank units cheapest-first."""
        return self.c_var + self.c_noload / self.p_max if self.p_max > 0 else math.inf


@dataclass(frozen=True)
class Storage:
    energy_cap: float = 0.0
    p_charge_max: float = 0.0
    p_discharge_max: float = 0.0
    eff_charge: float = 1.0
    eff_discharge: float = 1.0
    soc_init: float = 0.0


@dataclass(frozen=True, eq=False)
class Profiles:
    load: np.ndarray
    solar: np.ndarray
    wind: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.load)


@dataclass(frozen=True, eq=False)
class UcInstance:
    generators: tuple[Generator, ...]
    storage: Storage
    profiles: Profiles
    id: str = "instance"

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def horizon(self) -> int:
        return self.profiles.horizon

    def gen_array(self, name: str) -> np.ndarray:
        return self._gen_arrays[name]

    @cached_property
    def _gen_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in Generator.__dataclass_fields__:
            arr = np.array([getattr(g, name) for g in self.generators], dtype=float)
            arr.setflags(write=False)
            out[name] = arr
        return out

    @cached_property
    def net_load(self) -> np.ndarray:
        p = self.profiles
        arr = p.load - p.solar - p.wind
        arr.setflags(write=False)
        return arr


@dataclass(frozen=True)
class Block:
    start: int
    end: int
    kind: str  # "on" | "off"
    credit: int = 0

    @property
    def length(self) -> int:
        return self.end - self.start + 1

    @property
    def effective_length(self) -> int:
        return self.length + self.credit


@dataclass(frozen=True, eq=False)
class SystemSeries:
    net_load: np.ndarray
    ramp_req: np.ndarray
    online_cap: np.ndarray | None = None
    ramp_cap: np.ndarray | None = None


@dataclass
class ViolationReport:
    min_up: list[tuple[int, Block]] = field(default_factory=list)
    min_down: list[tuple[int, Block]] = field(default_factory=list)
    capacity: list[int] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not (self.min_up or self.min_down or self.capacity)

    def __len__(self) -> int:
        return len(self.min_up) + len(self.min_down) + len(self.capacity)


# --------------------------------------------------------------------------- I/O

_GEN_KEYS = (
    "id", "c_var", "c_noload", "c_startup", "p_min", "p_max", "min_up", "min_down",
    "ramp_up", "ramp_down", "startup_ramp", "init_status", "init_duration", "init_power",
)
_STORAGE_KEYS = tuple(Storage.__dataclass_fields__)
_INT_GEN_KEYS = {"id", "min_up", "min_down", "init_status", "init_duration"}


def _as_series(values: Any, path: str, horizon: int) -> np.ndarray:
    try:
        arr = np.asarray(values, dtype=float)
    except (TypeError, ValueError) as exc:
        raise InstanceValidationError(path, "not a numeric array") from exc
    if arr.ndim != 1 or len(arr) != horizon:
        raise InstanceValidationError(path, f"expected length {horizon}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InstanceValidationError(path, "non-finite values")
    if np.any(arr < 0):
        raise InstanceValidationError(path, "negative values")
    arr.setflags(write=False)
    return arr


def validate_generator(g: Generator, path: str) -> None:
    def bad(key: str, msg: str):
        raise InstanceValidationError(f"{path}.{key}", msg)

    for key in _GEN_KEYS:
        v = getattr(g, key)
        if not math.isfinite(v):
            bad(key, "must be finite")
    if g.p_min < 0:
        bad("p_min", "must be >= 0")
    if g.p_min > g.p_max:
        bad("p_min", f"p_min {g.p_min} exceeds p_max {g.p_max} (generator {g.id})")
    if g.min_up < 1:
        bad("min_up", "must be >= 1")
    if g.min_down < 1:
        bad("min_down", "must be >= 1")
    if g.ramp_up <= 0:
        bad("ramp_up", "must be > 0")
    if g.ramp_down <= 0:
        bad("ramp_down", "must be > 0")
    if g.startup_ramp < g.p_min:
        bad("startup_ramp", "must be >= p_min")
    if g.init_status not in (0, 1):
        bad("init_status", "must be 0 or 1")
    if g.init_duration < 0:
        bad("init_duration", "must be >= 0")
    if g.init_status == 1 and not (g.p_min - 1e-9 <= g.init_power <= g.p_max + 1e-9):
        bad("init_power", "must lie in [p_min, p_max] when initially on")
    if g.init_status == 0 and g.init_power != 0:
        bad("init_power", "must be 0 when initially off")


def validate_storage(s: Storage, path: str = "storage") -> None:
    for key in _STORAGE_KEYS:
        v = getattr(s, key)
        if not math.isfinite(v) or v < 0:
            raise InstanceValidationError(f"{path}.{key}", "must be finite and >= 0")
    for key in ("eff_charge", "eff_discharge"):
        if not 0 < getattr(s, key) <= 1:
            raise InstanceValidationError(f"{path}.{key}", "must lie in (0, 1]")
    if s.soc_init > s.energy_cap:
        raise InstanceValidationError(f"{path}.soc_init", "must not exceed energy_cap")


def make_generator(**kw: Any) -> Generator:
    """Build a Generator from keyword fields.

    ``startup_ramp`` defaults to max(p_min, ramp_up). A missing ``init_duration``
    defaults to max(min_up, min_down), i.e. a unit settled long enough that no
    initial forcing applies.
    """
    if kw.get("startup_ramp") is None:
        kw["startup_ramp"] = max(float(kw["p_min"]), float(kw["ramp_up"]))
    kw.setdefault("init_status", 0)
    if kw.get("init_duration") is None:
        kw["init_duration"] = max(int(kw["min_up"]), int(kw["min_down"]))
    kw.setdefault("init_power", 0.0)
    vals = {}
    for key in _GEN_KEYS:
        v = kw[key]
        vals[key] = int(v) if key in _INT_GEN_KEYS else float(v)
    return Generator(**vals)


def make_instance(generators: Iterable[Generator], storage: Storage, load, solar, wind,
                  id: str = "instance") -> UcInstance:
    """Assemble and validate an instance from in-memory data."""
    gens = tuple(generators)
    if not gens:
        raise InstanceValidationError("generators", "at least one generator required")
    horizon = len(load)
    if horizon < 1:
        raise InstanceValidationError("profiles.load", "empty horizon")
    profiles = Profiles(
        load=_as_series(load, "profiles.load", horizon),
        solar=_as_series(solar, "profiles.solar", horizon),
        wind=_as_series(wind, "profiles.wind", horizon),
    )
    for k, g in enumerate(gens):
        validate_generator(g, f"generators[{k}]")
    validate_storage(storage)
    return UcInstance(generators=gens, storage=storage, profiles=profiles, id=str(id))


def instance_from_dict(data: dict) -> UcInstance:
    try:
        gens_raw = data["generators"]
        prof = data["profiles"]
        horizon = int(data["horizon"])
        load, solar, wind = prof["load"], prof["solar"], prof["wind"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InstanceParseError(f"missing or malformed top-level field: {exc}") from exc
    if len(load) != horizon:
        raise InstanceValidationError("profiles.load", f"expected length {horizon}")
    gens = []
    for k, g in enumerate(gens_raw):
        try:
            gens.append(make_generator(**{key: g.get(key) for key in _GEN_KEYS if key in g}))
        except KeyError as exc:
            raise InstanceValidationError(f"generators[{k}].{exc.args[0]}", "missing") from exc
        except (TypeError, ValueError) as exc:
            raise InstanceValidationError(f"generators[{k}]", str(exc)) from exc
    st = data.get("storage") or {}
    try:
        storage = Storage(**{key: float(st[key]) for key in _STORAGE_KEYS if key in st})
    except (TypeError, ValueError) as exc:
        raise InstanceValidationError("storage", str(exc)) from exc
    return make_instance(gens, storage, load, solar, wind, id=data.get("id", "instance"))


def instance_to_dict(instance: UcInstance) -> dict:
    gens = []
    for g in instance.generators:
        gens.append({key: getattr(g, key) for key in _GEN_KEYS})
    p = instance.profiles
    return {
        "id": instance.id,
        "horizon": instance.horizon,
        "generators": gens,
        "storage": {key: getattr(instance.storage, key) for key in _STORAGE_KEYS},
        "profiles": {"load": p.load.tolist(), "solar": p.solar.tolist(), "wind": p.wind.tolist()},
    }


def dumps_instance(instance: UcInstance) -> str:
    return json.dumps(instance_to_dict(instance), sort_keys=True, indent=1)


def load_instance(path: str | Path) -> UcInstance:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InstanceParseError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise InstanceParseError(f"{path}: top level must be a JSON object")
    return instance_from_dict(data)


def save_instance(instance: UcInstance, path: str | Path) -> None:
    Path(path).write_text(dumps_instance(instance))


# ------------------------------------------------------------------ system series

def net_load(instance: UcInstance) -> SystemSeries:
    """Net load and hour-to-hour ramp requirement.

    The first ramp requirement is taken against the initial operating point,
    i.e. the summed ``init_power`` of all units.
    """
    L = np.array(instance.net_load)
    prev = np.empty_like(L)
    prev[0] = instance.gen_array("init_power").sum()
    prev[1:] = L[:-1]
    return SystemSeries(net_load=L, ramp_req=L - prev)


def compute_capacity(instance: UcInstance, schedule: np.ndarray,
                     series: SystemSeries | None = None) -> SystemSeries:
    """Attach online capacity and ramp-up capacity for ``schedule`` to the series."""
    s = check_schedule(instance, schedule)
    series = series or net_load(instance)
    p_max = instance.gen_array("p_max")
    ru = instance.gen_array("ramp_up")
    return SystemSeries(
        net_load=series.net_load,
        ramp_req=series.ramp_req,
        online_cap=p_max @ s,
        ramp_cap=ru @ s,
    )


# ------------------------------------------------------------------------ blocks

def compute_blocks(row, init_status: int = 0, init_duration: int = 0) -> list[Block]:
    """Split a binary row into maximal alternating on/off blocks.

    The leading block is credited with ``init_duration`` when its kind matches the
    initial status.
    """
    row = np.asarray(row)
    T = len(row)
    if T == 0:
        return []
    change = np.flatnonzero(row[1:] != row[:-1]) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change - 1, [T - 1]))
    blocks = []
    for a, b in zip(starts.tolist(), ends.tolist()):
        kind = "on" if row[a] else "off"
        credit = 0
        if a == 0 and int(bool(row[0])) == int(init_status):
            credit = int(init_duration)
        blocks.append(Block(a, b, kind, credit))
    return blocks


def row_violations(row, gen: Generator) -> tuple[list[Block], list[Block]]:
    """Min-up and min-down violations of one generator row.

    A block reaching the end of the horizon is never a violation. When the first
    hour switches status, the pre-horizon block (``init_duration`` hours long) must
    itself satisfy its minimum time; a failure is reported as a zero-length block
    at hour 0 carrying the credit.
    """
    ups, downs = [], []
    row = np.asarray(row)
    T = len(row)
    if T == 0:
        return ups, downs
    first = int(bool(row[0]))
    if first != gen.init_status:
        need = gen.min_up if gen.init_status == 1 else gen.min_down
        if gen.init_duration < need:
            pre = Block(0, -1, "on" if gen.init_status else "off", gen.init_duration)
            (ups if gen.init_status == 1 else downs).append(pre)
    for blk in compute_blocks(row, gen.init_status, gen.init_duration):
        if blk.end == T - 1:
            continue
        if blk.kind == "on" and blk.effective_length < gen.min_up:
            ups.append(blk)
        elif blk.kind == "off" and blk.effective_length < gen.min_down:
            downs.append(blk)
    return ups, downs


def row_is_valid(row, gen: Generator) -> bool:
    ups, downs = row_violations(row, gen)
    return not ups and not downs


def check_schedule(instance: UcInstance, schedule) -> np.ndarray:
    s = np.asarray(schedule)
    if s.shape != (instance.n_gen, instance.horizon):
        raise ValueError(
            f"schedule shape {s.shape} does not match ({instance.n_gen}, {instance.horizon})")
    if not np.all((s == 0) | (s == 1)):
        raise ValueError("schedule entries must be 0 or 1")
    return s.astype(np.int8, copy=False)


def validate_schedule(instance: UcInstance, schedule) -> ViolationReport:
    """Structural plausibility check of a commitment schedule.

    Reports min-up/min-down violations per generator and every hour whose online
    capacity plus full storage discharge falls short of net load. An empty report
    does not prove dispatch feasibility.
    """
    s = check_schedule(instance, schedule)
    report = ViolationReport()
    for i, g in enumerate(instance.generators):
        ups, downs = row_violations(s[i], g)
        report.min_up.extend((i, b) for b in ups)
        report.min_down.extend((i, b) for b in downs)
    cap = instance.gen_array("p_max") @ s + instance.storage.p_discharge_max
    short = np.flatnonzero(cap < instance.net_load - 1e-9)
    report.capacity.extend(short.tolist())
    return report


def startups(instance: UcInstance, schedule) -> np.ndarray:
    """Binary startup indicators, crediting the initial status."""
    s = np.asarray(schedule, dtype=np.int8)
    prev = np.empty_like(s)
    prev[:, 0] = instance.gen_array("init_status").astype(np.int8)
    prev[:, 1:] = s[:, :-1]
    return ((s == 1) & (prev == 0)).astype(np.int8)


def shutdowns(instance: UcInstance, schedule) -> np.ndarray:
    s = np.asarray(schedule, dtype=np.int8)
    prev = np.empty_like(s)
    prev[:, 0] = instance.gen_array("init_status").astype(np.int8)
    prev[:, 1:] = s[:, :-1]
    return ((s == 0) & (prev == 1)).astype(np.int8)
