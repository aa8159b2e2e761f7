import csv

import numpy as np
import pytest

from ucwarm.core import Storage, make_instance
from ucwarm.datagen import desk_system, small_random_instance
from ucwarm.dispatch import (Dispatch, DispatchInfeasible, commitment_cost, economic_dispatch,
                             total_cost, try_dispatch)
from ucwarm.milp import brute_force_uc, solve_uc

from conftest import gen, instance


def check_dispatch(inst, s, d: Dispatch, tol=1e-6):
    pmin, pmax = inst.gen_array("p_min")[:, None], inst.gen_array("p_max")[:, None]
    assert np.all(d.p >= s * pmin - tol) and np.all(d.p <= s * pmax + tol)
    bal = d.p.sum(axis=0) + d.discharge - d.charge - d.curtail
    assert np.allclose(bal, inst.net_load, atol=tol)
    st = inst.storage
    prev = np.concatenate([[st.soc_init], d.soc[:-1]])
    rec = prev + st.eff_charge * d.charge - d.discharge / st.eff_discharge
    assert np.allclose(d.soc, rec, atol=tol)


def test_single_unit_follows_load():
    inst = instance([gen(p_min=10.0, p_max=100.0)], [40.0, 60.0, 55.0])
    d = economic_dispatch(inst, np.ones((1, 3), dtype=int))
    assert np.allclose(d.p[0], [40.0, 60.0, 55.0])
    assert np.allclose(d.curtail, 0.0)


def test_all_off_spills_solar():
    inst = instance([gen()], [0.0, 0.0], solar=[12.0, 30.0])
    s = np.zeros((1, 2), dtype=int)
    d = economic_dispatch(inst, s)
    assert np.allclose(d.curtail, [12.0, 30.0])
    assert total_cost(inst, s, d) == 0.0


def test_total_cost_arithmetic():
    g = gen(c_var=10.0, c_noload=5.0, c_startup=100.0, p_min=0.0, p_max=100.0)
    inst = instance([g], [50.0, 50.0])
    s = np.ones((1, 2), dtype=int)
    d = economic_dispatch(inst, s)
    assert total_cost(inst, s, d) == pytest.approx(10 * 100 + 5 * 2 + 100)


def test_no_startup_cost_when_already_on():
    g = gen(c_startup=100.0, p_min=0.0, init_status=1, init_duration=5, init_power=50.0)
    inst = instance([g], [50.0, 50.0])
    s = np.ones((1, 2), dtype=int)
    assert commitment_cost(inst, s) == pytest.approx(2 * g.c_noload)


def test_oracle_cost_recombines(rng):
    done = 0
    while done < 4:
        inst = small_random_instance(rng, 3, 5)
        ref = brute_force_uc(inst)
        if not ref.feasible:
            continue
        d = economic_dispatch(inst, ref.schedule)
        check_dispatch(inst, ref.schedule, d)
        assert total_cost(inst, ref.schedule, d) == pytest.approx(ref.objective, abs=1e-6)
        done += 1


def test_milp_objective_equals_recomputed_cost():
    inst = desk_system()
    res = solve_uc(inst)
    assert total_cost(inst, res.schedule, res.dispatch) == pytest.approx(res.objective, rel=1e-12)
    d = economic_dispatch(inst, res.schedule)
    check_dispatch(inst, res.schedule, d)


def test_variable_cost_is_linear():
    inst = desk_system()
    res = solve_uc(inst)
    var = total_cost(inst, res.schedule, res.dispatch) - commitment_cost(inst, res.schedule)
    gens = [g.__class__(**{**g.__dict__, "c_var": 2 * g.c_var}) for g in inst.generators]
    inst2 = make_instance(gens, inst.storage, inst.profiles.load, inst.profiles.solar,
                          inst.profiles.wind)
    var2 = total_cost(inst2, res.schedule, res.dispatch) - commitment_cost(inst2, res.schedule)
    assert var2 == pytest.approx(2 * var, rel=1e-12)


def test_infeasible_reports_hour():
    g = gen(p_max=100.0)
    inst = instance([g], [50.0, 50.0, 150.0, 50.0])
    with pytest.raises(DispatchInfeasible) as exc:
        economic_dispatch(inst, np.ones((1, 4), dtype=int))
    assert exc.value.hour == 2
    assert try_dispatch(inst, np.ones((1, 4), dtype=int)) is None


def test_ramp_infeasibility_hour():
    g = gen(p_min=0.0, p_max=200.0, ramp_up=30.0, ramp_down=30.0, init_status=1,
            init_duration=5, init_power=50.0)
    inst = instance([g], [60.0, 90.0, 150.0])
    with pytest.raises(DispatchInfeasible) as exc:
        economic_dispatch(inst, np.ones((1, 3), dtype=int))
    assert exc.value.hour == 2


def test_extra_full_horizon_unit_keeps_feasibility(rng):
    # premise: the extra unit has p_min = 0, so it can always idle at zero output
    base = small_random_instance(rng, 3, 6)
    res = solve_uc(base)
    if not res.feasible:
        pytest.skip("random base instance infeasible")
    extra = gen(9, p_min=0.0, p_max=50.0, ramp_up=50.0, ramp_down=50.0)
    inst = make_instance(list(base.generators) + [extra], base.storage, base.profiles.load,
                         base.profiles.solar, base.profiles.wind)
    s = np.vstack([res.schedule, np.ones((1, 6), dtype=np.int8)])
    assert try_dispatch(inst, s) is not None


def test_storage_shifts_energy():
    st = Storage(energy_cap=100.0, p_charge_max=50.0, p_discharge_max=50.0, eff_charge=1.0,
                 eff_discharge=1.0, soc_init=50.0)
    inst = instance([gen(p_min=0.0, p_max=60.0)], [20.0, 100.0], storage=st)
    d = economic_dispatch(inst, np.ones((1, 2), dtype=int))
    check_dispatch(inst, np.ones((1, 2)), d)
    assert d.soc[-1] >= 50.0 - 1e-9


def test_dispatch_csv(tmp_path):
    inst = instance([gen(), gen(1)], [30.0, 40.0])
    d = economic_dispatch(inst, np.ones((2, 2), dtype=int))
    d.to_csv(tmp_path / "d.csv")
    rows = list(csv.reader(open(tmp_path / "d.csv")))
    assert rows[0] == ["t", "p0", "p1", "charge", "discharge", "soc", "curtail"]
    assert len(rows) == 3
