import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ucwarm.core import (Block, InstanceParseError, InstanceValidationError, compute_blocks,
                         compute_capacity, dumps_instance, load_instance, net_load, row_violations,
                         save_instance, validate_schedule)
from ucwarm.datagen import small_random_instance
from ucwarm.milp import brute_force_uc

from conftest import gen, instance
from oracles import blocks_to_row, naive_min_time_violations


def minimal_doc(**gen_over):
    g = dict(id=0, c_var=10, c_noload=5, c_startup=100, p_min=10, p_max=100, min_up=1,
             min_down=1, ramp_up=50, ramp_down=50, startup_ramp=50, init_status=0,
             init_duration=0, init_power=0)
    g.update(gen_over)
    return {"id": "mini", "horizon": 2, "generators": [g], "storage": {},
            "profiles": {"load": [20, 30], "solar": [0, 0], "wind": [0, 0]}}


def test_load_minimal(tmp_path):
    p = tmp_path / "i.json"
    p.write_text(json.dumps(minimal_doc()))
    inst = load_instance(p)
    assert inst.n_gen == 1 and inst.horizon == 2


def test_load_rejects_pmin_above_pmax(tmp_path):
    p = tmp_path / "i.json"
    p.write_text(json.dumps(minimal_doc(p_min=120)))
    with pytest.raises(InstanceValidationError) as exc:
        load_instance(p)
    assert exc.value.path == "generators[0].p_min"
    assert "generator 0" in str(exc.value)


def test_load_parse_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(InstanceParseError):
        load_instance(p)
    p.write_text(json.dumps({"id": "x"}))
    with pytest.raises(InstanceParseError):
        load_instance(p)


def test_round_trip_byte_identical(tmp_path, rng):
    inst = small_random_instance(rng, 4, 8)
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    save_instance(inst, a)
    save_instance(load_instance(a), b)
    assert a.read_bytes() == b.read_bytes()
    assert dumps_instance(load_instance(b)) == a.read_text()


def test_net_load_examples():
    g = gen(init_status=1, init_duration=3, init_power=40.0)
    inst = instance([g], [100.0, 50.0], solar=[30.0, 30.0], wind=[20.0, 20.0])
    s = net_load(inst)
    assert s.net_load.tolist() == [50.0, 0.0]
    inst2 = instance([g], [50.0, 80.0])
    s2 = net_load(inst2)
    assert s2.ramp_req[1] == 30.0
    assert s2.ramp_req[0] == 50.0 - 40.0  # against the initial operating point


def test_net_load_shift_linearity(rng):
    inst = small_random_instance(rng, 3, 6)
    shifted = instance(inst.generators, inst.profiles.load + 7.5, inst.profiles.solar,
                       inst.profiles.wind, inst.storage)
    assert np.allclose(net_load(shifted).net_load, net_load(inst).net_load + 7.5)


def test_compute_capacity():
    inst = instance([gen(0, p_max=50.0, ramp_up=20.0), gen(1, p_max=30.0, ramp_up=10.0)],
                    [10.0, 10.0])
    s = compute_capacity(inst, np.array([[1, 0], [1, 1]]))
    assert s.online_cap.tolist() == [80.0, 30.0]
    assert s.ramp_cap.tolist() == [30.0, 10.0]


def test_blocks_examples():
    assert compute_blocks([1, 1, 1, 1], init_status=0) == [Block(0, 3, "on")]
    assert compute_blocks([1, 1, 0, 0, 1]) == [Block(0, 1, "on"), Block(2, 3, "off"),
                                               Block(4, 4, "on")]
    b = compute_blocks([1, 1, 1, 0], init_status=1, init_duration=5)
    assert b[0].effective_length == 3 + 5


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=30), st.integers(0, 1),
       st.integers(0, 6))
def test_blocks_tile_and_round_trip(row, init_status, init_duration):
    blocks = compute_blocks(row, init_status, init_duration)
    assert blocks[0].start == 0 and blocks[-1].end == len(row) - 1
    for a, b in zip(blocks, blocks[1:]):
        assert b.start == a.end + 1 and a.kind != b.kind
    assert blocks_to_row(blocks, len(row)).tolist() == row


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=16), st.integers(1, 5),
       st.integers(1, 5), st.integers(0, 1), st.integers(0, 6))
def test_row_violations_match_naive_count(row, mu, md, init_status, init_duration):
    g = gen(min_up=mu, min_down=md, init_status=init_status, init_duration=init_duration,
            init_power=10.0 if init_status else 0.0)
    ups, downs = row_violations(np.array(row), g)
    assert len(ups) + len(downs) == naive_min_time_violations(row, g)


def test_validate_schedule_min_up_and_capacity():
    g = gen(min_up=3, min_down=1)
    inst = instance([g], [50.0] * 6)
    rep = validate_schedule(inst, np.array([[0, 1, 1, 0, 0, 0]]))
    assert len(rep.min_up) == 1 and rep.min_up[0][1] == Block(1, 2, "on")
    rep = validate_schedule(inst, np.zeros((1, 6), dtype=int))
    assert rep.capacity == list(range(6))


def test_validate_schedule_empty_on_oracle_solution(rng):
    seen = 0
    for k in range(8):
        inst = small_random_instance(rng, 2, 5, id=f"v{k}")
        res = brute_force_uc(inst)
        if res.feasible:
            seen += 1
            assert validate_schedule(inst, res.schedule).empty
    assert seen > 0


def test_schedule_shape_checked():
    inst = instance([gen()], [10.0, 10.0])
    with pytest.raises(ValueError):
        validate_schedule(inst, np.ones((2, 2)))
    with pytest.raises(ValueError):
        validate_schedule(inst, np.array([[0, 2]]))
