import numpy as np
import pytest

import ucwarm.lp as lpmod
from ucwarm.lp import (INFEASIBLE, OPTIMAL, UNBOUNDED, NumericalFailure, make_lp, max_violation,
                       solve_lp, write_mps)

from oracles import random_bounded_lp, vertex_enumeration

INF = np.inf


def test_single_bound():
    sol = solve_lp(make_lp([1.0], [[1.0]], [1.0], [INF], [-INF], [10.0]))
    assert sol.status == OPTIMAL
    assert sol.x[0] == pytest.approx(1.0) and sol.objective == pytest.approx(1.0)


def test_symmetric_optimum():
    sol = solve_lp(make_lp([-1.0, -1.0], [[1.0, 1.0]], [-INF], [1.0], [0, 0], [1, 1]))
    assert sol.objective == pytest.approx(-1.0)
    assert sol.x.sum() == pytest.approx(1.0)


def test_infeasible_and_unbounded():
    infeas = make_lp([1.0, 1.0], [[1.0, 1.0]], [5.0], [INF], [0, 0], [1, 2])
    assert solve_lp(infeas).status == INFEASIBLE
    assert solve_lp(infeas, backend="highs").status == INFEASIBLE
    unb = make_lp([-1.0, 0.0], [[1.0, -1.0]], [-INF], [1.0], [0, 0], [INF, INF])
    assert solve_lp(unb).status == UNBOUNDED
    assert solve_lp(unb, backend="highs").status == UNBOUNDED


def test_infeasible_certificate_by_sampling(rng):
    lp = make_lp([1.0, 2.0], [[1.0, 1.0], [1.0, -1.0]], [3.0, -INF], [INF, -2.5], [0, 0], [1, 1])
    assert solve_lp(lp).status == INFEASIBLE
    pts = rng.uniform(0, 1, (1000, 2))
    assert all(max_violation(lp, p) > 0 for p in pts)


def test_range_and_equality_rows_agree_with_highs(rng):
    for _ in range(20):
        n, m = 6, 5
        A = rng.normal(size=(m, n))
        x0 = rng.uniform(0, 1, n)
        ax = A @ x0
        lo = ax - rng.uniform(0, 1, m)
        hi = ax + rng.uniform(0, 1, m)
        hi[0] = lo[0] = ax[0]  # an equality row
        lp = make_lp(rng.normal(size=n), A, lo, hi, np.zeros(n), np.full(n, 2.0))
        a, b = solve_lp(lp), solve_lp(lp, backend="highs")
        assert a.status == b.status == OPTIMAL
        assert a.objective == pytest.approx(b.objective, rel=1e-8, abs=1e-9)
        assert max_violation(lp, a.x) <= 1e-7


def test_matches_vertex_enumeration(rng):
    for k in range(15):
        n, m = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        c, A, b = random_bounded_lp(rng, n, m)
        lp = make_lp(c, A, np.full(m, -INF), b, np.zeros(n), np.full(n, INF))
        sol = solve_lp(lp)
        ref = vertex_enumeration(c, A, b)
        assert sol.status == OPTIMAL
        assert sol.objective == pytest.approx(ref, rel=1e-8, abs=1e-10)


def test_objective_resubstitution_and_scaling(rng):
    for _ in range(10):
        c, A, b = random_bounded_lp(rng, 5, 6)
        lp = make_lp(c, A, np.full(6, -INF), b, np.zeros(5), np.full(5, INF))
        sol = solve_lp(lp)
        assert float(c @ sol.x) == pytest.approx(sol.objective, rel=1e-9, abs=1e-12)
        scaled = solve_lp(lp.with_objective(3.7 * c))
        assert scaled.status == sol.status
        act = lambda x: tuple(np.isclose(A @ x, b, atol=1e-7)) + tuple(np.isclose(x, 0, atol=1e-7))  # noqa: E731
        assert act(scaled.x) == act(sol.x)


def test_deterministic(rng):
    c, A, b = random_bounded_lp(rng, 8, 8)
    lp = make_lp(c, A, np.full(8, -INF), b, np.zeros(8), np.full(8, INF))
    a, b2 = solve_lp(lp), solve_lp(lp)
    assert np.array_equal(a.x, b2.x) and a.iterations == b2.iterations


def test_iteration_cap_raises(monkeypatch, rng):
    monkeypatch.setattr(lpmod, "ITER_CAP_FACTOR", 0)
    c, A, b = random_bounded_lp(rng, 30, 30)
    c = -np.abs(c) - 1.0
    lp = make_lp(c, A, np.full(30, -INF), b, np.zeros(30), np.full(30, INF))
    with pytest.raises(NumericalFailure):
        solve_lp(lp)


def test_mps_dump(tmp_path):
    lp = make_lp([1.0, -2.0], [[1.0, 1.0], [1.0, -1.0]], [1.0, -INF], [4.0, 0.5], [0, -INF], [3, INF])
    path = tmp_path / "p.mps"
    write_mps(lp, path)
    text = path.read_text()
    for section in ("ROWS", "COLUMNS", "RHS", "RANGES", "BOUNDS", "ENDATA"):
        assert section in text
    import highspy
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    h.readModel(str(path))
    h.run()
    assert h.getInfo().objective_function_value == pytest.approx(solve_lp(lp).objective)
