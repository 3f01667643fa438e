import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from closim.ilp import (
    Constraint,
    IlpTimeout,
    Infeasible,
    IntegerProgram,
    ilp_solve,
)


def brute_force(p: IntegerProgram):
    """Enumerate the whole (small) domain; returns (best_values, best_obj)
    or None."""
    names = list(p.bounds)
    ranges = [range(p.bounds[v][0], p.bounds[v][1] + 1) for v in names]
    best = None
    for combo in itertools.product(*ranges):
        vals = dict(zip(names, combo))
        ok = True
        for con in p.constraints:
            lhs = sum(c * vals[v] for v, c in con.coeffs.items())
            if con.sense == "<=" and lhs > con.rhs + 1e-9:
                ok = False
            elif con.sense == ">=" and lhs < con.rhs - 1e-9:
                ok = False
            elif con.sense == "==" and abs(lhs - con.rhs) > 1e-9:
                ok = False
            if not ok:
                break
        if not ok:
            continue
        obj = sum(p.objective.get(v, 0.0) * vals[v] for v in names)
        if best is None or obj < best[1] - 1e-9:
            best = (vals, obj)
    return best


def random_program(rng: random.Random, n_vars=5, n_cons=4) -> IntegerProgram:
    p = IntegerProgram()
    names = ["x%d" % i for i in range(n_vars)]
    for v in names:
        lo = rng.randint(0, 2)
        p.add_var(v, lo, lo + rng.randint(0, 3))
    for _ in range(n_cons):
        support = rng.sample(names, rng.randint(1, n_vars))
        coeffs = {v: rng.choice([-2, -1, 1, 2, 3]) for v in support}
        sense = rng.choice(["<=", ">=", "=="])
        rhs = rng.randint(-4, 10)
        p.add_constraint(coeffs, sense, rhs)
    p.set_objective({v: rng.uniform(-3, 3) for v in rng.sample(names, n_vars - 1)})
    return p


class TestApi:
    def test_duplicate_var(self):
        p = IntegerProgram()
        p.add_var("x")
        with pytest.raises(ValueError):
            p.add_var("x")

    def test_empty_domain(self):
        with pytest.raises(ValueError):
            IntegerProgram().add_var("x", 2, 1)

    def test_unknown_var_in_constraint(self):
        p = IntegerProgram()
        with pytest.raises(ValueError):
            p.add_constraint({"y": 1}, "<=", 1)

    def test_bad_sense(self):
        p = IntegerProgram()
        p.add_var("x")
        with pytest.raises(ValueError):
            p.add_constraint({"x": 1}, "<", 1)

    def test_dump_contains_sections(self):
        p = IntegerProgram()
        p.add_var("x", 0, 3)
        p.add_constraint({"x": 2}, "<=", 4)
        p.set_objective({"x": 1.0})
        text = p.dump()
        for section in ("minimize", "subject to", "bounds", "integer"):
            assert section in text


class TestSolve:
    def test_simple_minimum(self):
        p = IntegerProgram()
        p.add_var("x", 0, 10)
        p.add_constraint({"x": 1}, ">=", 3)
        p.set_objective({"x": 2.0})
        sol = ilp_solve(p)
        assert sol.values["x"] == 3 and sol.objective == pytest.approx(6.0)

    def test_negative_coefficient_prefers_high(self):
        p = IntegerProgram()
        p.add_var("x", 0, 5)
        p.set_objective({"x": -1.0})
        assert ilp_solve(p).values["x"] == 5

    def test_infeasible(self):
        p = IntegerProgram()
        p.add_var("x", 0, 1)
        p.add_constraint({"x": 1}, ">=", 2)
        with pytest.raises(Infeasible):
            ilp_solve(p)

    def test_infeasible_equality_pair(self):
        p = IntegerProgram()
        p.add_var("x", 0, 1)
        p.add_var("y", 0, 1)
        p.add_constraint({"x": 1, "y": 1}, "==", 2)
        p.add_constraint({"x": 1, "y": 1}, "<=", 1)
        with pytest.raises(Infeasible):
            ilp_solve(p)

    def test_timeout(self):
        # 26 coupled vars with a tiny budget
        p = IntegerProgram()
        names = ["x%d" % i for i in range(26)]
        for v in names:
            p.add_var(v, 0, 1)
        rng = random.Random(0)
        for i in range(40):
            support = rng.sample(names, 5)
            p.add_constraint({v: rng.choice([-1, 1]) for v in support}, "<=", 1)
        p.set_objective({v: rng.uniform(-1, 1) for v in names})
        with pytest.raises(IlpTimeout):
            ilp_solve(p, time_budget=1e-5)

    def test_cardinality_selection(self):
        # pick exactly 2 of 5 binaries at least cost
        p = IntegerProgram()
        costs = {"a": 5.0, "b": 1.0, "c": 3.0, "d": 0.5, "e": 2.0}
        for v in costs:
            p.add_var(v)
        p.add_constraint({v: 1 for v in costs}, "==", 2)
        p.set_objective(costs)
        sol = ilp_solve(p)
        assert {v for v, x in sol.values.items() if x} == {"b", "d"}
        assert sol.objective == pytest.approx(1.5)

    @pytest.mark.parametrize("seed", range(60))
    def test_matches_enumeration(self, seed):
        rng = random.Random(seed)
        p = random_program(rng)
        want = brute_force(p)
        if want is None:
            with pytest.raises(Infeasible):
                ilp_solve(p)
        else:
            sol = ilp_solve(p)
            assert sol.objective == pytest.approx(want[1])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(min_value=1000, max_value=99999))
def test_enumeration_property(seed):
    rng = random.Random(seed)
    p = random_program(rng, n_vars=4, n_cons=3)
    want = brute_force(p)
    if want is None:
        with pytest.raises(Infeasible):
            ilp_solve(p)
    else:
        assert ilp_solve(p).objective == pytest.approx(want[1])
