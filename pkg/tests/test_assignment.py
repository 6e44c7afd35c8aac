import itertools

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from minsight.assignment import AssignmentProblem, solve_assignment


def brute_force(cost):
    nr, nc = cost.shape
    best, arg = np.inf, None
    for cols in itertools.permutations(range(nc), nr):
        c = cost[np.arange(nr), cols].sum()
        if c < best:
            best, arg = c, cols
    return best, arg


def test_two_by_two():
    cols, total = solve_assignment(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert cols.tolist() == [0, 1]
    assert total == 2.0


def test_five_by_seven_matches_exhaustive():
    cost = np.random.default_rng(3).uniform(0, 10, (5, 7))
    cols, total = solve_assignment(cost)
    best, _ = brute_force(cost)
    assert total == best
    assert len(set(cols.tolist())) == 5


def test_uniform_costs_give_identity():
    cols, total = solve_assignment(np.full((4, 9), 2.5))
    assert cols.tolist() == [0, 1, 2, 3]
    assert total == 4 * 2.5


def test_matches_scipy_on_larger_instances():
    rng = np.random.default_rng(0)
    for _ in range(20):
        nr = rng.integers(5, 40)
        nc = nr + rng.integers(0, 30)
        cost = rng.uniform(0, 1, (nr, nc))
        _, total = solve_assignment(cost)
        r, c = linear_sum_assignment(cost)
        assert total == pytest.approx(cost[r, c].sum(), abs=1e-9)


def test_integer_costs_with_ties_are_exact():
    rng = np.random.default_rng(5)
    for _ in range(100):
        nr, nc = rng.integers(1, 6), 6
        cost = rng.integers(0, 4, (nr, nc)).astype(float)
        _, total = solve_assignment(cost)
        assert total == brute_force(cost)[0]


@pytest.mark.parametrize(
    "cost",
    [np.ones((3, 2)), np.array([[np.nan, 1.0]]), np.array([[np.inf, 1.0]]), np.ones(3)],
)
def test_invalid_inputs(cost):
    with pytest.raises(ValueError):
        solve_assignment(cost)


def test_problem_rejects_negative():
    with pytest.raises(ValueError):
        AssignmentProblem(np.array([[-1.0, 0.0]]))


def test_deterministic():
    cost = np.random.default_rng(9).integers(0, 3, (6, 8)).astype(float)
    a, _ = solve_assignment(cost)
    b, _ = solve_assignment(cost.copy())
    assert np.array_equal(a, b)
