import math

import numpy as np
import pytest

from exante_ic.core import (
    InterimRules, OutcomeSpace, PlayerModel, Strategy, TypeSpace, evaluate, linear_allocation,
    make_model_budget, make_model_roi, outcome_range, payoff_matrices, posted_price,
)
from exante_ic.errors import DimensionError

from helpers import budget_model, constant_rules, identity


def qv(q, v):
    return np.sum(np.asarray(q) * np.asarray(v), axis=-1)


def test_grid_is_cartesian_product_in_c_order():
    s = TypeSpace.grid([3, 2], [[0, 1], [10, 20]])
    assert s.size == 6 and s.dim == 2
    assert s.points[:, 0].tolist() == [0, 0, 0.5, 0.5, 1, 1]
    assert s.points[:, 1].tolist() == [10, 20] * 3
    assert np.allclose(s.spacing, [0.5, 10])
    assert math.fsum(s.weights) == 1.0


def test_weights_must_sum_to_one():
    with pytest.raises(ValueError, match="sum to 1"):
        TypeSpace.grid([3], [[0, 1]], weights=[0.3, 0.3, 0.3])


def test_points_must_be_distinct():
    with pytest.raises(ValueError, match="distinct"):
        TypeSpace.from_points([[0.0], [0.0]])


def test_density_weights_are_normalised():
    s = TypeSpace.grid([4], [[0, 3]], density=lambda v: 1 + v[:, 0])
    assert np.allclose(s.weights, np.array([1, 2, 3, 4]) / 10)


def test_spaces_are_immutable():
    s = TypeSpace.grid([3], [[0, 1]])
    with pytest.raises(ValueError):
        s.weights[0] = 1.0


def test_interior_and_neighbors():
    s = TypeSpace.grid([3, 4], [[0, 1], [0, 1]])
    assert s.interior_mask().sum() == 2
    i = 5  # (1, 1)
    assert s.neighbor(i, 0, 1) == 9 and s.neighbor(i, 1, -1) == 4
    assert s.neighbor(0, 0, -1) is None


def test_outcome_space_bounds():
    o = OutcomeSpace(1, "probability of winning", [[0, 1]])
    assert o.contains([[0.0], [1.0]]) and not o.contains([[1.5]])
    with pytest.raises(DimensionError):
        OutcomeSpace(0)


def test_model_constants_validated():
    with pytest.raises(ValueError):
        PlayerModel(qv, qv, 2, 1, 0.0)


def test_roi_model_constants():
    for gamma in (0.0, 0.25, 3.0):
        m = make_model_roi(gamma, qv)
        assert (m.c1, m.c2, m.C) == (0, 1, 0.0)
        q, v = np.array([[0.7]]), np.array([[0.9]])
        assert m.f(q, v) == pytest.approx(m.u(q, v) / (1 + gamma), rel=1e-15)
    assert make_model_roi(0.0, qv).f(np.array([0.4]), np.array([0.5])) == qv([0.4], [0.5])
    assert make_model_roi(1.0, qv).f(np.array([1.0]), np.array([0.6])) == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(ValueError):
        make_model_roi(-0.1, qv)


def test_budget_model_constants():
    m = make_model_budget(0.7, qv)
    assert (m.c1, m.c2, m.C) == (1, 1, -0.7)
    assert np.all(m.f(np.ones((3, 1)), np.ones((3, 1))) == 0)
    assert make_model_budget(0.0, qv).C == 0.0
    with pytest.raises(ValueError):
        make_model_budget(-1.0, qv)


def test_zero_budget_rejects_any_positive_spend():
    s = TypeSpace.grid([3], [[0, 1]])
    rep = evaluate(constant_rules([1.0], 1e-6), make_model_budget(0.0, qv), s)
    assert not rep.feasible


def test_linear_form_check():
    m = budget_model(0.1)
    m.check_linear_form(np.array([[0.2], [1.0]]), np.array([[0.5], [1.0]]))
    bad = PlayerModel(lambda q, v: qv(q, v) ** 2, m.f, 1, 1, -0.1, u_star=identity, f_star=m.f_star)
    with pytest.raises(ValueError, match="linear form"):
        bad.check_linear_form(np.array([[0.5]]), np.array([[0.5]]))


def test_posted_price_three_types_matches_hand_sum():
    # V = {0, 0.5, 1}, t = 0.4: types 0.5 and 1 buy at 0.4
    s = TypeSpace.grid([3], [[0, 1]])
    m = make_model_budget(0.3, qv)
    rep = evaluate(posted_price(0.4), m, s)
    utility = (0.0 + (0.5 - 0.4) + (1.0 - 0.4)) / 3
    spend = (0.0 + 0.4 + 0.4) / 3
    assert rep.utility == pytest.approx(utility, abs=1e-12)
    assert rep.constraint_value == pytest.approx(-spend, abs=1e-12)


def test_posted_price_feasibility_flags():
    s = TypeSpace.grid([3], [[0, 1]])
    rep = evaluate(posted_price(0.4), make_model_budget(0.3, qv), s)
    assert rep.feasible and not rep.binding


def test_budget_slack_example():
    # truthful spend 0.2 under budget 0.3
    s = TypeSpace.grid([2], [[0, 1]])
    rules = InterimRules(lambda v: np.ones_like(v), lambda v: np.full(v.shape[:-1], 0.2))
    rep = evaluate(rules, make_model_budget(0.3, qv), s)
    assert rep.constraint_value == pytest.approx(-0.2)
    assert rep.feasible and not rep.binding


def test_constant_mechanism_expectation():
    s = TypeSpace.grid([4], [[0, 1]], density=lambda v: 1 + v[:, 0])
    m = make_model_roi(0.5, qv)
    rep = evaluate(constant_rules([0.3], 0.1), m, s)
    expect_u = math.fsum(s.weights * 0.3 * s.points[:, 0])
    assert rep.utility == pytest.approx(expect_u, abs=1e-15)
    assert rep.constraint_value == pytest.approx(expect_u / 1.5 - 0.1, abs=1e-15)


def test_evaluate_rejects_wrong_strategy_size():
    s = TypeSpace.grid([3], [[0, 1]])
    with pytest.raises(DimensionError):
        evaluate(posted_price(0.4), budget_model(1), s, Strategy.truthful(4))


def test_outcome_range_examples():
    s = TypeSpace.grid([11], [[0, 1]])
    assert outcome_range(constant_rules([0.25], 0), s).tolist() == [[0.25]]
    assert outcome_range(posted_price(0.5), s).tolist() == [[0.0], [1.0]]
    assert len(outcome_range(linear_allocation([1.0]), s)) == 11


def test_outcome_dedup_tolerance():
    s = TypeSpace.grid([3], [[0, 1]])
    rules = InterimRules.tabulated(s, [[0.5], [0.5 + 5e-10], [0.5 + 2e-9]], [0, 0, 0])
    assert len(outcome_range(rules, s)) == 2


def test_strategy_validation():
    with pytest.raises(ValueError):
        Strategy(np.array([[0.5, 0.4], [0, 1]]))
    with pytest.raises(DimensionError):
        Strategy(np.ones((2, 3)) / 3)
    s = Strategy(np.array([[0.25, 0.75], [0, 1]]))
    assert s.fractional_rows().tolist() == [0]
    assert s.triples() == [(0, 0, 0.25), (0, 1, 0.75), (1, 1, 1.0)]


def test_tabulated_rules_exact_on_nodes_and_interpolate_between():
    s = TypeSpace.grid([3], [[0, 1]])
    r = InterimRules.tabulated(s, [[0.0], [0.5], [1.0]], [0.0, 0.1, 0.4])
    X, P = r.on(s)
    assert X[:, 0].tolist() == [0.0, 0.5, 1.0]
    assert float(r.p(np.array([[0.75]]))[0]) == pytest.approx(0.25)


def test_payoff_matrices_entries():
    s = TypeSpace.grid([3], [[0, 1]])
    A, B = payoff_matrices(posted_price(0.4), make_model_roi(1.0, qv), s)
    # type 1.0 reporting 0.5: gets the item, pays 0.4
    assert A[2, 1] == pytest.approx(1.0)
    assert B[2, 1] == pytest.approx(0.5 - 0.4)
