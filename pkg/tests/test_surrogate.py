import warnings

import numpy as np
import pytest

from exante_ic.builder import NonMonotoneWarning, induce_rules, solve_multiplier
from exante_ic.core import InterimRules, TypeSpace, linear_allocation, make_model_budget, make_model_roi
from exante_ic.errors import AssumptionError, DegenerateScalingError, NonIntegrableError
from exante_ic.oracle import verify_ic
from exante_ic.surrogate import (
    differential_check, full_theorem3_check, reconstruct_payment, surrogate_field, write_field_csv,
)

from helpers import (
    budget_model, constant_rules, curl_allocation, identity, midpoint_mechanism, midpoint_prices,
    quadratic_potential_rules, quasi_linear_model, smooth_rules,
)


def linear_midpoint_mechanism(kind, n=101):
    """Linear allocation with midpoint switches; the ROI menu is tuned to bind at r = 1."""
    s = TypeSpace.grid([n], [[0.0, 1.0]])
    v = s.points[:, 0]
    q = 0.2 + 0.6 * v
    mid = midpoint_prices(q, v)
    if kind == "budget":
        model, prices = budget_model(0.05), mid
    else:
        spend, value = s.weights @ mid, s.weights @ (q * v)
        t = spend / (value - spend)  # 1 / (1 + gamma)
        model, prices = make_model_roi(1 / t - 1, u_star=identity), (1 + t) * mid
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonMonotoneWarning)
        mech = solve_multiplier(q[:, None], prices, model, s)
    return s, model, mech, induce_rules(mech, model, s)


def test_constant_mechanism_has_zero_gradients():
    s = TypeSpace.grid([7], [[0, 1]])
    rep = differential_check(constant_rules([0.3], 0.1), budget_model(0.2), s, step=1e-3)
    assert rep.max_residual == 0.0
    interior = s.interior_mask()
    assert np.all(rep.u_hat[interior] == 0) and np.all(rep.f_hat[interior] == 0)
    assert np.all(np.isnan(rep.residual[~interior]))


def test_residual_consistent_with_stored_fields():
    s, m, mech, rules = midpoint_mechanism(n=21, budget=0.05)
    rep = differential_check(rules, m, s)
    i = s.interior_mask()
    again = np.max(np.abs(rep.u_hat[i] + rep.r * rep.f_hat[i]), axis=1)
    assert np.array_equal(again, rep.residual[i])


def test_smooth_residual_is_second_order():
    s = TypeSpace.grid([11], [[0.0, 1.0]])
    m = quasi_linear_model()
    r1 = differential_check(smooth_rules(), m, s, r=0.0, step=1e-2).max_residual
    r2 = differential_check(smooth_rules(), m, s, r=0.0, step=5e-3).max_residual
    assert r1 == pytest.approx(2 / 3 * 1e-4, rel=1e-6)
    assert np.log2(r1 / r2) >= 1.8


def test_non_ic_residual_does_not_vanish():
    # payments too flat for the allocation: u_hat + r f_hat stays away from 0
    s = TypeSpace.grid([11], [[0.0, 1.0]])
    m = quasi_linear_model()
    rules = InterimRules(lambda v: np.asarray(v) ** 2, lambda v: 0.2 * np.asarray(v)[..., 0] ** 3)
    assert not verify_ic(rules, m, s).ic
    res = [differential_check(rules, m, s, r=0.0, step=h).max_residual for h in (1e-2, 1e-3, 1e-4)]
    assert min(res) > 0.5


def test_tabulated_small_step_falls_back_to_grid():
    s = TypeSpace.grid([5], [[0, 1]])
    rules = InterimRules.tabulated(s, [[0], [0.2], [0.5], [0.7], [1]], [0, 0.01, 0.1, 0.2, 0.45])
    rep = differential_check(rules, budget_model(1), s, step=1e-6)
    assert rep.grid_fallback and rep.step is None


def test_r_zero_field_is_quasi_linear_utility():
    s = TypeSpace.grid([9], [[0, 1]])
    m = budget_model(0.3)
    rules = linear_allocation([0.8], 0.1, price_poly=[0.0, 0.1, 0.3])
    field = surrogate_field(rules, m, s, 0.0)
    X, P = rules.on(s)
    assert np.max(np.abs(field.U_tilde - (X[:, 0] * s.points[:, 0] - P))) <= 1e-15


def test_field_recomputable():
    s = TypeSpace.grid([5, 5], [[0, 1], [0, 1]])
    m = make_model_roi(0.3, u_star=identity)
    rules = quadratic_potential_rules(s, scale=0.7)
    field = surrogate_field(rules, m, s, 0.7)
    X, P = rules.on(s)
    again = np.sum(field.u_tilde(X) * s.points, axis=1) - 0.7 * P
    assert np.max(np.abs(again - field.U_tilde)) <= 1e-12


def test_builder_mechanism_is_convex():
    s, m, mech, rules = midpoint_mechanism(n=41, budget=0.05)
    field = surrogate_field(rules, m, s, mech.r)
    assert field.convexity_margin <= field.tol


def test_payment_perturbation_detected():
    # three-item menu: neighbouring nodes share an outcome, so raising one node's
    # payment by delta gives that type a deviation gain of scale * delta
    s = TypeSpace.grid([11], [[0, 1]])
    m = budget_model(0.15)
    mech = solve_multiplier([[0.0], [0.5], [1.0]], [0.0, 0.2, 0.6], m, s)
    rules = induce_rules(mech, m, s)
    field = surrogate_field(rules, m, s, mech.r)
    assert field.convexity_margin <= field.tol
    X, P = rules.on(s)
    k = int(np.flatnonzero((X[1:-1, 0] == X[:-2, 0]) & (X[1:-1, 0] == X[2:, 0]))[0]) + 1
    P2 = P.copy()
    P2[k] += 10 * field.tol
    bumped = surrogate_field(InterimRules.tabulated(s, X, P2), m, s, mech.r)
    assert bumped.convexity_margin > field.tol
    assert bumped.worst_pair[0] == k


def test_surrogate_requires_linear_form():
    s = TypeSpace.grid([5], [[0, 1]])
    m = make_model_budget(0.1, lambda q, v: np.sum(q * v, axis=-1))
    with pytest.raises(AssumptionError):
        surrogate_field(constant_rules([0], 0), m, s, 0.0)
    with pytest.raises(AssumptionError):
        full_theorem3_check(constant_rules([0], 0), m, s)


def test_constant_allocation_gives_constant_payment():
    s = TypeSpace.grid([6, 4], [[0, 1], [0, 2]])
    q0 = np.array([0.3, 0.6])
    rec = reconstruct_payment(lambda v: np.broadcast_to(q0, v.shape), identity, 0.0, 1, 1, s, anchor=(0, -0.25))
    _, P = rec.rules.on(s)
    assert np.max(np.abs(P - 0.25)) <= 1e-12
    assert rec.path_discrepancy <= 1e-12


def test_round_trip_1d_builder():
    s, m, mech, rules = midpoint_mechanism(n=101, budget=0.1)
    field = surrogate_field(rules, m, s, mech.r)
    rec = reconstruct_payment(rules, field.u_tilde, mech.r, m.c1, m.c2, s, anchor=(0, 0.0))
    _, P = rules.on(s)
    _, P2 = rec.rules.on(s)
    d = P2 - P
    assert np.max(np.abs(d - d[0])) <= 1e-6


def test_round_trip_2d_and_curl():
    s = TypeSpace.grid([21, 21], [[0, 1], [0, 1]])
    m = budget_model(0.2)
    rules = quadratic_potential_rules(s, scale=1.25)
    field = surrogate_field(rules, m, s, 0.25)
    rec = reconstruct_payment(rules, field.u_tilde, 0.25, 1, 1, s, anchor=(7, 3.0))
    assert rec.path_discrepancy <= 1e-6
    d = rec.rules.on(s)[1] - rules.on(s)[1]
    assert np.max(np.abs(d - d[0])) <= 1e-6
    with pytest.raises(NonIntegrableError) as err:
        reconstruct_payment(curl_allocation, identity, 0.0, 1, 1, s)
    assert err.value.discrepancy >= 1e-2
    loose = reconstruct_payment(curl_allocation, identity, 0.0, 1, 1, s, strict=False)
    assert loose.path_discrepancy == pytest.approx(0.8, rel=1e-6)


def test_anchor_shift_leaves_margin_unchanged():
    s, m, mech, rules = midpoint_mechanism(n=21, budget=0.05)
    field = surrogate_field(rules, m, s, mech.r)
    a = reconstruct_payment(rules, field.u_tilde, mech.r, 1, 1, s, anchor=(0, 0.0))
    b = reconstruct_payment(rules, field.u_tilde, mech.r, 1, 1, s, anchor=(0, 1.5))
    fa = surrogate_field(a.rules, m, s, mech.r)
    fb = surrogate_field(b.rules, m, s, mech.r)
    assert fa.convexity_margin == pytest.approx(fb.convexity_margin, abs=1e-12)
    assert np.allclose(fb.U_tilde - fa.U_tilde, 1.5, atol=1e-12)


def test_reconstruct_preconditions():
    s = TypeSpace.grid([3], [[0, 1]])
    with pytest.raises(DegenerateScalingError):
        reconstruct_payment(lambda v: v, identity, 0.0, 0, 1, s)
    irregular = TypeSpace.from_points([[0.0], [0.3], [1.0]])
    with pytest.raises(AssumptionError):
        reconstruct_payment(lambda v: v, identity, 0.0, 1, 1, irregular)


def test_surrogate_check_recovers_builder_multiplier():
    for kind in ("budget", "roi"):
        s, model, mech, rules = linear_midpoint_mechanism(kind)
        assert mech.r > 0
        res = full_theorem3_check(rules, model, s)
        assert res.ic_candidate
        assert abs(res.r - mech.r) <= 1e-6


def test_surrogate_check_nonbinding_fit_fails_binding_requirement():
    s, m, mech, rules = midpoint_mechanism(n=21, budget=0.05)
    loose = budget_model(0.5)
    res = full_theorem3_check(rules, loose, s)
    assert res.r > 0 and not res.binding_ok and not res.ic_candidate
    assert not verify_ic(rules, loose, s).ic


def test_surrogate_check_routes_when_f_hat_vanishes():
    s = TypeSpace.grid([5], [[0, 1]])
    res = full_theorem3_check(constant_rules([0.4], 0.0), budget_model(0.5), s)
    assert res.route == "characterizer" and res.diagnostics
    assert res.ic_candidate


def test_surrogate_check_requires_interior():
    s = TypeSpace.grid([2], [[0, 1]])
    with pytest.raises(AssumptionError):
        full_theorem3_check(constant_rules([0.4], 0.0), budget_model(0.5), s)


def test_field_csv(tmp_path):
    s = TypeSpace.grid([4], [[0, 1]])
    field = surrogate_field(constant_rules([0.5], 0.1), budget_model(1), s, 0.0)
    write_field_csv(tmp_path / "f.csv", s, field)
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "v_1,U_tilde,gradient_residual,gradient_excess" and len(lines) == 5
