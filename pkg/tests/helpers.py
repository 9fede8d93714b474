"""Shared fixtures and independent reference computations for the test suite."""

import math

import numpy as np
from scipy.optimize import linprog

from exante_ic.builder import AutoBidMechanism, induce_rules, solve_multiplier
from exante_ic.core import InterimRules, TypeSpace, linear_model, make_model_budget

identity = lambda q: np.asarray(q, dtype=float)  # noqa: E731


def budget_model(budget):
    return make_model_budget(budget, u_star=identity)


def lp_reference(A, B, weights, target):
    """Best-response value from a generic LP solver (independent of the envelope sweep)."""
    n = len(weights)
    c = -(weights[:, None] * A).ravel()
    A_ub = -(weights[:, None] * B).ravel()[None, :]
    A_eq = np.kron(np.eye(n), np.ones(n))
    res = linprog(c, A_ub=A_ub, b_ub=[-target], A_eq=A_eq, b_eq=np.ones(n), bounds=(0, 1), method="highs")
    if res.status == 2:
        return None
    assert res.status == 0, res.message
    return -res.fun


def brute_sets(A, B, r, tol=1e-12):
    """V+(r) and V-(r) by a plain double loop."""
    n = len(A)
    plus, minus = set(), set()
    for i in range(n):
        for j in range(n):
            da, db = A[i, j] - A[i, i], B[i, j] - B[i, i]
            if db < -tol and da + r * db > tol:
                plus.add(i)
            if db > tol and da + r * db > tol:
                minus.add(i)
    return plus, minus


def midpoint_prices(q, v):
    """Menu prices making type v_k pick q_k, with switches halfway between nodes.

    For increasing q the surrogate utility Ũ = q.v - P then satisfies the
    trapezoid rule exactly along the grid.
    """
    q = np.asarray(q, dtype=float)
    mid = (v[:-1] + v[1:]) / 2
    return np.concatenate([[0.0], np.cumsum(np.diff(q) * mid)])


def midpoint_mechanism(n=101, budget=0.1, alloc=lambda v: v ** 2):
    """1-D builder-produced mechanism whose outcomes are alloc(v) on every node."""
    space = TypeSpace.grid([n], [[0.0, 1.0]])
    v = space.points[:, 0]
    q = alloc(v)
    model = budget_model(budget)
    mech = solve_multiplier(q[:, None], midpoint_prices(q, v), model, space)
    return space, model, mech, induce_rules(mech, model, space)


def quadratic_potential_rules(space, scale=1.0):
    """2-D rules with Ũ = (v1² + v2² + v1 v2)/3, x = ∇Ũ, p = (x.v - Ũ)/scale (IC, linear x)."""

    def x(v):
        v = np.asarray(v, dtype=float)
        return np.stack([(2 * v[..., 0] + v[..., 1]) / 3, (2 * v[..., 1] + v[..., 0]) / 3], axis=-1)

    def p(v):
        v = np.asarray(v, dtype=float)
        U = (v[..., 0] ** 2 + v[..., 1] ** 2 + v[..., 0] * v[..., 1]) / 3
        return (np.sum(x(v) * v, axis=-1) - U) / scale

    return InterimRules(x, p, name="quadratic_potential")


def curl_allocation(v):
    v = np.asarray(v, dtype=float)
    return np.stack([0.5 + 0.4 * v[..., 1], 0.5 - 0.4 * v[..., 0]], axis=-1)


def smooth_rules():
    """x = v², p = 2v³/3: quasi-linear IC with Ũ = v³/3."""
    return InterimRules(lambda v: np.asarray(v, dtype=float) ** 2,
                        lambda v: 2 * np.asarray(v, dtype=float)[..., 0] ** 3 / 3, name="smooth")


def quasi_linear_model(d=1, C=-10.0):
    return linear_model(identity, lambda q: np.zeros(np.shape(q)[:-1] + (1,)), 1, 1, C)


def constant_rules(q0, p0):
    q0 = np.atleast_1d(np.asarray(q0, dtype=float))
    return InterimRules(lambda v: np.broadcast_to(q0, np.shape(v)[:-1] + q0.shape),
                        lambda v: np.full(np.shape(v)[:-1], float(p0)), name="constant")


def dense_scan_r(outcomes, prices, model, space, step=1e-4, r_hi=20.0):
    """First r on a uniform grid where the truthful constraint of the induced menu reaches C.

    Computed directly from the menu (argmax per type, lowest index on ties).
    """
    q = np.asarray(outcomes, dtype=float)[None, :, :]
    v = space.points[:, None, :]
    shape = (space.size, len(prices))
    u = np.broadcast_to(model.u(q, v), shape)
    f = np.broadcast_to(model.f(q, v), shape)
    rs = np.arange(0.0, r_hi, step)
    rs = rs[model.c1 + rs > 0]
    for chunk in np.array_split(rs, max(1, len(rs) // 5000)):
        score = u[None] + chunk[:, None, None] * f[None] - np.asarray(prices)[None, None, :]
        k = np.argmax(score, axis=2)
        pay = np.asarray(prices)[k] / (model.c1 + chunk[:, None])
        g = np.sum(space.weights * (np.take_along_axis(f[None].repeat(len(chunk), 0), k[..., None], 2)[..., 0]
                                    - pay), axis=1)
        hit = np.flatnonzero(g >= model.C - 1e-12)
        if len(hit):
            return float(chunk[hit[0]])
    return math.inf
