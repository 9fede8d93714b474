"""Seeded random fixtures for equivalence sweeps.

Families:

* ``built``: random menu, multiplier solved by the builder (IC by construction)
* ``perturbed``: a built mechanism with one node's payment shifted
* ``tabulated``: arbitrary random outcomes and payments
* ``quasilinear``: a menu under a budget too loose to bind (r = 0)

Models are budget or ROI with ``u(q, v) = q . v``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .builder import NonMonotoneWarning, induce_rules, solve_multiplier
from .core import InterimRules, TypeSpace, make_model_budget, make_model_roi
from .errors import InfeasibleError

FAMILIES = ("built", "perturbed", "tabulated", "quasilinear")


@dataclass(frozen=True, eq=False)
class RandomCase:
    space: TypeSpace
    model: object
    rules: InterimRules
    family: str
    model_kind: str
    mechanism: object = None
    seed: int = 0

    @property
    def label(self):
        shape = "x".join(str(n) for n in self.space.shape)
        return f"seed={self.seed} {self.family}/{self.model_kind} grid={shape}"


def identity_star(q):
    return np.asarray(q, dtype=float)


def random_space(rng, dim):
    if dim == 1:
        counts = [int(rng.integers(3, 10))]
    else:
        n = int(rng.integers(3, 6))
        counts = [n, n]
    lo = rng.uniform(0.0, 0.5, size=dim)
    hi = lo + rng.uniform(0.5, 1.5, size=dim)
    weights = rng.dirichlet(np.full(int(np.prod(counts)), 2.0))
    weights = weights / weights.sum()
    weights[-1] = 1.0 - weights[:-1].sum()
    if weights[-1] < 0:  # pragma: no cover - rounding guard
        weights = np.full(len(weights), 1.0 / len(weights))
    return TypeSpace.grid(counts, np.stack([lo, hi], axis=1), weights=weights)


def _random_menu(rng, dim, m):
    outcomes = rng.uniform(0.0, 1.0, size=(m, dim))
    outcomes[0] = 0.0
    prices = 0.6 * np.sum(outcomes, axis=1) ** 2 * rng.uniform(0.5, 1.5, size=m) / dim
    prices[0] = 0.0
    return outcomes, prices


def _model(rng, kind, space, scale):
    if kind == "budget":
        return make_model_budget(float(scale), u_star=identity_star)
    return make_model_roi(float(rng.uniform(0.0, 1.0)), u_star=identity_star)


def random_case(seed, dim=None, family=None, model_kind=None):
    rng = np.random.default_rng(seed)
    dim = int(rng.integers(1, 3)) if dim is None else dim
    family = FAMILIES[int(rng.integers(len(FAMILIES)))] if family is None else family
    model_kind = ("budget", "roi")[int(rng.integers(2))] if model_kind is None else model_kind
    space = random_space(rng, dim)
    for _ in range(50):
        if family == "tabulated":
            X = rng.uniform(0.0, 1.0, size=(space.size, dim))
            P = rng.uniform(0.0, 0.6, size=space.size)
            model = _model(rng, model_kind, space, rng.uniform(0.05, 0.6))
            rules = InterimRules.tabulated(space, X, P)
            return RandomCase(space, model, rules, family, model_kind, seed=seed)
        outcomes, prices = _random_menu(rng, dim, int(rng.integers(2, 8)))
        budget = rng.uniform(2.0, 5.0) if family == "quasilinear" else rng.uniform(0.01, 0.3)
        model = _model(rng, model_kind, space, budget)
        if family == "quasilinear" and model_kind == "roi":
            model = make_model_roi(0.0, u_star=identity_star)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", NonMonotoneWarning)  # fixtures take the first crossing
                mech = solve_multiplier(outcomes, prices, model, space)
        except InfeasibleError:
            continue
        rules = induce_rules(mech, model, space)
        if family == "perturbed":
            X, P = rules.on(space)
            P = P.copy()
            k = int(rng.integers(space.size))
            P[k] += rng.choice([-1.0, 1.0]) * rng.uniform(0.01, 0.2)
            rules = InterimRules.tabulated(space, X, P)
        return RandomCase(space, model, rules, family, model_kind, mech, seed)
    raise RuntimeError(f"seed {seed}: could not draw a feasible {family} case")
