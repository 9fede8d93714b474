"""Structural IC certificates from deviation sets and a constraint multiplier.

With ``dA[i, j] = a_ij - a_ii`` (utility change of type i reporting j) and
``dB[i, j] = b_ij - b_ii`` (constraint change), truthful reporting is IC iff it
is feasible and either

* the constraint binds and every type maximises its constraint contribution
  (utility breaks ties), or
* some ``r >= 0`` has ``dA + r dB <= 0`` for all positive-weight types, with
  ``r > 0`` only when the constraint binds.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import TOL_BIND, TOL_FEAS, Strategy, payoff_matrices, truthful_values

TOL_STRICT = 1e-12
TOL_PAIR = 1e-9


@dataclass(frozen=True)
class DeviationSets:
    r: float
    v_plus: frozenset
    v_minus: frozenset
    rho_plus: float
    rho_minus: float
    boundary_pairs: tuple = ()


@dataclass(frozen=True)
class CharacterizationCertificate:
    valid: bool
    regime: Optional[str]
    r: float
    r0: Optional[float]
    r_upper: float
    feasible: bool
    binding: bool
    violations: list = field(default_factory=list)
    boundary_pairs: list = field(default_factory=list)


def deviation_gains(A, B):
    """Per-pair utility and constraint changes relative to truthful reporting."""
    return A - np.diag(A)[:, None], B - np.diag(B)[:, None]


def _plus_pairs(dA, dB, r, tol):
    return (dB < -tol) & (dA + r * dB > tol)


def _minus_pairs(dA, dB, r, tol):
    return (dB > tol) & (dA + r * dB > tol)


def sets_from_gains(dA, dB, weights, r, tol_strict=TOL_STRICT):
    plus = _plus_pairs(dA, dB, r, tol_strict).any(axis=1)
    minus = _minus_pairs(dA, dB, r, tol_strict).any(axis=1)
    near = (np.abs(dB) <= tol_strict) | (np.abs(dA + r * dB) <= tol_strict)
    np.fill_diagonal(near, False)
    boundary = tuple((int(i), int(j)) for i, j in zip(*np.nonzero(near)))
    return DeviationSets(
        r=float(r),
        v_plus=frozenset(np.flatnonzero(plus).tolist()),
        v_minus=frozenset(np.flatnonzero(minus).tolist()),
        rho_plus=math.fsum(weights[plus]),
        rho_minus=math.fsum(weights[minus]),
        boundary_pairs=boundary,
    )


def deviation_sets(rules, model, space, r, tol_strict=TOL_STRICT, matrices=None):
    """Types with a profitable (at trade-off r) deviation that lowers / raises the constraint term."""
    if r < 0:
        raise ValueError("r must be non-negative")
    A, B = payoff_matrices(rules, model, space) if matrices is None else matrices
    dA, dB = deviation_gains(A, B)
    return sets_from_gains(dA, dB, space.weights, r, tol_strict)


def _rho_plus(dA, dB, weights, r, tol):
    return math.fsum(weights[_plus_pairs(dA, dB, r, tol).any(axis=1)])


def critical_from_gains(dA, dB, weights, tol_strict=TOL_STRICT):
    pos = weights > 0
    mask = (dB < -tol_strict) & pos[:, None]
    r0 = 0.0
    if mask.any():
        r0 = max(0.0, float(np.max((dA[mask] - tol_strict) / -dB[mask])))
    # guard the closing breakpoint against rounding in the ratio
    while _rho_plus(dA, dB, weights, r0, tol_strict) > 0:
        r0 = float(np.nextafter(r0, math.inf))
    return r0


def upper_from_gains(dA, dB, weights, tol_strict=TOL_STRICT):
    """sup{r : rho_minus(r) = 0}; ``inf`` when no deviation raises the constraint term."""
    pos = weights > 0
    mask = (dB > tol_strict) & pos[:, None]
    if not mask.any():
        return math.inf
    return float(np.min((tol_strict - dA[mask]) / dB[mask]))


def critical_multiplier(rules, model, space, tol_strict=TOL_STRICT, matrices=None):
    """Smallest r with no positive-weight type in V+(r).

    On a finite grid every constraint-lowering deviation is eventually
    priced out, so the infimum always exists and is attained.
    """
    A, B = payoff_matrices(rules, model, space) if matrices is None else matrices
    dA, dB = deviation_gains(A, B)
    return critical_from_gains(dA, dB, space.weights, tol_strict)


def rho_sweep(rules, model, space, tol_strict=TOL_STRICT, matrices=None):
    """rho+(r) and rho-(r) at every breakpoint, between breakpoints and past the last one."""
    A, B = payoff_matrices(rules, model, space) if matrices is None else matrices
    dA, dB = deviation_gains(A, B)
    w = space.weights
    with np.errstate(divide="ignore", invalid="ignore"):
        bp = np.concatenate([
            ((dA - tol_strict) / -dB)[dB < -tol_strict],
            ((tol_strict - dA) / dB)[dB > tol_strict],
        ])
    bp = np.unique(bp[np.isfinite(bp) & (bp >= 0)])
    knots = np.concatenate([[0.0], bp])
    mids = (knots[:-1] + knots[1:]) / 2 if len(knots) > 1 else np.empty(0)
    last = knots[-1] * 2 + 1.0
    rs = np.unique(np.concatenate([knots, mids, [last]]))
    rp = np.array([_rho_plus(dA, dB, w, r, tol_strict) for r in rs])
    rm = np.array([math.fsum(w[_minus_pairs(dA, dB, r, tol_strict).any(axis=1)]) for r in rs])
    return rs, rp, rm


def write_rho_csv(path, rs, rho_plus, rho_minus):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "rho_plus", "rho_minus"])
        for row in zip(rs, rho_plus, rho_minus):
            w.writerow([format(float(x), ".17g") for x in row])


def characterize_matrices(A, B, weights, C, tol_feas=TOL_FEAS, tol_bind=TOL_BIND, tol_pair=TOL_PAIR,
                          tol_strict=TOL_STRICT, tol_measure=0.0):
    _, g = truthful_values(A, B, weights)
    feasible = g >= C - tol_feas
    binding = abs(g - C) <= tol_bind
    dA, dB = deviation_gains(A, B)
    pos = weights > 0
    r0 = critical_from_gains(dA, dB, weights, tol_strict)
    r1 = upper_from_gains(dA, dB, weights, tol_strict)

    def failing_weight(bad):
        return math.fsum(weights[(bad & pos[:, None]).any(axis=1)])

    tie = np.abs(dB) <= tol_pair
    cond1_bad = (dB > tol_pair) | (tie & (dA > tol_pair))
    np.fill_diagonal(cond1_bad, False)
    cond1 = feasible and binding and failing_weight(cond1_bad) <= tol_measure

    r = r0 if binding else 0.0
    margin = dA + r * dB
    cond2_bad = margin > tol_pair
    np.fill_diagonal(cond2_bad, False)
    cond2 = feasible and failing_weight(cond2_bad) <= tol_measure

    regime = "constraint_maximizer" if cond1 else ("multiplier" if cond2 else None)
    violations = []
    if regime is None:
        for i, j in zip(*np.nonzero(cond2_bad & pos[:, None])):
            violations.append((int(i), int(j), float(margin[i, j])))
    near = np.abs(margin) <= 1e3 * tol_pair
    np.fill_diagonal(near, False)
    near &= ~np.isclose(margin, 0.0, atol=1e-3 * tol_pair)
    boundary = [(int(i), int(j), float(margin[i, j])) for i, j in zip(*np.nonzero(near & pos[:, None]))]
    return CharacterizationCertificate(
        valid=regime is not None,
        regime=regime,
        r=float(r),
        r0=float(r0),
        r_upper=float(r1),
        feasible=bool(feasible),
        binding=bool(binding),
        violations=violations,
        boundary_pairs=boundary,
    )


def characterize(rules, model, space, matrices=None, **tols):
    """Certificate of IC (constraint-maximiser or multiplier regime) or the violating pairs."""
    A, B = payoff_matrices(rules, model, space) if matrices is None else matrices
    return characterize_matrices(A, B, space.weights, model.C, **tols)


def mixed_deviation(rules, model, space, r_star, tol_strict=TOL_STRICT, matrices=None):
    """Deviation mixing V+(r*) and V-(r*) types so the constraint term is unchanged.

    Returns ``(strategy, utility_change, constraint_change)``; the utility change
    is positive whenever both sets carry positive weight.
    """
    A, B = payoff_matrices(rules, model, space) if matrices is None else matrices
    dA, dB = deviation_gains(A, B)
    w = space.weights
    n = space.size
    score = dA + r_star * dB
    plus = _plus_pairs(dA, dB, r_star, tol_strict)
    minus = _minus_pairs(dA, dB, r_star, tol_strict)
    f1 = np.flatnonzero(plus.any(axis=1) & (w > 0))
    f2 = np.flatnonzero(minus.any(axis=1) & (w > 0))
    if len(f1) == 0 or len(f2) == 0:
        raise ValueError("both deviation sets need positive weight at r_star")
    h1 = {i: int(np.argmax(np.where(plus[i], score[i], -np.inf))) for i in f1}
    h2 = {i: int(np.argmax(np.where(minus[i], score[i], -np.inf))) for i in f2}
    dc1 = math.fsum(w[i] * dB[i, h1[i]] for i in f1)
    dc2 = math.fsum(w[i] * dB[i, h2[i]] for i in f2)
    mu1 = 0.5 * min(1.0, dc2 / -dc1)
    mu2 = mu1 * -dc1 / dc2
    m = np.eye(n)
    for i in f1:
        m[i, i] -= mu1
        m[i, h1[i]] += mu1
    for i in f2:
        m[i, i] -= mu2
        m[i, h2[i]] += mu2
    s = Strategy(m)
    du = math.fsum((w[:, None] * (s.matrix - np.eye(n)) * A).ravel())
    dc = math.fsum((w[:, None] * (s.matrix - np.eye(n)) * B).ravel())
    return s, du, dc
