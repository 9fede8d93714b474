"""Exact constrained best response of the player over all report strategies.

The player's problem on a grid is a linear program with one linking
constraint::

    max  sum_i w_i sum_j s_ij a_ij
    s.t. sum_i w_i sum_j s_ij b_ij >= C,  rows of s stochastic.

It is solved through the Lagrangian row maximisation of ``a + lam * b``. Each
row's choice is piecewise constant in ``lam`` (the upper envelope of the lines
``a_ij + lam * b_ij``), so the achieved constraint value is a non-decreasing
step function whose breakpoints are computed exactly. At the critical
multiplier one row is mixed between its two tied reports, which gives an
optimal basic solution with at most one fractional row.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import TOL_FEAS, Strategy, payoff_matrices, truthful_values
from .errors import EnumerationCapError, InfeasibleError

TOL_IC = 1e-9
LAMBDA_MAX = 1e6
ENUMERATION_CAP = 1e8


class UnboundedMultiplierWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class BestResponse:
    strategy: Strategy
    value: float
    constraint_value: float
    lambda_star: Optional[float]
    breakpoint_type: Optional[int] = None


@dataclass(frozen=True)
class ICVerdict:
    ic: bool
    truthful_utility: float
    truthful_constraint: float
    truthful_feasible: bool
    best_deviation_gain: float
    witness: Optional[BestResponse]
    mode: str


def upper_envelope(intercepts, slopes):
    """Lines forming ``max_k intercepts[k] + lam * slopes[k]`` for ``lam > 0``.

    Returns ``(lines, breaks)`` with ``lines[0]`` the right-limit maximiser at
    ``lam = 0`` and ``lines[k]`` taking over at ``breaks[k - 1] > 0``. Equal
    lines are represented by their lowest index.
    """
    order = np.lexsort((np.arange(len(slopes)), -intercepts, slopes))
    hull = []
    for k in order:
        a, b = intercepts[k], slopes[k]
        if hull and slopes[hull[-1]] == b:
            continue  # same slope, lower (or equal) intercept
        while len(hull) >= 2:
            k1, k2 = hull[-2], hull[-1]
            x12 = (intercepts[k1] - intercepts[k2]) / (slopes[k2] - slopes[k1])
            x13 = (intercepts[k1] - a) / (b - slopes[k1])
            if x13 <= x12:
                hull.pop()
            else:
                break
        hull.append(k)
    breaks = [
        (intercepts[k1] - intercepts[k2]) / (slopes[k2] - slopes[k1])
        for k1, k2 in zip(hull[:-1], hull[1:])
    ]
    start = 0
    while start < len(breaks) and breaks[start] <= 0.0:
        start += 1
    return [int(k) for k in hull[start:]], breaks[start:]


def _switch_events(A, B, weights, initial):
    events = []
    for i in np.flatnonzero(weights > 0):
        lines, breaks = upper_envelope(A[i], B[i])
        if initial[i] != lines[0]:
            events.append((0.0, int(i), int(initial[i]), lines[0]))
        for lam, j_from, j_to in zip(breaks, lines[:-1], lines[1:]):
            events.append((float(lam), int(i), j_from, j_to))
    events.sort()
    return events


def solve_lp(A, B, weights, target, lambda_max=LAMBDA_MAX):
    """Optimal strategy for the single-constraint report LP with payoff matrices."""
    n = len(weights)
    choice = np.argmax(A, axis=1)
    rows = np.arange(n)
    g = math.fsum(weights * B[rows, choice])
    lam_star = 0.0
    mixed = None
    matrix = np.zeros((n, n))
    # targets at the very top of the attainable range must survive summation order
    eps = 1e-12 * (1.0 + abs(target))
    if g < target - eps:
        if math.fsum(weights * B.max(axis=1)) < target - eps:
            raise InfeasibleError(
                "no report strategy satisfies the ex-ante constraint",
                best_constraint=math.fsum(weights * B.max(axis=1)),
            )
        events = _switch_events(A, B, weights, choice)
        k = 0
        found = False
        while k < len(events):
            lam = events[k][0]
            group = []
            while k < len(events) and events[k][0] == lam:
                group.append(events[k])
                k += 1
            gain = math.fsum(weights[i] * (B[i, jt] - B[i, jf]) for _, i, jf, jt in group)
            if g + gain >= target - eps:
                g = math.fsum(weights * B[rows, choice])
                for _, i, jf, jt in group:
                    step = weights[i] * (B[i, jt] - B[i, jf])
                    if g + step >= target - eps:
                        mu = min(max((target - g) / step, 0.0), 1.0)
                        if mu >= 1.0:
                            choice[i] = jt
                        elif mu > 0.0:
                            mixed = (i, jf, jt, mu)
                        break
                    choice[i] = jt
                    g += step
                lam_star = lam
                found = True
                break
            for _, i, _, jt in group:
                choice[i] = jt
            g += gain
        if not found:
            # every row already sits on its largest-b line, which attains max b
            lam_star = events[-1][0] if events else 0.0
        if lam_star > lambda_max:
            warnings.warn(
                f"critical multiplier {lam_star:.6g} exceeds lambda_max={lambda_max:g}",
                UnboundedMultiplierWarning,
                stacklevel=2,
            )
    matrix[rows, choice] = 1.0
    breakpoint_type = None
    if mixed is not None:
        i, jf, jt, mu = mixed
        matrix[i] = 0.0
        matrix[i, jf] = 1.0 - mu
        matrix[i, jt] = mu
        breakpoint_type = i
    value = math.fsum((weights[:, None] * matrix * A).ravel())
    cv = math.fsum((weights[:, None] * matrix * B).ravel())
    return BestResponse(Strategy(matrix), value, cv, lam_star, breakpoint_type)


def _lp_target(model, g_truth, tol_feas):
    # a truthful report that is feasible only within tolerance grants deviations the same slack
    if g_truth >= model.C - tol_feas:
        return min(model.C, g_truth)
    return model.C


def best_response(rules, model, space, lambda_max=LAMBDA_MAX, tol_feas=TOL_FEAS, matrices=None):
    """Utility-maximising feasible report strategy (exact LP optimum)."""
    A, B = payoff_matrices(rules, model, space) if matrices is None else matrices
    _, g_truth = truthful_values(A, B, space.weights)
    return solve_lp(A, B, space.weights, _lp_target(model, g_truth, tol_feas), lambda_max)


def duality_gap(br, A, B, weights, target):
    lam = br.lambda_star
    dual = math.fsum(weights * np.max(A + lam * B, axis=1)) - lam * target
    return dual - br.value


def _verdict(mode, A, B, weights, model, tol_ic, tol_feas, solver):
    u_truth, g_truth = truthful_values(A, B, weights)
    feasible = g_truth >= model.C - tol_feas
    try:
        witness = solver(_lp_target(model, g_truth, tol_feas))
        gain = witness.value - u_truth
    except InfeasibleError:
        witness, gain = None, math.nan
    ic = bool(feasible and gain <= tol_ic)
    return ICVerdict(ic, u_truth, g_truth, feasible, gain, None if ic else witness, mode)


def verify_ic(rules, model, space, tol_ic=TOL_IC, tol_feas=TOL_FEAS, lambda_max=LAMBDA_MAX, matrices=None):
    """Incentive compatibility decided by the exact best response."""
    A, B = payoff_matrices(rules, model, space) if matrices is None else matrices
    return _verdict(
        "oracle_lp", A, B, space.weights, model, tol_ic, tol_feas,
        lambda t: solve_lp(A, B, space.weights, t, lambda_max),
    )


def _pareto_front(U, G):
    order = np.lexsort((-U, -G))
    keep = []
    best = -math.inf
    for k in order:
        if U[k] > best:
            keep.append(k)
            best = U[k]
    return np.array(keep, dtype=np.int64)


def enumerate_lp(A, B, weights, target, mix_resolution, cap=ENUMERATION_CAP):
    """Best strategy among deterministic maps plus one row mixed on a grid of weights.

    Brute force over all ``N**N`` report maps, pruned only by Pareto dominance
    in (utility, constraint), which never discards an optimum.
    """
    n = len(weights)
    if float(n) ** n > cap:
        raise EnumerationCapError(f"{n}**{n} candidate maps exceed the cap {cap:g}")
    a = weights[:, None] * A
    b = weights[:, None] * B
    eps = 1e-12 * (1.0 + abs(target))
    best = (-math.inf, None)
    for i in range(n):
        others = [k for k in range(n) if k != i]
        U = np.zeros(1)
        G = np.zeros(1)
        for k in others:
            U = np.add.outer(U, a[k]).ravel()
            G = np.add.outer(G, b[k]).ravel()
        front = _pareto_front(U, G)
        Uf, Gf = U[front][:, None, None], G[front][:, None, None]
        U0, U1 = Uf + a[i][None, :, None], Uf + a[i][None, None, :]
        G0, G1 = Gf + b[i][None, :, None], Gf + b[i][None, None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            mu_cut = (target - G0) / (G1 - G0)
        up = np.ceil(np.clip(mu_cut, 0.0, 1.0) / mix_resolution) * mix_resolution
        up = np.minimum(up, 1.0)
        down = np.floor(np.clip(mu_cut, 0.0, 1.0) / mix_resolution) * mix_resolution
        cands = []
        shape = np.broadcast_shapes(U0.shape, U1.shape)
        for mu in (np.zeros(shape), np.ones(shape), up, down):
            mu = np.broadcast_to(mu, shape)
            val = (1 - mu) * U0 + mu * U1
            con = (1 - mu) * G0 + mu * G1
            val = np.where(con >= target - eps, val, -math.inf)
            cands.append((val, mu))
        for val, mu in cands:
            flat = int(np.argmax(val))
            if val.flat[flat] > best[0]:
                f, j0, j1 = np.unravel_index(flat, val.shape)
                combo = np.unravel_index(front[f], (n,) * (n - 1)) if n > 1 else ()
                best = (float(val.flat[flat]), (i, others, combo, j0, j1, float(mu.flat[flat])))
    if best[1] is None:
        raise InfeasibleError("no enumerated strategy satisfies the ex-ante constraint")
    i, others, combo, j0, j1, mu = best[1]
    matrix = np.zeros((n, n))
    for k, j in zip(others, combo):
        matrix[k, j] = 1.0
    matrix[i, j0] += 1.0 - mu
    matrix[i, j1] += mu
    s = Strategy(matrix)
    value = math.fsum((weights[:, None] * s.matrix * A).ravel())
    cv = math.fsum((weights[:, None] * s.matrix * B).ravel())
    frac = s.fractional_rows()
    return BestResponse(s, value, cv, None, int(frac[0]) if len(frac) else None)


def exhaustive_verify(rules, model, space, mix_resolution=1e-3, cap=ENUMERATION_CAP, tol_ic=TOL_IC,
                      tol_feas=TOL_FEAS, matrices=None):
    """Incentive compatibility by brute-force enumeration (independent of the LP path)."""
    A, B = payoff_matrices(rules, model, space) if matrices is None else matrices
    return _verdict(
        "exhaustive", A, B, space.weights, model, tol_ic, tol_feas,
        lambda t: enumerate_lp(A, B, space.weights, t, mix_resolution, cap),
    )


def write_witness_csv(path, strategy):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true_index", "report_index", "probability"])
        for i, j, prob in strategy.triples():
            w.writerow([i, j, format(prob, ".17g")])
