"""Auto-bidding mechanisms: posted menu prices plus a per-type argmax.

A mechanism offers every outcome ``q`` in a menu at price ``p_x(q)`` (in
surrogate units). In the multiplier regime each type receives
``argmax_q u(q, v) + r f(q, v) - p_x(q)`` and pays ``p_x(q) / (c1 + r c2)``;
in the constraint-maximiser regime it receives ``argmax_q f(q, v) - p_x(q)``
(utility breaks ties) and pays ``p_x(q) / c2``.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (
    OUTCOME_TOL, TOL_BIND, TOL_FEAS, InterimRules, TypeSpace, dedup_outcomes, evaluate,
)
from .errors import DegenerateScalingError, InconsistentPriceError, InfeasibleError
from .oracle import upper_envelope

TIE_TOL = 1e-12
R_MAX = 1e6


class NonMonotoneWarning(RuntimeWarning):
    pass


@dataclass(frozen=True, eq=False)
class AutoBidMechanism:
    """Menu of outcomes with prices, a multiplier, and explicit tie resolutions.

    ``assignments`` maps a grid node index to ``((menu index, weight), ...)``
    for nodes whose allocation is one of several tied menu entries (or a
    lottery over two of them); they refer to the nodes of ``space``.
    """

    outcomes: np.ndarray
    prices: np.ndarray
    r: float = 0.0
    regime: str = "multiplier"
    tie_policy: str = "lowest_index"
    assignments: dict = field(default_factory=dict)
    space: Optional[TypeSpace] = None
    flagged: tuple = ()

    def __post_init__(self):
        q = np.array(self.outcomes, dtype=float)
        if q.ndim == 1:
            q = q[:, None]
        prices = np.array(self.prices, dtype=float).reshape(-1)
        if len(q) != len(prices) or len(q) == 0:
            raise ValueError("menu needs one price per outcome and at least one entry")
        if len(dedup_outcomes(q)[0]) != len(q):
            raise ValueError("menu outcomes must be distinct")
        if self.regime not in ("multiplier", "constraint_maximizer"):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.r < 0:
            raise ValueError("r must be non-negative")
        q.setflags(write=False)
        prices.setflags(write=False)
        object.__setattr__(self, "outcomes", q)
        object.__setattr__(self, "prices", prices)

    @property
    def menu(self):
        return [(q, float(p)) for q, p in zip(self.outcomes, self.prices)]

    def scale(self, model):
        s = model.c1 + self.r * model.c2 if self.regime == "multiplier" else model.c2
        if s == 0:
            raise DegenerateScalingError(
                f"payment scale is zero (regime={self.regime}, c1={model.c1}, c2={model.c2}, r={self.r})"
            )
        return s


def _first_max(values, tol=TIE_TOL):
    top = values.max(axis=-1, keepdims=True)
    tied = values >= top - tol * (1.0 + np.abs(top))
    return np.argmax(tied, axis=-1), tied


def menu_choice(mech, model, v):
    """Default menu index chosen by type(s) ``v`` (no tie assignments applied)."""
    v = np.asarray(v, dtype=float)
    q = mech.outcomes.reshape((1,) * (v.ndim - 1) + mech.outcomes.shape)
    vv = v[..., None, :]
    shape = v.shape[:-1] + (len(mech.prices),)
    u = np.broadcast_to(model.u(q, vv), shape)
    f = np.broadcast_to(model.f(q, vv), shape)
    if mech.regime == "multiplier":
        return _first_max(u + mech.r * f - mech.prices)[0]
    _, tied = _first_max(f - mech.prices)
    secondary = np.where(tied, u - model.c1 * mech.prices / model.c2, -np.inf)
    return _first_max(secondary)[0]


def induce_rules(mech, model, space=None):
    """Interim rules implemented by the menu (evaluable off the grid too)."""
    scale = mech.scale(model)
    space = space if space is not None else mech.space
    lookup = {}
    if mech.assignments:
        if space is None:
            raise ValueError("tie assignments need the grid they refer to")
        lookup = {(space.points[i] + 0.0).tobytes(): mix for i, mix in mech.assignments.items()}

    def assigned(v):
        k = menu_choice(mech, model, v)
        X = mech.outcomes[k]
        P = mech.prices[k] / scale
        if lookup:
            flat_v = np.ascontiguousarray(np.asarray(v, dtype=float).reshape(-1, v.shape[-1])) + 0.0
            X = X.reshape(-1, X.shape[-1]).copy()
            P = np.array(P, dtype=float).reshape(-1)
            for row, key in enumerate(flat_v):
                mix = lookup.get(key.tobytes())
                if mix is not None:
                    X[row] = sum(w * mech.outcomes[j] for j, w in mix)
                    P[row] = sum(w * mech.prices[j] for j, w in mix) / scale
            X = X.reshape(np.shape(v)[:-1] + (X.shape[-1],))
            P = P.reshape(np.shape(v)[:-1])
        return X, P

    def x(v):
        return assigned(np.asarray(v, dtype=float))[0]

    def p(v):
        return assigned(np.asarray(v, dtype=float))[1]

    return InterimRules(x, p, kind="parametric", name="menu", params={"mechanism": mech})


def _tie_assignments(mech, model, space, intended):
    default = menu_choice(mech, model, space.points)
    out = {}
    for i, mix in intended.items():
        if len(mix) > 1 or mix[0][0] != default[i]:
            out[int(i)] = tuple((int(j), float(w)) for j, w in mix)
    return out


def extract_menu(rules, model, space, r=0.0, regime="multiplier", tol=1e-9):
    """Menu prices implied by interim rules: the cheapest scaled payment per outcome."""
    X, P = rules.on(space)
    uniq, labels = dedup_outcomes(X, OUTCOME_TOL)
    if regime == "multiplier":
        scale = model.c1 + r * model.c2
        if scale == 0:
            raise DegenerateScalingError("c1 + r*c2 = 0: prices are undefined in the multiplier regime")
        scaled = scale * P
        prices = np.array([scaled[labels == k].min() for k in range(len(uniq))])
        flagged = tuple(int(i) for i in np.flatnonzero(scaled > prices[labels] + tol))
    elif regime == "constraint_maximizer":
        if model.c2 != 1:
            raise DegenerateScalingError("constraint-maximiser menus need c2 = 1")
        scaled = model.c2 * P
        prices = np.empty(len(uniq))
        for k in range(len(uniq)):
            vals = scaled[labels == k]
            if vals.max() - vals.min() > tol:
                nodes = np.flatnonzero(labels == k)
                raise InconsistentPriceError(
                    f"outcome {uniq[k].tolist()} is sold at prices {vals.min():.6g}..{vals.max():.6g}",
                    nodes=nodes.tolist(),
                )
            prices[k] = vals.min()
        flagged = ()
        r = 0.0
    else:
        raise ValueError(f"unknown regime {regime!r}")
    mech = AutoBidMechanism(uniq, prices, r=r, regime=regime, space=space, flagged=flagged)
    intended = {i: ((int(labels[i]), 1.0),) for i in range(space.size)}
    assignments = _tie_assignments(mech, model, space, intended)
    # keep only assignments whose intended entry is actually tied with the default choice
    if assignments:
        default = menu_choice(mech, model, space.points)
        keep = {}
        for i, mix in assignments.items():
            if _is_tied(mech, model, space.points[i], mix[0][0], default[i]):
                keep[i] = mix
        assignments = keep
    return AutoBidMechanism(uniq, prices, r=r, regime=regime, space=space, flagged=flagged,
                            assignments=assignments)


def _is_tied(mech, model, v, j, k):
    q = mech.outcomes[[j, k]]
    u = np.broadcast_to(model.u(q, v[None, :]), (2,))
    f = np.broadcast_to(model.f(q, v[None, :]), (2,))
    if mech.regime == "multiplier":
        val = u + mech.r * f - mech.prices[[j, k]]
    else:
        val = f - mech.prices[[j, k]]
    return abs(val[0] - val[1]) <= TIE_TOL * (1.0 + abs(val[1]))


def _menu_lines(outcomes, prices, model, space):
    q = outcomes[None, :, :]
    v = space.points[:, None, :]
    shape = (space.size, len(prices))
    u = np.broadcast_to(np.asarray(model.u(q, v), dtype=float), shape)
    f = np.broadcast_to(np.asarray(model.f(q, v), dtype=float), shape)
    return u - prices[None, :], f


def _warn_non_monotone(r):
    warnings.warn(f"truthful constraint value decreases in r near r={r:.6g}; returning the first crossing",
                  NonMonotoneWarning, stacklevel=3)


def solve_multiplier(outcomes, prices, model, space, r_max=R_MAX, tol_bind=TOL_BIND, tol_feas=TOL_FEAS):
    """Smallest multiplier at which the induced truthful constraint reaches C.

    ``g(r) = E[f(x_r(v), v) - p_x(x_r(v)) / (c1 + r)]`` is continuous between the
    breakpoints where some type switches menu entry. It is solved in closed
    form on each piece; a jump across C is closed exactly by splitting one
    switching type between its two tied entries.
    """
    if model.c2 != 1:
        raise ValueError("solve_multiplier needs c2 = 1")
    outcomes = np.array(outcomes, dtype=float)
    if outcomes.ndim == 1:
        outcomes = outcomes[:, None]
    prices = np.array(prices, dtype=float).reshape(-1)
    uniq, labels = dedup_outcomes(outcomes)
    if len(uniq) != len(outcomes):
        prices = np.array([prices[labels == k].min() for k in range(len(uniq))])
        outcomes = uniq
    w = space.weights
    c1, C = model.c1, model.C
    alpha, beta = _menu_lines(outcomes, prices, model, space)
    rows = np.arange(space.size)

    def build(r, choice, mix=None):
        mech = AutoBidMechanism(outcomes, prices, r=r, space=space)
        intended = {int(i): ((int(choice[i]), 1.0),) for i in np.flatnonzero(w > 0)}
        if mix is not None:
            i, jf, jt, mu = mix
            intended[i] = ((jf, 1.0 - mu), (jt, mu))
        mech = AutoBidMechanism(outcomes, prices, r=r, space=space,
                                assignments=_tie_assignments(mech, model, space, intended))
        g = evaluate(induce_rules(mech, model, space), model, space).constraint_value
        if (r > 0 and abs(g - C) > tol_bind) or g < C - tol_feas:
            warnings.warn(f"induced constraint value {g!r} misses C={C!r} at r={r!r}", RuntimeWarning,
                          stacklevel=3)
        return mech

    if c1 > 0:
        choice0 = _first_max(alpha)[0]
        g0 = math.fsum(w * (beta[rows, choice0] - prices[choice0] / c1))
        if g0 >= C - tol_feas:
            return build(0.0, choice0)

    events = []
    choice = np.empty(space.size, dtype=int)
    for i in rows:
        lines, breaks = upper_envelope(alpha[i], beta[i])
        choice[i] = lines[0]
        if w[i] > 0:
            events.extend((float(b), int(i), jf, jt) for b, jf, jt in zip(breaks, lines[:-1], lines[1:]))
    events = sorted(e for e in events if e[0] <= r_max)

    def totals(ch):
        return math.fsum(w * beta[rows, ch]), math.fsum(w * prices[ch])

    F, S = totals(choice)
    cur = 0.0
    non_monotone = False
    k = 0
    while True:
        r_next = events[k][0] if k < len(events) else r_max
        if S > 0 and F > C:
            r_root = max(S / (F - C) - c1, cur)
            if r_root <= r_next and r_root > 0:
                return build(r_root, choice)
        elif S < 0 and not non_monotone:
            non_monotone = True
            _warn_non_monotone(cur)
        if k >= len(events):
            break
        group = []
        while k < len(events) and events[k][0] == r_next:
            group.append(events[k])
            k += 1
        g_before = F - S / (c1 + r_next)
        new = choice.copy()
        for _, i, _, jt in group:
            new[i] = jt
        F2, S2 = totals(new)
        g_after = F2 - S2 / (c1 + r_next)
        if g_after < g_before and not non_monotone:
            non_monotone = True
            _warn_non_monotone(r_next)
        if g_after >= C:
            g = g_before
            for _, i, jf, jt in group:
                step = w[i] * ((beta[i, jt] - beta[i, jf]) - (prices[jt] - prices[jf]) / (c1 + r_next))
                if g + step >= C and step > 0:
                    mu = min(max((C - g) / step, 0.0), 1.0)
                    if mu >= 1.0:
                        choice[i] = jt
                        return build(r_next, choice)
                    return build(r_next, choice, (int(i), jf, jt, mu) if mu > 0 else None)
                choice[i] = jt
                g += step
            return build(r_next, choice)
        choice, F, S, cur = new, F2, S2, r_next
    g_max = F - S / (c1 + r_max)
    raise InfeasibleError(
        f"induced constraint value {g_max:.6g} stays below C={C:.6g} up to r_max={r_max:g}",
        best_constraint=g_max,
    )


def read_menu_csv(path):
    """Menu CSV with columns q_1..q_D, price."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty menu")
    qcols = sorted((c for c in rows[0] if c.startswith("q_")), key=lambda c: int(c[2:]))
    outcomes = np.array([[float(r[c]) for c in qcols] for r in rows])
    prices = np.array([float(r["price"]) for r in rows])
    return outcomes, prices


def write_menu_csv(path, mech):
    d = mech.outcomes.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"q_{k + 1}" for k in range(d)] + ["price"])
        for q, p in zip(mech.outcomes, mech.prices):
            w.writerow([format(float(x), ".17g") for x in q] + [format(float(p), ".17g")])
