"""Differential condition, surrogate utility field and payment reconstruction.

Under a linear-in-type model ``u(q, v) = u*(q) . v`` and ``f(q, v) = f*(q) . v``
the surrogate outcome is ``ũ(q) = u*(q) + r f*(q)`` and the surrogate utility
is ``Ũ(v) = ũ(x(v)) . v - (c1 + r c2) p(v)``. Truthful reporting is IC at
multiplier ``r`` exactly when Ũ is convex with gradient ``ũ(x(v))`` (and the
constraint binds whenever ``r > 0``).

On a grid the pairwise margin ``Ũ(v') - Ũ(v) - ũ(x(v')) . (v' - v)`` equals
``dA + r dB`` for the deviation of type ``v`` to report ``v'``, so the
convexity scan is exact. The gradient identity is checked with central
differences on interior nodes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .characterize import characterize_matrices
from .core import (
    TOL_BIND, TOL_FEAS, InterimRules, _dot, outcome_range, payoff_matrices, truthful_values,
)
from .errors import AssumptionError, DegenerateScalingError, NonIntegrableError

ATOL = 1e-9
RTOL = 1e-8
ZERO_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class DifferentialReport:
    u_hat: np.ndarray  # (N, d), NaN off the interior
    f_hat: np.ndarray
    residual: np.ndarray  # (N,)
    r: float
    r_fit: float
    max_residual: float
    step: Optional[float]
    grid_fallback: bool = False
    f_hat_zero: bool = False


@dataclass(frozen=True, eq=False)
class SurrogateField:
    r: float
    u_tilde: Callable
    U_tilde: np.ndarray  # (N,)
    gradient_residual: np.ndarray  # (N,), NaN off the interior
    gradient_excess: np.ndarray  # (N,), distance of the FD gradient outside its trapezoid bracket
    convexity_margin: float
    worst_pair: tuple
    tol: float
    step: Optional[float] = None

    @property
    def max_gradient_residual(self):
        vals = self.gradient_residual[np.isfinite(self.gradient_residual)]
        return float(vals.max()) if len(vals) else 0.0

    @property
    def max_gradient_excess(self):
        vals = self.gradient_excess[np.isfinite(self.gradient_excess)]
        return float(vals.max()) if len(vals) else 0.0

    def summary(self):
        return {
            "r": self.r,
            "convexity_margin": self.convexity_margin,
            "worst_pair": list(self.worst_pair),
            "max_gradient_residual": self.max_gradient_residual,
            "max_gradient_excess": self.max_gradient_excess,
            "tol": self.tol,
        }


@dataclass(frozen=True, eq=False)
class Reconstruction:
    rules: InterimRules
    U_tilde: np.ndarray
    U_tilde_alt: np.ndarray
    path_discrepancy: float


@dataclass(frozen=True, eq=False)
class SurrogateVerdict:
    ic_candidate: bool
    r: float
    report: SurrogateField
    route: str = "surrogate"
    r_fit: float = 0.0
    r_interval: tuple = (0.0, math.inf)
    feasible: bool = True
    binding: bool = False
    gradient_ok: bool = True
    convex_ok: bool = True
    binding_ok: bool = True
    diagnostics: list = field(default_factory=list)


def _require_grid(space):
    if not space.is_regular:
        raise AssumptionError("a regular (connected) grid is required")
    interior = space.interior_mask()
    if not interior.any():
        raise AssumptionError("grid has no interior nodes (need at least 3 nodes per axis)")
    return interior


def _require_linear(model):
    if not model.has_linear_form:
        raise AssumptionError("model lacks the linear-in-type form u*(q).v, f*(q).v")


def _uses_grid_differences(rules, space, step):
    if step is None:
        return True, False
    if step <= 0:
        raise ValueError("step must be positive")
    if rules.kind == "tabulated" and step < float(np.min(space.spacing)):
        return True, True
    return False, False


def differential_check(rules, model, space, r=None, step=None):
    """Central-difference partial gradients of the report-side payoffs.

    ``u_hat(v)`` differentiates ``v' -> u(x(v'), v) - c1 p(v')`` at ``v' = v`` and
    ``f_hat`` does the same for ``f - c2 p``. With ``step=None`` grid neighbours
    are used; tabulated rules cannot be refined below the grid spacing, so a
    smaller step falls back to neighbours and sets ``grid_fallback``.
    """
    interior = _require_grid(space)
    grid_mode, fallback = _uses_grid_differences(rules, space, step)
    n, d = space.size, space.dim
    idx = np.flatnonzero(interior)
    V = space.points[idx]
    u_hat = np.full((n, d), np.nan)
    f_hat = np.full((n, d), np.nan)
    if grid_mode:
        A, B = payoff_matrices(rules, model, space)
        for k in range(d):
            plus = np.array([space.neighbor(i, k, 1) for i in idx])
            minus = np.array([space.neighbor(i, k, -1) for i in idx])
            h = 2.0 * space.spacing[k]
            u_hat[idx, k] = (A[idx, plus] - A[idx, minus]) / h
            f_hat[idx, k] = (B[idx, plus] - B[idx, minus]) / h
    else:
        for k in range(d):
            e = np.zeros(d)
            e[k] = step
            parts = []
            for vq in (V + e, V - e):
                Xq = np.asarray(rules.x(vq), dtype=float).reshape(len(V), -1)
                Pq = np.asarray(rules.p(vq), dtype=float).reshape(len(V))
                parts.append((np.asarray(model.u(Xq, V)) - model.c1 * Pq,
                              np.asarray(model.f(Xq, V)) - model.c2 * Pq))
            (ua, fa), (ub, fb) = parts
            u_hat[idx, k] = (ua - ub) / (2 * step)
            f_hat[idx, k] = (fa - fb) / (2 * step)
    w = space.weights[idx]
    uh, fh = u_hat[idx], f_hat[idx]
    num = math.fsum((w[:, None] * uh * fh).ravel())
    den = math.fsum((w[:, None] * fh * fh).ravel())
    r_fit = max(0.0, -num / den) if den > 0 else 0.0
    f_zero = bool(np.all(np.abs(fh) <= ZERO_TOL))
    r_used = r_fit if r is None else float(r)
    residual = np.full(n, np.nan)
    residual[idx] = np.max(np.abs(uh + r_used * fh), axis=1)
    return DifferentialReport(
        u_hat=u_hat, f_hat=f_hat, residual=residual, r=r_used, r_fit=r_fit,
        max_residual=float(residual[idx].max()), step=None if grid_mode else step,
        grid_fallback=fallback, f_hat_zero=f_zero,
    )


def surrogate_outcome(model, r):
    """``q -> u*(q) + r f*(q)`` with a trailing axis of length d (or 1 to broadcast)."""
    _require_linear(model)

    def u_tilde(q):
        a = np.asarray(model.u_star(q), dtype=float)
        b = np.asarray(model.f_star(q), dtype=float)
        return a + r * b

    return u_tilde


def _U(u_tilde, X, V, P, scale):
    return _dot(u_tilde(X), V) - scale * P


def surrogate_field(rules, model, space, r, step=None, atol=ATOL, rtol=RTOL):
    """Surrogate utility on the grid with its gradient and convexity diagnostics."""
    _require_linear(model)
    if r < 0:
        raise ValueError("r must be non-negative")
    n, d = space.size, space.dim
    scale = model.c1 + r * model.c2
    u_tilde = surrogate_outcome(model, r)
    X, P = rules.on(space)
    V = space.points
    G = np.broadcast_to(u_tilde(X), (n, d))
    U = _dot(G, V) - scale * P
    tol = atol + rtol * float(np.max(np.abs(U)))

    # margin[i, j] = U_j - U_i - G_j . (v_j - v_i): row i deviates to report j
    margin = U[None, :] - U[:, None] - (np.sum(G * V, axis=1)[None, :] - V @ G.T)
    np.fill_diagonal(margin, 0.0)
    margin[space.weights == 0, :] = -np.inf
    np.fill_diagonal(margin, 0.0)
    flat = int(np.argmax(margin))
    worst = tuple(int(t) for t in np.unravel_index(flat, margin.shape))

    residual = np.full(n, np.nan)
    excess = np.full(n, np.nan)
    if space.is_regular and space.interior_mask().any():
        interior = space.interior_mask()
        idx = np.flatnonzero(interior)
        grid_mode, _ = _uses_grid_differences(rules, space, step)
        res = np.zeros((len(idx), d))
        exc = np.zeros((len(idx), d))
        for k in range(d):
            if grid_mode:
                plus = np.array([space.neighbor(i, k, 1) for i in idx])
                minus = np.array([space.neighbor(i, k, -1) for i in idx])
                D = (U[plus] - U[minus]) / (2 * space.spacing[k])
                g_plus, g_minus = G[plus, k], G[minus, k]
            else:
                e = np.zeros(d)
                e[k] = step
                vals, grads = [], []
                for vq in (V[idx] + e, V[idx] - e):
                    Xq = np.asarray(rules.x(vq), dtype=float).reshape(len(idx), -1)
                    Pq = np.asarray(rules.p(vq), dtype=float).reshape(len(idx))
                    Gq = np.broadcast_to(u_tilde(Xq), (len(idx), d))
                    vals.append(_dot(Gq, vq) - scale * Pq)
                    grads.append(Gq[:, k])
                D = (vals[0] - vals[1]) / (2 * step)
                g_plus, g_minus = grads
            g0 = G[idx, k]
            res[:, k] = np.abs(D - g0)
            # an IC surrogate is convex with subgradient G, so the central
            # difference lies between the two trapezoid averages
            lo = np.minimum((g_minus + g0) / 2, (g0 + g_plus) / 2)
            hi = np.maximum((g_minus + g0) / 2, (g0 + g_plus) / 2)
            exc[:, k] = np.maximum(0.0, np.maximum(lo - D, D - hi))
        residual[idx] = res.max(axis=1)
        excess[idx] = exc.max(axis=1)
    return SurrogateField(
        r=float(r), u_tilde=u_tilde, U_tilde=U, gradient_residual=residual, gradient_excess=excess,
        convexity_margin=float(margin.flat[flat]), worst_pair=worst, tol=tol, step=step,
    )


def _anchor_index(space, anchor):
    v0 = anchor[0]
    if np.isscalar(v0) and float(v0).is_integer() and not isinstance(v0, float):
        return int(v0)
    v0 = np.asarray(v0, dtype=float).reshape(space.dim)
    hit = np.flatnonzero(np.all(space.points == v0, axis=1))
    if len(hit) == 0:
        raise ValueError(f"anchor {v0.tolist()} is not a grid node")
    return int(hit[0])


def _path_integral(cums, mi, anchor_mi, order):
    total = np.zeros(len(mi))
    cur = np.repeat(anchor_mi[None, :], len(mi), axis=0)
    for k in order:
        end = cur.copy()
        end[:, k] = mi[:, k]
        total += cums[k][tuple(end.T)] - cums[k][tuple(cur.T)]
        cur = end
    return total


def reconstruct_payment(allocation, u_tilde, r, c1, c2, space, anchor=(0, 0.0), tol=1e-6, strict=True):
    """Payments implied by an allocation through the surrogate path integral.

    ``Ũ(v) = U0 + ∫ ũ(x(t)) . dt`` along the axis-aligned path from the anchor
    node (axes in increasing order), trapezoid rule on the grid; the reverse
    axis order gives a second value and their largest difference is the path
    discrepancy. ``anchor`` is ``(node index or point, U0)``.
    """
    scale = c1 + r * c2
    if scale <= 0:
        raise DegenerateScalingError(f"c1 + r*c2 = {scale!r} must be positive")
    if not space.is_regular:
        raise AssumptionError("payment reconstruction needs a regular grid")
    x = allocation.x if isinstance(allocation, InterimRules) else allocation
    n, d = space.size, space.dim
    X = np.asarray(x(space.points), dtype=float).reshape(n, -1)
    G = np.broadcast_to(np.asarray(u_tilde(X), dtype=float), (n, d))
    Gg = G.reshape(space.shape + (d,))
    cums = []
    for k, ax in enumerate(space.axes()):
        if len(ax) > 1:
            cums.append(cumulative_trapezoid(Gg[..., k], x=ax, axis=k, initial=0))
        else:
            cums.append(np.zeros(space.shape))
    mi = space.multi_index()
    a = _anchor_index(space, anchor)
    U0 = float(anchor[1])
    path_a = _path_integral(cums, mi, mi[a], range(d))
    path_b = _path_integral(cums, mi, mi[a], range(d - 1, -1, -1))
    discrepancy = float(np.max(np.abs(path_a - path_b)))
    if strict and discrepancy > tol:
        raise NonIntegrableError(
            f"surrogate gradient field is path dependent (discrepancy {discrepancy:.3g} > {tol:g})",
            discrepancy,
        )
    U = U0 + path_a
    P = (_dot(G, space.points) - U) / scale
    rules = InterimRules.tabulated(space, X, P, name="reconstructed")
    return Reconstruction(rules, U, U0 + path_b, discrepancy)


def full_theorem3_check(rules, model, space, step=None, tol_feas=TOL_FEAS, tol_bind=TOL_BIND,
                        atol=ATOL, rtol=RTOL, matrices=None):
    """IC test through the surrogate characterisation.

    ``r`` comes from the critical multiplier interval ``[r0, r1]``: the fitted
    multiplier clipped into it when the constraint binds, ``r0`` otherwise.
    """
    _require_linear(model)
    _require_grid(space)
    model.check_linear_form(outcome_range(rules, space), space.points)
    A, B = payoff_matrices(rules, model, space) if matrices is None else matrices
    _, g = truthful_values(A, B, space.weights)
    feasible = g >= model.C - tol_feas
    binding = abs(g - model.C) <= tol_bind
    diff = differential_check(rules, model, space, step=step)
    cert = characterize_matrices(A, B, space.weights, model.C, tol_feas=tol_feas, tol_bind=tol_bind)
    r0, r1 = cert.r0, cert.r_upper
    diagnostics = []
    if diff.grid_fallback:
        diagnostics.append("step below grid spacing for tabulated rules: used grid-neighbour differences")
    if diff.f_hat_zero:
        diagnostics.append("constraint gradient f_hat vanishes on the interior: "
                           "decided by the constraint-maximiser / multiplier certificate")
        field_ = surrogate_field(rules, model, space, cert.r, step, atol, rtol)
        return SurrogateVerdict(
            ic_candidate=cert.valid, r=cert.r, report=field_, route="characterizer", r_fit=diff.r_fit,
            r_interval=(r0, r1), feasible=bool(feasible), binding=bool(binding),
            convex_ok=field_.convexity_margin <= field_.tol, diagnostics=diagnostics,
        )
    if binding and r0 <= r1:
        r = min(max(diff.r_fit, r0), r1)
    else:
        r = r0
    field_ = surrogate_field(rules, model, space, r, step, atol, rtol)
    gradient_ok = field_.max_gradient_excess <= field_.tol
    convex_ok = field_.convexity_margin <= field_.tol
    binding_ok = r <= 0 or binding
    if not binding_ok:
        diagnostics.append(f"r = {r!r} > 0 but the constraint does not bind")
    if not feasible:
        diagnostics.append("truthful reporting violates the ex-ante constraint")
    return SurrogateVerdict(
        ic_candidate=bool(feasible and gradient_ok and convex_ok and binding_ok), r=float(r),
        report=field_, r_fit=diff.r_fit, r_interval=(r0, r1), feasible=bool(feasible),
        binding=bool(binding), gradient_ok=bool(gradient_ok), convex_ok=bool(convex_ok),
        binding_ok=bool(binding_ok), diagnostics=diagnostics,
    )


def write_field_csv(path, space, field_):
    d = space.dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"v_{k + 1}" for k in range(d)] + ["U_tilde", "gradient_residual", "gradient_excess"])
        for v, U, res, exc in zip(space.points, field_.U_tilde, field_.gradient_residual,
                                  field_.gradient_excess):
            w.writerow([format(float(t), ".17g") for t in (*v, U, res, exc)])
