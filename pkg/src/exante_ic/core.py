"""Type grids, player models, interim rules and ex-ante expectations.

All callables are vectorised: a model's ``u(q, v)`` receives outcome arrays of
shape ``(..., D)`` and type arrays of shape ``(..., d)`` (broadcastable) and
returns shape ``(...)``. Rules map ``(..., d) -> (..., D)`` and ``(..., d) -> (...)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import DimensionError, RuleEvaluationError

TOL_FEAS = 1e-9
TOL_BIND = 1e-9
OUTCOME_TOL = 1e-9
WEIGHT_SUM_TOL = 1e-12


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TypeSpace:
    """Finite set of type vectors with probability weights.

    ``shape`` is set for regular grids (points in C order over per-axis
    linspaces) and ``None`` for arbitrary point sets.
    """

    points: np.ndarray
    weights: np.ndarray
    bounds: np.ndarray
    spacing: Optional[np.ndarray] = None
    shape: Optional[tuple] = None

    def __post_init__(self):
        pts = _readonly(self.points)
        if pts.ndim == 1:
            pts = _readonly(pts[:, None])
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise DimensionError(f"points must be (N, d) with N, d >= 1, got {pts.shape}")
        w = _readonly(self.weights)
        if w.shape != (pts.shape[0],):
            raise DimensionError(f"weights shape {w.shape} does not match {pts.shape[0]} points")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and non-negative")
        if abs(math.fsum(w) - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"weights must sum to 1 within {WEIGHT_SUM_TOL:g}, got {math.fsum(w)!r}")
        if len(np.unique(pts, axis=0)) != len(pts):
            raise ValueError("type points must be distinct")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bounds", _readonly(np.reshape(self.bounds, (pts.shape[1], 2))))
        if self.spacing is not None:
            object.__setattr__(self, "spacing", _readonly(self.spacing))
        if self.shape is not None:
            object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
            if int(np.prod(self.shape)) != len(pts) or len(self.shape) != pts.shape[1]:
                raise DimensionError("grid shape inconsistent with points")

    @classmethod
    def grid(cls, counts, bounds, weights=None, density=None):
        """Regular grid with ``counts[k]`` nodes on ``bounds[k] = (lo, hi)``.

        ``weights`` may be an explicit array (must already sum to 1);
        ``density`` is a callable evaluated at the nodes and normalised.
        Uniform weights otherwise.
        """
        counts = [int(n) for n in np.atleast_1d(counts)]
        bounds = np.asarray(bounds, dtype=float).reshape(len(counts), 2)
        if any(n < 1 for n in counts):
            raise DimensionError("each axis needs at least one node")
        axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip(bounds, counts)]
        mesh = np.meshgrid(*axes, indexing="ij")
        points = np.stack(mesh, axis=-1).reshape(-1, len(counts))
        spacing = np.array([(hi - lo) / (n - 1) if n > 1 else 0.0 for (lo, hi), n in zip(bounds, counts)])
        n = len(points)
        if weights is not None and density is not None:
            raise ValueError("give weights or density, not both")
        if density is not None:
            w = np.asarray(density(points), dtype=float).reshape(n)
            if np.any(w < 0) or w.sum() <= 0:
                raise ValueError("density must be non-negative with positive mass on the grid")
            w = w / w.sum()
        elif weights is not None:
            w = np.asarray(weights, dtype=float).reshape(n)
        else:
            w = np.full(n, 1.0 / n)
        return cls(points, w, bounds, spacing, tuple(counts))

    @classmethod
    def from_points(cls, points, weights=None, bounds=None):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.full(len(pts), 1.0 / len(pts)) if weights is None else weights
        if bounds is None:
            bounds = np.stack([pts.min(axis=0), pts.max(axis=0)], axis=1)
        return cls(pts, w, bounds)

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def size(self):
        return self.points.shape[0]

    @property
    def is_regular(self):
        return self.shape is not None

    def axes(self):
        if not self.is_regular:
            raise DimensionError("axes are only defined for regular grids")
        return [np.linspace(lo, hi, n) for (lo, hi), n in zip(self.bounds, self.shape)]

    def multi_index(self):
        """(N, d) integer grid coordinates of each point."""
        return np.stack(np.unravel_index(np.arange(self.size), self.shape), axis=1)

    def interior_mask(self):
        idx = self.multi_index()
        n = np.asarray(self.shape)
        return np.all((idx > 0) & (idx < n - 1), axis=1)

    def neighbor(self, i, axis, step):
        """Flat index of the node ``step`` cells away along ``axis`` (or None)."""
        mi = list(np.unravel_index(i, self.shape))
        mi[axis] += step
        if not 0 <= mi[axis] < self.shape[axis]:
            return None
        return int(np.ravel_multi_index(mi, self.shape))

    def permuted(self, perm):
        perm = np.asarray(perm)
        return TypeSpace(self.points[perm], self.weights[perm], self.bounds)


@dataclass(frozen=True)
class OutcomeSpace:
    dim: int
    description: str = ""
    bounds: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.dim < 1:
            raise DimensionError("outcome dimension must be >= 1")

    def contains(self, outcomes, tol=OUTCOME_TOL):
        if self.bounds is None:
            return True
        q = np.asarray(outcomes, dtype=float).reshape(-1, self.dim)
        b = np.asarray(self.bounds, dtype=float).reshape(self.dim, 2)
        return bool(np.all(q >= b[:, 0] - tol) and np.all(q <= b[:, 1] + tol))


def _dot(vec, v):
    return np.sum(np.asarray(vec) * np.asarray(v), axis=-1)


def _zeros_like_pair(q, v):
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    return np.zeros(np.broadcast_shapes(q.shape[:-1], v.shape[:-1]))


@dataclass(frozen=True)
class PlayerModel:
    """Ex-ante utility ``E[u - c1 p]`` and constraint ``E[f - c2 p] >= C``.

    ``u_star``/``f_star`` give the linear-in-type form ``u(q, v) = u_star(q) . v``.
    They may return a trailing axis of length 1 to mean a broadcast vector.
    """

    u: Callable
    f: Callable
    c1: int
    c2: int
    C: float
    u_star: Optional[Callable] = None
    f_star: Optional[Callable] = None
    label: str = ""

    def __post_init__(self):
        if self.c1 not in (0, 1) or self.c2 not in (0, 1):
            raise ValueError(f"c1 and c2 must be 0 or 1, got c1={self.c1}, c2={self.c2}")
        if (self.u_star is None) != (self.f_star is None):
            raise ValueError("linear form needs both u_star and f_star")
        object.__setattr__(self, "C", float(self.C))

    @property
    def has_linear_form(self):
        return self.u_star is not None

    def check_linear_form(self, outcomes, types, tol=1e-10):
        """Raise if ``u``/``f`` disagree with the linear form on the sample."""
        if not self.has_linear_form:
            return
        q = np.asarray(outcomes, dtype=float)[None, :, :]
        v = np.asarray(types, dtype=float)[:, None, :]
        for name, fn, star in (("u", self.u, self.u_star), ("f", self.f, self.f_star)):
            direct = np.broadcast_to(fn(q, v), (v.shape[0], q.shape[1]))
            linear = _dot(star(q), v)
            err = float(np.max(np.abs(direct - linear)))
            if err > tol:
                raise ValueError(f"{name} deviates from its linear form by {err:.3g}")


def linear_model(u_star, f_star, c1, c2, C, label=""):
    return PlayerModel(
        u=lambda q, v: _dot(u_star(q), v),
        f=lambda q, v: _dot(f_star(q), v),
        c1=c1, c2=c2, C=C, u_star=u_star, f_star=f_star, label=label,
    )


def make_model_roi(gamma, u=None, *, u_star=None):
    """Value maximiser who needs expected value >= (1 + gamma) * expected spend."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if u is None:
        if u_star is None:
            raise ValueError("give u or u_star")
        u = lambda q, v: _dot(u_star(q), v)  # noqa: E731
    scale = 1.0 / (1.0 + gamma)
    f = lambda q, v: scale * np.asarray(u(q, v))  # noqa: E731
    f_star = None if u_star is None else (lambda q: scale * np.asarray(u_star(q)))
    return PlayerModel(u=u, f=f, c1=0, c2=1, C=0.0, u_star=u_star, f_star=f_star,
                       label=f"roi(gamma={gamma!r})")


def make_model_budget(budget, u=None, *, u_star=None):
    """Quasi-linear utility maximiser with expected spend capped at ``budget``."""
    if budget < 0:
        raise ValueError("budget must be non-negative")
    if u is None:
        if u_star is None:
            raise ValueError("give u or u_star")
        u = lambda q, v: _dot(u_star(q), v)  # noqa: E731
    f_star = None
    if u_star is not None:
        f_star = lambda q: np.zeros(np.shape(q)[:-1] + (1,))  # noqa: E731
    return PlayerModel(u=u, f=_zeros_like_pair, c1=1, c2=1, C=-float(budget), u_star=u_star,
                       f_star=f_star, label=f"budget({budget!r})")


@dataclass(frozen=True, eq=False)
class InterimRules:
    """Outcome rule ``x`` and expected payment rule ``p`` over type reports."""

    x: Callable
    p: Callable
    kind: str = "parametric"
    name: str = ""
    params: dict = field(default_factory=dict)

    def on(self, space):
        """Values at the grid nodes: ``(X (N, D), P (N,))``."""
        try:
            X = np.asarray(self.x(space.points), dtype=float)
            P = np.asarray(self.p(space.points), dtype=float)
        except Exception as exc:  # pragma: no cover - message path
            raise RuleEvaluationError(f"rule {self.name or self.kind} failed on the grid: {exc}") from exc
        if X.ndim == 1:
            X = X[:, None]
        P = np.broadcast_to(P, (space.size,)).astype(float)
        if X.shape[0] != space.size:
            raise RuleEvaluationError(f"x returned {X.shape[0]} rows for {space.size} nodes")
        bad = ~(np.all(np.isfinite(X), axis=1) & np.isfinite(P))
        if bad.any():
            raise RuleEvaluationError(f"non-finite rule values at nodes {np.flatnonzero(bad).tolist()}")
        return X, P

    @classmethod
    def tabulated(cls, space, X, P, name="tabulated"):
        """Rules given by node values; off-grid queries interpolate multilinearly."""
        X = np.array(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        P = np.array(P, dtype=float).reshape(-1)
        if X.shape[0] != space.size or P.shape[0] != space.size:
            raise DimensionError("tabulated values must have one row per grid node")
        X.setflags(write=False)
        P.setflags(write=False)
        x = _node_function(space, X)
        p = _node_function(space, P)
        return cls(x, p, kind="tabulated", name=name, params={"space": space, "X": X, "P": P})


def _node_function(space, table):
    index = {(row + 0.0).tobytes(): i for i, row in enumerate(space.points)}
    interp = None
    if space.is_regular:
        interp = RegularGridInterpolator(
            space.axes(), table.reshape(space.shape + table.shape[1:]), method="linear"
        )

    def fn(v):
        if v is space.points:
            return table
        v = np.asarray(v, dtype=float)
        lead = v.shape[:-1]
        flat = np.ascontiguousarray(v.reshape(-1, space.dim)) + 0.0
        out = np.empty((len(flat),) + table.shape[1:])
        miss = []
        for k, row in enumerate(flat):
            i = index.get(row.tobytes())
            if i is None:
                miss.append(k)
            else:
                out[k] = table[i]
        if miss:
            if interp is None:
                raise RuleEvaluationError("off-grid query on an irregular tabulated rule")
            out[miss] = interp(flat[miss])
        return out.reshape(lead + table.shape[1:])

    return fn


def posted_price(threshold, price=None, direction=None):
    """``x(v) = 1{direction . v >= threshold}``, ``p = price * x``."""
    price = threshold if price is None else price

    def x(v):
        v = np.asarray(v, dtype=float)
        s = v.sum(axis=-1) if direction is None else _dot(direction, v)
        return (s >= threshold).astype(float)[..., None]

    def p(v):
        return price * x(v)[..., 0]

    return InterimRules(x, p, name="posted_price", params={"threshold": threshold, "price": price})


def linear_allocation(a, b=0.0, lo=0.0, hi=1.0, price_poly=(0.0,)):
    """``x(v) = clip(a . v + b, lo, hi)`` with payment ``sum_k price_poly[k] * x**k``."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    coeffs = np.asarray(price_poly, dtype=float)

    def x(v):
        return np.clip(_dot(a, v) + b, lo, hi)[..., None]

    def p(v):
        return np.polynomial.polynomial.polyval(x(v)[..., 0], coeffs)

    return InterimRules(x, p, name="linear", params={"a": a.tolist(), "b": b, "lo": lo, "hi": hi,
                                                     "price_poly": coeffs.tolist()})


def dedup_outcomes(X, tol=OUTCOME_TOL):
    """Unique outcomes (first-occurrence order) and the label of every row."""
    X = np.asarray(X, dtype=float)
    uniq = []
    labels = np.empty(len(X), dtype=int)
    for i, q in enumerate(X):
        for k, w in enumerate(uniq):
            if np.max(np.abs(q - w)) <= tol:
                labels[i] = k
                break
        else:
            labels[i] = len(uniq)
            uniq.append(q)
    return np.array(uniq).reshape(len(uniq), X.shape[1]), labels


def outcome_range(rules, space, tol=OUTCOME_TOL):
    """Distinct outcomes attained on the grid (the range of ``x``)."""
    X, _ = rules.on(space)
    return dedup_outcomes(X, tol)[0]


@dataclass(frozen=True, eq=False)
class Strategy:
    """Row-stochastic report matrix: ``matrix[i, j] = P(report v_j | type v_i)``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionError(f"strategy must be square, got {m.shape}")
        if np.any(m < -1e-15) or np.any(m > 1 + 1e-15):
            raise ValueError("strategy entries must lie in [0, 1]")
        if np.any(np.abs(m.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("strategy rows must sum to 1")
        m = np.clip(m, 0.0, 1.0)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def truthful(cls, n):
        return cls(np.eye(n))

    @classmethod
    def deterministic(cls, reports):
        reports = np.asarray(reports, dtype=int)
        m = np.zeros((len(reports), len(reports)))
        m[np.arange(len(reports)), reports] = 1.0
        return cls(m)

    @property
    def n(self):
        return self.matrix.shape[0]

    def fractional_rows(self):
        return np.flatnonzero(np.count_nonzero(self.matrix > 0, axis=1) > 1)

    def triples(self):
        """(true index, report index, probability) for every nonzero entry."""
        i, j = np.nonzero(self.matrix)
        return [(int(a), int(b), float(self.matrix[a, b])) for a, b in zip(i, j)]


@dataclass(frozen=True)
class EvaluationReport:
    utility: float
    constraint_value: float
    feasible: bool
    binding: bool


def payoff_matrices(rules, model, space):
    """``A[i, j] = u(x(v_j), v_i) - c1 p(v_j)`` and ``B[i, j] = f(x(v_j), v_i) - c2 p(v_j)``."""
    X, P = rules.on(space)
    q = X[None, :, :]
    v = space.points[:, None, :]
    n = space.size
    try:
        U = np.broadcast_to(np.asarray(model.u(q, v), dtype=float), (n, n))
        F = np.broadcast_to(np.asarray(model.f(q, v), dtype=float), (n, n))
    except Exception as exc:
        raise RuleEvaluationError(f"model evaluation failed: {exc}") from exc
    A = U - model.c1 * P[None, :]
    B = F - model.c2 * P[None, :]
    return A, B


def expectation(weights, s, M):
    """``sum_i w_i sum_j s_ij M_ij`` with exactly rounded summation."""
    return math.fsum((weights[:, None] * s * M).ravel())


def evaluate(rules, model, space, s=None, tol_feas=TOL_FEAS, tol_bind=TOL_BIND, matrices=None):
    """Ex-ante utility and constraint value of reporting by ``s`` (truthful if None)."""
    A, B = payoff_matrices(rules, model, space) if matrices is None else matrices
    n = space.size
    m = np.eye(n) if s is None else s.matrix
    if m.shape != (n, n):
        raise DimensionError(f"strategy is {m.shape}, grid has {n} nodes")
    utility = expectation(space.weights, m, A)
    cv = expectation(space.weights, m, B)
    return EvaluationReport(
        utility=utility,
        constraint_value=cv,
        feasible=cv >= model.C - tol_feas,
        binding=abs(cv - model.C) <= tol_bind,
    )


def truthful_values(A, B, weights):
    """Truthful utility and constraint value from payoff matrices."""
    return math.fsum(weights * np.diag(A)), math.fsum(weights * np.diag(B))
