"""Repeated-auction harness for report controllers.

Each round draws a type i.i.d. from the grid distribution and a controller
picks one of the mechanism's options, i.e. the (outcome, payment) pair of some
grid report. The ex-ante constraint is judged on the episode average.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .builder import AutoBidMechanism, induce_rules
from .core import InterimRules, Strategy, payoff_matrices

TIE_TOL = 1e-12


@dataclass(frozen=True)
class Controller:
    kind: str
    param: Optional[float] = None
    strategy: Optional[Strategy] = None
    report: Optional[int] = None

    @property
    def label(self):
        if self.kind == "linear_multiplier":
            return f"linear_multiplier(r={self.param!r})"
        if self.kind == "uniform_scale":
            return f"uniform_scale(k={self.param!r})"
        if self.kind == "fixed_report":
            return "fixed_report(strategy)" if self.strategy is not None else f"fixed_report({self.report})"
        return self.kind


def linear_multiplier(r):
    if r < 0:
        raise ValueError("r must be non-negative")
    return Controller("linear_multiplier", float(r))


def truthful():
    return Controller("truthful")


def uniform_scale(k):
    if k < 0:
        raise ValueError("k must be non-negative")
    return Controller("uniform_scale", float(k))


def fixed_report(report):
    if isinstance(report, Strategy):
        return Controller("fixed_report", strategy=report)
    return Controller("fixed_report", report=int(report))


@dataclass(frozen=True, eq=False)
class EpisodeConfig:
    rounds: int
    seed: int
    controller: Controller
    mechanism: Union[AutoBidMechanism, InterimRules]
    draws_per_round: int = 1
    keep_trace: bool = False

    def __post_init__(self):
        if int(self.rounds) < 1:
            raise ValueError("rounds must be >= 1")
        if self.draws_per_round != 1:
            raise ValueError("only one type draw per round is supported")


@dataclass(frozen=True, eq=False)
class Trace:
    types: np.ndarray
    reports: np.ndarray
    outcomes: np.ndarray
    payments: np.ndarray
    utility: np.ndarray
    constraint: np.ndarray

    @property
    def cumulative_spend(self):
        return np.cumsum(self.payments)


@dataclass(frozen=True, eq=False)
class EpisodeResult:
    controller: str
    rounds: int
    realized_utility: float
    realized_constraint: float
    utility_se: float
    constraint_se: float
    violation: bool
    per_round_log: Optional[Trace] = None


@dataclass(frozen=True)
class ComparisonRow:
    controller: str
    realized_utility: float
    realized_constraint: float
    utility_se: float
    constraint_se: float
    feasible: bool


@dataclass(frozen=True)
class ComparisonTable:
    rows: list
    ranking: list  # feasible rows only, by utility
    all_infeasible: bool
    results: list


def _rules_of(mechanism, model, space):
    if isinstance(mechanism, AutoBidMechanism):
        if len(mechanism.prices) == 0:
            raise ValueError("empty menu")
        return induce_rules(mechanism, model, space)
    if isinstance(mechanism, InterimRules):
        return mechanism
    raise TypeError(f"unsupported mechanism {type(mechanism).__name__}")


def _argmax_prefer_own(S):
    top = S.max(axis=1, keepdims=True)
    tied = S >= top - TIE_TOL * (1.0 + np.abs(top))
    own = np.diag(tied)
    return np.where(own, np.arange(len(S)), np.argmax(tied, axis=1))


def report_policy(controller, A, B, P, model):
    """Deterministic report per type (array) or a report strategy matrix."""
    n = len(A)
    if controller.kind == "truthful":
        return np.arange(n)
    if controller.kind == "linear_multiplier":
        return _argmax_prefer_own(A + controller.param * B)
    if controller.kind == "uniform_scale":
        value = A + model.c1 * P[None, :]
        return _argmax_prefer_own(controller.param * value - P[None, :])
    if controller.kind == "fixed_report":
        if controller.strategy is not None:
            if controller.strategy.n != n:
                raise ValueError("strategy size does not match the grid")
            return controller.strategy.matrix
        if not 0 <= controller.report < n:
            raise ValueError(f"report index {controller.report} outside the grid")
        return np.full(n, controller.report)
    raise ValueError(f"unknown controller {controller.kind!r}")


def _draw_categorical(rng, cum, size):
    idx = np.searchsorted(cum, rng.random(size), side="right")
    return np.minimum(idx, len(cum) - 1)


def _mean_se(x):
    n = len(x)
    mean = math.fsum(x) / n
    if n < 2:
        return mean, 0.0
    dev = x - mean
    return mean, math.sqrt(math.fsum(dev * dev) / (n - 1) / n)


def run_episode(config, model, space, matrices=None):
    """Monte Carlo episode; the result is a deterministic function of the seed."""
    rules = _rules_of(config.mechanism, model, space)
    X, P = rules.on(space)
    A, B = payoff_matrices(rules, model, space) if matrices is None else matrices
    policy = report_policy(config.controller, A, B, P, model)
    type_ss, report_ss = np.random.SeedSequence(config.seed).spawn(2)
    type_rng = np.random.default_rng(type_ss)
    report_rng = np.random.default_rng(report_ss)
    rounds = int(config.rounds)
    types = _draw_categorical(type_rng, np.cumsum(space.weights), rounds)
    if policy.ndim == 1:
        reports = policy[types]
    else:
        u = report_rng.random(rounds)
        reports = np.empty(rounds, dtype=np.int64)
        cum = np.cumsum(policy, axis=1)
        for i in range(space.size):
            sel = types == i
            if sel.any():
                reports[sel] = np.minimum(np.searchsorted(cum[i], u[sel], side="right"), space.size - 1)
    util = A[types, reports]
    cons = B[types, reports]
    mu, su = _mean_se(util)
    mc, sc = _mean_se(cons)
    trace = None
    if config.keep_trace:
        trace = Trace(types, reports, X[reports], P[reports], util, cons)
    return EpisodeResult(
        controller=config.controller.label, rounds=rounds, realized_utility=mu, realized_constraint=mc,
        utility_se=su, constraint_se=sc, violation=bool(mc < model.C - 3.0 * sc), per_round_log=trace,
    )


def compare_controllers(configs, model, space, crn=True):
    """Run every controller on the same mechanism and rank the feasible ones by utility."""
    if not configs:
        raise ValueError("no configs given")
    mech = configs[0].mechanism
    if any(c.mechanism is not mech for c in configs):
        raise ValueError("all configs must share one mechanism")
    if crn and len({(c.seed, c.rounds) for c in configs}) > 1:
        raise ValueError("common random numbers need one seed and round count across controllers")
    rules = _rules_of(mech, model, space)
    matrices = payoff_matrices(rules, model, space)
    results = [run_episode(c, model, space, matrices=matrices) for c in configs]
    rows = [
        ComparisonRow(r.controller, r.realized_utility, r.realized_constraint, r.utility_se,
                      r.constraint_se, not r.violation)
        for r in results
    ]
    order = sorted(range(len(rows)), key=lambda k: (not rows[k].feasible, -rows[k].realized_utility, k))
    rows = [rows[k] for k in order]
    results = [results[k] for k in order]
    ranking = [r for r in rows if r.feasible]
    return ComparisonTable(rows, ranking, not ranking, results)


def write_trace_csv(path, result, space):
    """Columns: round, type_index, v_1..v_d, report_index, q_1..q_D, payment, cumulative_spend."""
    t = result.per_round_log
    if t is None:
        raise ValueError("episode was run without keep_trace")
    d = space.dim
    D = t.outcomes.shape[1]
    n = len(t.types)
    cols = [np.arange(1, n + 1), t.types, *space.points[t.types].T, t.reports, *t.outcomes.T,
            t.payments, t.cumulative_spend]
    header = ",".join(["round", "type_index"] + [f"v_{k + 1}" for k in range(d)] + ["report_index"]
                      + [f"q_{k + 1}" for k in range(D)] + ["payment", "cumulative_spend"])
    fmt = ["%d", "%d"] + ["%.17g"] * d + ["%d"] + ["%.17g"] * (D + 2)
    np.savetxt(path, np.column_stack(cols), fmt=fmt, delimiter=",", header=header, comments="")
