"""TOML scenario files: type grid, player model, rules or menu, tolerances.

Example::

    [space]
    nodes = [5]
    bounds = [[0.0, 1.0]]

    [model]
    kind = "budget"        # budget | roi | custom
    budget = 0.4
    u_star = ["q1"]        # linear form, one expression per type coordinate

    [rules]
    family = "posted_price"
    threshold = 0.5

Expressions are numpy expressions in ``q`` (outcome, last axis), ``v``
(type) and the coordinates ``q1..qD``, ``v1..vd``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import ast
import re

import numpy as np

from .builder import AutoBidMechanism, read_menu_csv
from .core import (
    InterimRules, PlayerModel, TypeSpace, linear_allocation, make_model_budget, make_model_roi,
    outcome_range, posted_price,
)
from .errors import ScenarioError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

_FUNCS = {
    name: getattr(np, name)
    for name in ("exp", "log", "sqrt", "abs", "minimum", "maximum", "clip", "where", "sin", "cos",
                 "tanh", "floor", "ceil", "sign", "pi", "e")
}


_VARIABLE = re.compile(r"[qv]\d*")


def compile_expression(expr, what):
    try:
        tree = ast.parse(str(expr), mode="eval")
    except SyntaxError as exc:
        raise ScenarioError(f"{what}: cannot parse expression {expr!r}: {exc.msg}") from exc
    for node in ast.walk(tree):
        if isinstance(node, ast.Name) and node.id not in _FUNCS and node.id != "np" \
                and not _VARIABLE.fullmatch(node.id):
            raise ScenarioError(f"{what}: unknown name {node.id!r} in {expr!r}")
        if isinstance(node, ast.Attribute) and node.attr.startswith("_"):
            raise ScenarioError(f"{what}: attribute {node.attr!r} not allowed in {expr!r}")
    code = compile(tree, f"<{what}>", "eval")

    def fn(**arrays):
        ns = dict(_FUNCS)
        ns["np"] = np
        for name, a in arrays.items():
            ns[name] = a
            for k in range(a.shape[-1]):
                ns[f"{name}{k + 1}"] = a[..., k]
        return eval(code, {"__builtins__": {}}, ns)

    return fn


def _vector_expression(exprs, what, lead_arg):
    fns = [compile_expression(e, f"{what}[{k}]") for k, e in enumerate(exprs)]

    def fn(a):
        a = np.asarray(a, dtype=float)
        cols = [np.broadcast_to(np.asarray(f(**{lead_arg: a}), dtype=float), a.shape[:-1]) for f in fns]
        return np.stack(cols, axis=-1)

    return fn


def _pair_expression(expr, what):
    f = compile_expression(expr, what)

    def fn(q, v):
        q = np.asarray(q, dtype=float)
        v = np.asarray(v, dtype=float)
        out = np.asarray(f(q=q, v=v), dtype=float)
        return np.broadcast_to(out, np.broadcast_shapes(q.shape[:-1], v.shape[:-1]))

    return fn


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    space: TypeSpace
    model: PlayerModel
    rules: Optional[InterimRules] = None
    menu: Optional[AutoBidMechanism] = None
    tolerances: dict = field(default_factory=dict)
    build: dict = field(default_factory=dict)
    path: Optional[str] = None
    sha256: str = ""
    raw: dict = field(default_factory=dict)

    def is_stale(self):
        if self.path is None:
            return False
        return hashlib.sha256(Path(self.path).read_bytes()).hexdigest() != self.sha256

    def provenance(self):
        return {"name": self.name, "path": self.path, "sha256": self.sha256}


def bundled_names():
    return sorted(p.name[:-5] for p in resources.files("exante_ic.scenarios").iterdir()
                  if p.name.endswith(".toml"))


def resolve(path_or_name):
    p = Path(path_or_name)
    if p.exists():
        return p
    candidate = resources.files("exante_ic.scenarios") / f"{path_or_name}.toml"
    if candidate.is_file():
        return Path(str(candidate))
    raise ScenarioError(f"no scenario file or bundled scenario named {path_or_name!r}")


def _need(table, key, where):
    if key not in table:
        raise ScenarioError(f"[{where}] is missing required key {key!r}")
    return table[key]


def _space(t):
    counts = [int(n) for n in np.atleast_1d(_need(t, "nodes", "space"))]
    bounds = t.get("bounds", [[0.0, 1.0]] * len(counts))
    if len(bounds) != len(counts):
        raise ScenarioError("[space] bounds needs one (lo, hi) pair per axis")
    weights = t.get("weights")
    density = t.get("density")
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        if w.size != int(np.prod(counts)):
            raise ScenarioError(f"[space] weights has {w.size} entries for {int(np.prod(counts))} nodes")
        total = math.fsum(w)
        if abs(total - 1.0) > 1e-12:
            raise ScenarioError(f"[space] weights must sum to 1 (within 1e-12); they sum to {total!r}")
        if np.any(w < 0):
            raise ScenarioError("[space] weights must be non-negative")
    dens = None
    if density is not None:
        f = compile_expression(density, "space.density")
        dens = lambda v: np.broadcast_to(f(v=v), v.shape[:-1])  # noqa: E731
    try:
        return TypeSpace.grid(counts, bounds, weights=weights, density=dens)
    except ValueError as exc:
        raise ScenarioError(f"[space] {exc}") from exc


def _model(t, d):
    kind = t.get("kind", "custom")
    u_star = _vector_expression(t["u_star"], "model.u_star", "q") if "u_star" in t else None
    u = _pair_expression(t["u"], "model.u") if "u" in t else None
    if u_star is not None and len(t["u_star"]) not in (1, d):
        raise ScenarioError(f"[model] u_star needs 1 or {d} expressions")
    if kind == "budget":
        return make_model_budget(float(_need(t, "budget", "model")), u, u_star=u_star)
    if kind == "roi":
        return make_model_roi(float(t.get("gamma", 0.0)), u, u_star=u_star)
    if kind != "custom":
        raise ScenarioError(f"[model] unknown kind {kind!r} (budget, roi or custom)")
    f_star = _vector_expression(t["f_star"], "model.f_star", "q") if "f_star" in t else None
    f = _pair_expression(t["f"], "model.f") if "f" in t else None
    if u is None and u_star is not None:
        u = lambda q, v: np.sum(u_star(q) * v, axis=-1)  # noqa: E731
    if f is None and f_star is not None:
        f = lambda q, v: np.sum(f_star(q) * v, axis=-1)  # noqa: E731
    if u is None or f is None:
        raise ScenarioError("[model] custom models need u (or u_star) and f (or f_star)")
    try:
        return PlayerModel(u=u, f=f, c1=int(_need(t, "c1", "model")), c2=int(_need(t, "c2", "model")),
                           C=float(_need(t, "C", "model")), u_star=u_star if f_star else None,
                           f_star=f_star if u_star else None, label="custom")
    except ValueError as exc:
        raise ScenarioError(f"[model] {exc}") from exc


def _rules(t, space, base):
    family = _need(t, "family", "rules")
    if family == "posted_price":
        return posted_price(float(_need(t, "threshold", "rules")), t.get("price"), t.get("direction"))
    if family == "linear":
        return linear_allocation(t.get("a", [1.0] * space.dim), t.get("b", 0.0), t.get("lo", 0.0),
                                 t.get("hi", 1.0), t.get("price_poly", [0.0]))
    if family == "expression":
        x = _vector_expression(_need(t, "x", "rules"), "rules.x", "v")
        pf = compile_expression(_need(t, "p", "rules"), "rules.p")
        p = lambda v: np.broadcast_to(np.asarray(pf(v=np.asarray(v, dtype=float)), dtype=float),  # noqa: E731
                                      np.shape(v)[:-1])
        return InterimRules(x, p, name="expression")
    if family == "tabulated":
        if "path" in t:
            X, P = read_rules_csv(base / t["path"], space)
        else:
            X, P = np.asarray(_need(t, "x", "rules"), dtype=float), np.asarray(_need(t, "p", "rules"))
        try:
            return InterimRules.tabulated(space, X, P)
        except ValueError as exc:
            raise ScenarioError(f"[rules] {exc}") from exc
    raise ScenarioError(f"[rules] unknown family {family!r}")


def read_rules_csv(path, space):
    """Tabulated rules CSV with columns v_1..v_d, q_1..q_D, p (one row per grid node, C order)."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    col = {name.strip(): k for k, name in enumerate(header)}
    vcols = [col.get(f"v_{k + 1}") for k in range(space.dim)]
    qcols = sorted((c for c in col if c.startswith("q_")), key=lambda c: int(c[2:]))
    if None in vcols or not qcols or "p" not in col:
        raise ScenarioError(f"{path}: expected columns v_1..v_{space.dim}, q_1..q_D, p")
    if len(data) != space.size or np.max(np.abs(data[:, vcols] - space.points)) > 1e-9:
        raise ScenarioError(f"{path}: rows must list the grid nodes in order")
    return data[:, [col[c] for c in qcols]], data[:, col["p"]]


def _menu(t, base):
    if "path" in t:
        outcomes, prices = read_menu_csv(base / t["path"])
    else:
        outcomes = np.asarray(_need(t, "outcomes", "menu"), dtype=float)
        prices = np.asarray(_need(t, "prices", "menu"), dtype=float)
    try:
        return AutoBidMechanism(outcomes, prices, r=float(t.get("r", 0.0)),
                                regime=t.get("regime", "multiplier"))
    except ValueError as exc:
        raise ScenarioError(f"[menu] {exc}") from exc


def parse_scenario(data, name="scenario", base=Path("."), path=None, sha256=""):
    space = _space(_need(data, "space", "top level"))
    model = _model(_need(data, "model", "top level"), space.dim)
    rules = _rules(data["rules"], space, base) if "rules" in data else None
    menu = _menu(data["menu"], base) if "menu" in data else None
    if rules is None and menu is None:
        raise ScenarioError("scenario needs a [rules] or a [menu] table")
    if menu is not None and rules is None and "r" in data["menu"]:
        from .builder import induce_rules

        rules = induce_rules(menu, model, space)
    if model.has_linear_form and rules is not None:
        try:
            model.check_linear_form(outcome_range(rules, space), space.points)
        except ValueError as exc:
            raise ScenarioError(f"[model] u, f are not linear in the type as declared: {exc}") from exc
    return Scenario(
        name=name, space=space, model=model, rules=rules, menu=menu,
        tolerances={k: float(v) for k, v in data.get("tolerances", {}).items()},
        build=dict(data.get("build", {})), path=path, sha256=sha256, raw=data,
    )


def load_scenario(path_or_name):
    p = resolve(path_or_name)
    content = p.read_bytes()
    try:
        data = tomllib.loads(content.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{p}: {exc}") from exc
    return parse_scenario(data, name=p.stem, base=p.parent, path=str(p),
                          sha256=hashlib.sha256(content).hexdigest())
