"""Hyperparameter search for monitor templates.

A search only ever sees the ID fit/validation data and the validation
portion of each OOD class (``SearchContext`` never receives test data).
Candidates that violate the ID-accuracy constraint are scored -1.

The gradient-descent method climbs a smoothed objective in which every
verdict indicator is replaced by ``sigmoid(beta * (tau - s) / std(id_scores))``;
gradients are central finite differences in the unit-normalised parameter
coordinates.
"""
from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import monitors as M
from . import nn
from .data import OodClassId, OodSuite, SearchSplit, SplitDataset


@dataclass(frozen=True)
class Objective:
    targets: tuple
    weights: tuple
    min_id_accuracy: float = 0.7

    def __post_init__(self):
        targets = tuple(self.targets)
        weights = np.asarray(self.weights if self.weights else [1.0] * len(targets), dtype=np.float64)
        if not targets:
            raise ValueError("objective needs at least one target OOD class")
        if len(weights) != len(targets):
            raise ValueError(f"{len(weights)} weights for {len(targets)} targets")
        if np.any(weights < 0) or weights.sum() <= 0:
            raise ValueError("weights must be non-negative with a positive sum")
        if not 0.0 < self.min_id_accuracy <= 1.0:
            raise ValueError("min_id_accuracy must be in (0, 1]")
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "weights", tuple(float(w) for w in weights / weights.sum()))


@dataclass(frozen=True)
class Candidate:
    kind: str
    params: dict
    objective_value: float
    id_accuracy: float
    per_class_accuracy: dict
    feasible: bool
    tau: float | None = None
    error: str | None = None

    def record(self) -> dict:
        return {"params": self.params, "objective": self.objective_value, "id_accuracy": self.id_accuracy,
                "per_class": {str(k): v for k, v in self.per_class_accuracy.items()},
                "feasible": self.feasible, "tau": self.tau, "error": self.error}


@dataclass
class SearchResult:
    best: Candidate
    log: list = field(default_factory=list)

    def jsonl(self) -> str:
        return "".join(json.dumps(c.record(), sort_keys=True) + "\n" for c in self.log)


def _key(params: dict):
    return tuple(sorted(params.items()))


class SearchContext:
    """Precomputed forward passes and per-parameter score caches for one network."""

    def __init__(self, net: nn.Network, split: SearchSplit | SplitDataset, ood_validation: dict, seed: int = 0):
        if isinstance(split, SplitDataset):
            split = split.search_view()
        self.net = net
        self.split = split
        self.seed = seed
        self.fit_trace = nn.forward_batch(net, split.fit.images)
        self.val_trace = nn.forward_batch(net, split.validation.images)
        self.ood_traces = {cls: nn.forward_batch(net, ds.images) for cls, ds in ood_validation.items()}
        self._cache = {}

    @classmethod
    def from_suite(cls, net, split, suite: OodSuite, classes=None, seed: int = 0) -> "SearchContext":
        classes = suite.classes() if classes is None else classes
        return cls(net, split, {c: suite.validation(c) for c in classes}, seed)

    def fit(self, kind: str, params: dict) -> M.FittedMonitor:
        return M.fit(kind, params, self.net, self.split.fit, trace=self.fit_trace, seed=self.seed)

    def outputs(self, kind: str, params: dict):
        """(ID validation output, {class: OOD validation output}); outputs are scores or Box verdicts."""
        key = (kind, _key(params))
        if key not in self._cache:
            mon = self.fit(kind, params)
            if mon.kind == "Box":
                out = (M.box_inside(mon, self.val_trace),
                       {c: M.box_inside(mon, t) for c, t in self.ood_traces.items()})
            else:
                out = (M.score_batch(mon, self.val_trace),
                       {c: M.score_batch(mon, t) for c, t in self.ood_traces.items()})
            self._cache[key] = out
        return self._cache[key]

    def build_monitor(self, kind: str, params: dict, min_id_accuracy: float) -> M.FittedMonitor:
        mon = self.fit(kind, params)
        if mon.uses_threshold:
            mon = mon.calibrate(M.score_batch(mon, self.val_trace), min_id_accuracy)
        return mon


def _infeasible(kind, params, obj, error) -> Candidate:
    return Candidate(kind, params, -1.0, 0.0, {c: 0.0 for c in obj.targets}, False, None, error)


def evaluate_objective(template, params: dict, ctx: SearchContext, obj: Objective) -> Candidate:
    """Fit, calibrate at ``obj.min_id_accuracy`` on ID validation, and score the targets."""
    template = M.get_template(template) if isinstance(template, str) else template
    try:
        params = template.param_space(ctx.net).resolve(params)
        id_out, ood_out = ctx.outputs(template.kind, params)
    except (M.MonitorError, np.linalg.LinAlgError, ValueError) as exc:
        return _infeasible(template.kind, dict(params), obj, str(exc))
    if template.uses_threshold:
        tau = M.fit_threshold(id_out, obj.min_id_accuracy)
        id_acc = float(np.mean(id_out >= tau))
        per = {c: float(np.mean(ood_out[c] < tau)) for c in obj.targets}
    else:
        tau = None
        id_acc = float(np.mean(id_out))
        per = {c: float(np.mean(~ood_out[c])) for c in obj.targets}
    feasible = id_acc >= obj.min_id_accuracy
    value = float(sum(w * per[c] for c, w in zip(obj.targets, obj.weights))) if feasible else -1.0
    return Candidate(template.kind, params, value, id_acc, per, feasible, tau)


def smoothed_objective(template, params: dict, ctx: SearchContext, obj: Objective, beta: float) -> float:
    template = M.get_template(template) if isinstance(template, str) else template
    try:
        params = template.param_space(ctx.net).resolve(params)
        id_out, ood_out = ctx.outputs(template.kind, params)
    except (M.MonitorError, np.linalg.LinAlgError, ValueError):
        return -1.0
    if not template.uses_threshold:
        return evaluate_objective(template, params, ctx, obj).objective_value
    tau = M.fit_threshold(id_out, obj.min_id_accuracy)
    sd = float(np.std(id_out)) or 1.0
    total = 0.0
    for c, w in zip(obj.targets, obj.weights):
        arg = np.clip(beta * (tau - ood_out[c]) / sd, -500, 500)
        total += w * float(np.mean(1.0 / (1.0 + np.exp(-arg))))
    return total


def _best(cands: list) -> Candidate:
    best = cands[0]
    for c in cands[1:]:
        if c.objective_value > best.objective_value:
            best = c
    return best


def _run_all(template, param_list, ctx, obj, jobs: int) -> list:
    fn = lambda p: evaluate_objective(template, p, ctx, obj)  # noqa: E731
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(fn, param_list))
    return [fn(p) for p in param_list]


def random_search(template, ctx: SearchContext, obj: Objective, trials: int = 100, seed: int = 0,
                  jobs: int = 1) -> SearchResult:
    template = M.get_template(template) if isinstance(template, str) else template
    if trials < 1:
        raise ValueError("random search needs at least one trial")
    space = template.param_space(ctx.net)
    rng = np.random.default_rng(seed)
    param_list = [space.sample(rng) for _ in range(trials)]
    log = _run_all(template, param_list, ctx, obj, jobs)
    return SearchResult(_best(log), log)


def grid_points(space: M.ParamSpace, splits: int) -> list:
    axes = [p.grid(splits) for p in space.params]
    return [dict(zip(space.names, combo)) for combo in itertools.product(*axes)]


def grid_search(template, ctx: SearchContext, obj: Objective, splits: int = 50, jobs: int = 1) -> SearchResult:
    template = M.get_template(template) if isinstance(template, str) else template
    if splits < 1:
        raise ValueError("grid search needs at least one split per parameter")
    log = _run_all(template, grid_points(template.param_space(ctx.net), splits), ctx, obj, jobs)
    return SearchResult(_best(log), log)


def ascend(space: M.ParamSpace, hard, smooth, start: dict, steps: int = 50, lr: float = 0.2,
           fd_step: float = 0.05) -> tuple:
    """Projected finite-difference ascent on ``smooth``; returns (best hard result, trajectory).

    ``hard`` maps params to a ``Candidate``; ``smooth`` maps params to a float.
    Only float parameters move; coordinates are rescaled to [0, 1].
    """
    cont = [p for p in space.params if p.continuous]
    if not cont:
        raise ValueError("gradient descent needs at least one continuous parameter")

    def to_params(u):
        out = dict(start)
        for p, ui in zip(cont, u):
            out[p.name] = float(p.lo + ui * (p.hi - p.lo))
        return out

    u = np.array([(start[p.name] - p.lo) / (p.hi - p.lo) if p.hi > p.lo else 0.0 for p in cont])
    first = hard(to_params(u))
    log, path = [first], [u.copy()]
    for _ in range(steps):
        grad = np.zeros_like(u)
        for i in range(len(u)):
            up, dn = u.copy(), u.copy()
            up[i] = min(1.0, u[i] + fd_step)
            dn[i] = max(0.0, u[i] - fd_step)
            if up[i] > dn[i]:
                grad[i] = (smooth(to_params(up)) - smooth(to_params(dn))) / (up[i] - dn[i])
        u = np.clip(u + lr * grad, 0.0, 1.0)
        path.append(u.copy())
        log.append(hard(to_params(u)))
    return _best(log), log, [to_params(p) for p in path]


def gradient_descent(template, ctx: SearchContext, obj: Objective, steps: int = 50, lr: float = 0.2,
                     fd_step: float = 0.05, sigmoid_beta: float = 10.0, seed: int = 0,
                     surrogate=None) -> SearchResult:
    """Finite-difference ascent from a seeded random start.

    ``surrogate(params) -> float`` replaces the smoothed objective (test hook).
    """
    template = M.get_template(template) if isinstance(template, str) else template
    space = template.param_space(ctx.net)
    rng = np.random.default_rng(seed)
    start = space.defaults()
    for p in space.params:
        if p.continuous:
            start[p.name] = p.sample(rng)
    smooth = surrogate or (lambda prm: smoothed_objective(template, prm, ctx, obj, sigmoid_beta))
    best, log, _ = ascend(space, lambda prm: evaluate_objective(template, prm, ctx, obj), smooth, start,
                          steps, lr, fd_step)
    return SearchResult(best, log)


def run_method(method: str, template, ctx: SearchContext, obj: Objective, seed: int = 0, jobs: int = 1,
               **kw) -> SearchResult:
    if method == "random":
        return random_search(template, ctx, obj, kw.get("trials", 100), seed, jobs)
    if method == "grid":
        return grid_search(template, ctx, obj, kw.get("splits", 50), jobs)
    if method == "gradient":
        return gradient_descent(template, ctx, obj, kw.get("steps", 50), kw.get("lr", 0.2),
                                kw.get("fd_step", 0.05), kw.get("beta", 10.0), seed)
    raise ValueError(f"unknown optimization method {method!r}; expected random, grid, or gradient")


# ---------------------------------------------------------------- multi-objective

@dataclass(frozen=True)
class ParetoPoint:
    weights: tuple
    accuracies: tuple
    id_accuracy: float = float("nan")


def sweep_weights(k: int, combos: int, seed: int = 0) -> list:
    if k == 1:
        return [(1.0,)]
    if k == 2:
        if combos < 2:
            raise ValueError("a two-objective sweep needs at least 2 combinations")
        return [(i / (combos - 1), 1.0 - i / (combos - 1)) for i in range(combos)]
    rng = np.random.default_rng(seed)
    sampled = [tuple(float(v) for v in w) for w in rng.dirichlet(np.ones(k), size=combos)]
    return sampled + [tuple(1.0 if i == j else 0.0 for i in range(k)) for j in range(k)]


def multi_objective_sweep(template, ctx: SearchContext, obj: Objective, combos: int = 5,
                          method: str = "random", seed: int = 0, **kw) -> list:
    """Optimise once per weight vector; returns ``[(ParetoPoint, Candidate), ...]``."""
    out = []
    for w in sweep_weights(len(obj.targets), combos, seed):
        sub = Objective(obj.targets, w, obj.min_id_accuracy)
        best = run_method(method, template, ctx, sub, seed=seed, **kw).best
        acc = tuple(best.per_class_accuracy[c] for c in obj.targets)
        out.append((ParetoPoint(tuple(w), acc, best.id_accuracy), best))
    return out


def pareto_front(points: list) -> list:
    """Non-dominated subset in input order (maximisation in every coordinate)."""
    if not points:
        return []
    a = np.asarray([p.accuracies for p in points], dtype=np.float64)
    geq = np.all(a[:, None, :] >= a[None, :, :], axis=2)
    gt = np.any(a[:, None, :] > a[None, :, :], axis=2)
    dominated = np.any(geq & gt, axis=0)  # column j dominated by some row i
    return [p for p, d in zip(points, dominated) if not d]
