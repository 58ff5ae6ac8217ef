"""Monitor templates, fitting, scoring, thresholds, and serialization.

Every scorer follows one convention: a higher score means the input looks
more in-distribution, and a threshold monitor says ID iff ``score >= tau``.
The Box monitor has no score; its verdict is membership in the boxes of the
predicted class.

Formula notes (simplifications of the cited methods):

* MDS uses one tied covariance over class-centred features; Mahalanobis is
  the relative variant (class distance minus the class-agnostic distance).
* Gaussian, SHE, and Box only consult the predicted class at scoring time.
* KLMatching groups fit samples by predicted class, not by label.
* DICE keeps the top entries of each row of the contribution matrix.
* ReAct with percentile 100 does not clip at all.
"""
from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import nn
from . import tensor as T

MONITOR_FORMAT = "oodmon-monitor/1"


class MonitorError(ValueError):
    pass


# ---------------------------------------------------------------- parameter spaces

@dataclass(frozen=True)
class Param:
    name: str
    kind: str  # "float" | "int" | "choice"
    lo: float = 0.0
    hi: float = 0.0
    default: object = None
    choices: tuple = ()

    def __post_init__(self):
        if self.kind in ("float", "int") and self.lo > self.hi:
            raise ValueError(f"{self.name}: lo > hi")

    @property
    def continuous(self) -> bool:
        return self.kind == "float"

    def contains(self, value) -> bool:
        if self.kind == "choice":
            return value in self.choices
        if self.kind == "int" and int(value) != value:
            return False
        return self.lo <= value <= self.hi

    def sample(self, rng: np.random.Generator):
        if self.kind == "float":
            return float(rng.uniform(self.lo, self.hi))
        if self.kind == "int":
            return int(rng.integers(int(self.lo), int(self.hi), endpoint=True))
        return self.choices[int(rng.integers(len(self.choices)))]

    def grid(self, splits: int) -> list:
        if self.kind == "choice":
            return list(self.choices)
        values = np.linspace(self.lo, self.hi, splits) if splits > 1 else np.array([self.lo])
        if self.kind == "int":
            return sorted({int(round(v)) for v in values})
        return [float(v) for v in values]


@dataclass(frozen=True)
class ParamSpace:
    params: tuple = ()

    @property
    def names(self) -> list:
        return [p.name for p in self.params]

    def __getitem__(self, name) -> Param:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def defaults(self) -> dict:
        return {p.name: p.default for p in self.params}

    def resolve(self, params: dict | None) -> dict:
        """Fill missing entries with defaults and validate against the bounds."""
        params = dict(params or {})
        unknown = set(params) - set(self.names)
        if unknown:
            raise MonitorError(f"unknown parameters {sorted(unknown)}; expected {self.names}")
        out = {}
        for p in self.params:
            value = params.get(p.name, p.default)
            if not p.contains(value):
                raise MonitorError(f"parameter {p.name}={value!r} outside [{p.lo}, {p.hi}]"
                                   if p.kind != "choice" else f"parameter {p.name}={value!r} not in {p.choices}")
            out[p.name] = int(value) if p.kind == "int" else (float(value) if p.kind == "float" else value)
        return out

    def sample(self, rng) -> dict:
        return {p.name: p.sample(rng) for p in self.params}


# ---------------------------------------------------------------- templates

def _temperature(default, lo=0.1, hi=1000.0):
    return Param("temperature", "float", lo, hi, default)


@dataclass(frozen=True)
class MonitorTemplate:
    kind: str
    uses_threshold: bool = True
    static_params: tuple = ()

    def param_space(self, net: nn.Network | None = None) -> ParamSpace:
        """Parameter space; VIM and KNN bounds depend on the network's feature width."""
        params = list(self.static_params)
        if self.kind == "VIM":
            d = net.feature_dim if net is not None else 100
            params.append(Param("dim", "int", 1, max(1, d - 1), max(1, d // 2)))
        return ParamSpace(tuple(params))


TEMPLATES = {t.kind: t for t in (
    MonitorTemplate("ASH-B", static_params=(Param("percentile", "float", 0.0, 100.0, 65.0),)),
    MonitorTemplate("ASH-P", static_params=(Param("percentile", "float", 0.0, 100.0, 65.0),)),
    MonitorTemplate("ASH-S", static_params=(Param("percentile", "float", 0.0, 100.0, 65.0),)),
    MonitorTemplate("Box", uses_threshold=False,
                    static_params=(Param("clusters", "int", 1, 10, 1), Param("gamma", "float", 0.0, 1.0, 0.0))),
    MonitorTemplate("DICE", static_params=(Param("sparsity", "float", 0.0, 99.0, 70.0),)),
    MonitorTemplate("Energy", static_params=(_temperature(1.0),)),
    MonitorTemplate("Entropy"),
    MonitorTemplate("Gaussian"),
    MonitorTemplate("GradNorm", static_params=(_temperature(1.0),)),
    MonitorTemplate("KLMatching"),
    MonitorTemplate("KNN", static_params=(Param("k", "int", 1, 50, 5),)),
    MonitorTemplate("MaxLogit"),
    MonitorTemplate("MDS"),
    MonitorTemplate("Mahalanobis"),
    MonitorTemplate("ODIN", static_params=(_temperature(1000.0, 1.0, 1000.0),
                                           Param("epsilon", "float", 0.0, 0.2, 0.0014))),
    MonitorTemplate("ReAct", static_params=(Param("percentile", "float", 0.0, 100.0, 90.0),)),
    MonitorTemplate("SHE"),
    MonitorTemplate("Softmax"),
    MonitorTemplate("Temperature", static_params=(_temperature(1000.0),)),
    MonitorTemplate("VIM"),
)}

KINDS = tuple(TEMPLATES)


def get_template(kind: str) -> MonitorTemplate:
    try:
        return TEMPLATES[kind]
    except KeyError:
        raise MonitorError(f"unknown monitor {kind!r}; known monitors: {', '.join(KINDS)}") from None


# ---------------------------------------------------------------- fitted monitors

class Verdict(str, Enum):
    ID = "ID"
    OOD = "OOD"


@dataclass(frozen=True)
class FittedMonitor:
    kind: str
    params: dict
    state: dict = field(repr=False)
    net: nn.Network = field(repr=False, compare=False)
    tau: float | None = None

    @property
    def uses_threshold(self) -> bool:
        return TEMPLATES[self.kind].uses_threshold

    def with_threshold(self, tau: float) -> "FittedMonitor":
        return replace(self, tau=float(tau))

    def calibrate(self, id_scores, target_id_accuracy: float) -> "FittedMonitor":
        return self.with_threshold(fit_threshold(id_scores, target_id_accuracy))


def _class_groups(labels: np.ndarray, class_count: int, kind: str) -> list:
    groups = [np.flatnonzero(labels == c) for c in range(class_count)]
    missing = [c for c, g in enumerate(groups) if len(g) == 0]
    if missing:
        raise MonitorError(f"{kind} needs every class in the fit data; missing classes {missing}")
    return groups


def _class_means(z: np.ndarray, groups: list) -> np.ndarray:
    return np.stack([z[g].mean(axis=0) for g in groups])


def _tied_factor(z: np.ndarray, labels: np.ndarray, means: np.ndarray) -> T.SpdFactor:
    centered = z - means[labels]
    return T.cholesky_spd(T.covariance(centered))


def _kmeans(x: np.ndarray, m: int, rng: np.random.Generator, iters: int = 50) -> np.ndarray:
    """Lloyd's k-means; empty clusters are re-seeded from the farthest point."""
    m = min(m, len(x))
    centers = x[np.sort(rng.choice(len(x), size=m, replace=False))].copy()
    assign = np.zeros(len(x), dtype=int)
    for _ in range(iters):
        d2 = ((x[:, None, :] - centers[None]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        new = centers.copy()
        for j in range(m):
            members = assign == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                far = int(d2[np.arange(len(x)), assign].argmax())
                new[j] = x[far]
                assign[far] = j
                d2[far, :] = 0.0
        if np.array_equal(new, centers):
            break
        centers = new
    return assign


def _fit_state(kind: str, params: dict, net: nn.Network, tr: nn.BatchTrace, labels: np.ndarray,
               seed: int) -> dict:
    z = np.asarray(tr.penultimate, dtype=np.float64)
    C = net.class_count
    if kind in ("ReAct",):
        p = params["percentile"]
        clip = math.inf if p >= 100 else float(np.percentile(np.asarray(tr.head_input, np.float64), p))
        return {"clip": np.float64(clip)}
    if kind == "DICE":
        w = np.asarray(net.head.w, dtype=np.float64)
        contrib = w * np.asarray(tr.head_input, np.float64).mean(axis=0)[None, :]
        keep = int(math.ceil(w.shape[1] * (100.0 - params["sparsity"]) / 100.0 - 1e-9))
        order = np.argsort(-contrib, axis=1, kind="stable")[:, :keep]
        mask = np.zeros_like(w)
        np.put_along_axis(mask, order, 1.0, axis=1)
        return {"mask": mask}
    if kind == "KNN":
        if params["k"] > len(z):
            raise MonitorError(f"KNN k={params['k']} exceeds the {len(z)} fit samples")
        return {"bank": _unit(z)}
    if kind in ("MDS", "Mahalanobis"):
        groups = _class_groups(labels, C, kind)
        means = _class_means(z, groups)
        state = {"means": means, "lower": _tied_factor(z, labels, means).lower}
        if kind == "Mahalanobis":
            state["global_mean"] = z.mean(axis=0)
            state["global_lower"] = T.cholesky_spd(T.covariance(z)).lower
        return state
    if kind == "Gaussian":
        groups = _class_groups(labels, C, kind)
        return {"means": _class_means(z, groups), "stds": np.stack([z[g].std(axis=0) for g in groups])}
    if kind == "Box":
        # grouped by predicted class, the class membership is later tested against
        pred = tr.predicted
        groups = [np.flatnonzero(pred == c) for c in range(C)]
        rng = np.random.default_rng(seed)
        lo, hi, owner = [], [], []
        for c, g in enumerate(groups):
            if len(g) == 0:
                continue
            assign = _kmeans(z[g], params["clusters"], rng)
            for j in np.unique(assign):
                pts = z[g][assign == j]
                lo.append(pts.min(axis=0))
                hi.append(pts.max(axis=0))
                owner.append(c)
        return {"lo": np.stack(lo), "hi": np.stack(hi), "owner": np.asarray(owner, dtype=np.int64)}
    if kind == "SHE":
        groups = _class_groups(labels, C, kind)
        pred = tr.predicted
        patterns = []
        for c, g in enumerate(groups):
            good = g[pred[g] == c]
            patterns.append(z[good if len(good) else g].mean(axis=0))
        return {"patterns": np.stack(patterns)}
    if kind == "KLMatching":
        p = T.softmax(tr.logits)
        pred = tr.predicted
        present = np.unique(pred)
        return {"templates": np.stack([p[pred == c].mean(axis=0) for c in present])}
    if kind == "VIM":
        mu = z.mean(axis=0)
        basis = T.top_eigenvectors(T.covariance(z), params["dim"])
        resid = _residual(z, mu, basis)
        alpha = vim_fit_alpha(tr.logits, resid)
        return {"mean": mu, "basis": basis, "alpha": np.float64(alpha)}
    return {}


def fit(template: MonitorTemplate | str, params: dict | None, net: nn.Network, id_fit,
        trace: nn.BatchTrace | None = None, seed: int = 0) -> FittedMonitor:
    """Estimate the monitor state from ID fit data (a ``LabeledDataset``).

    ``trace`` may carry a precomputed forward pass of ``id_fit`` to avoid
    recomputing it across many candidates.
    """
    if isinstance(template, str):
        template = get_template(template)
    params = template.param_space(net).resolve(params)
    if len(id_fit) == 0:
        raise MonitorError("fit data is empty")
    tr = nn.forward_batch(net, id_fit.images) if trace is None else trace
    state = _fit_state(template.kind, params, net, tr, np.asarray(id_fit.labels), seed)
    return FittedMonitor(template.kind, params, state, net)


# ---------------------------------------------------------------- scoring helpers

def _unit(z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return z / np.maximum(norms, 1e-12)


def _residual(z, mu, basis) -> np.ndarray:
    c = z - mu
    return np.linalg.norm(c - (c @ basis.T) @ basis, axis=1)


def _energy(logits, temperature=1.0) -> np.ndarray:
    return T.logsumexp(np.atleast_2d(np.asarray(logits, np.float64)), temperature, axis=1)


def _min_sq_mahalanobis(z, means, lower) -> np.ndarray:
    factor = T.SpdFactor(lower)
    d = np.stack([T.whitened_sq_norm(factor, z - mu) for mu in means], axis=1)
    return d.min(axis=1)


def _ash_batch(z: np.ndarray, mode: str, percentile: float) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    thr = np.percentile(z, percentile, axis=1, keepdims=True)
    kept = z >= thr
    pruned = np.where(kept, z, 0.0)
    if mode == "ash_p":
        return pruned
    s1 = z.sum(axis=1, keepdims=True)
    if mode == "ash_b":
        return np.where(kept, s1 / kept.sum(axis=1, keepdims=True), 0.0)
    s2 = pruned.sum(axis=1, keepdims=True)
    # s2 == 0 only when every kept entry is zero, so any scale leaves them zero
    ratio = np.divide(s1, s2, out=np.zeros_like(s1), where=s2 != 0)
    return pruned * np.exp(np.minimum(ratio, 80.0))


def shape_activations(z, mode: str, percentile: float, clip: float | None = None) -> np.ndarray:
    """Activation shaping of one feature vector.

    ``ash_p`` zeroes entries below the per-sample percentile, ``ash_b``
    replaces the kept entries by the pre-pruning sum over the kept count,
    ``ash_s`` rescales the kept entries by ``exp(sum_before / sum_after)``,
    and ``react`` clamps at ``clip`` (the fit-set percentile).
    """
    if not 0.0 <= percentile <= 100.0:
        raise ValueError(f"percentile must be in [0, 100], got {percentile}")
    z = np.asarray(z, dtype=np.float64)
    if mode == "react":
        if clip is None:
            raise ValueError("react shaping needs the fit-set clip value")
        return np.minimum(z, clip)
    if mode not in ("ash_p", "ash_b", "ash_s"):
        raise ValueError(f"unknown shaping mode {mode!r}")
    if mode == "ash_s":
        kept = z >= np.percentile(z, percentile)
        if np.where(kept, z, 0.0).sum() == 0:
            raise ValueError("ash_s undefined: activations sum to zero after pruning")
    return _ash_batch(z[None], mode, percentile)[0]


def gradnorm_scores(logits, head_input, temperature: float) -> np.ndarray:
    """L1 norm of the last-layer KL gradient; it factorises over the outer product."""
    logits = np.atleast_2d(np.asarray(logits, np.float64))
    c = logits.shape[1]
    u = np.abs(T.softmax(logits / temperature) - 1.0 / c).sum(axis=1) / temperature
    z1 = np.abs(np.asarray(head_input, np.float64)).sum(axis=1) + 1.0
    return u * z1


def gradnorm_score(net: nn.Network, trace: nn.ForwardTrace, temperature: float) -> float:
    return float(np.abs(nn.grad_last_layer(net, trace.input, temperature)).sum())


def odin_inputs(net: nn.Network, xs: np.ndarray, temperature: float, epsilon: float) -> np.ndarray:
    if epsilon == 0:
        return np.clip(xs, 0.0, 1.0)
    g = nn.grad_input_batch(net, xs, nn.NegLogMsp(temperature))
    return np.clip(xs.astype(np.float64) - epsilon * np.sign(g).astype(np.float64), 0.0, 1.0).astype(np.float32)


def odin_score(net: nn.Network, x: np.ndarray, temperature: float, epsilon: float) -> float:
    xt = odin_inputs(net, np.asarray(x)[None], temperature, epsilon)
    logits = nn.forward_batch(net, xt).logits
    return float(T.softmax(np.asarray(logits, np.float64) / temperature).max(axis=1)[0])


def vim_fit_alpha(train_logits, residual_norms) -> float:
    """Scale matching the virtual logit to the mean maximum logit on fit data."""
    r = float(np.mean(residual_norms))
    if r == 0:
        raise MonitorError("VIM residuals are all zero; the principal subspace spans the features")
    return float(np.mean(np.max(np.asarray(train_logits, np.float64), axis=1))) / r


def _kth_nearest_distance(q: np.ndarray, bank: np.ndarray, k: int, chunk: int = 256) -> np.ndarray:
    out = np.empty(len(q))
    for s in range(0, len(q), chunk):
        diff = q[s:s + chunk, None, :] - bank[None, :, :]
        d = np.sqrt((diff * diff).sum(axis=2))
        out[s:s + chunk] = np.partition(d, k - 1, axis=1)[:, k - 1]
    return out


def score_batch(mon: FittedMonitor, tr: nn.BatchTrace) -> np.ndarray:
    """Scores of every input in ``tr`` (float64, higher = more ID-like)."""
    kind, p, s, net = mon.kind, mon.params, mon.state, mon.net
    logits = np.asarray(tr.logits, dtype=np.float64)
    if kind == "Box":
        raise MonitorError("the Box monitor has no score; use verdicts")
    if kind == "Softmax":
        return T.softmax(logits).max(axis=1)
    if kind == "Temperature":
        return T.softmax(logits / p["temperature"]).max(axis=1)
    if kind == "MaxLogit":
        return logits.max(axis=1)
    if kind == "Energy":
        return _energy(logits, p["temperature"])
    if kind == "Entropy":
        q = T.softmax(logits)
        return (q * np.log(np.maximum(q, 1e-300))).sum(axis=1)
    if kind == "ODIN":
        xt = odin_inputs(net, tr.inputs, p["temperature"], p["epsilon"])
        lg = np.asarray(nn.forward_batch(net, xt).logits, np.float64)
        return T.softmax(lg / p["temperature"]).max(axis=1)
    if kind in ("ReAct", "ASH-P", "ASH-B", "ASH-S", "DICE"):
        z = np.asarray(tr.head_input, dtype=np.float64)
        w = np.asarray(net.head.w, np.float64)
        b = np.asarray(net.head.b, np.float64)
        if kind == "ReAct":
            z = np.minimum(z, float(s["clip"]))
        elif kind == "DICE":
            w = w * s["mask"]
        else:
            z = _ash_batch(z, {"ASH-P": "ash_p", "ASH-B": "ash_b", "ASH-S": "ash_s"}[kind], p["percentile"])
        return _energy(z @ w.T + b)
    if kind == "GradNorm":
        return gradnorm_scores(logits, tr.head_input, p["temperature"])
    z = np.asarray(tr.penultimate, dtype=np.float64)
    if kind == "KNN":
        return -_kth_nearest_distance(_unit(z), s["bank"], p["k"])
    if kind == "MDS":
        return -_min_sq_mahalanobis(z, s["means"], s["lower"])
    if kind == "Mahalanobis":
        m0 = T.whitened_sq_norm(T.SpdFactor(s["global_lower"]), z - s["global_mean"])
        return -(_min_sq_mahalanobis(z, s["means"], s["lower"]) - m0)
    if kind == "Gaussian":
        c = tr.predicted
        dev = np.abs(z - s["means"][c]) / (s["stds"][c] + 1e-6)
        return -dev.max(axis=1)
    if kind == "SHE":
        return (z * s["patterns"][tr.predicted]).sum(axis=1)
    if kind == "KLMatching":
        q = T.softmax(logits)
        lq = np.log(np.maximum(q, 1e-12))
        kl = np.stack([(q * (lq - np.log(np.maximum(d, 1e-12)))).sum(axis=1) for d in s["templates"]], axis=1)
        return -kl.min(axis=1)
    if kind == "VIM":
        return _energy(logits) - float(s["alpha"]) * _residual(z, s["mean"], s["basis"])
    raise MonitorError(f"no scorer for {kind!r}")


def score(mon: FittedMonitor, trace: nn.ForwardTrace) -> float:
    return float(score_batch(mon, _as_batch(trace))[0])


def _as_batch(trace: nn.ForwardTrace) -> nn.BatchTrace:
    return nn.BatchTrace(trace.input[None], np.asarray(trace.logits)[None], np.asarray(trace.penultimate)[None],
                         {k: v[None] for k, v in trace.activations.items()}, np.asarray(trace.head_input)[None])


def box_inside(mon: FittedMonitor, tr: nn.BatchTrace, gamma: float | None = None) -> np.ndarray:
    """Whether each feature lies in a γ-enlarged box of its predicted class."""
    s = mon.state
    gamma = mon.params["gamma"] if gamma is None else gamma
    # enlarging about the centre by (1+γ) == widening each side by γ·half_width
    grow = gamma * (s["hi"] - s["lo"]) / 2.0
    lo, hi = s["lo"] - grow, s["hi"] + grow
    z = np.asarray(tr.penultimate, dtype=np.float64)
    pred = tr.predicted
    out = np.zeros(len(z), dtype=bool)
    for j, c in enumerate(s["owner"]):
        rows = pred == c
        if rows.any():
            out[rows] |= np.all((z[rows] >= lo[j]) & (z[rows] <= hi[j]), axis=1)
    return out


def is_id_batch(mon: FittedMonitor, tr: nn.BatchTrace, scores: np.ndarray | None = None) -> np.ndarray:
    if mon.kind == "Box":
        return box_inside(mon, tr)
    if mon.tau is None:
        raise MonitorError(f"{mon.kind} threshold is not set; call fit_threshold first")
    scores = score_batch(mon, tr) if scores is None else scores
    return scores >= mon.tau


def verdict(mon: FittedMonitor, trace: nn.ForwardTrace) -> Verdict:
    return Verdict.ID if is_id_batch(mon, _as_batch(trace))[0] else Verdict.OOD


def fit_threshold(id_scores, target_id_accuracy: float) -> float:
    """Largest sample threshold whose ID coverage ``mean(scores >= tau)`` meets the target."""
    s = np.asarray(id_scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("no ID scores to calibrate on")
    if not 0.0 < target_id_accuracy <= 1.0:
        raise ValueError(f"target accuracy must be in (0, 1], got {target_id_accuracy}")
    n = s.size
    k = min(max(int(math.ceil(target_id_accuracy * n)), 1), n)
    while k > 1 and (k - 1) / n >= target_id_accuracy:
        k -= 1
    while k < n and k / n < target_id_accuracy:
        k += 1
    return float(np.sort(s)[::-1][k - 1])


# ---------------------------------------------------------------- serialization

def monitor_to_dict(mon: FittedMonitor) -> dict:
    directory, blobs, offset = {}, [], 0
    for name in sorted(mon.state):
        arr = np.asarray(mon.state[name])
        dtype = "i64" if arr.dtype.kind in "iu" else "f64"
        raw = arr.astype("<i8" if dtype == "i64" else "<f8").tobytes()
        directory[name] = {"shape": list(arr.shape), "dtype": dtype, "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    return {"format": MONITOR_FORMAT, "kind": mon.kind, "params": mon.params, "tau": mon.tau,
            "shapes": directory, "state_blob": base64.b64encode(b"".join(blobs)).decode("ascii")}


def monitor_from_dict(d: dict, net: nn.Network) -> FittedMonitor:
    if d.get("format") != MONITOR_FORMAT:
        raise MonitorError(f"unsupported monitor format {d.get('format')!r}")
    blob = base64.b64decode(d["state_blob"])
    state = {}
    for name, info in d["shapes"].items():
        dt = "<i8" if info["dtype"] == "i64" else "<f8"
        chunk = blob[info["offset"]:info["offset"] + info["nbytes"]]
        state[name] = np.frombuffer(chunk, dtype=dt).reshape(info["shape"]).copy()
    template = get_template(d["kind"])
    params = template.param_space(net).resolve(d["params"])
    return FittedMonitor(d["kind"], params, state, net, d["tau"])


def save_monitor(mon: FittedMonitor, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(monitor_to_dict(mon), fh, indent=1, sort_keys=True)


def load_monitor(path, net: nn.Network) -> FittedMonitor:
    with open(path, encoding="utf-8") as fh:
        return monitor_from_dict(json.load(fh), net)
