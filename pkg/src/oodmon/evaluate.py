"""Test-split metrics and report artifacts (CSV, JSON, SVG)."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import monitors as M
from . import nn
from .data import LabeledDataset, OodClassId, OodSuite, SplitDataset, taxonomy_key
from .optimize import pareto_front

REPORT_FORMAT = "oodmon-report/1"
Z95 = 1.96
NEW_WORLD_NOTE = ("NewWorld cells include samples the network may classify plausibly; "
                  "no exclusion rule is applied.")


# ---------------------------------------------------------------- metrics

def accuracy_from_verdicts(is_id: np.ndarray, is_ood: bool) -> float:
    is_id = np.asarray(is_id, dtype=bool)
    if is_id.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(~is_id if is_ood else is_id))


def accuracy(mon: M.FittedMonitor, ds: LabeledDataset | nn.BatchTrace, is_ood: bool) -> float:
    """TPR on an OOD set (fraction flagged OOD) or TNR on an ID set (fraction kept as ID)."""
    if len(ds) == 0:
        raise ValueError("accuracy of an empty set")
    tr = ds if isinstance(ds, nn.BatchTrace) else nn.forward_batch(mon.net, ds.images)
    return accuracy_from_verdicts(M.is_id_batch(mon, tr), is_ood)


def auroc(id_scores, ood_scores) -> float:
    """P(ID score > OOD score) with ties counted one half, via midranks."""
    a = np.asarray(id_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("AUROC needs non-empty ID and OOD scores")
    ranks = rankdata(np.concatenate([a, b]), method="average")
    u = ranks[:a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def proportion_ci(p_hat: float, n: int, z: float = 1.96) -> tuple:
    """Normal-approximation interval ``p ± z·sqrt(p(1-p)/n)`` clamped to [0, 1]."""
    if n <= 0:
        raise ValueError("n must be positive")
    half = z * math.sqrt(max(p_hat * (1.0 - p_hat), 0.0) / n)
    return max(0.0, p_hat - half), min(1.0, p_hat + half)


def hanley_mcneil_se(auc: float, n_id: int, n_ood: int) -> float:
    # ID samples play the role of the higher-scoring (positive) group
    q1 = auc / (2.0 - auc)
    q2 = 2.0 * auc * auc / (1.0 + auc)
    var = (auc * (1.0 - auc) + (n_id - 1) * (q1 - auc * auc) + (n_ood - 1) * (q2 - auc * auc)) / (n_id * n_ood)
    return math.sqrt(max(var, 0.0))


def auroc_ci(auc: float, n_id: int, n_ood: int, z: float = 1.96) -> tuple:
    if n_id <= 0 or n_ood <= 0:
        raise ValueError("sample sizes must be positive")
    se = hanley_mcneil_se(auc, n_id, n_ood)
    return max(0.0, auc - z * se), min(1.0, auc + z * se)


# ---------------------------------------------------------------- reports

@dataclass
class ClassResult:
    accuracy: float | None
    accuracy_ci: tuple | None
    auroc: float | None
    auroc_ci: tuple | None
    n: int


@dataclass
class EvalReport:
    monitor: str
    params: dict
    tau: float | None
    id_accuracy: float | None
    id_accuracy_ci: tuple | None
    n_id: int
    per_class: dict = field(default_factory=dict)  # OodClassId -> ClassResult
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"monitor": self.monitor, "params": self.params, "tau": self.tau, "id_accuracy": self.id_accuracy,
                "id_accuracy_ci": _lst(self.id_accuracy_ci), "n_id": self.n_id, "notes": list(self.notes),
                "per_class": {str(c): {"accuracy": r.accuracy, "accuracy_ci": _lst(r.accuracy_ci),
                                       "auroc": r.auroc, "auroc_ci": _lst(r.auroc_ci), "n": r.n}
                              for c, r in sorted(self.per_class.items(), key=lambda kv: taxonomy_key(kv[0]))}}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        per = {OodClassId.parse(k): ClassResult(v["accuracy"], _tup(v["accuracy_ci"]), v["auroc"],
                                                _tup(v["auroc_ci"]), v["n"]) for k, v in d["per_class"].items()}
        return cls(d["monitor"], d["params"], d["tau"], d["id_accuracy"], _tup(d["id_accuracy_ci"]), d["n_id"],
                   per, list(d.get("notes", [])))


def _lst(t):
    return None if t is None else [float(v) for v in t]


def _tup(v):
    return None if v is None else tuple(v)


def evaluate_monitor(mon: M.FittedMonitor, split: SplitDataset, suite: OodSuite, classes=None,
                     with_auroc: bool = True, id_trace: nn.BatchTrace | None = None,
                     ood_traces: dict | None = None) -> EvalReport:
    """Every number comes from ``split.test`` and the suite's test portions."""
    classes = suite.classes() if classes is None else classes
    id_trace = nn.forward_batch(mon.net, split.test.images) if id_trace is None else id_trace
    n_id = len(id_trace)
    scorable = mon.kind != "Box"
    calibrated = mon.kind == "Box" or mon.tau is not None
    id_scores = M.score_batch(mon, id_trace) if scorable else None
    id_acc = id_ci = None
    if calibrated:
        id_acc = accuracy_from_verdicts(M.is_id_batch(mon, id_trace, id_scores), is_ood=False)
        id_ci = proportion_ci(id_acc, n_id, Z95)
    report = EvalReport(mon.kind, dict(mon.params), mon.tau, id_acc, id_ci, n_id)
    for cls in classes:
        tr = (ood_traces or {}).get(cls)
        if tr is None:
            tr = nn.forward_batch(mon.net, suite.test(cls).images)
        n = len(tr)
        s = M.score_batch(mon, tr) if scorable else None
        acc = acc_ci = auc = auc_ci = None
        if calibrated:
            acc = accuracy_from_verdicts(M.is_id_batch(mon, tr, s), is_ood=True)
            acc_ci = proportion_ci(acc, n, Z95)
        if scorable and with_auroc:
            auc = auroc(id_scores, s)
            auc_ci = auroc_ci(auc, n_id, n, Z95)
        report.per_class[cls] = ClassResult(acc, acc_ci, auc, auc_ci, n)
    if any(c.family == "NewWorld" for c in classes):
        report.notes.append(NEW_WORLD_NOTE)
    return report


# ---------------------------------------------------------------- rank table

@dataclass(frozen=True)
class RankTable:
    rows: list
    columns: list
    scores: np.ndarray  # rows × columns, NaN = not available
    ranks: np.ndarray  # 0 where the score is NaN


def rank_row(values) -> np.ndarray:
    """Three equal-width bands over [min, max]; boundary values take the better rank."""
    v = np.asarray(values, dtype=np.float64)
    ranks = np.zeros(v.shape, dtype=int)
    ok = ~np.isnan(v)
    if not ok.any():
        return ranks
    lo, hi = v[ok].min(), v[ok].max()
    if hi == lo:
        ranks[ok] = 1
        return ranks
    width = (hi - lo) / 3.0
    eps = 1e-12 * max(abs(lo), abs(hi), 1.0)
    top, mid = lo + 2 * width - eps, lo + width - eps
    ranks[ok] = np.where(v[ok] >= top, 1, np.where(v[ok] >= mid, 2, 3))
    return ranks


def rank_table(scores, rows=None, columns=None) -> RankTable:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError("rank_table expects a rows × columns matrix")
    rows = list(range(s.shape[0])) if rows is None else list(rows)
    columns = list(range(s.shape[1])) if columns is None else list(columns)
    ranks = np.stack([rank_row(r) for r in s]) if s.size else np.zeros(s.shape, dtype=int)
    return RankTable(rows, columns, s, ranks)


def auroc_rank_table(reports: list) -> RankTable:
    reports = sorted(reports, key=lambda r: r.monitor)
    classes = _classes(reports)
    scores = np.array([[_auc(r, c) for r in reports] for c in classes], dtype=np.float64).reshape(
        len(classes), len(reports))
    return rank_table(scores, classes, [r.monitor for r in reports])


def _classes(reports) -> list:
    seen = {c for r in reports for c in r.per_class}
    return sorted(seen, key=taxonomy_key)


def _auc(r: EvalReport, c) -> float:
    cell = r.per_class.get(c)
    return float("nan") if cell is None or cell.auroc is None else cell.auroc


# ---------------------------------------------------------------- emitters

def _fmt(v) -> str:
    return "n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.4f}"


def _csv(rows: list) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue().encode("utf-8")


def auroc_csv(reports: list) -> bytes:
    reports = sorted(reports, key=lambda r: r.monitor)
    rows = [["ood_class"] + [r.monitor for r in reports]]
    for c in _classes(reports):
        rows.append([str(c)] + [_fmt(r.per_class[c].auroc) if c in r.per_class else "n/a" for r in reports])
    return _csv(rows)


def accuracy_csv(reports: list) -> bytes:
    reports = sorted(reports, key=lambda r: r.monitor)
    rows = [["ood_class"] + [r.monitor for r in reports]]
    if reports:
        rows.append(["ID"] + [_fmt(r.id_accuracy) for r in reports])
    for c in _classes(reports):
        rows.append([str(c)] + [_fmt(r.per_class[c].accuracy) if c in r.per_class else "n/a" for r in reports])
    return _csv(rows)


def rank_csv(table: RankTable) -> bytes:
    rows = [["ood_class"] + [str(c) for c in table.columns]]
    for i, r in enumerate(table.rows):
        rows.append([str(r)] + [str(int(k)) if k else "n/a" for k in table.ranks[i]])
    return _csv(rows)


def pareto_csv(points: list, targets: list) -> bytes:
    rows = [[f"w:{t}" for t in targets] + [f"acc:{t}" for t in targets] + ["id_accuracy", "on_front"]]
    front = {id(p) for p in pareto_front(points)}
    for p in points:
        rows.append([f"{w:.4f}" for w in p.weights] + [f"{a:.4f}" for a in p.accuracies]
                    + [_fmt(p.id_accuracy), "1" if id(p) in front else "0"])
    return _csv(rows)


def report_json(reports: list, extra: dict | None = None) -> bytes:
    doc = {"format": REPORT_FORMAT, "reports": [r.to_dict() for r in sorted(reports, key=lambda r: r.monitor)]}
    if extra:
        doc.update(extra)
    return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8")


def load_report_json(raw: bytes | str) -> list:
    doc = json.loads(raw)
    if doc.get("format") != REPORT_FORMAT:
        raise ValueError(f"unsupported report format {doc.get('format')!r}")
    return [EvalReport.from_dict(d) for d in doc["reports"]]


_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
            "#bcbd22", "#17becf")


def _svg(width, height, body: list) -> bytes:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">')
    return ("\n".join([head, f'<rect width="{width}" height="{height}" fill="white"/>'] + body + ["</svg>"])
            + "\n").encode("utf-8")


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def parallel_coordinates_svg(reports: list, metric: str = "accuracy") -> bytes:
    """One polyline per monitor, one axis per OOD class (plus an ID axis for accuracy)."""
    reports = sorted(reports, key=lambda r: r.monitor)
    classes = _classes(reports)
    with_id = metric == "accuracy"
    axes = (["ID"] if with_id else []) + [str(c) for c in classes]
    left, top, step, h = 60, 30, 110, 240
    width = left * 2 + step * max(len(axes) - 1, 1)
    body = []
    for i, name in enumerate(axes):
        x = left + i * step
        body.append(f'<line x1="{x}" y1="{top}" x2="{x}" y2="{top + h}" stroke="#999"/>')
        body.append(f'<text x="{x}" y="{top + h + 14}" text-anchor="middle">{_esc(name)}</text>')
    for j, r in enumerate(reports):
        vals = ([r.id_accuracy] if with_id else []) + [getattr(r.per_class[c], metric) if c in r.per_class else None for c in classes]
        pts = [f"{left + i * step:.2f},{top + h * (1.0 - v):.2f}" for i, v in enumerate(vals) if v is not None]
        color = _PALETTE[j % len(_PALETTE)]
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(pts)}">'
                    f'<title>{_esc(r.monitor)}</title></polyline>')
        body.append(f'<text x="{width - left + 5}" y="{top + 12 * j}" fill="{color}">{_esc(r.monitor)}</text>')
    return _svg(width + 60, top + h + 40, body)


def pareto_svg(points: list, labels=("objective 1", "objective 2")) -> bytes:
    """Scatter of the first two accuracy coordinates; front members are filled."""
    front = {id(p) for p in pareto_front(points)}
    size, pad = 300, 40
    body = [f'<line x1="{pad}" y1="{pad + size}" x2="{pad + size}" y2="{pad + size}" stroke="#333"/>',
            f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{pad + size}" stroke="#333"/>',
            f'<text x="{pad + size / 2}" y="{pad + size + 28}" text-anchor="middle">{_esc(str(labels[0]))}</text>',
            f'<text x="12" y="{pad + size / 2}" transform="rotate(-90 12 {pad + size / 2})" '
            f'text-anchor="middle">{_esc(str(labels[1]))}</text>']
    for p in points:
        x = pad + size * p.accuracies[0]
        y = pad + size * (1.0 - (p.accuracies[1] if len(p.accuracies) > 1 else 0.0))
        fill = "#d62728" if id(p) in front else "none"
        body.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" stroke="#d62728" fill="{fill}"/>')
    return _svg(size + 2 * pad, size + 2 * pad, body)


def emit_report(obj, fmt: str, **kw) -> bytes:
    """Serialize a list of reports, a ``RankTable``, or a list of Pareto points."""
    if fmt not in ("csv", "json", "svg"):
        raise ValueError(f"unknown report format {fmt!r}; expected csv, json, or svg")
    if isinstance(obj, RankTable):
        if fmt == "csv":
            return rank_csv(obj)
        if fmt == "json":
            return (json.dumps({"format": REPORT_FORMAT, "rows": [str(r) for r in obj.rows],
                                "columns": [str(c) for c in obj.columns], "ranks": obj.ranks.tolist()},
                               indent=2) + "\n").encode("utf-8")
        raise ValueError("rank tables have no SVG rendering")
    items = list(obj)
    if items and not isinstance(items[0], EvalReport):
        targets = kw.get("targets") or [f"objective {i + 1}" for i in range(len(items[0].accuracies))]
        if fmt == "csv":
            return pareto_csv(items, targets)
        if fmt == "svg":
            return pareto_svg(items, targets)
        return (json.dumps([{"weights": list(p.weights), "accuracies": list(p.accuracies),
                             "id_accuracy": p.id_accuracy} for p in items], indent=2) + "\n").encode("utf-8")
    if fmt == "csv":
        return (auroc_csv if kw.get("metric") == "auroc" else accuracy_csv)(items)
    if fmt == "json":
        return report_json(items)
    return parallel_coordinates_svg(items, kw.get("metric", "accuracy"))
