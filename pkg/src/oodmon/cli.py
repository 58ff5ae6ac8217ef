"""Command line: parse, evaluate, optimize, generate-ood, list, fixtures.

Exit codes: 0 success, 1 validation failure, 2 runtime failure.
Diagnostics go to stderr; results are written to files under ``--out``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data, evaluate as E, monitors as M, nn, optimize as O
from .config import ConfigError, Diagnostic, RunConfig, parse_config
from .fixtures import write_fixture

log = logging.getLogger("oodmon")


@dataclass
class Inputs:
    cfg: RunConfig
    net: nn.Network
    split: data.SplitDataset
    suite: data.OodSuite
    id_data: data.LabeledDataset


def load_inputs(cfg: RunConfig) -> Inputs:
    """Load network and datasets, reporting every mismatch together."""
    diags = []
    net = ds = None
    try:
        net = nn.load_network(cfg.network)
    except (nn.NetworkFormatError, KeyError, TypeError, ValueError) as exc:
        diags.append(Diagnostic("network", str(exc), cfg.source))
    try:
        if cfg.id_path is not None:
            ds = data.load_dataset(cfg.id_path, "id")
        else:
            synth = dict(cfg.id_synth)
            ds = data.synth_blobs(synth.pop("classes", 3), synth.pop("per_class", 200),
                                  tuple(synth.pop("image", (1, 8, 8))), **synth)
    except (data.DatasetFormatError, TypeError, ValueError) as exc:
        diags.append(Diagnostic("id", str(exc), cfg.source))
    collected = {}
    for path, cls in cfg.collected:
        try:
            collected[cls] = data.load_dataset(path, cls.variant)
        except (data.DatasetFormatError, ValueError) as exc:
            diags.append(Diagnostic("collected.path", f"{path}: {exc}", cfg.source))
    if net is not None and ds is not None:
        if ds.image_shape != net.input_shape:
            diags.append(Diagnostic("id", f"images {ds.image_shape} do not match network input {net.input_shape}",
                                    cfg.source))
        if len(ds) and ds.labels.max() >= net.class_count:
            diags.append(Diagnostic("id", f"label {ds.labels.max()} outside the network's {net.class_count} classes",
                                    cfg.source))
    if net is not None:
        for cls, cds in collected.items():
            if cds.image_shape != net.input_shape:
                diags.append(Diagnostic("collected.path", f"{cls}: images {cds.image_shape} do not match network "
                                                          f"input {net.input_shape}", cfg.source))
    if diags:
        raise ConfigError(diags)
    split = data.split_dataset(ds, cfg.split, cfg.seed)
    for name, part in (("fit", split.fit), ("validation", split.validation), ("test", split.test)):
        if len(part) == 0:
            raise ConfigError([Diagnostic("id.split", f"the {name} split is empty", cfg.source)])
    suite = data.build_ood_suite(split, net, collected, cfg.intensities, cfg.seed)
    return Inputs(cfg, net, split, suite, ds)


def _write(path: Path, payload: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, str):
        payload = payload.encode("utf-8")
    path.write_bytes(payload)


def _map(fn, items, jobs: int) -> list:
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _test_traces(inp: Inputs):
    id_trace = nn.forward_batch(inp.net, inp.split.test.images)
    ood = {c: nn.forward_batch(inp.net, inp.suite.test(c).images) for c in inp.suite.classes()}
    return id_trace, ood


def _mean_auroc(r: E.EvalReport) -> float:
    vals = [c.auroc for c in r.per_class.values() if c.auroc is not None]
    return float(np.mean(vals)) if vals else float("nan")


def cmd_parse(cfg: RunConfig) -> Inputs:
    inp = load_inputs(cfg)
    for kind in cfg.monitors:
        M.get_template(kind).param_space(inp.net)
    return inp


def cmd_evaluate(cfg: RunConfig) -> list:
    """Default-parameter evaluation of every selected monitor, AUROC per OOD class."""
    inp = load_inputs(cfg)
    out = cfg.out
    fit_trace = nn.forward_batch(inp.net, inp.split.fit.images)
    val_trace = nn.forward_batch(inp.net, inp.split.validation.images)
    id_trace, ood = _test_traces(inp)

    def one(kind):
        mon = M.fit(kind, None, inp.net, inp.split.fit, trace=fit_trace, seed=cfg.seed)
        if mon.uses_threshold:
            mon = mon.calibrate(M.score_batch(mon, val_trace), cfg.target_id_accuracy)
        return E.evaluate_monitor(mon, inp.split, inp.suite, id_trace=id_trace, ood_traces=ood)

    reports = _map(one, cfg.monitors, cfg.jobs)
    table = E.auroc_rank_table(reports)
    _write(out / "auroc.csv", E.auroc_csv(reports))
    _write(out / "accuracy.csv", E.accuracy_csv(reports))
    _write(out / "ranks.csv", E.rank_csv(table))
    scored = [r for r in reports if not np.isnan(_mean_auroc(r))]
    best = max(scored, key=_mean_auroc).monitor if scored else None
    _write(out / "report.json", E.report_json(reports, {"mode": "evaluate", "best_monitor": best,
                                                        "intensities": _intensities(inp)}))
    _write(out / "parallel_coordinates.svg", E.parallel_coordinates_svg(reports, "auroc"))
    log.info("best monitor by mean AUROC: %s", best)
    return reports


def _intensities(inp: Inputs) -> dict:
    return {str(c): v for c, v in sorted(inp.suite.intensity.items(), key=lambda kv: data.taxonomy_key(kv[0]))}


def cmd_optimize(cfg: RunConfig) -> dict:
    """Search each selected monitor, save the winners, and evaluate them on the test splits."""
    inp = load_inputs(cfg)
    opt = cfg.optimize
    if opt.method == "none":
        raise ConfigError([Diagnostic("optimize.method", "optimize requires a search method", cfg.source)])
    obj = O.Objective(tuple(opt.targets), tuple(opt.weights), opt.min_id_accuracy)
    ctx = O.SearchContext.from_suite(inp.net, inp.split.search_view(), inp.suite, list(obj.targets), cfg.seed)
    kw = {"trials": opt.trials, "splits": opt.splits, "steps": opt.steps, "lr": opt.lr,
          "fd_step": opt.fd_step, "beta": opt.beta}
    id_trace, ood = _test_traces(inp)
    out = cfg.out
    summary = {}

    def method_for(kind):
        # gradient descent needs a continuous parameter; others fall back to grid search
        space = M.get_template(kind).param_space(inp.net)
        if opt.method == "gradient" and not any(p.continuous for p in space.params):
            return "grid"
        return opt.method

    def one(kind):
        result = O.run_method(method_for(kind), kind, ctx, obj, seed=cfg.seed, **kw)
        best = result.best
        mon = ctx.build_monitor(kind, best.params, obj.min_id_accuracy)
        report = E.evaluate_monitor(mon, inp.split, inp.suite, id_trace=id_trace, ood_traces=ood)
        sweep = None
        if opt.combos and len(obj.targets) >= 2:
            sweep = O.multi_objective_sweep(kind, ctx, obj, opt.combos, method_for(kind), cfg.seed, **kw)
        return kind, result, mon, report, sweep

    results = _map(one, cfg.monitors, cfg.jobs)
    reports = []
    for kind, result, mon, report, sweep in results:
        M.save_monitor(mon, _ensure(out / "monitors") / f"{kind}.json")
        _write(out / "logs" / f"{kind}.jsonl", result.jsonl())
        reports.append(report)
        summary[kind] = {"params": result.best.params, "objective": result.best.objective_value,
                         "validation_id_accuracy": result.best.id_accuracy, "feasible": result.best.feasible,
                         "evaluations": len(result.log)}
        if sweep is not None:
            points = [p for p, _ in sweep]
            names = [str(t) for t in obj.targets]
            _write(out / "pareto" / f"{kind}.csv", E.pareto_csv(points, names))
            if len(obj.targets) == 2:
                _write(out / "pareto" / f"{kind}.svg", E.pareto_svg(points, names))
    feasible = {k: v for k, v in summary.items() if v["feasible"]}
    best = max(feasible, key=lambda k: (feasible[k]["objective"], -cfg.monitors.index(k))) if feasible else None
    _write(out / "accuracy.csv", E.accuracy_csv(reports))
    _write(out / "auroc.csv", E.auroc_csv(reports))
    _write(out / "parallel_coordinates.svg", E.parallel_coordinates_svg(reports))
    _write(out / "report.json", E.report_json(reports, {
        "mode": "optimize", "method": opt.method, "objective": {
            "targets": [str(t) for t in obj.targets], "weights": list(obj.weights),
            "min_id_accuracy": obj.min_id_accuracy},
        "best_monitor": best, "search": summary, "intensities": _intensities(inp)}))
    log.info("best monitor by objective: %s", best)
    return {"best_monitor": best, "search": summary, "reports": reports}


def _ensure(p: Path) -> Path:
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_generate_ood(cfg: RunConfig) -> dict:
    """Write every generated OOD class (built from the whole ID set) plus a manifest."""
    inp = load_inputs(cfg)
    full = inp.id_data
    manifest = {"format": "oodmon-ood-manifest/1", "seed": cfg.seed, "classes": {}}
    for i, cls in enumerate(data.GENERATED_CLASSES):
        amount = inp.suite.intensity[cls]
        seed = cfg.seed * 1000 + 700 + i
        name = f"{cls.family}_{cls.variant}.mnzd"
        _write(cfg.out / name, data.dataset_bytes(data.generate(cls, full, inp.net, amount, seed)))
        manifest["classes"][str(cls)] = {"file": name, "intensity": amount, "seed": seed, "n": len(full)}
    _write(cfg.out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def list_payload() -> dict:
    kinds = {}
    for kind in M.KINDS:
        t = M.TEMPLATES[kind]
        kinds[kind] = {"threshold": t.uses_threshold, "params": [
            {"name": p.name, "type": p.kind, "lo": p.lo, "hi": p.hi, "default": p.default, "choices": list(p.choices)}
            for p in t.param_space().params]}
    return {"monitors": kinds,
            "ood_classes": [str(c) for c in data.GENERATED_CLASSES] + [f"{f}/<user>" for f in data.FAMILIES[3:]],
            "formats": {"network": nn.FORMAT, "dataset": "MNZD v1", "monitor": M.MONITOR_FORMAT,
                        "report": E.REPORT_FORMAT}}


def cmd_list(as_json: bool = False) -> str:
    payload = list_payload()
    if as_json:
        return json.dumps(payload, indent=2)
    lines = ["monitors:"]
    for kind, info in payload["monitors"].items():
        params = ", ".join(f"{p['name']}∈[{p['lo']:g},{p['hi']:g}]" if p["type"] != "choice" else p["name"]
                           for p in info["params"])
        note = "" if info["threshold"] else "  (verdict only, no AUROC)"
        lines.append(f"  {kind:12s} {params or '-'}{note}")
    lines.append("ood classes:")
    lines += [f"  {c}" for c in payload["ood_classes"]]
    lines.append("formats:")
    lines += [f"  {k}: {v}" for k, v in payload["formats"].items()]
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration (TOML)")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--out", default=None, help="output directory (overrides the config)")
    common.add_argument("--jobs", type=int, default=1, help="monitors processed concurrently")
    common.add_argument("--json", action="store_true", help="machine-readable stdout")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="oodmon", description="Build, tune, and evaluate OOD monitors.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("parse", "validate the configuration and inputs"),
                       ("evaluate", "AUROC of every selected monitor at default parameters"),
                       ("optimize", "tune monitors for the configured objective"),
                       ("generate-ood", "write the generated OOD classes as dataset files"),
                       ("list", "show monitors, OOD classes, and file formats"),
                       ("fixtures", "write a desk-scale network, datasets, and config")):
        sub.add_parser(name, parents=[common], help=text)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "list":
            print(cmd_list(args.json))
            return 0
        if args.command == "fixtures":
            cfg = write_fixture(args.out or "fixture", args.seed or 0)
            print(json.dumps({"config": str(cfg)}) if args.json else cfg)
            return 0
        if args.config is None:
            raise ConfigError([Diagnostic("--config", "this command needs --config PATH")])
        cfg = parse_config(args.config, args.seed, args.out, args.jobs)
        if args.command == "parse":
            inp = cmd_parse(cfg)
            msg = {"ok": True, "monitors": cfg.monitors, "classes": [str(c) for c in inp.suite.classes()]}
            print(json.dumps(msg) if args.json else f"ok: {len(cfg.monitors)} monitors, "
                                                    f"{len(inp.suite.classes())} OOD classes")
        elif args.command == "evaluate":
            cmd_evaluate(cfg)
            print(json.dumps({"out": str(cfg.out)}) if args.json else cfg.out)
        elif args.command == "optimize":
            res = cmd_optimize(cfg)
            print(json.dumps({"out": str(cfg.out), "best_monitor": res["best_monitor"]}) if args.json
                  else f"{cfg.out} (best monitor: {res['best_monitor']})")
        elif args.command == "generate-ood":
            cmd_generate_ood(cfg)
            print(json.dumps({"out": str(cfg.out)}) if args.json else cfg.out)
        return 0
    except ConfigError as exc:
        for d in exc.diagnostics:
            print(str(d), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - map every runtime failure to exit code 2
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
