"""Run configuration: a TOML file, validated all at once.

Grammar (paths are relative to the config file)::

    seed = 0
    out = "out"
    network = "net.json"

    [id]
    path = "id.mnzd"            # or: synth = {classes = 3, per_class = 200, image = [1, 8, 8]}
    split = [0.6, 0.2, 0.2]

    [intensities]               # optional overrides, keyed by variant
    Rotate = 30.0

    [[collected]]               # zero or more user-supplied OOD sets
    path = "far.mnzd"
    class = "NewWorld/FarCluster"

    [monitors]
    select = "all"              # or a list of monitor kinds
    target_id_accuracy = 0.7    # threshold calibration when not optimizing

    [optimize]
    method = "random"           # random | grid | gradient | none
    targets = ["NewWorld/FarCluster"]
    weights = [1.0]
    min_id_accuracy = 0.7
    trials = 100                # random
    splits = 50                 # grid
    steps = 50                  # gradient (also lr, fd_step, beta)
    combos = 0                  # > 0 runs a weight sweep over the targets
"""
from __future__ import annotations

import difflib
import re
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from . import monitors as M
from .data import DEFAULT_INTENSITIES, FAMILIES, GENERATED_CLASSES, OodClassId


@dataclass(frozen=True)
class Diagnostic:
    key: str
    message: str
    file: str = ""
    line: int | None = None

    def __str__(self) -> str:
        where = f"{self.file}:{self.line}" if self.line else self.file
        return f"{where}: [{self.key}] {self.message}" if where else f"[{self.key}] {self.message}"


class ConfigError(Exception):
    def __init__(self, diagnostics: list):
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(str(d) for d in self.diagnostics))


@dataclass
class OptimizeConfig:
    method: str = "none"
    targets: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    min_id_accuracy: float = 0.7
    trials: int = 100
    splits: int = 50
    steps: int = 50
    lr: float = 0.2
    fd_step: float = 0.05
    beta: float = 10.0
    combos: int = 0


@dataclass
class RunConfig:
    source: str
    network: Path | None
    id_path: Path | None
    id_synth: dict | None
    split: tuple
    collected: list  # [(Path, OodClassId)]
    intensities: dict
    monitors: list
    target_id_accuracy: float
    optimize: OptimizeConfig
    out: Path
    seed: int = 0
    jobs: int = 1


def _line_of(text: str, key: str) -> int | None:
    """1-based line where ``key`` (dotted, last part matched) is assigned."""
    parts = key.split(".")
    section, leaf = parts[:-1], parts[-1]
    in_section = not section
    for i, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if stripped.startswith("["):
            name = stripped.strip("[]").strip()
            in_section = bool(section) and name == section[0]
            if in_section and leaf == section[0] and len(parts) == 1:
                return i
            continue
        if in_section and re.match(rf"{re.escape(leaf)}\s*=", stripped):
            return i
    if section:
        for i, line in enumerate(text.splitlines(), 1):
            if line.strip().strip("[]").strip() == section[0]:
                return i
    return None


def suggest_monitor(name: str) -> str:
    close = difflib.get_close_matches(name, M.KINDS, n=1, cutoff=0.5)
    hint = f" (did you mean {close[0]!r}?)" if close else ""
    return f"unknown monitor {name!r}{hint}; known monitors: {', '.join(M.KINDS)}"


def parse_config(path, seed: int | None = None, out: str | None = None, jobs: int = 1) -> RunConfig:
    """Read and validate ``path``; raises ``ConfigError`` listing every problem found."""
    path = Path(path)
    diags = []
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([Diagnostic("config", f"cannot read config: {exc}", str(path))]) from None
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([Diagnostic("config", f"malformed TOML: {exc}", str(path))]) from None
    base = path.parent

    def bad(key, message):
        diags.append(Diagnostic(key, message, str(path), _line_of(text, key)))

    def existing(key, value) -> Path | None:
        if not isinstance(value, str):
            bad(key, "expected a file path string")
            return None
        p = (base / value).resolve()
        if not p.is_file():
            bad(key, f"file not found: {p}")
            return None
        return p

    network = existing("network", doc["network"]) if "network" in doc else None
    if "network" not in doc:
        bad("network", "missing required key")

    id_section = doc.get("id", {})
    id_path = id_synth = None
    if "path" in id_section:
        id_path = existing("id.path", id_section["path"])
    elif "synth" in id_section:
        id_synth = dict(id_section["synth"])
    else:
        bad("id.path", "missing: give [id] path = ... or [id] synth = {...}")
    split = tuple(id_section.get("split", (0.6, 0.2, 0.2)))
    if len(split) != 3 or any(not isinstance(v, (int, float)) or v < 0 for v in split) or sum(split) <= 0:
        bad("id.split", "expected three non-negative ratios")

    collected = []
    for i, entry in enumerate(doc.get("collected", [])):
        p = existing("collected.path", entry.get("path")) if "path" in entry else None
        if "path" not in entry:
            bad("collected.path", f"entry {i}: missing path")
        try:
            cls = OodClassId.parse(entry.get("class", ""))
            if cls.generated:
                bad("collected.class", f"entry {i}: {cls} is a generated class; collected data must be one of "
                                       f"{', '.join(FAMILIES[3:])}")
        except ValueError as exc:
            bad("collected.class", f"entry {i}: {exc}")
            cls = None
        if p is not None and cls is not None:
            collected.append((p, cls))

    intensities = {}
    for k, v in doc.get("intensities", {}).items():
        if k not in DEFAULT_INTENSITIES:
            bad(f"intensities.{k}", f"unknown generated class; expected one of {', '.join(DEFAULT_INTENSITIES)}")
        elif not isinstance(v, (int, float)):
            bad(f"intensities.{k}", "expected a number")
        else:
            intensities[k] = float(v)

    mon_section = doc.get("monitors", {})
    select = mon_section.get("select", "all")
    if select == "all":
        monitors = list(M.KINDS)
    elif isinstance(select, list):
        monitors = []
        for name in select:
            if name in M.TEMPLATES:
                monitors.append(name)
            else:
                bad("monitors.select", suggest_monitor(str(name)))
    else:
        bad("monitors.select", 'expected "all" or a list of monitor names')
        monitors = []
    target = mon_section.get("target_id_accuracy", 0.7)
    if not isinstance(target, (int, float)) or not 0 < target <= 1:
        bad("monitors.target_id_accuracy", "expected a number in (0, 1]")

    opt = OptimizeConfig()
    osec = doc.get("optimize", {})
    for name in ("method", "min_id_accuracy", "trials", "splits", "steps", "lr", "fd_step", "beta", "combos"):
        if name in osec:
            setattr(opt, name, osec[name])
    if opt.method not in ("none", "random", "grid", "gradient"):
        bad("optimize.method", f"unknown method {opt.method!r}; expected none, random, grid, or gradient")
    if opt.method != "none":
        known = {c for _, c in collected}
        for t in osec.get("targets", []):
            try:
                cls = OodClassId.parse(t)
            except ValueError as exc:
                bad("optimize.targets", str(exc))
                continue
            if not cls.generated and cls not in known:
                bad("optimize.targets", f"{cls} is not in the configured suite")
            elif cls.generated and cls not in GENERATED_CLASSES:
                bad("optimize.targets", f"{cls} is not a generated class")
            else:
                opt.targets.append(cls)
        if not osec.get("targets"):
            bad("optimize.targets", "optimization needs at least one target OOD class")
        opt.weights = list(osec.get("weights", [1.0 / max(len(opt.targets), 1)] * len(opt.targets)))
        if len(opt.weights) != len(osec.get("targets", [])):
            bad("optimize.weights", "one weight per target is required")
        if not 0 < opt.min_id_accuracy <= 1:
            bad("optimize.min_id_accuracy", "expected a number in (0, 1]")

    if diags:
        raise ConfigError(diags)
    return RunConfig(
        source=str(path), network=network, id_path=id_path, id_synth=id_synth,
        split=tuple(float(v) for v in split), collected=collected, intensities=intensities,
        monitors=monitors, target_id_accuracy=float(target), optimize=opt,
        out=Path(out) if out is not None else (base / doc.get("out", "out")),
        seed=int(doc.get("seed", 0) if seed is None else seed), jobs=jobs)
