# The command-line pipeline, driven from Python.
#
# `oodmon fixtures` writes a network, two datasets, and a config; `evaluate`
# scores every monitor at default parameters; `optimize` tunes them for the
# configured objective. Files land in the directory given by --out.
import csv
import io
import json
import sys
import tempfile
from pathlib import Path

from oodmon import cli

work = Path(tempfile.mkdtemp(prefix="oodmon-demo-"))
cli.main(["fixtures", "--out", str(work)])
print((work / "config.toml").read_text())

if cli.main(["evaluate", "--config", str(work / "config.toml"), "--out", str(work / "eval")]) != 0:
    sys.exit("evaluate failed")
rows = list(csv.reader(io.StringIO((work / "eval" / "auroc.csv").read_text())))
far = next(r for r in rows if r[0] == "NewWorld/FarCluster")
print("far-cluster AUROC at default parameters:")
for name, v in zip(rows[0][1:], far[1:]):
    print(f"  {name:12s} {v}")

cli.main(["optimize", "--config", str(work / "config.toml"), "--out", str(work / "opt")])
doc = json.loads((work / "opt" / "report.json").read_text())
print(f"\nbest monitor by objective: {doc['best_monitor']}")
print("written:", ", ".join(sorted(p.name for p in (work / "opt").iterdir())))
