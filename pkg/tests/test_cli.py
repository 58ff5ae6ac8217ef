import csv
import io
import json
import shutil

import pytest

from oodmon import cli, data
from oodmon import monitors as M


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("fx")
    cli.main(["fixtures", "--out", str(d)])
    return d


def with_config(fixture_dir, tmp_path, text):
    for name in ("net.json", "id.mnzd", "far.mnzd"):
        shutil.copy(fixture_dir / name, tmp_path / name)
    (tmp_path / "config.toml").write_text(text)
    return tmp_path / "config.toml"


def base_config(fixture_dir):
    return (fixture_dir / "config.toml").read_text()


def read_csv(path):
    return list(csv.reader(io.StringIO(path.read_text())))


def test_parse_valid(fixture_dir, capsys):
    assert cli.main(["parse", "--config", str(fixture_dir / "config.toml")]) == 0
    captured = capsys.readouterr()
    assert "ok" in captured.out and captured.err == ""


def test_parse_reports_all_problems(fixture_dir, tmp_path, capsys):
    text = base_config(fixture_dir).replace('path = "id.mnzd"', 'path = "missing.mnzd"')
    text = text.replace('select = "all"', 'select = ["Energy", "Mahalanobs"]')
    cfg = with_config(fixture_dir, tmp_path, text)
    assert cli.main(["parse", "--config", str(cfg)]) == 1
    err = capsys.readouterr().err
    assert "[id.path]" in err and "missing.mnzd" in err and "config.toml:" in err
    assert "did you mean 'Mahalanobis'" in err
    assert all(kind in err for kind in M.KINDS)


def test_shape_mismatch_is_a_validation_failure(fixture_dir, tmp_path, capsys):
    cfg = with_config(fixture_dir, tmp_path, base_config(fixture_dir))
    data.save_dataset(data.synth_blobs(3, 5, (1, 4, 4)), tmp_path / "id.mnzd")
    assert cli.main(["parse", "--config", str(cfg)]) == 1
    assert "do not match network input" in capsys.readouterr().err


def test_runtime_failure_exit_code(fixture_dir, monkeypatch, capsys):
    def fail(cfg):
        raise RuntimeError("disk on fire")
    monkeypatch.setattr(cli, "cmd_evaluate", fail)
    assert cli.main(["evaluate", "--config", str(fixture_dir / "config.toml")]) == 2
    assert "disk on fire" in capsys.readouterr().err


def test_evaluate_all_monitors(fixture_dir, tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    cfg = str(fixture_dir / "config.toml")
    assert cli.main(["evaluate", "--config", cfg, "--out", str(out1)]) == 0
    rows = read_csv(out1 / "auroc.csv")
    assert rows[0][1:] == sorted(M.KINDS) and len(rows[0]) == 21
    box = rows[0].index("Box")
    assert all(r[box] == "n/a" for r in rows[1:])
    assert all(r[i] != "n/a" for r in rows[1:] for i in range(1, 21) if i != box)
    assert (out1 / "ranks.csv").exists()
    summary = json.loads((out1 / "report.json").read_text())
    assert summary["best_monitor"] in M.KINDS
    assert cli.main(["evaluate", "--config", cfg, "--out", str(out2)]) == 0
    for name in ("auroc.csv", "accuracy.csv", "ranks.csv", "report.json", "parallel_coordinates.svg"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_evaluate_single_monitor(fixture_dir, tmp_path):
    cfg = with_config(fixture_dir, tmp_path, base_config(fixture_dir).replace('select = "all"', 'select = ["KNN"]'))
    assert cli.main(["evaluate", "--config", str(cfg)]) == 0
    assert read_csv(tmp_path / "out" / "auroc.csv")[0] == ["ood_class", "KNN"]


def test_optimize_one_trial_and_argmax(fixture_dir, tmp_path):
    text = base_config(fixture_dir).replace("trials = 100", "trials = 1")
    text = text.replace('select = "all"', 'select = ["Energy", "KNN", "Box"]')
    cfg = with_config(fixture_dir, tmp_path, text)
    assert cli.main(["optimize", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    doc = json.loads((out / "report.json").read_text())
    search = doc["search"]
    feasible = {k: v["objective"] for k, v in search.items() if v["feasible"]}
    assert doc["best_monitor"] == max(feasible, key=feasible.get)
    assert all((out / "monitors" / f"{k}.json").exists() for k in ("Energy", "KNN", "Box"))
    assert all(len((out / "logs" / f"{k}.jsonl").read_text().splitlines()) == 1 for k in search)
    assert (out / "parallel_coordinates.svg").read_text().count("<polyline") == 3


def test_optimize_gradient_and_pareto(fixture_dir, tmp_path):
    text = base_config(fixture_dir).replace('select = "all"', 'select = ["Energy", "KNN"]')
    text = text.replace('method = "random"', 'method = "gradient"\nsteps = 3\ncombos = 3')
    text = text.replace('targets = ["NewWorld/FarCluster"]', 'targets = ["NewWorld/FarCluster", "Noise/Gaussian"]')
    text = text.replace("weights = [1.0]", "weights = [0.5, 0.5]")
    cfg = with_config(fixture_dir, tmp_path, text)
    assert cli.main(["optimize", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    for kind in ("Energy", "KNN"):
        rows = read_csv(out / "pareto" / f"{kind}.csv")
        assert len(rows) == 4
        assert (out / "pareto" / f"{kind}.svg").exists()


def test_optimize_rejects_unknown_target(fixture_dir, tmp_path, capsys):
    text = base_config(fixture_dir).replace('targets = ["NewWorld/FarCluster"]', 'targets = ["NewWorld/Moon"]')
    cfg = with_config(fixture_dir, tmp_path, text)
    assert cli.main(["optimize", "--config", str(cfg)]) == 1
    assert "[optimize.targets]" in capsys.readouterr().err


def test_generate_ood(fixture_dir, tmp_path):
    cfg = with_config(fixture_dir, tmp_path, base_config(fixture_dir) + "\n[intensities]\nRotate = 30.0\n")
    assert cli.main(["generate-ood", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["generate-ood", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(files) == 9 and "manifest.json" in files
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["classes"]["Perturbation/Rotate"]["intensity"] == 30.0
    assert manifest["classes"]["Perturbation/Light"]["intensity"] == 0.3
    inv = "Perturbation_Invert.mnzd"
    assert (tmp_path / "a" / inv).read_bytes() == (tmp_path / "b" / inv).read_bytes()
    assert len(data.load_dataset(tmp_path / "a" / inv)) == 600


def test_list(capsys):
    assert cli.main(["list"]) == 0
    text = capsys.readouterr().out
    assert all(kind in text for kind in M.KINDS)
    assert cli.main(["list", "--json"]) == 0
    first = capsys.readouterr().out
    assert list(json.loads(first)["monitors"]) == list(M.KINDS)
    cli.main(["list", "--json"])
    assert capsys.readouterr().out == first


def test_missing_config_flag(capsys):
    assert cli.main(["evaluate"]) == 1
    assert "--config" in capsys.readouterr().err
