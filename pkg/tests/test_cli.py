import json
import os
import subprocess
import sys

import numpy as np
import pytest

from cascadesim.cli import main
from cascadesim.pipeline import loads_rollouts
from cascadesim.scenario import loads_scenario


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    sc = str(d / "scene.json")
    assert main(["gen-data", "--seed", "3", "--agents", "3", "--out", sc]) == 0
    models = str(d / "models.txt")
    assert main(["train", "--scenario", sc, "--kf", "10", "--out", models]) == 0
    return d, sc, models


def test_gen_data_is_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for p in (a, b):
        assert main(["gen-data", "--seed", "5", "--topology", "curve", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert loads_scenario(a.read_text()).n_agents == 4


def test_simulate_evaluate_plot(workdir):
    d, sc, models = workdir
    out = str(d / "roll.json")
    assert main(["simulate", "--scenario", sc, "--models", models, "--n", "4", "--m", "8",
                 "--gamma-world", "0.2", "--gamma-motion", "0.2", "--out", out]) == 0
    rs = loads_rollouts(open(out).read())
    assert len(rs) == 32 and sorted(rs.provenance) == [(i, j) for i in range(4) for j in range(8)]
    again = str(d / "roll2.json")
    main(["simulate", "--scenario", sc, "--models", models, "--n", "4", "--m", "8",
          "--gamma-world", "0.2", "--gamma-motion", "0.2", "--out", again])
    assert open(out, "rb").read() == open(again, "rb").read()

    rep = str(d / "report.json")
    assert main(["evaluate", "--scenario", sc, "--rollouts", out, "--out", rep]) == 0
    report = json.load(open(rep))
    assert len(report["per_rollout"]) == 32
    assert report["aggregate"]["minade"] > 0

    svg1, svg2 = str(d / "a.svg"), str(d / "b.svg")
    for p in (svg1, svg2):
        assert main(["plot", "--scenario", sc, "--rollouts", out, "--out", p]) == 0
    assert open(svg1, "rb").read() == open(svg2, "rb").read()
    assert open(svg1).read().startswith("<svg")


def test_evaluate_ground_truth_gives_zero_minade(workdir, tmp_path):
    d, sc, models = workdir
    out = str(tmp_path / "r.json")
    main(["simulate", "--scenario", sc, "--models", models, "--n", "1", "--m", "2", "--out", out])
    doc = json.load(open(out))
    scene = loads_scenario(open(sc).read())
    truth = np.concatenate([scene.current[:, None], scene.future], axis=1)
    doc["rollouts"][0]["states"] = truth.reshape(-1).tolist()
    open(out, "w").write(json.dumps(doc))
    rep = str(tmp_path / "rep.json")
    assert main(["evaluate", "--scenario", sc, "--rollouts", out, "--out", rep]) == 0
    assert json.load(open(rep))["aggregate"]["minade"] == pytest.approx(0.0, abs=1e-12)


def test_closed_loop_command(workdir, tmp_path):
    d, sc, models = workdir
    out = str(tmp_path / "cl.json")
    assert main(["simulate", "--closed-loop", "--scenario", sc, "--models", models, "--n", "1",
                 "--m", "2", "--total-s", "2", "--out", out]) == 0
    doc = json.load(open(out))
    assert doc["steps"] == 20 and len(doc["replans"]) == 2


@pytest.mark.parametrize("argv", [
    ["fly", "--out", "x"],
    ["gen-data", "--bogus", "1", "--out", "x"],
    ["gen-data"],
    ["gen-data", "--agents", "0", "--out", "x"],
    ["simulate", "--out", "x"],
    ["simulate", "--closed-loop", "--scenario", "s", "--models", "m", "--replan-hz", "3",
     "--out", "x"],
])
def test_usage_errors(argv, tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2
    assert "usage" in capsys.readouterr().err
    assert not os.path.exists(tmp_path / "x")


def test_data_errors_leave_no_output(workdir, tmp_path, capsys):
    d, sc, models = workdir
    out = tmp_path / "r.json"
    assert main(["simulate", "--scenario", str(tmp_path / "missing.json"), "--models", models,
                 "--out", str(out)]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text('{"format": "cascadesim-scenario", "version": 1}')
    assert main(["simulate", "--scenario", str(bad), "--models", models, "--out", str(out)]) == 3
    broken = tmp_path / "broken.txt"
    broken.write_text(open(models).read()[:500])
    assert main(["simulate", "--scenario", sc, "--models", str(broken), "--out", str(out)]) == 3
    assert "data error" in capsys.readouterr().err
    assert not out.exists()
    assert not [p for p in os.listdir(tmp_path) if p.endswith(".part")]


def test_module_entry_point(tmp_path):
    out = tmp_path / "s.json"
    r = subprocess.run([sys.executable, "-m", "cascadesim", "gen-data", "--out", str(out)],
                       capture_output=True, text=True)
    assert r.returncode == 0 and out.exists()
    r = subprocess.run([sys.executable, "-m", "cascadesim", "nope"], capture_output=True, text=True)
    assert r.returncode == 2 and "usage" in r.stderr
