import json
import subprocess
import sys

import numpy as np
import pytest

from nodectrl.cli import main
from nodectrl.core import schedule_from_json, schedule_to_json
from nodectrl.flow import points_to_csv


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def data(tmp_path):
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, (9, 2))
    files = {
        "points": write(tmp_path / "points.json", {"points": x.tolist(), "labels": rng.integers(1, 4, 9).tolist()}),
        "pairs": write(tmp_path / "pairs.json", {"points": x.tolist(), "targets": rng.uniform(-1, 1, (9, 2)).tolist()}),
        "fn": write(
            tmp_path / "f.json",
            {
                "domain": {"lo": [-1, -1], "hi": [1, 1]},
                "regions": [
                    {"boxes": [{"lo": [0, -1], "hi": [1, 1]}], "value": [1, 0]},
                    {"boxes": [{"lo": [-1, -1], "hi": [0, 1]}], "value": [-1, 0]},
                ],
            },
        ),
        "rho": write(tmp_path / "rho.json", {"type": "uniform_boxes", "boxes": [{"lo": [0, 0], "hi": [1, 1]}]}),
        "rho2": write(tmp_path / "rho2.json", {"type": "uniform_boxes", "boxes": [{"lo": [3, 3], "hi": [4, 4]}]}),
        "diracs": write(tmp_path / "diracs.json", {"points": [[-2, 2], [2, 2]], "weights": [0.5, 0.5]}),
        "d1": write(tmp_path / "d1.json", {"points": [[-2, 0]]}),
        "d2": write(tmp_path / "d2.json", {"points": [[2, 0]]}),
        "csv": str(tmp_path / "pts.csv"),
    }
    (tmp_path / "pts.csv").write_text(points_to_csv(x))
    files["x"] = x
    return files


def scenario(tmp_path, name, doc):
    return write(tmp_path / name, doc)


def test_classify(tmp_path, data, capsys):
    out, rep = tmp_path / "s.json", tmp_path / "r.json"
    code = main(["classify", "--input", data["points"], "--strips", "0.0,1.0", "--time", "1.0",
                 "--out", str(out), "--report", str(rep)])
    assert code == 0
    assert json.loads(rep.read_text())["accuracy"] == 1.0
    s = schedule_from_json(out.read_text())
    assert schedule_to_json(s) == out.read_text()


def test_simcontrol_both_oracles(tmp_path, data):
    for oracle in ("closed", "rk4"):
        rep = tmp_path / f"r_{oracle}.json"
        code = main(["--oracle", oracle, "simcontrol", "--input", data["pairs"], "--eps", "0",
                     "--out", str(tmp_path / "s.json"), "--report", str(rep)])
        doc = json.loads(rep.read_text())
        assert code == 0 and doc["oracle"] == oracle
        assert doc["max_error"] < (1e-6 if oracle == "closed" else 1e-5)


def test_approx(tmp_path, data):
    cert = tmp_path / "c.json"
    assert main(["approx", "--fn", data["fn"], "--eps", "0.25", "--out", str(tmp_path / "s.json"), "--cert", str(cert)]) == 0
    doc = json.loads(cert.read_text())
    for key in ("l2_error", "eps", "h", "zeta", "delta", "eta", "switches", "norms", "measured_C", "measured_K"):
        assert key in doc


def test_transport(tmp_path, data):
    cert = tmp_path / "c.json"
    code = main(["transport", "--rho0", data["rho"], "--target", data["diracs"], "--eps", "0.25",
                 "--particles", "2000", "--seed", "7", "--out", str(tmp_path / "s.json"), "--cert", str(cert)])
    assert code == 0 and json.loads(cert.read_text())["w1"] < 0.25


def test_multitransport(tmp_path, data):
    cert = tmp_path / "c.json"
    code = main(["multitransport", "--rho0", data["rho"], data["rho2"], "--target", data["d1"], data["d2"],
                 "--eps", "0.25", "--particles", "2000", "--out", str(tmp_path / "s.json"), "--cert", str(cert)])
    doc = json.loads(cert.read_text())
    assert code == 0 and doc["pooled_w1"] < 0.25 and len(doc["classes"]) == 2


def test_boxdim(data, capsys):
    assert main(["boxdim", "--fn", data["fn"]]) == 0
    assert abs(json.loads(capsys.readouterr().out)["dimension"] - 1.0) < 0.15


def test_run_scenario_deterministic(tmp_path, data):
    x = data["x"]
    doc = {"version": 1, "kind": "classify", "seed": 3,
           "payload": {"points": x.tolist(), "labels": [1, 2, 3] * 3, "strips": [0.0, 1.0]}}
    path = scenario(tmp_path, "scen.json", doc)
    outs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        assert main(["run", path, "--outdir", str(d), "--svg"]) == 0
        outs.append(d)
    for name in ("schedule.json", "report.json", "trajectories.csv", "trajectories.svg"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    man = json.loads((outs[0] / "manifest.json").read_text())
    assert man["acceptance"] == {"accuracy_one": True}
    assert len(man["scenario_sha256"]) == 64 and man["metrics"]["switches"] > 0
    assert (outs[0] / "trajectories.svg").read_text().startswith("<svg")
    assert (outs[0] / "trajectories.csv").read_text().splitlines()[0] == "t,x1,x2,point_id"


def test_run_three_dimensional_svg(tmp_path):
    rng = np.random.default_rng(1)
    doc = {"version": 1, "kind": "simcontrol",
           "payload": {"points": rng.uniform(-1, 1, (4, 3)).tolist(), "targets": rng.uniform(-1, 1, (4, 3)).tolist()}}
    d = tmp_path / "o"
    assert main(["run", scenario(tmp_path, "s.json", doc), "--outdir", str(d), "--svg"]) == 0
    assert "polyline" in (d / "trajectories.svg").read_text()


def test_dimension_one_exit_3(tmp_path, capsys):
    doc = {"version": 1, "kind": "classify", "payload": {"points": [[0.0], [1.0]], "labels": [1, 2], "strips": [0.5]}}
    assert main(["run", scenario(tmp_path, "d1.json", doc), "--outdir", str(tmp_path / "o")]) == 3
    assert "dimension" in capsys.readouterr().err


@pytest.mark.parametrize(
    "content",
    [
        "{oops",
        json.dumps({"kind": "classify", "payload": {}}),
        json.dumps({"version": 1, "kind": "bogus", "payload": {}}),
        json.dumps({"version": 1, "kind": "classify", "payload": {"points": [[0, 0]]}}),
        json.dumps({"version": 1, "kind": "approx", "payload": {"function": {"domain": {}}, "eps": 0.1}}),
    ],
)
def test_schema_errors_exit_2(tmp_path, content):
    p = tmp_path / "bad.json"
    p.write_text(content)
    assert main(["run", str(p), "--outdir", str(tmp_path / "o")]) == 2


def test_missing_file_exit_2(tmp_path):
    assert main(["run", str(tmp_path / "nope.json")]) == 2


def test_precondition_exit_3(tmp_path):
    doc = {"version": 1, "kind": "simcontrol", "payload": {"points": [[0, 0], [0, 0]], "targets": [[1, 1], [2, 2]]}}
    assert main(["run", scenario(tmp_path, "s.json", doc), "--outdir", str(tmp_path / "o")]) == 3


def test_false_flag_exit_4(tmp_path, monkeypatch):
    import nodectrl.cli as cli

    real = cli.run_classify

    def broken(p, seed, oracle):
        out = real(p, seed, oracle)
        out.flags["accuracy_one"] = False
        return out

    monkeypatch.setitem(cli.RUNNERS, "classify", broken)
    doc = {"version": 1, "kind": "classify", "payload": {"points": [[0, 0], [1, 0]], "labels": [1, 2], "strips": [0.5]}}
    assert main(["run", scenario(tmp_path, "s.json", doc), "--outdir", str(tmp_path / "o")]) == 4


def test_replay_byte_identical(tmp_path, data):
    d = tmp_path / "o"
    x = data["x"]
    doc = {"version": 1, "kind": "classify", "payload": {"points": x.tolist(), "labels": [1] * 9, "strips": [0.0]}}
    assert main(["run", scenario(tmp_path, "s.json", doc), "--outdir", str(d)]) == 0
    rp = tmp_path / "replay.csv"
    assert main(["replay", str(d / "schedule.json"), data["csv"], "--out", str(rp)]) == 0
    assert rp.read_bytes() == (d / "trajectories.csv").read_bytes()


def test_replay_probes_appended(tmp_path, data):
    d = tmp_path / "o"
    x = data["x"]
    doc = {"version": 1, "kind": "simcontrol", "payload": {"points": x.tolist(), "targets": (x[::-1] + 0.1).tolist()}}
    assert main(["run", scenario(tmp_path, "s.json", doc), "--outdir", str(d)]) == 0
    probes = tmp_path / "probe.csv"
    probes.write_text(points_to_csv(np.array([[0.3, 0.3], [-0.7, 0.2]])))
    base, ext = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["replay", str(d / "schedule.json"), data["csv"], "--out", str(base)])
    main(["replay", str(d / "schedule.json"), data["csv"], "--probes", str(probes), "--out", str(ext)])
    a, b = base.read_text().splitlines(), ext.read_text().splitlines()
    assert b[: len(a)] == a and len(b) > len(a)
    assert {ln.split(",")[-1] for ln in b[len(a):]} == {"9", "10"}


def test_replay_rk4_vs_closed(tmp_path, data):
    d = tmp_path / "o"
    x = data["x"]
    doc = {"version": 1, "kind": "classify", "payload": {"points": x.tolist(), "labels": [1, 2, 3] * 3, "strips": [0.0, 1.0]}}
    main(["run", scenario(tmp_path, "s.json", doc), "--outdir", str(d)])
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    main(["replay", str(d / "schedule.json"), data["csv"], "--out", str(a)])
    main(["--oracle", "rk4", "replay", str(d / "schedule.json"), data["csv"], "--out", str(b)])
    A = np.loadtxt(a, delimiter=",", skiprows=1)
    B = np.loadtxt(b, delimiter=",", skiprows=1)
    assert np.max(np.abs(A - B)) < 1e-8


def test_replay_dimension_mismatch(tmp_path, data):
    d = tmp_path / "o"
    doc = {"version": 1, "kind": "simcontrol",
           "payload": {"points": [[0, 0, 0], [1, 0, 0]], "targets": [[1, 1, 1], [2, 2, 2]]}}
    main(["run", scenario(tmp_path, "s.json", doc), "--outdir", str(d)])
    assert main(["replay", str(d / "schedule.json"), data["csv"]]) == 3


def test_module_entry_point(tmp_path, data):
    proc = subprocess.run([sys.executable, "-m", "nodectrl", "boxdim", "--fn", data["fn"]], capture_output=True, text=True)
    assert proc.returncode == 0 and "dimension" in proc.stdout
