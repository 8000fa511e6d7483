import json

import numpy as np
import pytest

from conftest import make_panel
from excursionlab.cli import main
from excursionlab.io import SchemaError, load_panel_csv, read_rows_csv, write_panel_csv


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, json.loads(capsys.readouterr().out)


def test_round_trip(tmp_path):
    P = make_panel(n=7, T=3, p=2, avail_rate=0.7, seed=5)
    path = tmp_path / "p.csv"
    write_panel_csv(P, path)
    Q = load_panel_csv(path)
    assert P.equals(Q)
    assert Q.history_names == ("t", "z")


def test_tiny_file_and_moderator_choice(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("id,t,avail,prob,treat,outcome,h_z,f_z\n"
                    "a,1,1,0.5,1,2.0,0.1,0.1\na,2,1,0.5,0,1.0,0.2,0.2\na,3,0,0.5,0,1.5,0.3,0.3\n"
                    "b,2,1,0.4,1,0.0,0.5,0.5\nb,1,1,0.4,0,3.0,0.4,0.4\nb,3,1,0.4,0,1.0,0.6,0.6\n")
    P = load_panel_csv(path)
    assert (P.n, P.T, P.p) == (2, 3, 1)
    np.testing.assert_array_equal(P.outcome[1], [3.0, 0.0, 1.0])
    assert P.ids == ("a", "b")
    Q = load_panel_csv(path, ("z",))
    assert Q.moderator_names == ("z",)
    with pytest.raises(SchemaError, match="not found"):
        load_panel_csv(path, ("w",))


@pytest.mark.parametrize("body, match", [
    ("id,t,avail,treat,outcome\na,1,1,1,2\n", "prob"),
    ("id,t,avail,prob,treat,outcome\na,1,1,0.5,1,2\na,2,1,0.5,1\n", "line 3"),
    ("id,t,avail,prob,treat,outcome\na,1,1,0.5,1,2\na,3,1,0.5,1,2\n", "gaps"),
    ("id,t,avail,prob,treat,outcome\na,1,1,0.5,1,2\nb,1,1,0.5,1,2\nb,2,1,0.5,1,2\n", "ragged"),
    ("id,t,avail,prob,treat,outcome\na,1,1,half,1,2\n", "non-numeric"),
    ("", "empty"),
])
def test_schema_errors(tmp_path, body, match):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(SchemaError, match=match):
        load_panel_csv(path)


def test_simulate_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        code, res = run(capsys, "simulate", "--generator", "count", "--n", 20, "--T", 4, "--seed", 7, "--out", out)
        assert code == 0 and res["beta_star"] == [0.1]
    assert a.read_bytes() == b.read_bytes()


def test_simulate_then_estimate(tmp_path, capsys):
    path = tmp_path / "sim.csv"
    run(capsys, "simulate", "--n", 2000, "--seed", 3, "--out", path)
    code, res = run(capsys, "estimate", path, "--method", "wcls", "--out", tmp_path / "r.json")
    assert code == 0
    assert abs(res["beta"][0] - 0.5) < 0.05
    assert res["ci_family"] == "normal"
    assert json.loads((tmp_path / "r.json").read_text())["beta"] == res["beta"]
    code, res = run(capsys, "estimate", path, "--method", "two_stage", "--nuisance", '{"kind": "tree", "max_depth": 3}',
                    "--dmode", "per_time", "--ssc", "off")
    assert code == 0 and res["sigma_corrected"] is None


def test_diagnose(tmp_path, capsys):
    path = tmp_path / "sim.csv"
    run(capsys, "simulate", "--n", 200, "--T", 4, "--out", path)
    code, res = run(capsys, "diagnose", path, "--out", tmp_path / "wa2.csv")
    assert code == 0
    np.testing.assert_allclose(np.diag(res["matrix"]), 1.0)
    assert len(read_rows_csv(tmp_path / "wa2.csv")) == 4


def test_errors_as_json(tmp_path, capsys):
    code, res = run(capsys, "estimate", tmp_path / "missing.csv")
    assert code == 1 and res["type"] == "FileNotFoundError"
    code, res = run(capsys, "estimate")
    assert code == 2 and res["type"] == "usage"
    code, res = run(capsys, "simulate", "--out", tmp_path / "x.csv", "--param", "rho=2")
    assert code == 1 and "rho" in res["error"]
    path = tmp_path / "sim.csv"
    run(capsys, "simulate", "--n", 30, "--T", 3, "--out", path)
    code, res = run(capsys, "estimate", path, "--link", "log", "--method", "wcls")
    assert code == 1 and "identity" in res["error"]
    code, res = run(capsys, "estimate", path, "--nuisance", "boosting")
    assert code == 1 and "boosting" in res["error"]
