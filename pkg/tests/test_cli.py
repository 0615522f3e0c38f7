import copy
import csv
import io
import json

import pytest

from m2msched import scenario as scn
from m2msched.cli import main
from m2msched.experiments import worker_count


def base_doc(name="paper_s7a.json"):
    return json.loads(scn.bundled(name).read_text())


def write(tmp_path, doc, name="s.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def small_link_doc():
    return {
        "schema_version": 1,
        "classes": [
            {"lambda": 2.0, "packet_size_bytes": 500, "a": 1.0, "b": 2.0, "beta": 0.8},
            {"lambda": 3.0, "packet_size_bytes": 250, "a": 2.0, "b": 1.0, "beta": 0.5},
        ],
        "topology": {"M": 2, "arrival_matrix": [[1.0, 1.0], [1.0, 2.0]], "as_rate_bps": 40000,
                     "link": {"W_hz": 1000, "snr_db": 10, "gains": [1.0, 2.0], "N": 8}},
        "service": "exponential",
    }


def test_solve_io_matches_sso(capsys):
    f = str(scn.bundled("paper_s7a.json"))
    c1, io_out, _ = run(capsys, "solve", "--scenario", f, "--mode", "io")
    c2, sso_out, _ = run(capsys, "solve", "--scenario", f, "--mode", "sso")
    assert c1 == c2 == 0
    a, b = json.loads(io_out), json.loads(sso_out)
    assert abs(a["objective"] - b["objective"]) <= 1e-4
    assert a["subproblems"] == 11 and "alpha_tree" in a
    assert abs(sum(p["gamma"] for p in a["policy"]) - 1.0) < 1e-9


def test_solve_single_class(capsys, tmp_path):
    d = base_doc()
    d["classes"] = d["classes"][:1]
    code, out, _ = run(capsys, "solve", "--scenario", write(tmp_path, d))
    assert code == 0
    assert json.loads(out)["policy"] == [{"order": "1", "gamma": 1.0}]


def test_input_errors(capsys, tmp_path):
    d = base_doc()
    d["classes"][0]["lambda"] = 1.0
    code, _, err = run(capsys, "solve", "--scenario", write(tmp_path, d))
    assert code == 2 and "AS unstable" in err
    d = base_doc()
    d["classes"][0]["colour"] = "red"
    code, _, err = run(capsys, "solve", "--scenario", write(tmp_path, d))
    assert code == 2
    code, _, _ = run(capsys, "solve", "--scenario", str(tmp_path / "missing.json"))
    assert code == 2
    (tmp_path / "bad.json").write_text("{not json")
    code, _, _ = run(capsys, "solve", "--scenario", str(tmp_path / "bad.json"))
    assert code == 2
    code, _, _ = run(capsys, "solve", "--scenario", str(scn.bundled("paper_s7a.json")), "--mode", "fast")
    assert code == 2
    code, _, _ = run(capsys, "compare", "--scenario", str(scn.bundled("paper_s7a.json")), "--sweep", "lambda2=0:1:2")
    assert code == 2
    code, _, _ = run(capsys, "subcarrier", "--scenario", str(scn.bundled("paper_s7a.json")))
    assert code == 2


def test_subcarrier_infeasible_exit(capsys):
    code, _, err = run(capsys, "subcarrier", "--scenario", str(scn.bundled("paper_s7c.json")), "--sweep",
                       "esm=0.5:0.1:0.5")
    assert code == 4 and "infeasible" in err


def test_joint_degenerate_equals_solve(capsys):
    f = str(scn.bundled("paper_s7a.json"))
    _, j, _ = run(capsys, "joint", "--scenario", f)
    _, s, _ = run(capsys, "joint", "--scenario", f, "--mode", "centralized")
    _, io_out, _ = run(capsys, "solve", "--scenario", f)
    j, s, io_doc = json.loads(j), json.loads(s), json.loads(io_out)
    assert j["approximate"] is False
    assert j["objective"] == pytest.approx(io_doc["objective"], abs=1e-9)
    assert s["objective"] == pytest.approx(io_doc["objective"], abs=1e-9)


def test_joint_exponential_reference(capsys, tmp_path):
    f = str(scn.bundled("paper_s7b.json"))
    out = tmp_path / "joint.json"
    code, _, _ = run(capsys, "joint", "--scenario", f, "--out", str(out))
    assert code == 0
    d = json.loads(out.read_text())
    _, c, _ = run(capsys, "joint", "--scenario", f, "--mode", "centralized")
    c = json.loads(c)
    assert abs(d["trace"][1] - c["objective"]) <= 1e-3
    assert d["overhead"]["values_exchanged"] == d["overhead_expected"]["case1"]
    rows = list(csv.reader(io.StringIO((tmp_path / "joint.trace.csv").read_text())))
    assert rows[0] == ["iteration", "objective", "scenario_hash", "seed"]
    assert len(rows) == len(d["trace"]) + 1 and rows[1][2] == d["scenario_hash"]


def test_joint_deterministic_flagged(capsys, tmp_path):
    d = base_doc("paper_s7b_det.json")
    d["sim"] = {"seed": 1, "horizon_packets": 20000}
    code, out, _ = run(capsys, "joint", "--scenario", write(tmp_path, d))
    doc = json.loads(out)
    assert code == 0 and doc["approximate"] is True
    assert "gap_vs_centralized" in doc and "centralized_objective" in doc


def test_subcarrier_small_instance(capsys, tmp_path):
    code, out, _ = run(capsys, "subcarrier", "--scenario", write(tmp_path, small_link_doc()))
    assert code == 0
    rows = {r["method"]: r for r in csv.DictReader(io.StringIO(out))}
    assert set(rows) == {"minimally-feasible", "two-stage", "integer-reference", "relaxed-bound"}
    assert float(rows["two-stage"]["objective"]) == pytest.approx(float(rows["integer-reference"]["objective"]),
                                                                   abs=1e-6)
    assert float(rows["relaxed-bound"]["objective"]) >= float(rows["integer-reference"]["objective"]) - 1e-12
    assert sum(int(rows["two-stage"][f"n_{k}"]) for k in (1, 2)) == 8


def test_subcarrier_no_spare(capsys, tmp_path):
    doc = small_link_doc()
    code, out, _ = run(capsys, "subcarrier", "--scenario", write(tmp_path, doc), "--mode", "greedy")
    rows = {r["method"]: r for r in csv.DictReader(io.StringIO(out))}
    nmf = sum(int(rows["minimally-feasible"][f"n_{k}"]) for k in (1, 2))
    doc["topology"]["link"]["N"] = nmf
    code, out, _ = run(capsys, "subcarrier", "--scenario", write(tmp_path, doc, "t.json"), "--mode", "greedy")
    rows = {r["method"]: r for r in csv.DictReader(io.StringIO(out))}
    assert code == 0 and set(rows) == {"minimally-feasible", "two-stage"}
    for k in (1, 2):
        assert rows["two-stage"][f"n_{k}"] == rows["minimally-feasible"][f"n_{k}"]


def test_compare_single_row_and_byte_identical(capsys, tmp_path):
    d = base_doc()
    d["sim"] = {"seed": 3, "horizon_packets": 5000}
    f = write(tmp_path, d)
    argv = ["compare", "--scenario", f, "--mode", "wfs", "--sweep", "lambda1=0.02:0.01:0.02"]
    code, a, _ = run(capsys, *argv)
    _, b, _ = run(capsys, *argv)
    assert code == 0 and a == b
    rows = list(csv.DictReader(io.StringIO(a)))
    assert len(rows) == 1 and rows[0]["scheduler"] == "wfs" and rows[0]["lambda1"] == "0.02"
    assert rows[0]["scenario_hash"] == scn.scenario_hash(scn.load(f)) and rows[0]["seed"] == "3"
    _, c, _ = run(capsys, *argv, "--seed", "4")
    assert c != a
    code, _, _ = run(capsys, "compare", "--scenario", f, "--mode", "fifo")
    assert code == 2


def test_audit_table(capsys):
    code, out, _ = run(capsys, "audit", "--scenario", str(scn.bundled("paper_s7a.json")))
    rows = {int(r["R"]): r for r in csv.DictReader(io.StringIO(out))}
    assert code == 0
    assert rows[7]["sso_equations"] == "5041"
    assert rows[3]["N1"] == rows[3]["N2"]
    assert 50 <= float(rows[8]["N2_over_N1"]) <= 54
    assert rows[4]["scenario_R"] == "yes"


def test_worker_cap(monkeypatch):
    monkeypatch.setenv("M2MSCHED_THREADS", "1")
    assert worker_count(10) == 1
    monkeypatch.setenv("M2MSCHED_THREADS", "3")
    assert worker_count(10) == 3 and worker_count(2) == 2
    monkeypatch.setenv("M2MSCHED_THREADS", "zero")
    assert worker_count(1) == 1
