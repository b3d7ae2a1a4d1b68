import json
import math

import numpy as np
import pytest

from ddml.cli import _eps, main
from ddml.client import PrivacyParams
from ddml.net import ServerThread, server_from_config
from ddml.sim import CSV_HEADER, SimConfig, desk_multiclass

SMALL = {
    "dataset": {"kind": "desk_multiclass", "p": 6, "classes": 3, "n": 300, "test_n": 100},
    "privacy": {"epsilon": 2.0, "gamma": 0.01},
    "k": 3,
    "passes": 1,
    "eval_every": 100,
}


def test_epsilon_parsing():
    assert _eps("inf") == math.inf
    assert _eps("log(16)") == pytest.approx(math.log(16))
    assert _eps("0.5") == 0.5


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["analyze", "--epsilon", "1"])
    assert exc.value.code == 2
    assert main(["verify", "no-such-suite"]) == 2


def test_analyze_json(capsys):
    assert main(["analyze", "--k", "20", "--epsilon", "log(32)", "--T", "100", "--trials", "2000"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["summary"]["II"] == pytest.approx(19 / 40 * math.log(32))
    assert [r["adversary"] for r in doc["reports"]] == ["I", "II", "III"]
    assert 0 <= doc["preimage"]["probability"] <= 1
    assert doc["eps_T"]["exact"] >= doc["eps_T"]["approx"]


def test_domain_error_exits_1(capsys):
    assert main(["analyze", "--k", "5", "--epsilon", "1", "--delta", "0.7"]) == 1
    assert "DeltaOutOfRange" in capsys.readouterr().err


def test_analyze_writes_sweeps(tmp_path, capsys):
    assert main(["analyze", "--k", "5", "--epsilon", "7", "--trials", "500", "--csv-dir", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["T_eps.csv", "k_amplification.csv", "t_preimage.csv"]


def test_verify_fast_suite(capsys):
    assert main(["verify", "adversary2"]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") >= 2 and "[FAIL]" not in out


def test_simulate_with_overrides(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    out = tmp_path / "trace.csv"
    assert main(["simulate", str(cfg), "--out", str(out), "--gamma", "0.02", "--epsilon", "inf", "--seed", "3"]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].split(",") == CSV_HEADER
    assert len(lines) == 1 + 4
    assert main(["simulate", str(tmp_path / "missing.json")]) == 1


def test_grid(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({**SMALL, "sweep": {"k": [1, 3], "epsilon": [None, 2.0]}}))
    assert main(["grid", str(cfg), "--out", str(tmp_path / "grid")]) == 0
    manifest = json.loads((tmp_path / "grid" / "manifest.json").read_text())
    assert len(manifest["cells"]) == 4


def test_spam_test(tmp_path, capsys):
    snap = tmp_path / "snap.json"
    snap.write_text(json.dumps({"k": 2, "strategy": "draw_and_discard", "shape": [1, 2],
                                "instances": [[0.0, 1.0], [2.0, 1.0]]}))
    weights = tmp_path / "w.json"
    weights.write_text("[[1.0, 1.0]]")
    assert main(["spam-test", str(snap), str(weights)]) == 0
    assert json.loads(capsys.readouterr().out)["accept"] is True
    weights.write_text("[[1.0, 5.0]]")
    main(["spam-test", str(snap), str(weights)])
    assert json.loads(capsys.readouterr().out) == {"accept": False, "offending": [1], "t": 3.0}


def test_agent_against_a_server(tmp_path, capsys):
    spec, _ = desk_multiclass(p=4, classes=2)
    cfg = SimConfig(spec=spec, privacy=PrivacyParams(1.0, 0.01), k=3)
    data = tmp_path / "local.npz"
    rng = np.random.default_rng(0)
    np.savez(data, X=rng.random((10, 4)), y=rng.integers(0, 2, 10))
    with ServerThread(server_from_config(cfg)) as st:
        host, port = st.address
        argv = ["agent", "--server", f"{host}:{port}", "--data", str(data), "--epsilon", "1", "--gamma", "0.01",
                "--rounds", "4"]
        assert main(argv) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["rounds"] == 4 and summary["accepted"] == 4
