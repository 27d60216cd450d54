import json
import os
import subprocess
import sys

import pytest

from covertsense.cli import main


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_bai_plain_exponent(capsys):
    code, out, _ = run(["exponent", "--model", "builtin:table3", "--mode", "bai-plain"], capsys)
    assert code == 0
    assert "value 0.03125" in out
    assert "argmax 0.5 0.5" in out


def test_covert_exponent_shows_published_argmax(capsys, tmp_path):
    code, out, _ = run(["exponent", "--model", "builtin:table3", "--mode", "bai-covert",
                        "--out", str(tmp_path)], capsys)
    assert code == 0 and "published argmax 0.3 0.7" in out
    doc = json.loads((tmp_path / "summary.json").read_text())
    assert doc["exponent"]["published_argmax"] == [0.3, 0.7]


def test_exit_codes(capsys, tmp_path):
    assert run(["exponent"], capsys)[0] == 2
    assert run(["exponent", "--model", str(tmp_path / "missing.json")], capsys)[0] == 2
    assert run(["simulate-ht", "--eta", "-1"], capsys)[0] == 2
    assert run(["simulate-ht", "--episodes", "10"], capsys)[0] == 2
    bad = tmp_path / "cfg.json"
    bad.write_text(json.dumps({"colour": 1}))
    code, _, err = run(["simulate-ht", "--config", str(bad)], capsys)
    assert code == 2 and "colour" in err
    # Willie's mixture mean can vanish: the covert ratio has no finite optimum
    flat = tmp_path / "flat.json"
    flat.write_text(json.dumps({"alice_means": [0, 1, 0.5], "willie_means": [0, 1, -1]}))
    assert run(["exponent", "--model", str(flat), "--mode", "bai-covert"], capsys)[0] == 3


def test_config_precedence(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"eta": 0.3, "episodes": 100, "n": [2500]}))
    out = tmp_path / "ht"
    code, _, _ = run(["simulate-ht", "--config", str(cfg), "--eta", "0.4", "--out", str(out)], capsys)
    assert code == 0
    doc = json.loads((out / "summary.json").read_text())
    rec = doc["config"]
    assert rec["resolved"]["eta"] == 0.4
    assert rec["resolved"]["episodes"] == 100
    assert rec["from_file"] == {"eta": 0.3, "episodes": 100, "n": [2500]}
    assert rec["from_flags"] == {"eta": 0.4}
    assert "out" not in rec["resolved"] and "threads" not in rec["resolved"]


def test_simulate_audit_scaling(capsys, tmp_path):
    out = tmp_path / "ht"
    code, text, _ = run(["simulate-ht", "--n", "2500", "10000", "40000", "--episodes", "150",
                         "--out", str(out), "--threads", "1"], capsys)
    assert code == 0 and text.count("cell") == 3
    assert sorted(os.listdir(out)) == ["episodes.csv", "scaling.csv", "summary.json"]
    code, text, _ = run(["audit-covertness", "--episodes", str(out / "episodes.csv"),
                         "--ks", "10", "100", "--traces", "500"], capsys)
    assert code == 0 and "detector meets" in text
    cov = json.loads((out / "covertness.json").read_text())
    assert cov["detector"]["n"] == 2500
    (out / "scaling.csv").unlink()
    code, text, _ = run(["scaling", "--summary", str(out)], capsys)
    assert code == 0 and text.startswith("slope")
    assert (out / "scaling.csv").exists()
    assert {p.name for p in tmp_path.iterdir()} == {"ht"}


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "covertsense", "--version"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip()
