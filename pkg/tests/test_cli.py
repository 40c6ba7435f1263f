import json

import numpy as np
import pytest

from bdq import io
from bdq.cli import main


def run(*args):
    return main([str(a) for a in args])


def test_gen_is_deterministic_and_round_trips(tmp_path):
    a, b = tmp_path / "a.bdq", tmp_path / "b.bdq"
    assert run("gen", 64, 64, "--sigma", 1, "--k", 100, "--outlier-frac", 0.001, "--seed", 1, "--out", a) == 0
    assert run("--seed", 1, "gen", 64, 64, "--k", 100, "--outlier-frac", 0.001, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    W = io.read_matrix(a)
    assert W.shape == (64, 64)
    assert io.matrix_to_bytes(W) == a.read_bytes()


def test_gen_zero_fraction_equals_k_one(tmp_path):
    run("gen", 8, 8, "--k", 100, "--out", tmp_path / "a.bdq")
    run("gen", 8, 8, "--k", 1, "--out", tmp_path / "b.bdq")
    assert (tmp_path / "a.bdq").read_bytes() == (tmp_path / "b.bdq").read_bytes()


def test_gen_csv(tmp_path):
    assert run("gen", 3, 2, "--out", tmp_path / "m.csv") == 0
    assert io.load_any(tmp_path / "m.csv").shape == (3, 2)


def test_quantize_flatness_transform(tmp_path, capsys):
    m = tmp_path / "m.bdq"
    run("gen", 16, 16, "--k", 20, "--outlier-frac", 0.02, "--out", m)
    assert run("quantize", m, "--bits", 4, "--mode", "symmetric_signed", "--save", tmp_path / "q") == 0
    out = json.loads(capsys.readouterr().out)
    assert out["header"]["spec"]["bits"] == 4
    assert (tmp_path / "q.bdqi").exists()
    assert run("flatness", m, "--out", tmp_path / "f.json") == 0
    f = json.loads((tmp_path / "f.json").read_text())
    assert f["converged"] and len(f["d1"]) == 16
    assert run("transform", m, "--pipeline", "bdq", "--save", tmp_path / "v.bdq", "--out", tmp_path / "t.json") == 0
    assert io.read_matrix(tmp_path / "v.bdq").shape == (16, 16)


def test_compare_writes_json_and_csv_identically(tmp_path):
    m = tmp_path / "m.bdq"
    run("gen", 16, 16, "--k", 20, "--outlier-frac", 0.02, "--seed", 2, "--out", m)
    for name in ("r1.json", "r2.json"):
        assert run("compare", m, "--seed", 2, "--batch", 32, "--out", tmp_path / name) == 0
    assert (tmp_path / "r1.json").read_bytes() == (tmp_path / "r2.json").read_bytes()
    assert (tmp_path / "r1.csv").read_bytes() == (tmp_path / "r2.csv").read_bytes()
    assert run("report", tmp_path / "r1.json", "--format", "csv", "--out", tmp_path / "x.csv") == 0
    assert (tmp_path / "x.csv").read_text().splitlines()[0].startswith("seed,pipeline")
    assert run("report", tmp_path / "r1.json", "--table", "--out", tmp_path / "x.txt") == 0


def test_compare_sweep(tmp_path):
    out = tmp_path / "s.json"
    assert run("compare", "--sweep", 2, "--rows", 16, "--cols", 16, "--pipelines", "none,rot", "--batch", 16, "--out", out) == 0
    d = json.loads(out.read_text())
    assert len(d["runs"]) == 2 and set(d["medians"]) == {"none", "rot"}


def test_calibrate_emits_trace_and_pairs(tmp_path):
    for loss in ("ce", "rce"):
        base = tmp_path / loss
        assert run("calibrate", "--epochs", 3, "--calib-size", 16, "--loss", loss, "--out", base) == 0
    ce = (tmp_path / "ce_trace.csv").read_text().splitlines()
    rce = (tmp_path / "rce_trace.csv").read_text().splitlines()
    assert ce[0] == rce[0] == "epoch,train_loss,heldout_loss,mean_flatness,max_abs_weight"
    assert len(ce) == 4
    assert (tmp_path / "ce_pair0.json").exists() and (tmp_path / "ce_summary.json").exists()


def test_validate_exit_codes(tmp_path, monkeypatch):
    assert run("validate", "--suite", "losses", "--out", tmp_path / "v.json") == 0
    assert json.loads((tmp_path / "v.json").read_text())["passed"] is True
    from bdq import harness

    monkeypatch.setattr(harness, "validate_losses", lambda seed=0: [harness._check("losses", "forced", 1.0, "< 0", False)])
    assert run("validate", "--suite", "losses", "--out", tmp_path / "v2.json") == 2


def test_usage_errors_exit_one(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 1
    assert run("gen", 4, 4) == 1  # no --out
    assert run("compare", tmp_path / "missing.bdq") == 1
    m = tmp_path / "m.bdq"
    run("gen", 6, 6, "--out", m)
    assert run("compare", m, "--pipelines", "rot") == 1
    assert run("compare", m, "--pipelines", "bogus") == 1
    assert run("flatness", m, "--format", "csv") == 1
