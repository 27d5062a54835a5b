import csv
import hashlib
import subprocess
import sys
from importlib import resources

import numpy as np
import pytest

from tghrf.cli import main

DATA = resources.files("tghrf") / "data"
FIELD = str(DATA / "sample_field.csv")
COVS = str(DATA / "sample_covariates.csv")


def _body(path):
    """File content without the timestamp line."""
    return [ln for ln in open(path).read().splitlines() if not ln.startswith("# created:")]


def _rows(path):
    lines = [ln for ln in open(path) if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_lowrank_on_bundled_sample_has_13_columns(tmp_path):
    assert main(["fit", "--mode", "lowrank", "--data", FIELD, "--rank", "40", "--days", "1,2",
                 "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "params_lowrank.csv")
    assert len(rows) == 2 and len(rows[0]) == 13
    assert [r["day"] for r in rows] == ["1", "2"]
    for r in rows:
        for p in "abgh":
            assert float(r[f"ci_low_{p}"]) <= float(r[p]) <= float(r[f"ci_high_{p}"])
    det = _rows(tmp_path / "lowrank_details.csv")
    assert [d["L"] for d in det] == ["40", "40"]


def test_malformed_csv_exit_2_with_line(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y,t,value\n0,0,1,1.0\n1,0,1,oops\n")
    assert main(["lmoments", "--data", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "bad.csv:3:4:" in err and "input error" in err
    assert not (tmp_path / "o" / "lmoments.csv").exists()


def test_console_script_exit_status(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y,t,value\n0,0,1\n")
    proc = subprocess.run([sys.executable, "-m", "tghrf.cli", "lmoments", "--data", str(bad),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "bad.csv:2:" in proc.stderr


def test_estimation_failure_exit_4(tmp_path, capsys):
    flat = tmp_path / "flat.csv"
    flat.write_text("x,y,t,value\n" + "".join(f"{i % 6},{i // 6},1,2.0\n" for i in range(36)))
    assert main(["fit", "--mode", "full", "--data", str(flat), "--out", str(tmp_path)]) == 4
    assert "zero variance" in capsys.readouterr().err


def test_rerun_identical_modulo_timestamp(tmp_path):
    for d in ("a", "b"):
        assert main(["simulate", "--nx", "9", "--ny", "7", "--reps", "2", "--g", "0.4",
                     "--seed", "11", "--out", str(tmp_path / d)]) == 0
    assert _body(tmp_path / "a" / "field.csv") == _body(tmp_path / "b" / "field.csv")
    assert main(["simulate", "--nx", "9", "--ny", "7", "--reps", "2", "--g", "0.4",
                 "--seed", "12", "--out", str(tmp_path / "c")]) == 0
    assert _body(tmp_path / "a" / "field.csv") != _body(tmp_path / "c" / "field.csv")


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("TGH_SEED", "11")
    assert main(["simulate", "--nx", "5", "--ny", "5", "--out", str(tmp_path / "env")]) == 0
    monkeypatch.delenv("TGH_SEED")
    assert main(["simulate", "--nx", "5", "--ny", "5", "--seed", "11",
                 "--out", str(tmp_path / "flag")]) == 0
    assert _body(tmp_path / "env" / "field.csv") == _body(tmp_path / "flag" / "field.csv")
    assert "# seed: 11" in _body(tmp_path / "env" / "field.csv")
    monkeypatch.setenv("TGH_SEED", "x")
    assert main(["simulate", "--nx", "5", "--ny", "5", "--out", str(tmp_path / "bad")]) == 2


def test_config_file_defaults_and_flags_win(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# defaults\nnx = 6\nny=4\ng=0.2\nreps=3\n")
    assert main(["simulate", "--config", str(cfg), "--ny", "5", "--out",
                 str(tmp_path / "c")]) == 0
    rows = _rows(tmp_path / "c" / "field.csv")
    assert len(rows) == 6 * 5 * 3
    assert main(["simulate", "--nx", "6", "--ny", "5", "--g", "0.2", "--reps", "3",
                 "--out", str(tmp_path / "f")]) == 0
    # the config file itself is not part of the hashed configuration
    assert _body(tmp_path / "c" / "field.csv") == _body(tmp_path / "f" / "field.csv")
    cfg.write_text("colour=red\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert main(["simulate", "--config", str(tmp_path / "none.cfg"),
                 "--out", str(tmp_path / "x")]) == 2


@pytest.mark.parametrize("args,outputs", [
    (["fit", "--mode", "sparse", "--data", FIELD, "--budget", "40", "--stride", "25",
      "--days", "1,2", "--smooth"], ["params_sparse.csv"]),
    (["lmoments", "--data", FIELD], ["lmoments.csv"]),
    (["fit", "--mode", "full", "--data", FIELD, "--days", "1,2"], ["params_full.csv"]),
    (["bench", "--protocol", "lowrank-B", "--set", "n=200", "--set", "ranks=20,40",
      "--set", "full=false"], ["lowrank-B_raw.csv", "lowrank-B_summary.csv"]),
])
def test_threads_do_not_change_results(tmp_path, args, outputs):
    for t in ("1", "3"):
        assert main(args + ["--threads", t, "--out", str(tmp_path / t)]) == 0
    for name in outputs:
        assert _body(tmp_path / "1" / name) == _body(tmp_path / "3" / name)


def test_sparse_output_columns_and_days_header(tmp_path):
    assert main(["fit", "--mode", "sparse", "--data", FIELD, "--budget", "40", "--stride",
                 "40", "--interval", "3", "--out", str(tmp_path)]) == 0
    body = _body(tmp_path / "params_sparse.csv")
    assert any(ln.startswith("# days: ") for ln in body)
    rows = _rows(tmp_path / "params_sparse.csv")
    assert list(rows[0]) == ["x", "y", "a", "b", "g", "h", "r", "design_size", "flag"]
    assert all(int(r["design_size"]) == 40 for r in rows)


def test_sblue_outputs(tmp_path):
    before = (_sha(FIELD), _sha(COVS))
    n1 = sum(r["t"] == "1" and r["value"] != "" for r in _rows(FIELD))
    assert main(["sblue", "--data", FIELD, "--covariates", COVS, "--predict", COVS,
                 "--days", "1", "--boxcox", "elevation", "--out", str(tmp_path / "e")]) == 0
    assert main(["sblue", "--data", FIELD, "--covariates", COVS, "--predict", COVS,
                 "--days", "1", "--rank", str(n1), "--boxcox", "elevation",
                 "--out", str(tmp_path / "r")]) == 0
    assert (_sha(FIELD), _sha(COVS)) == before
    coef = _rows(tmp_path / "e" / "coefficients.csv")
    assert [c["name"] for c in coef] == ["intercept", "elevation", "green"]
    kern = _rows(tmp_path / "e" / "kernels.csv")
    assert len(kern) == 1 and float(kern[0]["r"]) > 0
    pe = np.array([float(r["prediction"]) for r in _rows(tmp_path / "e" / "predictions.csv")])
    pr = np.array([float(r["prediction"]) for r in _rows(tmp_path / "r" / "predictions.csv")])
    assert pe.size == 225
    assert np.abs(pe - pr).max() < 1e-6 * np.abs(pe).max()


def test_cluster_pipeline(tmp_path):
    assert main(["lmoments", "--data", FIELD, "--out", str(tmp_path)]) == 0
    lm = str(tmp_path / "lmoments.csv")
    assert main(["cluster", "--input", lm, "--k", "3", "--reference", "7,7",
                 "--out", str(tmp_path)]) == 0
    labels = _rows(tmp_path / "labels.csv")
    assert len(labels) == 225 and {r["label"] for r in labels} == {"1", "2", "3"}
    assert len(_rows(tmp_path / "centers.csv")) == 3
    assert main(["cluster", "--input", lm, "--select-k", "2..5", "--out", str(tmp_path)]) == 0
    table = _rows(tmp_path / "select_k.csv")
    assert [r["k"] for r in table] == ["2", "3", "4", "5"]
    assert main(["cluster", "--input", lm, "--select-k", "5..2", "--out", str(tmp_path)]) == 2
    assert main(["cluster", "--input", lm, "--k", "3", "--features", "a,q",
                 "--out", str(tmp_path)]) == 2
