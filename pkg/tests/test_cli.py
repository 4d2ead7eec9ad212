import csv
import hashlib
import json

import numpy as np
import pytest

from eqtraj import cli
from eqtraj.scenes import load, to_batch

TINY = ["--n-theta", "4", "--n-r", "2", "--widths", "3", "-t", "3", "-k", "2"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def scenes(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    p = d / "s.ndjson"
    assert run("gen", "--out", p, "--scenes", 12, "--seed", 3, "-t", 3, "-k", 2, "--agents", 2,
               "--env-points", 2) == 0
    return p


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_gen_writes_requested_count(scenes, capsys):
    assert len(load(scenes)) == 12
    assert len(scenes.read_text().splitlines()) == 12


def test_gen_zero_scenes_warns(tmp_path, caplog):
    p = tmp_path / "z.ndjson"
    assert run("gen", "--out", p, "--scenes", 0) == 0
    assert p.read_text() == ""
    assert any("zero scenes" in r.message for r in caplog.records)


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run("gen") == 1
    assert "--out" in capsys.readouterr().err
    assert run("gen", "--out", tmp_path / "x", "--weights", "0,0,0,0") == 1
    assert run("frobnicate") == 1


def test_missing_scene_file_exits_2(tmp_path, capsys):
    assert run("train", "--scenes", tmp_path / "missing.ndjson", "--out", tmp_path / "m.json") == 2
    assert "not found" in capsys.readouterr().err


def test_gen_is_reproducible(tmp_path):
    a, b = tmp_path / "a.ndjson", tmp_path / "b.ndjson"
    run("gen", "--out", a, "--scenes", 5, "--seed", 9)
    run("gen", "--out", b, "--scenes", 5, "--seed", 9)
    assert sha(a) == sha(b)


def test_train_writes_loss_log_and_model(scenes, tmp_path, capsys):
    out = tmp_path / "m.json"
    assert run("train", "--scenes", scenes, "--out", out, "--iterations", 300, "--lr", 0.01, *TINY) == 0
    rows = list(csv.DictReader(open(f"{out}.loss.csv")))
    assert len(rows) == 300
    assert [int(r["iteration"]) for r in rows] == list(range(300))
    doc = json.loads(out.read_text())
    assert doc["format"] == "eqtraj-model" and doc["n_theta"] == 4 and doc["k"] == 2
    assert "variant=equivariant loss=nll" in capsys.readouterr().out


def test_train_mrs_and_ablation_flags(scenes, tmp_path, capsys):
    out = tmp_path / "m.json"
    assert run("train", "--scenes", scenes, "--out", out, "--iterations", 2, "--loss", "mrs",
               "--variant", "ablation", *TINY) == 0
    assert "variant=ablation loss=mrs" in capsys.readouterr().out
    assert json.loads(out.read_text())["config"]["variant"] == "ablation"


def test_train_is_reproducible(scenes, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for p in (a, b):
        assert run("train", "--scenes", scenes, "--out", p, "--iterations", 5, "--seed", 4, *TINY) == 0
    assert sha(a) == sha(b)
    assert sha(tmp_path / "a.json.loss.csv") == sha(tmp_path / "b.json.loss.csv")


def test_config_file_supplies_defaults(scenes, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"iterations": 3, "n-theta": 4, "n_r": 2, "widths": [3], "history": 3,
                               "horizon": 2, "loss": "mrs"}))
    out = tmp_path / "m.json"
    assert run("--config", cfg, "train", "--scenes", scenes, "--out", out) == 0
    assert "loss=mrs" in capsys.readouterr().out
    assert len(open(f"{out}.loss.csv").readlines()) == 4


def eval_args(scenes, out, *extra):
    return cli.build_parser().parse_args([str(a) for a in ("eval", "--scenes", scenes, "--out", out, *extra)])


def test_eval_oracle_has_zero_displacement(scenes, tmp_path):
    out = tmp_path / "e.csv"
    args = eval_args(scenes, out, "-t", 3, "-k", 2)
    future = to_batch(load(scenes), 3, 2).future

    def oracle(history, env):
        return future, np.broadcast_to(0.01 * np.eye(2), future.shape + (2,))

    assert cli.cmd_eval(args, forecaster=oracle) == 0
    row = next(csv.DictReader(open(out)))
    assert float(row["ade"]) == 0.0 and float(row["fde"]) == 0.0
    assert tuple(row) == cli.COLUMNS


def test_eval_baseline_without_model(scenes, tmp_path):
    out, js = tmp_path / "e.csv", tmp_path / "e.json"
    assert run("eval", "--scenes", scenes, "--out", out, "--json", js, "-k", 2) == 0
    row = next(csv.DictReader(open(out)))
    assert all(np.isfinite(float(v)) for v in row.values())
    assert json.loads(js.read_text())["ade"] == pytest.approx(float(row["ade"]))


def test_eval_rotated_baseline_is_invariant(scenes, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run("eval", "--scenes", scenes, "--out", a, "-k", 2) == 0
    assert run("eval", "--scenes", scenes, "--out", b, "-k", 2, "--rotate-test", 37) == 0
    ra, rb = next(csv.DictReader(open(a))), next(csv.DictReader(open(b)))
    for c in ("ade", "fde", "nll", "mrs", "cov_s1"):
        assert float(rb[c]) == pytest.approx(float(ra[c]), rel=1e-8)


def test_eval_with_model_and_horizon_mismatch(scenes, tmp_path):
    m = tmp_path / "m.json"
    run("train", "--scenes", scenes, "--out", m, "--iterations", 1, *TINY)
    assert run("eval", "--scenes", scenes, "--model", m, "--out", tmp_path / "e.csv") == 0
    assert run("eval", "--scenes", scenes, "--model", m, "--out", tmp_path / "e.csv", "-k", 5) == 2


def test_conformal_outputs(tmp_path, capsys):
    cal, test = tmp_path / "cal.ndjson", tmp_path / "test.ndjson"
    run("gen", "--out", cal, "--scenes", 100, "--seed", 1, "-t", 3, "-k", 4)
    run("gen", "--out", test, "--scenes", 50, "--seed", 2, "-t", 3, "-k", 4)
    out, rep = tmp_path / "c.json", tmp_path / "r.json"
    assert run("conformal", "--cal", cal, "--test", test, "--out", out, "--report", rep, "-k", 4) == 0
    doc = json.loads(out.read_text())
    assert len(doc["gamma"]) == 4 and all(g >= 0 for g in doc["gamma"])
    assert json.loads(rep.read_text())["alpha_step"] == pytest.approx(0.025)
    assert run("conformal", "--cal", cal, "--test", test, "--out", out, "-k", 4, "--correction", "none") == 0
    assert json.loads(out.read_text())["correction"] == "none"


def test_conformal_too_few_calibration_scenes(tmp_path, capsys):
    cal = tmp_path / "cal.ndjson"
    run("gen", "--out", cal, "--scenes", 5, "-t", 3, "-k", 4)
    assert run("conformal", "--cal", cal, "--test", cal, "--out", tmp_path / "c.json", "-k", 4) == 2
    assert "at least" in capsys.readouterr().err
