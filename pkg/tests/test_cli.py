import hashlib
import json

import pytest

from fairlatent.cli import main
from fairlatent.metrics import FairnessReport


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(d / "d.fle"), "--n", "500", "--d", "8"]) == 0
    assert main(["train", "--data", str(d / "d.fle"), "--out", str(d / "run"), "--epochs", "2",
                 "--d-y", "4", "--d-s", "4"]) == 0
    return d


def test_synth_prints_correlation(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "a.fle"), "--n", "10000", "--rho", "0.8"]) == 0
    out = dict(line.split("=") for line in capsys.readouterr().out.split())
    assert abs(float(out["corr_y_s0"]) - 0.8) < 0.03
    assert (tmp_path / "a.fle.config.json").exists()


def test_synth_same_seed_same_hash(tmp_path):
    for name in ("a", "b"):
        main(["synth", "--out", str(tmp_path / f"{name}.fle"), "--n", "200", "--seed", "3"])
    assert _sha(tmp_path / "a.fle") == _sha(tmp_path / "b.fle")


def test_synth_bad_rho_exit_2(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "a.fle"), "--rho", "2"]) == 2


def test_train_missing_data_exit_2(tmp_path):
    assert main(["train", "--out", str(tmp_path / "r")]) == 2


def test_train_writes_outputs(workdir):
    run = workdir / "run"
    assert {"checkpoint.flck", "log.csv", "config.json"} <= {p.name for p in run.iterdir()}
    header = (run / "log.csv").read_text().splitlines()[0].split(",")
    assert {"epoch", "eo", "dp", "wga", "acc", "loss_total"} <= set(header)
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["train"]["d_y"] == 4


def test_train_inn_ablation_flags(tmp_path, workdir):
    out = tmp_path / "inn"
    assert main(["train", "--data", str(workdir / "d.fle"), "--out", str(out), "--epochs", "1",
                 "--ablation", "inn"]) == 0
    flags = json.loads((out / "config.json").read_text())["train"]["flags"]
    assert not any(flags[k] for k in ("use_dg", "use_eq", "use_di", "use_g", "use_decompose"))


def test_unknown_config_key_exit_2(tmp_path, workdir):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"epochs": 1, "bogus": 3}}))
    assert main(["train", "--data", str(workdir / "d.fle"), "--out", str(tmp_path / "r"), "--config", str(cfg)]) == 2


def test_config_file_applied(tmp_path, workdir):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"epochs": 1, "loss": {"lambda_di": 3}}, "partition": {"d_y": 5, "d_s": 3}}))
    assert main(["train", "--data", str(workdir / "d.fle"), "--out", str(tmp_path / "r"), "--config", str(cfg)]) == 0
    written = json.loads((tmp_path / "r" / "config.json").read_text())["train"]
    assert written["loss"]["lambda_di"] == 3 and written["d_y"] == 5


def test_eval_matches_training_log(workdir, capsys):
    capsys.readouterr()
    assert main(["eval", "--data", str(workdir / "d.fle"), "--ckpt", str(workdir / "run" / "checkpoint.flck"),
                 "--split", "val"]) == 0
    rep = FairnessReport.from_text(capsys.readouterr().out, prefix="label.")
    lines = (workdir / "run" / "log.csv").read_text().splitlines()
    header, last = lines[0].split(","), lines[-1].split(",")
    row = dict(zip(header, map(float, last)))
    for k in ("eo", "dp", "wga", "acc"):
        assert abs(100 * getattr(rep, k) - row[k]) < 1e-6  # both printed to fixed decimals


def test_eval_bad_file_exit_3(tmp_path, workdir):
    bad = tmp_path / "bad.fle"
    bad.write_bytes((workdir / "d.fle").read_bytes()[:50])
    assert main(["eval", "--data", str(bad), "--ckpt", str(workdir / "run" / "checkpoint.flck")]) == 3


def test_counterfact_figure4_right(tmp_path, workdir, capsys):
    capsys.readouterr()
    assert main(["counterfact", "--data", str(workdir / "d.fle"), "--ckpt", str(workdir / "run" / "checkpoint.flck"),
                 "--mode", "figure4-right", "--alpha-grid=-3,-1,0,1,3", "--n-samples", "100",
                 "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "alpha,proportion" and len(out) == 7 and out[-1].startswith("slope=")
    assert (tmp_path / "figure4_right_fit.csv").read_text().startswith("slope,intercept,se")


def test_counterfact_alpha_zero_only(tmp_path, workdir):
    assert main(["counterfact", "--data", str(workdir / "d.fle"), "--ckpt", str(workdir / "run" / "checkpoint.flck"),
                 "--alpha-grid", "0", "--n-points", "3", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "trajectory.csv").read_text().splitlines()[1:]
    assert len(rows) == 3 and all(r.startswith("0,") for r in rows)


def test_counterfact_figure4_left(tmp_path, workdir):
    assert main(["counterfact", "--data", str(workdir / "d.fle"), "--ckpt", str(workdir / "run" / "checkpoint.flck"),
                 "--mode", "figure4-left", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "figure4_left.csv").read_text().startswith("alpha,misclassification")


@pytest.mark.parametrize("check", ["gradcheck", "jensen", "nce"])
def test_diag_checks_pass(check, capsys):
    assert main(["diag", "--check", check]) == 0
    assert "PASS" in capsys.readouterr().out


def test_diag_ib_runs(workdir, capsys):
    code = main(["diag", "--check", "ib", "--ckpt", str(workdir / "run" / "checkpoint.flck"),
                 "--data", str(workdir / "d.fle")])
    assert code in (0, 1)
    assert capsys.readouterr().out.startswith("ib ")


def test_diag_unknown_check_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["diag", "--check", "bogus"])
    assert exc.value.code == 2
