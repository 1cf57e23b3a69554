import json
import subprocess
import sys

import numpy as np
import pytest

from blindspot.cli import main
from blindspot.energy import ClassifierHead
from blindspot.linalg import write_matrix
from blindspot.trainer import MlpModel, save_model


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(autouse=True)
def no_env_seed(monkeypatch):
    monkeypatch.delenv("FEVER_SEED", raising=False)


class TestAudit:
    def test_axis_fixture(self, tmp_path, capsys):
        p = tmp_path / "w.txt"
        write_matrix(p, [[1, 0], [0, 1], [0, 0]])
        code, out, err = run(["audit", str(p)], capsys)
        assert code == 0
        assert json.loads(out) == {"rank": 2, "nullity": 1, "sigma_min": 1.0, "sigma_max": 1.0, "kappa": 1.0}
        assert "seed: 0" in err

    def test_identity(self, tmp_path, capsys):
        p = tmp_path / "i.txt"
        write_matrix(p, np.eye(3))
        code, out, _ = run(["audit", str(p)], capsys)
        assert code == 0 and json.loads(out)["nullity"] == 0

    def test_cifar_shaped_head(self, tmp_path, capsys):
        p = tmp_path / "w.txt"
        write_matrix(p, np.random.default_rng(10).standard_normal((128, 10)))
        code, out, _ = run(["audit", str(p)], capsys)
        doc = json.loads(out)
        assert code == 0 and doc["rank"] == 10 and doc["nullity"] == 118

    def test_parse_error_names_line(self, tmp_path, capsys):
        p = tmp_path / "bad.txt"
        p.write_text("2 2\n1 0\n0 x\n")
        code, _, err = run(["audit", str(p)], capsys)
        assert code == 2 and "line 3" in err

    def test_missing_file(self, tmp_path, capsys):
        assert run(["audit", str(tmp_path / "nope.txt")], capsys)[0] == 2

    def test_zero_matrix(self, tmp_path, capsys):
        p = tmp_path / "z.txt"
        write_matrix(p, np.zeros((3, 2)))
        assert run(["audit", str(p)], capsys)[0] == 3


@pytest.fixture()
def diag_model(tmp_path):
    p = tmp_path / "diag.json"
    save_model(MlpModel([], ClassifierHead(np.array([[3.0, 0.0], [0.0, 2.0], [0.0, 0.0]]))), p)
    return p


@pytest.fixture(scope="module")
def nsr_model(tmp_path_factory):
    d = tmp_path_factory.mktemp("nsr")
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"seed": 1, "train": {"epochs": 3, "nsr_r": 2}}))
    out = d / "model.json"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return out


class TestAttack:
    def test_full_rank_nsr_model_has_no_null_space(self, nsr_model, capsys):
        code, _, err = run(["attack", str(nsr_model), "--kind", "null-space", "--d-b", "1"], capsys)
        assert code == 4 and "NoNullSpace" in err

    def test_lsv_on_diagonal_head(self, diag_model, tmp_path, capsys):
        out = tmp_path / "a.json"
        code, _, _ = run(["attack", str(diag_model), "--kind", "lsv", "--d-b", "4", "--out", str(out)], capsys)
        doc = json.loads(out.read_text())
        assert code == 0
        assert doc["kind"] == "LeastSingular"
        assert doc["logit_shift_norm"] == 8.0

    def test_null_space_on_diagonal_head(self, diag_model, capsys):
        code, out, _ = run(["attack", str(diag_model), "--kind", "null-space", "--d-b", "2",
                            "--features", "1,2,3", "--seed", "5"], capsys)
        doc = json.loads(out)
        assert code == 0 and abs(abs(doc["delta"][2]) - 2.0) < 1e-12
        assert doc["energy_before"] == doc["energy_after"]

    def test_repeat_is_byte_identical(self, nsr_model, tmp_path, capsys):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        for p in (a, b):
            assert main(["attack", str(nsr_model), "--kind", "random", "--d-b", "3", "--seed", "7",
                         "--out", str(p)]) == 0
        assert a.read_bytes() == b.read_bytes()

    @pytest.mark.parametrize("extra", [["--d-b", "0"], ["--d-b", "1", "--features", "1,2"],
                                       ["--d-b", "1", "--features", "a,b,c"]])
    def test_bad_inputs(self, diag_model, capsys, extra):
        assert run(["attack", str(diag_model), "--kind", "lsv", *extra], capsys)[0] == 2

    def test_bad_model_file(self, tmp_path, capsys):
        p = tmp_path / "m.json"
        p.write_text("[]")
        assert run(["attack", str(p), "--kind", "lsv", "--d-b", "1"], capsys)[0] == 2


class TestTrain:
    def test_writes_model_and_reports_seed(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"train": {"epochs": 2}}))
        code, out, err = run(["train", "--config", str(cfg), "--seed", "3",
                              "--out", str(tmp_path / "m.json")], capsys)
        doc = json.loads(out)
        assert code == 0 and doc["seed"] == 3 and len(doc["epochs"]) == 2
        assert "seed: 3" in err
        assert (tmp_path / "m.json").exists()

    def test_divergence_exit_code(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"train": {"epochs": 3, "learning_rate": 1e100}}))
        with np.errstate(all="ignore"):
            assert run(["train", "--config", str(cfg)], capsys)[0] == 5

    def test_bad_config(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"train": {"lambda_lsv": 1, "lambda_cn": 1}}))
        assert run(["train", "--config", str(cfg)], capsys)[0] == 2


class TestExperiment:
    def test_default_config(self, tmp_path, capsys):
        code, out, err = run(["experiment", "--out-dir", str(tmp_path)], capsys)
        assert code == 0
        assert json.loads(out)["diverged"] == []
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["seed"] == 0 and len(report["variants"]) == 4
        assert all(len(v["metrics"]) >= 3 for v in report["variants"])
        assert (tmp_path / "energies.csv").exists()
        assert "seed: 0" in err

    def test_seed_override_and_env(self, tmp_path, capsys, monkeypatch):
        assert run(["experiment", "--out-dir", str(tmp_path / "a"), "--seed", "4"], capsys)[0] == 0
        assert json.loads((tmp_path / "a" / "report.json").read_text())["seed"] == 4
        monkeypatch.setenv("FEVER_SEED", "6")
        code, _, err = run(["experiment", "--out-dir", str(tmp_path / "b")], capsys)
        assert code == 0 and "seed: 6" in err
        assert json.loads((tmp_path / "b" / "report.json").read_text())["seed"] == 6

    def test_invalid_config(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"variants": [{"name": "baseline"}]}))
        assert run(["experiment", "--config", str(cfg), "--out-dir", str(tmp_path)], capsys)[0] == 2
        cfg.write_text("{")
        assert run(["experiment", "--config", str(cfg), "--out-dir", str(tmp_path)], capsys)[0] == 2


def test_check_grads(capsys):
    code, out, err = run(["check-grads", "--seed", "2"], capsys)
    doc = json.loads(out)
    assert code == 0 and "seed: 2" in err
    assert doc["lsv_penalty"]["max_rel_err"] < 1e-5
    assert doc["cn_penalty"]["max_rel_err"] < 1e-5
    assert doc["micro_model"]["max_rel_err"] < 1e-4


def test_bad_env_seed(capsys, monkeypatch):
    monkeypatch.setenv("FEVER_SEED", "abc")
    assert run(["check-grads"], capsys)[0] == 2


def test_unknown_flag_rejected(capsys):
    with pytest.raises(SystemExit) as info:
        main(["audit", "x.txt", "--frobnicate"])
    assert info.value.code == 2


def test_console_script(tmp_path):
    p = tmp_path / "w.txt"
    write_matrix(p, np.eye(2))
    proc = subprocess.run([sys.executable, "-m", "blindspot.cli", "audit", str(p)],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["rank"] == 2
    assert proc.stderr.strip().splitlines()[0] == "seed: 0"
