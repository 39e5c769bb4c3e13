import json
import subprocess
import sys

import pytest

from xmodal.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main, selftest_checks

TINY = {
    "seeds": [0],
    "data": {"synth": {"n": 90}},
    "optimizer": {"epochs": 3, "teacher_epochs": 3, "patience": 2},
    "model": {"hidden": 6, "embed_dim": 4},
    "acquisition": {"ratio": 0.2, "rounds": 1},
    "budgets": [0.5, 1.0],
}


def write_config(tmp_path, mode, **kw):
    path = tmp_path / f"{mode}.json"
    path.write_text(json.dumps({"mode": mode, **TINY, **kw}))
    return path


class TestExitCodes:
    def test_usage_error(self, capsys):
        assert main(["kd", "--bogus"]) == EXIT_CONFIG
        assert main([]) == EXIT_CONFIG

    def test_unknown_config_key(self, tmp_path):
        assert main(["kd", "--config", str(write_config(tmp_path, "kd", extra=1))]) == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path, capsys):
        path = tmp_path / "nope.json"
        assert main(["kd", "--config", str(path)]) == EXIT_CONFIG
        assert str(path) in capsys.readouterr().err

    def test_mode_mismatch(self, tmp_path, capsys):
        assert main(["al", "--config", str(write_config(tmp_path, "kd"))]) == EXIT_CONFIG
        assert "does not match" in capsys.readouterr().err

    def test_bad_jobs(self, tmp_path):
        assert main(["kd", "--config", str(write_config(tmp_path, "kd")), "--jobs", "0"]) == EXIT_CONFIG

    def test_missing_csv_is_runtime(self, tmp_path):
        cfg = write_config(tmp_path, "kd", data={"csv": {"student": "a.csv", "teacher": "b.csv",
                                                         "labels": "c.csv"}})
        assert main(["kd", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_RUNTIME

    def test_success_writes_artifacts(self, tmp_path):
        out = tmp_path / "o"
        assert main(["kd", "--config", str(write_config(tmp_path, "kd")), "--out", str(out)]) == EXIT_OK
        assert sorted(p.name for p in out.iterdir()) == ["history_0.csv", "results.csv", "summary.json"]


class TestOptions:
    def test_seed_override(self, tmp_path):
        out = tmp_path / "o"
        main(["kd", "--config", str(write_config(tmp_path, "kd")), "--seed", "7", "--out", str(out)])
        assert (out / "history_7.csv").exists()
        assert json.loads((out / "summary.json").read_text())["config"]["seeds"] == [7]

    def test_env_overrides_out(self, tmp_path, monkeypatch):
        monkeypatch.setenv("XMODAL_OUT", str(tmp_path / "env"))
        main(["kd", "--config", str(write_config(tmp_path, "kd")), "--out", str(tmp_path / "flag")])
        assert (tmp_path / "env" / "results.csv").exists()
        assert not (tmp_path / "flag").exists()

    def test_gradcheck(self, tmp_path):
        assert main(["gradcheck", "--instances", "1", "--out", str(tmp_path)]) == EXIT_OK
        doc = json.loads((tmp_path / "gradcheck.json").read_text())
        assert doc["passed"] and doc["max_error"] < 1e-4

    def test_selftest(self, tmp_path, capsys):
        assert main(["selftest", "--out", str(tmp_path)]) == EXIT_OK
        assert "FAIL" not in capsys.readouterr().out
        assert all(row["passed"] for row in json.loads((tmp_path / "selftest.json").read_text()))

    def test_selftest_identities_are_exact(self):
        for name, ok, err in selftest_checks():
            assert ok and err <= 1e-9, name


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "xmodal.cli", "selftest"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.count("PASS") >= 7


@pytest.mark.parametrize("mode", ["al", "ablation", "label-efficiency"])
def test_other_modes_run(tmp_path, mode):
    out = tmp_path / "o"
    assert main([mode, "--config", str(write_config(tmp_path, mode)), "--out", str(out)]) == EXIT_OK
    assert (out / "results.csv").exists()
