import csv
import hashlib
import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

from nmseg.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(root.rglob("*")):
        if f.is_file():
            h.update(str(f.relative_to(root)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


class TestOde:
    @pytest.mark.parametrize("method,slope,tol", [("euler", 1.0, 0.1), ("heun", 2.0, 0.15), ("leapfrog", 2.0, 0.2)])
    def test_convergence_slope(self, capsys, method, slope, tol):
        code, out, _ = run(capsys, "ode-convergence", "--method", method, "--deltas", "0.1,0.05,0.025,0.0125")
        rows = list(csv.DictReader(io.StringIO(out)))
        assert code == 0 and len(rows) == 4
        assert abs(float(rows[0]["slope"]) - slope) <= tol

    def test_convergence_threads_same_output(self, capsys):
        _, serial, _ = run(capsys, "ode-convergence", "--method", "heun", "--json")
        _, threaded, _ = run(capsys, "ode-convergence", "--method", "heun", "--json", "--threads", "3")
        assert json.loads(serial) == json.loads(threaded)

    def test_unknown_method(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["ode-convergence", "--method", "rk4"])
        assert info.value.code == 2
        assert "usage" in capsys.readouterr().err

    @pytest.mark.parametrize("deltas", ["0.1,abc,0.2", "0.1,0.05", "0.1,-0.05,0.025", "0.3,0.2,0.1"])
    def test_bad_deltas(self, capsys, deltas):
        try:
            code = main(["ode-convergence", "--deltas", deltas])
        except SystemExit as exc:
            code = exc.code
        assert code == 2

    def test_attractor(self, capsys):
        code, out, _ = run(capsys, "ode-attractor", "--trials", 10, "--json")
        doc = json.loads(out)
        assert code == 0 and doc["spread"] <= 1e-6
        assert doc["y_star"] == pytest.approx(0.65904, abs=1e-5)

    def test_attractor_zero_tol_fails(self, capsys):
        code, _, _ = run(capsys, "ode-attractor", "--trials", 10, "--tol", 0)
        assert code == 1

    def test_attractor_single_trial(self, capsys):
        code, out, _ = run(capsys, "ode-attractor", "--trials", 1, "--tol", 0, "--json")
        assert code == 0 and json.loads(out)["spread"] == 0.0


class TestAccounting:
    def test_compare_original_lmd(self, capsys):
        code, out, _ = run(capsys, "compare", "--config", CONFIGS / "desk-original.cfg",
                           "--config-b", CONFIGS / "desk-lmd.cfg", "--json")
        doc = json.loads(out)
        assert code == 0
        assert 25 <= doc["params_reduction_pct"] <= 35
        assert 45 <= doc["macs_reduction_pct"] <= 60

    def test_compare_self(self, capsys):
        code, out, _ = run(capsys, "compare", "--config", CONFIGS / "desk-eed.cfg", "--json")
        doc = json.loads(out)
        assert code == 0 and doc["params_reduction_pct"] == 0 and doc["macs_reduction_pct"] == 0

    def test_count_y_channel_sweep(self, capsys):
        totals = []
        for cy in (1, 3, 8):
            code, out, _ = run(capsys, "count", "--decoder", "eed", "--y-channels", cy, "--json")
            totals.append(json.loads(out)["totals"]["params"])
        assert totals[0] < totals[1] < totals[2]

    def test_count_csv_to_file(self, capsys, tmp_path):
        code, out, _ = run(capsys, "count", "--config", CONFIGS / "desk-hd.cfg", "--out", tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert code == 0 and out == ""
        assert lines[0] == "module,params,macs" and lines[-1].startswith("total,")

    def test_flag_overrides_config(self, capsys):
        _, a, _ = run(capsys, "count", "--config", CONFIGS / "desk-eed.cfg", "--json")
        _, b, _ = run(capsys, "count", "--config", CONFIGS / "desk-eed.cfg", "--decoder", "hd", "--json")
        assert json.loads(b)["totals"]["params"] > json.loads(a)["totals"]["params"]

    def test_missing_config(self, capsys, tmp_path):
        code, _, err = run(capsys, "count", "--config", tmp_path / "nope.cfg")
        assert code == 2 and "config" in err

    def test_bad_input_size(self, capsys):
        code, _, _ = run(capsys, "count", "--input-size", 60)
        assert code == 2


class TestGradcheck:
    def test_micro_eed(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--config", CONFIGS / "micro-eed.cfg", "--json")
        doc = json.loads(out)
        assert code == 0 and doc["max_relative_error"] < 1e-4

    def test_threshold_exit(self, capsys):
        code, _, _ = run(capsys, "gradcheck", "--config", CONFIGS / "micro-eed.cfg", "--threshold", -1)
        assert code == 1


class TestDataAndTraining:
    def test_gen_data_deterministic(self, capsys, tmp_path):
        for name in ("a", "b"):
            assert run(capsys, "gen-data", "--seed", 42, "--count", 2, "--out", tmp_path / name)[0] == 0
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_gen_data_threads_and_env_seed(self, capsys, tmp_path, monkeypatch):
        run(capsys, "gen-data", "--seed", 7, "--count", 5, "--size", 16, "--out", tmp_path / "serial")
        monkeypatch.setenv("NMSEG_SEED", "7")
        run(capsys, "gen-data", "--count", 5, "--size", 16, "--threads", 3, "--out", tmp_path / "threaded")
        assert tree_digest(tmp_path / "serial") == tree_digest(tmp_path / "threaded")

    def test_bad_env_seed(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("NMSEG_SEED", "abc")
        code, _, _ = run(capsys, "gen-data", "--count", 1, "--out", tmp_path)
        assert code == 2

    def test_train_zero_epochs(self, capsys, tmp_path):
        code, _, _ = run(capsys, "train", "--epochs", 0, "--count", 4, "--size", 16, "--out", tmp_path)
        assert code == 0
        assert (tmp_path / "history.csv").read_text() == "epoch,loss,miou,dsc,lr\n"
        assert json.loads((tmp_path / "manifest.json").read_text())["train"]["epochs"] == 0

    def test_train_then_eval(self, capsys, tmp_path):
        common = ["--channels", "4,8,16", "--count", 8, "--size", 16]
        code, out, _ = run(capsys, "train", *common, "--epochs", 1, "--out", tmp_path, "--json")
        assert code == 0 and json.loads(out)["epochs"] == 1
        assert (tmp_path / "best.nmck").exists()
        code, out, _ = run(capsys, "eval", *common, "--checkpoint", tmp_path / "best.nmck", "--json")
        doc = json.loads(out)
        assert code == 0 and 0 <= doc["miou"] <= 1 and 0 <= doc["dsc"] <= 1

    def test_eval_missing_checkpoint(self, capsys, tmp_path):
        code, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "none.nmck", "--count", 2)
        assert code == 1 and err

    def test_train_from_directory(self, capsys, tmp_path):
        run(capsys, "gen-data", "--count", 6, "--size", 16, "--out", tmp_path / "data")
        code, _, _ = run(capsys, "train", "--channels", "4,8", "--data", tmp_path / "data", "--epochs", 1,
                         "--out", tmp_path / "run")
        assert code == 0 and len((tmp_path / "run" / "history.csv").read_text().splitlines()) == 2


class TestExecutable:
    def test_usage_errors_exit_two(self):
        for argv in (["frobnicate"], ["count", "--no-such-flag"], []):
            proc = subprocess.run([sys.executable, "-m", "nmseg", *argv], capture_output=True, text=True)
            assert proc.returncode == 2, argv
            assert "usage" in proc.stderr

    def test_success_exit_zero(self):
        proc = subprocess.run([sys.executable, "-m", "nmseg", "count", "--json"], capture_output=True, text=True)
        assert proc.returncode == 0 and json.loads(proc.stdout)["totals"]["params"] > 0
