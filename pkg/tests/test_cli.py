import csv
import json

import numpy as np
import pytest

from pfode import __version__
from pfode.cli import FAMILY_DEFAULTS, main, read_sweep_csv, run_sweep, worker_count, write_sweep_csv
from pfode.schedules import VEExponential, VPConstant


def run(tmp_path, *argv, name="out"):
    out = tmp_path / name
    return main([*argv, "--out", str(out)]), out


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


class TestSample:
    def test_basic_run(self, tmp_path):
        code, out = run(tmp_path, "sample", "--family", "vp_const", "--b", "2", "--target", "gauss", "--d", "2",
                        "--T", "6", "--K", "600", "--n", "10000", "--seed", "7")
        assert code == 0
        data = np.loadtxt(out / "samples.csv", delimiter=",", skiprows=1)
        assert data.shape == (10_000, 2)
        m = manifest(out)
        assert m["seed"] == 7 and m["version"] == __version__ and m["config"]["K"] == 600

    def test_manifest_reproduces_run(self, tmp_path):
        code, out = run(tmp_path, "sample", "--T", "2", "--K", "40", "--n", "50", "--seed", "3", "--M", "0.1")
        assert code == 0
        cfg = manifest(out)["config"]
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({k: v for k, v in cfg.items() if k != "out"}))
        code, again = run(tmp_path, "sample", "--config", str(cfg_path), name="again")
        assert code == 0
        assert (out / "samples.csv").read_bytes() == (again / "samples.csv").read_bytes()

    def test_affine_mode(self, tmp_path):
        code, out = run(tmp_path, "sample", "--T", "3", "--K", "30", "--mode", "affine", "--variance", "2")
        assert code == 0
        law = json.loads((out / "terminal_law.json").read_text())
        assert len(law["mean"]) == 2

    def test_euler(self, tmp_path):
        assert run(tmp_path, "sample", "--T", "2", "--K", "40", "--n", "10", "--method", "euler")[0] == 0

    def test_missing_flag(self, tmp_path, capsys):
        code, _ = run(tmp_path, "sample", "--K", "10")
        assert code == 2
        err = capsys.readouterr().err
        assert "usage" in err and "--T" in err

    @pytest.mark.parametrize("bad", [["--K", "0"], ["--K", "-3"], ["--n", "0"], ["--T", "-1"]])
    def test_bad_values(self, tmp_path, bad):
        argv = {"--T": "2", "--K": "10", "--n": "5"}
        argv.update(dict(zip(bad[::2], bad[1::2])))
        flat = [x for kv in argv.items() for x in kv]
        assert run(tmp_path, "sample", *flat)[0] == 2

    def test_parameter_for_wrong_family(self, tmp_path):
        assert run(tmp_path, "sample", "--family", "vp_const", "--rho", "2", "--T", "1", "--K", "5")[0] == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure(self, tmp_path, capsys):
        code, _ = run(tmp_path, "sample", "--family", "ve_exp", "--b", "5", "--T", "200", "--K", "10")
        assert code == 3
        assert "k=1" in capsys.readouterr().err


class TestBound:
    def test_prints_terms(self, tmp_path, capsys):
        code, out = run(tmp_path, "bound", "--T", "6", "--K", "600")
        assert code == 0
        text = capsys.readouterr().out
        for key in ("total", "init_error", "E1", "E2", "eta_bar", "gate_passed"):
            assert key in text
        report = json.loads((out / "bound.json").read_text())
        assert report["E2"] == 0.0 and report["gate_passed"]
        assert "E2          0\n" in text

    def test_gate(self, tmp_path, capsys):
        code, out = run(tmp_path, "bound", "--T", "6", "--K", "10")
        assert code == 4
        assert "outside theorem hypotheses" in capsys.readouterr().err
        assert json.loads((out / "bound.json").read_text())["gate_passed"] is False
        assert run(tmp_path, "bound", "--T", "6", "--K", "10", "--allow-ungated", name="ok")[0] == 0

    def test_deterministic(self, tmp_path):
        args = ("bound", "--family", "vp_linear", "--T", "3", "--K", "100", "--M", "0.1", "--per-step")
        _, a = run(tmp_path, *args, name="a")
        _, b = run(tmp_path, *args, name="b")
        assert (a / "bound.json").read_bytes() == (b / "bound.json").read_bytes()

    def test_non_gaussian_uses_estimate(self, tmp_path):
        code, out = run(tmp_path, "bound", "--target", "convolved1d", "--T", "2", "--K", "20", "--allow-ungated")
        assert code == 0
        assert json.loads((out / "bound.json").read_text())["L1_provenance"] == "estimated"

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure(self, tmp_path):
        assert run(tmp_path, "bound", "--family", "ve_exp", "--b", "5", "--T", "200", "--K", "10")[0] == 3


class TestValidate:
    def test_default_passes(self, tmp_path, capsys):
        code, out = run(tmp_path, "validate")
        assert code == 0
        assert "FAIL" not in capsys.readouterr().out
        assert manifest(out)["result"]["failed"] == []

    def test_perturbed_score(self, tmp_path):
        assert run(tmp_path, "validate", "--M", "0.5")[0] == 0

    def test_corrupted_phi(self, tmp_path, capsys):
        code, out = run(tmp_path, "validate", "--corrupt-phi", "1.01")
        assert code == 1
        assert "FAIL  closed_form_phi" in capsys.readouterr().out
        assert "closed_form_phi" in manifest(out)["result"]["failed"]


class TestSweep:
    def test_single_family(self, tmp_path):
        code, out = run(tmp_path, "sweep", "--families", "vp_const", "--d", "4")
        assert code == 0
        rows = read_sweep_csv(out / "sweep.csv")
        assert len(rows) == 5 and all(r["reachable"] for r in rows)
        slope = manifest(out)["result"]["slopes"]["vp_const/d=4"]
        assert 1.0 <= slope <= 2.0
        assert (out / "sweep.svg").read_text().startswith("<svg")

    def test_two_families(self, tmp_path):
        code, out = run(tmp_path, "sweep", "--families", "vp_const,ve_exp", "--eps", "0.4,0.2", "--d", "4")
        assert code == 0
        with open(out / "comparison.csv") as fh:
            table = list(csv.DictReader(fh))
        assert len(table) == 2
        assert all(int(r["K_star_ve_exp"]) > int(r["K_star_vp_const"]) for r in table)

    def test_empty_eps(self, tmp_path):
        assert run(tmp_path, "sweep", "--eps", "")[0] == 2

    def test_unknown_family(self, tmp_path):
        assert run(tmp_path, "sweep", "--families", "vp_cosine")[0] == 2

    def test_csv_round_trip(self, tmp_path):
        rows = run_sweep({"vp_const": VPConstant(2.0), "ve_exp": VEExponential(1, 1)}, [0.4, 0.2], [1, 4], K_max=2000)
        assert any(not r["reachable"] for r in rows)
        write_sweep_csv(tmp_path / "s.csv", rows)
        back = read_sweep_csv(tmp_path / "s.csv")
        assert len(back) == len(rows)
        for a, b in zip(rows, back):
            assert set(a) == set(b)
            for key, value in a.items():
                if isinstance(value, float):
                    assert b[key] == pytest.approx(value, rel=1e-15, abs=0)
                else:
                    assert b[key] == value

    def test_derived_seeds(self):
        rows = run_sweep({"vp_const": VPConstant(2.0)}, [0.4, 0.2], [1, 2], seed=5)
        assert [r["seed"] for r in rows] == [5 ^ i for i in range(4)]


class TestConfig:
    def test_flags_override_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"T": 2.0, "K": 10, "n": 4, "d": 3}))
        code, out = run(tmp_path, "sample", "--config", str(cfg), "--K", "20")
        assert code == 0
        m = manifest(out)["config"]
        assert (m["K"], m["T"], m["d"]) == (20, 2.0, 3)

    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"T": 2.0, "K": 10, "nonsense": 1}))
        assert run(tmp_path, "sample", "--config", str(cfg))[0] == 2
        assert "nonsense" in capsys.readouterr().err

    def test_unreadable_file(self, tmp_path):
        assert run(tmp_path, "bound", "--config", str(tmp_path / "missing.json"))[0] == 2

    def test_no_command(self):
        assert main([]) == 2

    def test_version(self, capsys):
        assert main(["--version"]) == 0
        assert __version__ in capsys.readouterr().out

    def test_family_defaults_cover_all(self):
        assert set(FAMILY_DEFAULTS) == {"ve_exp", "ve_poly", "vp_const", "vp_linear", "vp_poly"}


@pytest.mark.parametrize("env, n, expected", [("2", 10, 2), ("8", 3, 3), (None, 1, 1)])
def test_worker_count(monkeypatch, env, n, expected):
    if env is None:
        monkeypatch.delenv("PFODE_THREADS", raising=False)
    else:
        monkeypatch.setenv("PFODE_THREADS", env)
    assert worker_count(n) == expected


def test_worker_count_rejects_garbage(monkeypatch):
    from pfode.errors import ConfigError

    monkeypatch.setenv("PFODE_THREADS", "many")
    with pytest.raises(ConfigError):
        worker_count(4)
