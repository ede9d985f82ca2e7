from __future__ import annotations

import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from orderedwalks import cli, harness
from orderedwalks.harness import (
    AcceptanceFailure,
    Check,
    ConfigError,
    ExperimentConfig,
    run_experiment,
    tail_exponent_fit,
)
from orderedwalks.oracle import dp_survival
from orderedwalks.walk import simple_symmetric

SSRW2 = {"d": 2, "kind": "component-table", "components": [{"-1": 0.5, "1": 0.5}]}


def config(tmp_path, **kw):
    data = {"kind": "estimate-h", "law": SSRW2, "probes": [[0], [2], [4]],
            "c_grid": [0.2, 0.1, 0.05], "replicas": 20_000, "out": str(tmp_path / "out")}
    data.update(kw)
    return ExperimentConfig.from_dict(data)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_c_grid_must_decrease(self, tmp_path):
        with pytest.raises(ConfigError, match="strictly decreasing"):
            config(tmp_path, c_grid=[0.1, 0.2])
        with pytest.raises(ConfigError):
            config(tmp_path, c_grid=[0.1, 0.1])

    @pytest.mark.parametrize("change", [{"replicas": 0}, {"kind": "plot"}, {"c_grid": [0.0]},
                                        {"probes": [[1, 2]]}, {"forms": ["magic"]},
                                        {"seed_base": -1}, {"colour": "red"},
                                        {"law": {"d": 2, "kind": "lattice-pmf",
                                                 "atoms": [[[1, 1], 1.0]]}}])
    def test_invalid(self, tmp_path, change):
        with pytest.raises(ConfigError):
            config(tmp_path, **change)

    def test_hash_ignores_out_and_threads(self, tmp_path):
        a = config(tmp_path, out="x", threads=1)
        b = config(tmp_path, out="y", threads=4)
        c = config(tmp_path, replicas=20_001)
        assert a.config_hash == b.config_hash != c.config_hash
        assert len(a.config_hash) == 16

    def test_from_json(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"kind": "residual-scan", "law": SSRW2}))
        assert ExperimentConfig.from_json(p).kind == "residual-scan"
        with pytest.raises(ConfigError):
            ExperimentConfig.from_json(tmp_path / "missing.json")


class TestRunExperiment:
    def test_estimate_h(self, tmp_path):
        cfg = config(tmp_path)
        written = run_experiment(cfg)
        assert set(written) == {"estimates.csv", "summary.json", "manifest.json"}
        rows = read_csv(written["estimates.csv"])
        assert list(rows[0])[:3] == ["config_hash", "seed", "form"]
        assert {"y1", "c", "value", "std_error", "replicas", "censored_fraction"} <= set(rows[0])
        assert all(r["config_hash"] == cfg.config_hash and r["seed"] == "0" for r in rows)
        for y in ("2", "4"):
            col = [float(r["value"]) for r in rows
                   if r["form"] == "geometric-ratio" and r["y1"] == y]
            assert len(col) == 3 and col == sorted(col)
        zero = [r for r in rows if r["y1"] == "0"]
        assert all(float(r["value"]) == 1.0 for r in zero)

    def test_manifest(self, tmp_path):
        cfg = config(tmp_path)
        written = run_experiment(cfg)
        man = json.loads(written["manifest.json"].read_text())
        assert man["config_hash"] == cfg.config_hash and man["seed"] == 0
        assert {"numpy", "numba", "scipy", "python", "orderedwalks"} <= set(man["versions"])
        for name, digest in man["files"].items():
            if name != "manifest.json":
                assert hashlib.sha256(written[name].read_bytes()).hexdigest() == digest

    def test_byte_identical(self, tmp_path):
        outs = []
        for i, threads in enumerate((1, None)):
            cfg = config(tmp_path, out=str(tmp_path / f"run{i}"), threads=threads,
                         forms=["geometric-ratio", "excursion", "renewal"])
            outs.append(run_experiment(cfg))
        for name in outs[0]:
            assert outs[0][name].read_bytes() == outs[1][name].read_bytes()

    def test_seed_changes_output(self, tmp_path):
        a = run_experiment(config(tmp_path, out=str(tmp_path / "a")))
        b = run_experiment(config(tmp_path, out=str(tmp_path / "b"), seed_base=1))
        assert a["estimates.csv"].read_bytes() != b["estimates.csv"].read_bytes()

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(ConfigError):
            run_experiment(config(tmp_path, out=str(blocker / "sub")))

    def test_oracle_check(self, tmp_path):
        cfg = config(tmp_path, kind="oracle-check", c_grid=[0.2, 0.1], probes=[[2]],
                     truncation=2000)
        written = run_experiment(cfg)
        rows = read_csv(written["checks.csv"])
        assert len(rows) == 3 and all(r["passed"] == "1" for r in rows)

    def test_oracle_check_failure(self, tmp_path, monkeypatch):
        def failing(*args, **kw):
            return [Check("rigged", (2,), None, 10.0, 0.1, 1.0, 1.0, 1.0)]

        monkeypatch.setattr(harness, "oracle_checks", failing)
        cfg = config(tmp_path, kind="oracle-check")
        with pytest.raises(AcceptanceFailure):
            run_experiment(cfg)
        rows = read_csv(tmp_path / "out" / "checks.csv")
        assert rows[0]["passed"] == "0"

    def test_tail_exponent(self, tmp_path):
        cfg = config(tmp_path, kind="tail-exponent", n_max=10_000, window=[100, 10_000])
        written = run_experiment(cfg)
        summary = json.loads(written["summary.json"].read_text())
        lo, hi = summary["tail_fit"]["ci"]
        assert -0.6 <= summary["tail_fit"]["slope"] <= -0.4 and lo < hi
        rows = read_csv(written["survival.csv"])
        assert len(rows) == 10_001 and set(rows[0]) >= {"n", "p", "overflow_bound"}

    def test_conditioned(self, tmp_path):
        cfg = config(tmp_path, kind="conditioned-sample", x0=[0, 2], T=3, c=0.5, samples=2000)
        written = run_experiment(cfg)
        summary = json.loads(written["summary.json"].read_text())
        assert 0 < summary["tv"] < 1
        rows = read_csv(written["paths-h-transform.csv"])
        assert list(rows[0])[2:] == ["replica", "step", "x1", "x2", "killed"]
        assert len(rows) == 2000 * 4

    def test_residual_scan(self, tmp_path):
        cfg = config(tmp_path, kind="residual-scan", ymax=12)
        summary = json.loads(run_experiment(cfg)["summary.json"].read_text())
        assert summary["classification"] == "harmonic"


class TestTailFit:
    n = np.arange(1, 10_001, dtype=float)

    def test_exact_power_law(self):
        fit = tail_exponent_fit(self.n, self.n**-1.5, (100, 10_000))
        assert fit.slope == pytest.approx(-1.5, abs=1e-9)
        assert fit.ci[0] <= fit.slope <= fit.ci[1]
        assert fit.window == (100, 10_000)

    def test_rescaling_invariant(self):
        p = dp_survival(simple_symmetric(2), [2], 3000).curve
        n = np.arange(len(p))
        a = tail_exponent_fit(n[1:], p[1:], (50, 3000))
        b = tail_exponent_fit(n[1:], 1e-7 * p[1:], (50, 3000))
        assert abs(a.slope - b.slope) < 1e-12

    def test_burn_in(self):
        p = np.where(self.n < 500, 1.0, self.n**-2.0)
        fit = tail_exponent_fit(self.n, p, (10, 10_000), burn_in=500)
        assert fit.slope == pytest.approx(-2.0, abs=1e-9) and fit.window[0] == 500
        assert fit.n.min() >= 500

    def test_degenerate_window(self):
        with pytest.raises(ValueError, match="degenerate"):
            tail_exponent_fit(self.n, self.n**-1.0, (100, 105))

    def test_nonpositive(self):
        p = self.n**-1.0
        p[200] = 0.0
        with pytest.raises(ValueError):
            tail_exponent_fit(self.n, p, (100, 10_000), points=10_000)

    def test_noisy_ci(self):
        rng = np.random.default_rng(0)
        p = self.n**-0.5 * np.exp(rng.normal(0, 0.05, len(self.n)))
        fit = tail_exponent_fit(self.n, p, (10, 10_000))
        assert fit.ci[0] < -0.5 < fit.ci[1]


class TestCli:
    def run(self, *argv):
        return cli.main(list(argv))

    def test_success(self, tmp_path, capsys):
        out = tmp_path / "est"
        code = self.run("estimate-h", "--law", "ssrw:2", "--probe", "2", "--c-grid", "0.2,0.1",
                        "--replicas", "2000", "--out", str(out), "--threads", "1", "--seed", "3")
        assert code == 0
        rows = read_csv(out / "estimates.csv")
        assert {r["seed"] for r in rows} == {"3"}
        assert str(out / "estimates.csv") in capsys.readouterr().out

    def test_config_file(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"law": SSRW2, "ymax": 8}))
        assert self.run("residual-scan", "--config", str(cfg), "--out", str(tmp_path / "r")) == 0
        assert (tmp_path / "r" / "residuals.csv").exists()

    def test_sample_conditioned(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"law": SSRW2, "x0": [0, 2], "samples": 500, "c": 0.5}))
        assert self.run("sample-conditioned", "--config", str(cfg),
                        "--out", str(tmp_path / "s")) == 0
        assert (tmp_path / "s" / "paths-geometric-rejection.csv").exists()

    @pytest.mark.parametrize("argv", [
        ["estimate-h", "--law", "ssrw:2", "--c-grid", "0.1,0.2"],
        ["estimate-h", "--law", "ssrw:1"],
        ["estimate-h"],
        ["estimate-h", "--law", "ssrw:2", "--config", "/nonexistent.json"],
    ])
    def test_validation_exit_code(self, tmp_path, argv):
        assert self.run(*argv, "--out", str(tmp_path / "x")) == 2

    def test_acceptance_exit_code(self, tmp_path, monkeypatch):
        monkeypatch.setattr(harness, "oracle_checks",
                            lambda *a, **k: [Check("rigged", (2,), None, 9.0, 0.1, 1.0, 1.0, 1.0)])
        code = self.run("oracle-check", "--law", "ssrw:2", "--probe", "2", "--out",
                        str(tmp_path / "o"))
        assert code == 3

    def test_module_entry_point(self):
        res = subprocess.run([sys.executable, "-m", "orderedwalks.cli", "--help"],
                             capture_output=True, text=True)
        assert res.returncode == 0
        for sub in ("estimate-h", "oracle-check", "sample-conditioned", "tail-exponent",
                    "residual-scan"):
            assert sub in res.stdout
