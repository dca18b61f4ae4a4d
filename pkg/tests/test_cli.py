"""End-to-end command-line behaviour on tiny configurations."""

import json
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp

from stinla.cli import main
from stinla.config import ConfigError, load_config
from stinla.dataio import read_sparse, write_sparse


def write_config(path, out_dir, **over):
    values = {
        "n_processes": 1,
        "n_spatial": 5,
        "n_time": 4,
        "n_fixed": 1,
        "observations_per_process": 40,
        "theta0": "0.1, 0.1, 0.2, 0.5",
        "gtol": "1e-3",
        "ftol": "1e-10",
        "max_iter": 60,
        "seed": 1,
        "partitions": 1,
        "lb": 1.0,
    }
    values.update(over)
    text = f"""
[model]
n_processes = {values["n_processes"]}
n_spatial = {values["n_spatial"]}
n_time = {values["n_time"]}
n_fixed = {values["n_fixed"]}
synthetic = true
observations_per_process = {values["observations_per_process"]}

[theta]
theta0 = {values["theta0"]}

[optimizer]
gtol = {values["gtol"]}
ftol = {values["ftol"]}
max_iter = {values["max_iter"]}

[parallel]
workers = 1
partitions = {values["partitions"]}
lb = {values["lb"]}

[run]
seed = {values["seed"]}

[output]
out_dir = {out_dir}
"""
    path.write_text(text)
    return path


class TestConfig:
    def test_round_trip_and_overrides(self, tmp_path):
        cfg = write_config(tmp_path / "run.ini", tmp_path / "out", seed=9)
        config = load_config(cfg, {"seed": 11, "workers": 4})
        assert config.seed == 11
        assert config.workers == 4
        assert config.n_spatial == 5
        np.testing.assert_allclose(config.theta0, [0.1, 0.1, 0.2, 0.5])

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[model]\nn_procesess = 3\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_partition_feasibility_checked(self, tmp_path):
        cfg = write_config(tmp_path / "run.ini", tmp_path / "out", partitions=3)
        with pytest.raises(ConfigError):
            load_config(cfg)  # n_time=4 < 2*3

    def test_theta_dimension_checked(self, tmp_path):
        cfg = write_config(tmp_path / "run.ini", tmp_path / "out", theta0="1, 2")
        with pytest.raises(ConfigError):
            load_config(cfg)


class TestFitCommand:
    def test_fit_writes_outputs_and_figures(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path / "run.ini", out)
        code = main(["fit", "--config", str(cfg)])
        assert code == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["status"].startswith("converged")
        assert len(summary["theta_mode"]) == 4
        for name in ("latent.csv", "trace.csv", "trace.png", "latent.png"):
            assert (out / name).exists()
        table = np.genfromtxt(out / "latent.csv", delimiter=",", names=True)
        assert np.all(table["sd"] > 0)
        assert table.shape[0] == 21

    def test_rerun_is_reproducible(self, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        cfg_a = write_config(tmp_path / "a.ini", out_a)
        cfg_b = write_config(tmp_path / "b.ini", out_b)
        assert main(["fit", "--config", str(cfg_a)]) == 0
        assert main(["fit", "--config", str(cfg_b)]) == 0
        assert (out_a / "summary.json").read_bytes() == (out_b / "summary.json").read_bytes()
        assert (out_a / "latent.csv").read_bytes() == (out_b / "latent.csv").read_bytes()
        # trace rows are identical except wall-clock seconds
        rows_a = (out_a / "trace.csv").read_text().splitlines()
        rows_b = (out_b / "trace.csv").read_text().splitlines()
        strip = lambda rows: [",".join(r.split(",")[:-1]) for r in rows]
        assert strip(rows_a) == strip(rows_b)

    def test_infeasible_partitioning_is_config_error(self, tmp_path):
        cfg = write_config(tmp_path / "run.ini", tmp_path / "out", partitions=3)
        assert main(["fit", "--config", str(cfg)]) == 2

    def test_non_convergence_exit_code(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path / "run.ini", out, max_iter=1, gtol="1e-12", ftol="1e-16")
        with pytest.warns(UserWarning):
            code = main(["fit", "--config", str(cfg)])
        assert code == 3
        assert (out / "summary.json").exists()

    def test_partitioned_fit_matches_sequential(self, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        cfg_a = write_config(tmp_path / "a.ini", out_a)
        cfg_b = write_config(tmp_path / "b.ini", out_b, partitions=2)
        assert main(["fit", "--config", str(cfg_a)]) == 0
        assert main(["fit", "--config", str(cfg_b)]) == 0
        a = json.loads((out_a / "summary.json").read_text())
        b = json.loads((out_b / "summary.json").read_text())
        np.testing.assert_allclose(a["theta_mode"], b["theta_mode"], atol=1e-6)
        np.testing.assert_allclose(
            a["logpost_at_mode"], b["logpost_at_mode"], rtol=1e-8
        )

    def test_workers_do_not_change_results(self, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        cfg_a = write_config(tmp_path / "a.ini", out_a)
        cfg_b = write_config(tmp_path / "b.ini", out_b)
        assert main(["fit", "--config", str(cfg_a), "--workers", "1"]) == 0
        assert main(["fit", "--config", str(cfg_b), "--workers", "8"]) == 0
        a = json.loads((out_a / "summary.json").read_text())
        b = json.loads((out_b / "summary.json").read_text())
        assert a["theta_mode"] == b["theta_mode"]
        assert a["logpost_at_mode"] == b["logpost_at_mode"]


class TestSynthAndFileIngestion:
    def test_synth_then_fit_from_files(self, tmp_path):
        out = tmp_path / "data"
        cfg = write_config(tmp_path / "run.ini", out, theta0="0.2, 0.0, 0.3, 0.8")
        assert main(["synth", "--config", str(cfg)]) == 0
        for name in ("spatial_mass.mtx", "design_0.mtx", "observations_0.csv", "model.ini"):
            assert (out / name).exists()
        code = main(["fit", "--config", str(out / "model.ini"), "--out-dir", str(tmp_path / "fit")])
        assert code == 0
        summary = json.loads((tmp_path / "fit" / "summary.json").read_text())
        assert summary["status"].startswith("converged")


class TestBundledConfigs:
    def test_bundled_univariate_example_converges(self, tmp_path):
        cfg = Path(__file__).resolve().parent.parent / "configs" / "univariate.ini"
        out = tmp_path / "runs"
        code = main(["fit", "--config", str(cfg), "--out-dir", str(out)])
        assert code == 0
        summary = json.loads((out / "summary.json").read_text())
        # "converged" is the gradient-tolerance status
        assert summary["status"] == "converged"
        trace = np.genfromtxt(out / "trace.csv", delimiter=",", names=True)
        assert trace["grad_norm"][-1] <= 1e-3


class TestPredictCommand:
    def test_identity_design_echoes_latent_means(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path / "run.ini", out)
        assert main(["fit", "--config", str(cfg)]) == 0
        table = np.genfromtxt(out / "latent.csv", delimiter=",", names=True)
        dim = table.shape[0]
        design_path = tmp_path / "identity.mtx"
        write_sparse(design_path, sp.identity(dim, format="csr"))
        code = main(
            ["predict", "--config", str(cfg), "--design", str(design_path)]
        )
        assert code == 0
        pred = np.genfromtxt(out / "predictions.csv", delimiter=",", names=True)
        np.testing.assert_allclose(pred["mean"], table["mean"], atol=1e-12)
        assert (out / "predictions.png").exists()

    def test_selector_rows(self, tmp_path):
        out = tmp_path / "out"
        cfg = write_config(tmp_path / "run.ini", out)
        assert main(["fit", "--config", str(cfg)]) == 0
        table = np.genfromtxt(out / "latent.csv", delimiter=",", names=True)
        dim = table.shape[0]
        rows = sp.csr_matrix(
            (np.ones(2), (np.arange(2), np.array([3, 7]))), shape=(2, dim)
        )
        design_path = tmp_path / "rows.mtx"
        write_sparse(design_path, rows)
        assert main(["predict", "--config", str(cfg), "--design", str(design_path)]) == 0
        pred = np.genfromtxt(out / "predictions.csv", delimiter=",", names=True)
        np.testing.assert_allclose(pred["mean"], table["mean"][[3, 7]], atol=1e-12)

    def test_missing_latent_is_config_error(self, tmp_path):
        cfg = write_config(tmp_path / "run.ini", tmp_path / "nowhere")
        design_path = tmp_path / "identity.mtx"
        write_sparse(design_path, sp.identity(3, format="csr"))
        assert main(["predict", "--config", str(cfg), "--design", str(design_path)]) == 2


class TestBenchmarkCommand:
    def test_benchmark_csv_schema_and_sweeps(self, tmp_path):
        out = tmp_path / "bench"
        cfg = tmp_path / "bench.ini"
        cfg.write_text(
            f"""
[benchmark]
n_blocks = 16
block_size = 3
arrow_size = 2
partitions = 1, 2, 4
lb_values = 1.0, 1.6

[run]
seed = 3

[output]
out_dir = {out}
"""
        )
        assert main(["benchmark", "--config", str(cfg)]) == 0
        text = (out / "benchmark.csv").read_text().splitlines()
        assert text[0] == "routine,P,lb,n,b,a,phase,seconds,flop_count"
        rows = [line.split(",") for line in text[1:]]
        ps = {int(r[1]) for r in rows}
        lbs = {float(r[2]) for r in rows}
        assert {1, 2, 4} <= ps
        assert {1.0, 1.6} <= lbs
        routines = {r[0] for r in rows}
        assert {"factorize", "factorize_bt", "solve", "selected_invert"} <= routines
        assert (out / "benchmark.png").exists()

    def test_work_ratio_matches_cost_model(self, tmp_path):
        out = tmp_path / "bench"
        cfg = tmp_path / "bench.ini"
        cfg.write_text(
            f"""
[benchmark]
n_blocks = 32
block_size = 4
arrow_size = 4
partitions = 1

[run]
seed = 5

[output]
out_dir = {out}
"""
        )
        assert main(["benchmark", "--config", str(cfg)]) == 0
        rows = (out / "benchmark.csv").read_text().splitlines()[1:]
        flops = {}
        for line in rows:
            parts = line.split(",")
            if int(parts[1]) == 1:
                flops[parts[0]] = float(parts[8])
        ratio = flops["factorize"] / flops["factorize_bt"]
        assert abs(ratio - 2.0) / 2.0 < 0.10  # 1 + (a/b)**3 with a == b


class TestValidateCommand:
    def test_validate_passes_on_default_seed(self, capsys):
        assert main(["validate", "--seed", "1"]) == 0
        out = capsys.readouterr().out
        assert out.count("[PASS]") >= 6
        assert "[FAIL]" not in out

    def test_validate_seed_sweep(self):
        for seed in range(10):
            assert main(["validate", "--seed", str(seed)]) == 0

    def test_corrupted_permutation_fails_checks(self):
        from stinla.validate import run_validation

        results = run_validation(1, corrupt_permutation=True)
        failed = {r.name for r in results if not r.passed}
        assert "permutation_similarity" in failed
        assert "objective_dense_oracle" in failed

    def test_failed_property_exit_code(self, monkeypatch):
        from stinla import cli
        from stinla.validate import CheckResult

        monkeypatch.setattr(
            cli,
            "run_validation",
            lambda seed: [CheckResult("stub_property", False, "forced failure")],
        )
        assert main(["validate", "--seed", "1"]) == 4


def test_matrix_market_round_trip(tmp_path, rng):
    mat = sp.random(6, 9, density=0.4, random_state=np.random.RandomState(0)).tocsr()
    path = tmp_path / "m.mtx"
    write_sparse(path, mat)
    back = read_sparse(path)
    np.testing.assert_allclose(back.toarray(), mat.toarray(), atol=1e-15)
