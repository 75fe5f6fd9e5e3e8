import os

import numpy as np
import pytest
from click.testing import CliRunner

from narxmpc.cli import load_controller_file, main
from narxmpc.config import load_config
from narxmpc.scenarios import read_log_csv, sample_profiles

from conftest import SMOKE_CONFIG


def invoke(args):
    return CliRunner().invoke(main, args, catch_exceptions=False)


class TestConfig:
    def test_benchmark_config_loads_with_table_values(self):
        cfg = load_config(os.path.join(os.path.dirname(__file__), "..",
                                       "configs", "benchmark.ini"))
        assert cfg.data.tau_s == 120.0
        assert cfg.data.u_min == 0.05 and cfg.data.u_max == 0.18
        assert cfg.training.lookback == 5 and cfg.training.hidden == (30,)
        assert cfg.controller.horizon == 50
        assert cfg.controller.r_e == 10.0 and cfg.controller.r_u == 0.1
        assert cfg.controller.q_xi == 1.0 and cfg.controller.q_theta == 1e-5
        refs = dict(cfg.scenario.reference)
        assert refs[18000.0] == 325.0      # the benchmark setpoint step
        assert 321.0 in refs.values()

    def test_profile_sampling(self):
        cfg = load_config(SMOKE_CONFIG)
        refs, dist = sample_profiles(cfg.scenario, cfg.data.tau_s)
        assert len(refs) == cfg.scenario.n_samples(cfg.data.tau_s)
        assert refs[0] == 317.0 and refs[-1] == 320.0
        assert np.all(dist[:, 0] == 298.0)

    def test_nonincreasing_reference_rejected(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[scenario]\nreference = 0:317, 0:318\nduration = 2400\n")
        with pytest.raises(ValueError):
            load_config(bad)


class TestCliPipeline:
    def test_artifacts_exist(self, smoke):
        assert os.path.exists(smoke.model)
        assert os.path.exists(smoke.controller)
        assert os.path.exists(smoke.runs["nominal"])
        run_dir = os.path.dirname(smoke.runs["nominal"])
        assert os.path.exists(os.path.join(run_dir, "metrics_nominal.csv"))
        assert os.path.exists(os.path.join(run_dir, "timing_nominal.csv"))
        assert os.path.exists(os.path.join(os.path.dirname(smoke.controller),
                                           "synthesis_report.txt"))
        assert os.path.exists(os.path.join(os.path.dirname(smoke.controller),
                                           "equilibria.csv"))

    def test_controller_file_round_trip(self, smoke):
        bundle = load_controller_file(smoke.controller)
        assert bundle.ocp.horizon == 20
        assert bundle.mu.shape == (1, 1)
        assert bundle.w_scaled > 0
        assert bundle.omega.dim == 10

    def test_check_log_passes(self, smoke):
        res = invoke(["check-log", smoke.runs["nominal"], "--model", smoke.model])
        assert res.exit_code == 0, res.output
        assert "all invariants hold" in res.output

    def test_check_log_flags_corruption(self, smoke, tmp_path):
        records = read_log_csv(smoke.runs["nominal"])
        bad = tmp_path / "bad.csv"
        with open(smoke.runs["nominal"]) as fh:
            lines = fh.readlines()
        parts = lines[3].split(",")
        parts[5] = "0.5"    # input far outside the actuator range
        lines[3] = ",".join(parts)
        bad.write_text("".join(lines))
        res = invoke(["check-log", str(bad), "--model", smoke.model])
        assert res.exit_code == 1
        assert "outside bounds" in res.output
        assert len(records) > 0

    def test_compare_single_and_multi(self, smoke, tmp_path):
        out = tmp_path / "cmp"
        res = invoke(["compare", smoke.runs["nominal"], "--config", smoke.config,
                      "--out", str(out), "--no-plot"])
        assert res.exit_code == 0, res.output
        assert (out / "comparison.csv").exists()
        assert (out / "comparison.txt").exists()

    def test_compare_empty_rejected(self, tmp_path):
        res = CliRunner().invoke(main, ["compare", "--out", str(tmp_path)])
        assert res.exit_code != 0

    def test_missing_dataset_is_clear_error(self, tmp_path):
        res = CliRunner().invoke(main, [
            "train", "--config", SMOKE_CONFIG, "--data", str(tmp_path),
            "--out", str(tmp_path / "m")])
        assert res.exit_code != 0

    def test_zero_length_request_error(self, tmp_path):
        bad = tmp_path / "zero.ini"
        bad.write_text("[data]\ntrain_length = 0\n")
        res = CliRunner().invoke(main, [
            "generate-data", "--config", str(bad), "--out", str(tmp_path / "d")])
        assert res.exit_code != 0

    def test_generate_data_seeded_repeatable(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            res = invoke(["generate-data", "--config", SMOKE_CONFIG,
                          "--out", str(out), "--seed", "77"])
            assert res.exit_code == 0
        assert (a / "train.csv").read_bytes() == (b / "train.csv").read_bytes()
        assert (a / "val_00.csv").read_bytes() == (b / "val_00.csv").read_bytes()

    def test_run_plot_writes_figure(self, smoke, tmp_path):
        out = tmp_path / "figrun"
        res = invoke(["run", "--config", smoke.config, "--model", smoke.model,
                      "--controller", smoke.controller, "--mode", "deb",
                      "--out", str(out)])
        assert res.exit_code in (0, 2), res.output
        assert (out / "run_deb.png").exists()
        assert (out / "closed_loop_deb.csv").exists()
        records = read_log_csv(str(out / "closed_loop_deb.csv"))
        assert all(r.d_hat is not None for r in records)
