"""
End-to-end tests of config-driven experiment runs.
"""

import json

import numpy as np
import pytest

from wflow.measures import ParticleCloud, read_cloud_csv
from wflow.pipeline.experiment_config import preset
from wflow.pipeline.experiments import (
    EXIT_CONFIG,
    EXIT_FAILURE,
    EXIT_OK,
    compare_preconditioning,
    execute_experiment,
    radial_spread,
    run_experiment,
    sinkhorn_epsilon,
    summarize_comparison,
)
from wflow.schemes import read_trace_csv
from wflow.scripts.aggregate_crash_reports import extract_info
from wflow.scripts.aggregate_run_status import aggregate


def _ring_config(out_dir):
    return {
        "experiment": "ring",
        "init": {"n": 12},
        "scheme": {"max_iter": 5},
        "output": {"directory": str(out_dir)},
    }


class TestRadialSpread:
    """Test the ring diagnostic."""

    def test_circle_has_no_spread(self, ring_points):
        assert radial_spread(ring_points) == pytest.approx(0.0, abs=1e-12)
        assert radial_spread(ring_points, metric=4.0 * np.eye(2)) == pytest.approx(0.0, abs=1e-12)

    def test_spread_of_two_radii(self):
        cloud = ParticleCloud(np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 3.0], [0.0, -3.0]]))
        assert radial_spread(cloud) == pytest.approx(1.0)


class TestParticleRuns:
    """Test particle experiment runs and their output files."""

    def test_ring_run_outputs(self, tmp_path, write_config):
        out = tmp_path / "ring"
        assert run_experiment(write_config(_ring_config(out))) == EXIT_OK
        for name in ("trace.csv", "final_cloud.csv", "summary.json", "config.json", "run.log", "run.jsonlog"):
            assert (out / name).exists(), name
        summary = json.loads((out / "summary.json").read_text())
        assert summary["experiment"] == "ring"
        assert summary["termination"] == "max_iter"
        assert summary["iterations"] == 5
        assert summary["final_objective"] < summary["initial_objective"]
        assert "radial_spread" in summary
        assert len(read_trace_csv(out / "trace.csv")) == 6
        assert read_cloud_csv(out / "final_cloud.csv").shape == (12, 2)

    def test_runs_are_reproducible(self, tmp_path, write_config):
        """Everything but the wall time is a function of the config."""
        first, second = tmp_path / "a", tmp_path / "b"
        assert run_experiment(write_config(_ring_config(first), "a.json")) == EXIT_OK
        assert run_experiment(write_config(_ring_config(second), "b.json")) == EXIT_OK
        summaries = [json.loads((d / "summary.json").read_text()) for d in (first, second)]
        for summary in summaries:
            summary.pop("wall_time_s")
        assert summaries[0] == summaries[1]
        np.testing.assert_array_equal(read_trace_csv(first / "trace.csv").objectives,
                                      read_trace_csv(second / "trace.csv").objectives)
        np.testing.assert_array_equal(read_cloud_csv(first / "final_cloud.csv").positions,
                                      read_cloud_csv(second / "final_cloud.csv").positions)

    def test_output_override(self, tmp_path, write_config):
        out = tmp_path / "override"
        assert run_experiment(write_config(_ring_config(tmp_path / "ignored")), output_dir=out) == EXIT_OK
        assert (out / "summary.json").exists()
        assert not (tmp_path / "ignored").exists()

    def test_config_error(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert run_experiment(path) == EXIT_CONFIG
        assert "bad.json:1:2" in capsys.readouterr().err

    def test_crash_report(self, tmp_path, write_config):
        """Runs that raise leave a crash report naming the experiment."""
        out = tmp_path / "crash"
        config = {"experiment": "simplex", "init": {"kind": "gaussian", "n": 10, "d": 2},
                  "output": {"directory": str(out)}}
        assert run_experiment(write_config(config)) == EXIT_FAILURE
        report = out / "crash_report.txt"
        assert report.read_text().startswith("An error occurred during the run of simplex.")
        info = extract_info(report)
        assert info["experiment"] == "simplex"
        assert info["exc_type"].endswith("DomainError")

    def test_newton_failure_exit_code(self, tmp_path):
        """A failed termination is reported with exit code 1."""
        cfg = preset("ring", init={"n": 8}, scheme={"max_iter": 3},
                     method={"newton_max_iter": 1, "newton_tol": 1e-30},
                     output={"directory": str(tmp_path / "newton")})
        assert execute_experiment(cfg) == EXIT_FAILURE
        summary = json.loads((tmp_path / "newton" / "summary.json").read_text())
        assert summary["termination"] == "newton_failure"

    def test_status_aggregation(self, tmp_path, write_config):
        assert run_experiment(write_config(_ring_config(tmp_path / "runs" / "ok"))) == EXIT_OK
        rows = aggregate(tmp_path / "runs")
        assert len(rows) == 1
        assert rows[0]["complete"] is True
        assert rows[0]["experiment"] == "ring"
        assert rows[0]["termination"] == "max_iter"


class TestPresetRuns:
    """Run the presets with their default settings."""

    @pytest.mark.parametrize("name", ["ring", "ellipsoid"])
    def test_interaction_presets(self, name, tmp_path):
        cfg = preset(name, output={"directory": str(tmp_path / name)})
        assert execute_experiment(cfg) == EXIT_OK
        summary = json.loads((tmp_path / name / "summary.json").read_text())
        assert summary["termination"] == "max_iter"
        assert summary["monotone"] is True
        assert summary["final_objective"] < summary["initial_objective"]
        if name == "ring":
            assert summary["radial_spread"] <= 0.1

    def test_simplex_preset(self, tmp_path):
        """
        The run completes, so every iterate stayed in the open simplex (the
        Dirichlet objective raises outside it), and the noisy KL estimate
        settles: its 50-step moving average does not grow after a burn-in.
        """
        out = tmp_path / "simplex"
        assert execute_experiment(preset("simplex", output={"directory": str(out)})) == EXIT_OK
        positions = read_cloud_csv(out / "final_cloud.csv").positions
        assert np.all(positions > 0)
        assert np.all(positions.sum(axis=1) < 1)
        objectives = read_trace_csv(out / "trace.csv").objectives
        assert objectives[-50:].mean() < objectives[0]
        moving = np.convolve(objectives, np.ones(50) / 50, mode="valid")
        tol = 1e-3 * max(1.0, np.abs(moving).max())
        assert np.all(np.diff(moving[50:]) <= tol)

    def test_gaussian_flow_preset(self, tmp_path):
        out = tmp_path / "gaussian"
        assert execute_experiment(preset("gaussian-flow", output={"directory": str(out)})) == EXIT_OK
        summary = json.loads((out / "summary.json").read_text())
        nem = summary["schemes"]["NEM"]
        assert all(c is not None for c in nem["iterations_to_kl_tol"])
        for seed in range(5):
            assert (out / f"trace_PFB_seed{seed}.csv").exists()
            final = json.loads((out / f"final_NEM_seed{seed}.json").read_text())
            assert np.asarray(final["cov"]).shape == (10, 10)


class TestGaussianRuns:
    """Test small Gaussian flow runs."""

    def test_small_run(self, tmp_path, write_config):
        out = tmp_path / "flow"
        config = {"experiment": "gaussian-flow",
                  "gaussian": {"d": 3, "seeds": [0], "schemes": ["NEM", "FB"]},
                  "scheme": {"max_iter": 50},
                  "output": {"directory": str(out)}}
        assert run_experiment(write_config(config)) == EXIT_OK
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary["schemes"]) == {"NEM", "FB"}
        assert summary["termination"] == "max_iter"
        assert len(read_trace_csv(out / "trace_NEM_seed0.csv")) == 51
        final = json.loads((out / "final_FB_seed0.json").read_text())
        cov = np.asarray(final["cov"])
        np.testing.assert_allclose(cov, cov.T, atol=1e-12)


class TestComparison:
    """Test the preconditioning comparison."""

    def test_compare_small(self):
        cfg = preset("align", init={"n": 16}, target={"n": 16}, functional={"n_projections": 16},
                     scheme={"max_iter": 5}, resources={"ncpu": 1})
        frame = compare_preconditioning(cfg, grid=(1.5, 2.0), seeds=(0,), objectives=("sw", "sliced_ed"))
        assert len(frame) == 6
        assert set(frame["preconditioner"]) == {"identity", "polynomial"}
        summary = summarize_comparison(frame)
        assert list(summary["objective"]) == ["sliced_ed", "sw"]
        assert set(summary["best_a"]) <= {1.5, 2.0}

    @pytest.mark.parametrize("objective, overrides", [
        ("sw", {"functional": {"n_projections": 256}}),
        ("sliced_ed", {"functional": {"n_projections": 256}}),
        ("sinkhorn", {"init": {"n": 128}, "target": {"n": 128}}),
    ])
    def test_polynomial_beats_identity(self, objective, overrides):
        """On the ill-conditioned alignment problem the best exponent needs fewer iterations for every seed."""
        cfg = preset("align", **overrides)
        frame = compare_preconditioning(cfg, seeds=(0, 1, 2), objectives=(objective,))
        summary = summarize_comparison(frame)
        assert len(summary) == 3
        assert summary["improved"].all()

    def test_default_sinkhorn_epsilon(self):
        target = ParticleCloud(np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 4.0], [2.0, 4.0]]))
        # sample variances 4/3 and 16/3
        assert sinkhorn_epsilon(target) == pytest.approx(2.0 / 3.0)
