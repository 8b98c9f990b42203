"""
Tests for plot data emission and the command-line scripts.
"""

import numpy as np
import pytest

from wflow import diagnostics
from wflow.measures import ParticleCloud, write_cloud_csv
from wflow.ot1d import SinkhornNotConverged
from wflow.pipeline.plotdata import emit_plotdata, scatter_path
from wflow.schemes import Trace, TraceRecord
from wflow.scripts import aggregate_crash_reports, aggregate_run_status, wflow_cli


@pytest.fixture
def trace_file(tmp_path):
    trace = Trace(records=[TraceRecord(k, 1.0 / (k + 1), 0.5, 0.1, 2.0) for k in range(3)])
    return trace.write_csv(tmp_path / "trace.csv")


def _data_rows(path):
    return [line for line in path.read_text().splitlines() if not line.startswith("#")]


class TestPlotData:
    """Test gnuplot-ready data files."""

    def test_rows_and_header(self, trace_file, tmp_path):
        out = tmp_path / "plot.dat"
        assert emit_plotdata(trace_file, out) == 0
        lines = out.read_text().splitlines()
        assert lines[:3] == ["# source: trace.csv", "# log_scale: false", "# iter objective"]
        rows = np.loadtxt(out)
        np.testing.assert_array_equal(rows[:, 0], [0, 1, 2])
        np.testing.assert_allclose(rows[:, 1], [1.0, 0.5, 1.0 / 3.0])

    def test_log_scale_only_changes_header(self, trace_file, tmp_path):
        linear, log = tmp_path / "linear.dat", tmp_path / "log.dat"
        emit_plotdata(trace_file, linear)
        emit_plotdata(trace_file, log, log_scale=True)
        assert "# log_scale: true" in log.read_text()
        assert _data_rows(linear) == _data_rows(log)

    def test_scatter_and_png(self, trace_file, tmp_path):
        cloud_path = write_cloud_csv(ParticleCloud(np.eye(2)), tmp_path / "final_cloud.csv")
        out = tmp_path / "plot.dat"
        assert emit_plotdata(trace_file, out, cloud_path=cloud_path, png=True) == 0
        assert scatter_path(out) == tmp_path / "plot_scatter.dat"
        np.testing.assert_array_equal(np.loadtxt(scatter_path(out)), np.eye(2))
        assert out.with_suffix(".png").exists()

    def test_missing_or_empty_trace(self, tmp_path):
        assert emit_plotdata(tmp_path / "missing.csv", tmp_path / "out.dat") == 1
        empty = tmp_path / "empty.csv"
        empty.write_text("")
        assert emit_plotdata(empty, tmp_path / "out.dat") == 1
        assert not (tmp_path / "out.dat").exists()


class TestCLI:
    """Test the wflow command."""

    def test_plot(self, trace_file, tmp_path):
        out = tmp_path / "cli.dat"
        assert wflow_cli.main(["plot", str(trace_file), str(out), "--log-scale"]) == 0
        assert "# log_scale: true" in out.read_text()

    def test_plot_missing_trace(self, tmp_path):
        assert wflow_cli.main(["plot", str(tmp_path / "nope.csv"), str(tmp_path / "out.dat")]) == 1

    def test_run(self, tmp_path, write_config):
        config = write_config({"experiment": "ring", "init": {"n": 8}, "scheme": {"max_iter": 3}})
        out = tmp_path / "cli_run"
        assert wflow_cli.main(["run", str(config), "--out", str(out)]) == 0
        assert (out / "trace.csv").exists()

    def test_run_bad_config(self, write_config):
        config = write_config({"experiment": "ring", "scheme": {"max_iterations": 3}})
        assert wflow_cli.main(["run", str(config)]) == 2

    def test_check(self, capsys):
        assert wflow_cli.main(["check", "--only", "three_point_identity", "mirror_conjugacy", "--ncpu", "1"]) == 0
        output = capsys.readouterr().out
        assert "three_point_identity" in output
        assert "PASS" in output

    def test_check_reports_solver_failure(self, monkeypatch, capsys):
        def stalled(rng):
            raise SinkhornNotConverged(1e-5, 10)

        monkeypatch.setattr(diagnostics, "_sinkhorn_axioms", stalled)
        assert wflow_cli.main(["check", "--only", "sinkhorn_axioms", "--ncpu", "1"]) == 1
        output = capsys.readouterr().out
        assert "FAIL" in output
        assert "SinkhornNotConverged" in output

    def test_unknown_check_is_rejected(self):
        with pytest.raises(SystemExit):
            wflow_cli.parse_args(["check", "--only", "everything"])

    def test_compare(self, tmp_path, write_config, capsys):
        config = write_config({"experiment": "align", "init": {"n": 12}, "target": {"n": 12},
                               "functional": {"n_projections": 8}, "scheme": {"max_iter": 3},
                               "resources": {"ncpu": 1}})
        csv_path = tmp_path / "comparison.csv"
        code = wflow_cli.main(["compare", str(config), "--csv", str(csv_path), "--grid", "1.5",
                               "--seeds", "0", "--objectives", "sw"])
        assert code == 0
        assert csv_path.exists()
        assert "best_a" in capsys.readouterr().out


class TestAggregationScripts:
    """Test the run status and crash report summaries."""

    def test_status_of_runs(self, tmp_path, write_config, capsys):
        config = write_config({"experiment": "ring", "init": {"n": 8}, "scheme": {"max_iter": 2},
                               "output": {"directory": str(tmp_path / "runs" / "ring0")}})
        assert wflow_cli.main(["run", str(config)]) == 0
        csv_path = tmp_path / "status.csv"
        assert aggregate_run_status.main([str(tmp_path / "runs"), "--csv", str(csv_path)]) == 0
        assert "ring" in capsys.readouterr().out
        assert "True" in csv_path.read_text()

    def test_status_filter_without_matches(self, tmp_path, write_config):
        config = write_config({"experiment": "ring", "init": {"n": 8}, "scheme": {"max_iter": 2},
                               "output": {"directory": str(tmp_path / "runs" / "ring0")}})
        wflow_cli.main(["run", str(config)])
        assert aggregate_run_status.main([str(tmp_path / "runs"), "--experiment", "simplex"]) == 1

    def test_crash_summary(self, tmp_path, capsys):
        run_dir = tmp_path / "runs" / "broken"
        run_dir.mkdir(parents=True)
        (run_dir / "crash_report.txt").write_text(
            "An error occurred during the run of ellipsoid.\n\n"
            "Traceback (most recent call last):\n"
            '  File "schemes.py", line 10, in run\n'
            "    step()\n"
            "wflow.bregman.NewtonFailure: Newton iterations exhausted\n")
        rows = aggregate_crash_reports.collect(tmp_path / "runs")
        assert rows[0]["experiment"] == "ellipsoid"
        assert rows[0]["exc_type"] == "wflow.bregman.NewtonFailure"
        assert rows[0]["exc_msg"] == "Newton iterations exhausted"
        assert rows[0]["last_frame"].startswith('File "schemes.py"')
        assert aggregate_crash_reports.main([str(tmp_path / "runs")]) == 0
        assert "wflow.bregman.NewtonFailure: 1" in capsys.readouterr().out

    def test_no_crashes(self, tmp_path, capsys):
        assert aggregate_crash_reports.main([str(tmp_path)]) == 0
        assert "No crash reports found." in capsys.readouterr().out
