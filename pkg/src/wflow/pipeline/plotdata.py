"""Gnuplot-ready data files (and optional PNGs) from run outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use(backend="Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from wflow.measures import read_cloud_csv  # noqa: E402
from wflow.pipeline.logging_utils import optional_logger  # noqa: E402
from wflow.schemes import read_trace_csv  # noqa: E402


def scatter_path(out_path: Path) -> Path:
    return out_path.with_name(f"{out_path.stem}_scatter{out_path.suffix or '.dat'}")


def _write_columns(path: Path, header: list[str], columns: np.ndarray):
    with open(path, "w") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        np.savetxt(fh, columns, fmt="%.17g")


def plot_trace(iterations, objectives, positions=None, log_scale=False, output_plot_path=None):
    plt.close()
    panels = 2 if positions is not None else 1
    fig, axes = plt.subplots(1, panels, figsize=(5 * panels, 4), squeeze=False)
    ax = axes[0, 0]
    ax.plot(iterations, objectives)
    if log_scale:
        ax.set_yscale("log")
    ax.set_xlabel("Iteration")
    ax.set_ylabel("Objective")
    if positions is not None:
        ax = axes[0, 1]
        ax.scatter(positions[:, 0], positions[:, 1] if positions.shape[1] > 1 else np.zeros(len(positions)), s=6)
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_title("Final particles")
    fig.tight_layout()
    if output_plot_path is not None:
        fig.savefig(output_plot_path, dpi=150)
    plt.close(fig)


@optional_logger
def emit_plotdata(trace_path: str | Path, out_path: str | Path, cloud_path: str | Path | None = None,
                  log_scale: bool = False, png: bool = False, logger=None) -> int:
    """
    Write ``iter objective`` rows of a trace to `out_path`.

    The log-scale flag is only recorded in the header. With `cloud_path`, the
    final positions go to ``<out>_scatter`` next to `out_path`. With `png`, a
    rendering of both goes to ``<out>.png``.

    Returns
    -------
    int
        0 on success, 1 on a missing or malformed trace.
    """
    out_path = Path(out_path)
    try:
        trace = read_trace_csv(trace_path)
        positions = read_cloud_csv(cloud_path).positions if cloud_path is not None else None
    except (FileNotFoundError, ValueError) as exc:
        logger.error(f"Cannot emit plot data: {exc}", extra={"step": "plot", "status": "failed"})
        return 1

    frame = trace.to_frame()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _write_columns(out_path, [f"source: {Path(trace_path).name}", f"log_scale: {str(log_scale).lower()}",
                              "iter objective"],
                   frame[["iter", "objective"]].to_numpy())
    if positions is not None:
        _write_columns(scatter_path(out_path), [f"source: {Path(cloud_path).name}",
                                                " ".join(f"x{c}" for c in range(positions.shape[1]))], positions)
    if png:
        plot_trace(frame["iter"], frame["objective"], positions, log_scale=log_scale,
                   output_plot_path=out_path.with_suffix(".png"))
    logger.info(f"Plot data written to {out_path}", extra={"step": "plot", "status": "success"})
    return 0
