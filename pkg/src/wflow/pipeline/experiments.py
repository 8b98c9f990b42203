"""
Config-driven experiment runs.

`run_experiment` loads one JSON config, runs it, and writes into the output
directory:

- ``trace.csv`` (particle runs) or ``trace_<scheme>_seed<k>.csv`` (Gaussian flows)
- ``final_cloud.csv`` or ``final_<scheme>_seed<k>.json``
- ``summary.json`` with sorted keys; everything but ``wall_time_s`` is
  reproducible from the config
- ``run.log`` / ``run.jsonlog``, and ``crash_report.txt`` when the run fails
"""

from __future__ import annotations

import json
import sys
import time
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from wflow.bregman import InteractionBregman, NewtonConfig, PotentialBregman, QuadraticMatrix, SimplexEntropy
from wflow.bures import GaussianFlowConfig, iterations_to_tolerance, random_spd_target, run_gaussian_flow
from wflow.functionals import (
    DirichletPotential,
    EDParams,
    InteractionEnergy,
    InteractionKernel,
    KDEEntropy,
    QuadraticPotential,
    QuadraticPotentialParams,
    SinkhornDivergence,
    SinkhornParams,
    SlicedEnergyDistance,
    SlicedWasserstein,
    SWParams,
)
from wflow.measures import (
    GaussianState,
    ParticleCloud,
    read_cloud_csv,
    sample_dirichlet,
    sample_gaussian,
    write_cloud_csv,
)
from wflow.pipeline.experiment_config import ConfigError, ExperimentConfig, load_experiment_config
from wflow.pipeline.logging_utils import (
    RunLoggerAdapter,
    get_run_log_context,
    get_run_logger,
    optional_logger,
    remove_queue_listener,
)
from wflow.pipeline.parallel import parallel_map_ordered
from wflow.preconditioners import Covariance, Identity, MatrixQuadratic, Polynomial
from wflow.schemes import MirrorDescent, PreconditionedGD, run

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
FAILED_TERMINATIONS = ("newton_failure", "scheme_failure")


# -------- building blocks from a config ---------------------------------------

def _gaussian_cloud(seed: int, n: int, d: int, mean, cov, scale: float) -> ParticleCloud:
    cov = np.asarray(cov, dtype=np.float64) if cov is not None else scale**2 * np.eye(d)
    d = cov.shape[0]
    mean = np.zeros(d) if mean is None else np.asarray(mean, dtype=np.float64)
    return sample_gaussian(seed, n, GaussianState(mean, cov))


def build_init(cfg: ExperimentConfig) -> ParticleCloud:
    spec = cfg.init
    seed = cfg.seed if spec.seed is None else spec.seed
    if spec.kind == "csv":
        return read_cloud_csv(spec.path)
    if spec.kind == "dirichlet":
        alpha = spec.alpha if spec.alpha is not None else np.ones(spec.d + 1)
        return sample_dirichlet(seed, spec.n, alpha)
    return _gaussian_cloud(seed, spec.n, spec.d, spec.mean, spec.cov, spec.scale)


def build_target(cfg: ExperimentConfig, d: int) -> ParticleCloud:
    spec = cfg.target
    seed = cfg.seed + 1 if spec.seed is None else spec.seed
    if spec.kind == "csv":
        return read_cloud_csv(spec.path)
    return _gaussian_cloud(seed, spec.n, d, spec.mean, spec.cov, spec.scale)


def sinkhorn_epsilon(target: ParticleCloud) -> float:
    """Default entropic regularization: a tenth of the trace of the target covariance."""
    return 0.1 * float(np.trace(np.atleast_2d(np.cov(target.positions, rowvar=False))))


def build_functional(cfg: ExperimentConfig, d: int, target: ParticleCloud | None = None):
    spec = cfg.functional
    projection_seed = cfg.seed if spec.projection_seed is None else spec.projection_seed
    if spec.kind == "interaction":
        return InteractionEnergy(InteractionKernel.from_tag(spec.kernel, d, sigma=spec.sigma))
    if spec.kind == "potential":
        sigma = np.eye(d) if spec.sigma is None else spec.sigma
        return QuadraticPotential(QuadraticPotentialParams.from_covariance(sigma, spec.shift))
    if spec.kind == "kl_dirichlet":
        return DirichletPotential(spec.alpha) + KDEEntropy(spec.bandwidth)
    if spec.kind == "sw":
        return SlicedWasserstein(target, SWParams(spec.n_projections, projection_seed))
    if spec.kind == "sinkhorn":
        epsilon = sinkhorn_epsilon(target) if spec.epsilon is None else float(spec.epsilon)
        return SinkhornDivergence(target, SinkhornParams(epsilon, spec.sinkhorn_max_iter, spec.sinkhorn_tol))
    if spec.kind == "sliced_ed":
        return SlicedEnergyDistance(target, EDParams(spec.n_projections, projection_seed))
    raise ConfigError(f"functional.kind: unsupported {spec.kind!r}")


def build_method(cfg: ExperimentConfig, d: int):
    spec = cfg.method
    if spec.kind == "pgd":
        if spec.preconditioner == "identity":
            preconditioner = Identity()
        elif spec.preconditioner == "polynomial":
            preconditioner = Polynomial(spec.a)
        elif spec.preconditioner == "matrix":
            preconditioner = MatrixQuadratic(spec.matrix)
        else:
            preconditioner = Covariance()
        return PreconditionedGD(preconditioner)

    newton = NewtonConfig(damping=spec.newton_damping, tol=spec.newton_tol,
                          max_iter=spec.newton_max_iter, ridge=spec.newton_ridge)
    if spec.potential == "simplex":
        potential = SimplexEntropy()
    elif spec.potential == "quadratic":
        potential = PotentialBregman(QuadraticPotential(QuadraticPotentialParams(np.eye(d))))
    elif spec.potential == "quadratic_matrix":
        potential = QuadraticMatrix(np.eye(d) if spec.matrix is None else spec.matrix)
    else:
        try:
            potential = InteractionBregman(InteractionKernel.from_tag(spec.potential, d, sigma=spec.sigma))
        except ValueError as exc:
            raise ConfigError(f"method.potential: {exc}") from exc
    return MirrorDescent(potential, newton=newton)


def radial_spread(cloud: ParticleCloud, metric=None) -> float:
    """max_i |r_i - median(r)| of the centered radii, measured in ``z^T A z`` when `metric` is given."""
    z = cloud.positions - cloud.mean()
    a = np.eye(cloud.d) if metric is None else np.asarray(metric, dtype=np.float64)
    radii = np.sqrt(np.einsum("ij,jk,ik->i", z, a, z))
    return float(np.max(np.abs(radii - np.median(radii))))


# -------- runs ------------------------------------------------------------------

def _write_summary(path: Path, summary: dict):
    path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")


def run_particles(cfg: ExperimentConfig, output_dir: Path, logger) -> dict:
    init = build_init(cfg)
    target = build_target(cfg, init.d) if cfg.needs_target else None
    functional = build_functional(cfg, init.d, target)
    method = build_method(cfg, init.d)
    scheme_cfg = cfg.scheme_config()

    cloud, trace = run(init, functional, method, scheme_cfg, logger=logger)
    trace.write_csv(output_dir / "trace.csv")
    if cfg.output.write_final_state:
        write_cloud_csv(cloud, output_dir / "final_cloud.csv")

    summary = {
        "final_objective": trace.records[-1].objective,
        "initial_objective": trace.records[0].objective,
        "iterations": trace.iterations,
        "termination": trace.termination,
        "descent_violations": len(trace.violations),
        "monotone": trace.monotone,
    }
    if cfg.functional.kind == "interaction":
        metric = None
        if cfg.functional.kernel.replace("-", "_").endswith("_sigma"):
            metric = np.linalg.inv(np.asarray(cfg.functional.sigma, dtype=np.float64))
        summary["radial_spread"] = radial_spread(cloud, metric)
    return summary


def run_gaussian(cfg: ExperimentConfig, output_dir: Path, logger) -> dict:
    spec = cfg.gaussian
    per_scheme: dict[str, dict] = {}
    for scheme in (str(s).upper() for s in spec.schemes):
        crossings, finals, terminations = [], [], []
        for seed in spec.seeds:
            cov, basis = random_spd_target(seed, spec.d, spec.low, spec.high, spec.spectrum)
            # flows from N(0, I) run in the target eigenbasis; KL is rotation invariant
            target = GaussianState(np.zeros(spec.d), np.diag(np.diag(basis.T @ cov @ basis)))
            matrix = None if spec.matrix is None else basis.T @ np.asarray(spec.matrix, dtype=np.float64) @ basis
            flow_cfg = GaussianFlowConfig(target=target, step_size=cfg.scheme.step_size, scheme=scheme,
                                          matrix=matrix)
            state, trace = run_gaussian_flow(GaussianState.standard(spec.d), flow_cfg, cfg.scheme.max_iter,
                                             show_progress=cfg.scheme.progress, logger=logger)
            trace.write_csv(output_dir / f"trace_{scheme}_seed{seed}.csv")
            if cfg.output.write_final_state:
                final_cov = basis @ state.cov @ basis.T
                (output_dir / f"final_{scheme}_seed{seed}.json").write_text(
                    json.dumps({"mean": (basis @ state.mean).tolist(), "cov": final_cov.tolist()}, indent=2) + "\n")
            crossings.append(iterations_to_tolerance(trace, spec.kl_tol))
            finals.append(trace.records[-1].objective)
            terminations.append(trace.termination)
        reached = [c for c in crossings if c is not None]
        per_scheme[scheme] = {
            "final_kl": finals,
            "mean_final_kl": float(np.mean(finals)),
            "iterations_to_kl_tol": crossings,
            "mean_iterations_to_kl_tol": float(np.mean(reached)) if len(reached) == len(crossings) else None,
            "terminations": terminations,
        }
    failed = any(t in FAILED_TERMINATIONS for s in per_scheme.values() for t in s["terminations"])
    return {
        "kl_tol": spec.kl_tol,
        "schemes": per_scheme,
        "iterations": cfg.scheme.max_iter,
        "termination": "scheme_failure" if failed else "max_iter",
        "final_objective": min(s["mean_final_kl"] for s in per_scheme.values()),
    }


def run_experiment(config_path: str | Path, output_dir: str | Path | None = None, verbose: bool = False) -> int:
    """
    Run one experiment config.

    Returns
    -------
    int
        0 when the run stops on tolerance or max_iter, 1 when a scheme fails
        or anything raises during the run, 2 on configuration errors.
    """
    try:
        cfg = load_experiment_config(config_path)
    except ConfigError as exc:
        print(f"Configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if output_dir is not None:
        cfg.output = cfg.output.merge(directory=Path(output_dir))
    return execute_experiment(cfg, verbose=verbose)


def execute_experiment(cfg: ExperimentConfig, verbose: bool = False) -> int:
    output_dir = Path(cfg.output.directory)
    output_dir.mkdir(parents=True, exist_ok=True)
    base_logger = get_run_logger(f"wflow.run.{output_dir.resolve()}", output_dir, verbose=verbose)
    logger = RunLoggerAdapter(base_logger, get_run_log_context(cfg.experiment, cfg.seed))
    start = time.time()
    try:
        logger.info(f"Starting experiment {cfg.experiment} (seed {cfg.seed})",
                    extra={"step": "experiment", "status": "started"})
        (output_dir / "config.json").write_text(json.dumps(cfg.as_plain_dict(), sort_keys=True, indent=2) + "\n")
        if cfg.method.kind == "bures":
            summary = run_gaussian(cfg, output_dir, logger)
        else:
            summary = run_particles(cfg, output_dir, logger)
        summary.update(experiment=cfg.experiment, seed=cfg.seed, wall_time_s=time.time() - start)
        _write_summary(output_dir / "summary.json", summary)

        if summary["termination"] in FAILED_TERMINATIONS:
            logger.error(f"Experiment ended with {summary['termination']}",
                         extra={"step": "experiment", "status": "failed"})
            return EXIT_FAILURE
        logger.info(f"Experiment finished in {summary['wall_time_s']:.2f} s ({summary['termination']})",
                    extra={"step": "experiment", "status": "success"})
        return EXIT_OK

    except Exception:
        logger.exception("Experiment failed.", extra={"step": "experiment", "status": "failed"})
        crash_report_path = output_dir / "crash_report.txt"
        with open(crash_report_path, "w", encoding="utf-8") as f:
            f.write(f"An error occurred during the run of {cfg.experiment}.\n\n")
            traceback.print_exc(file=f)
        logger.info(f"Crash report saved to {crash_report_path}")
        return EXIT_FAILURE

    finally:
        remove_queue_listener(base_logger)


# -------- preconditioning comparison -----------------------------------------------

def _comparison_task(args):
    index, cfg, objective, seed, preconditioner, a = args
    cfg = replace(cfg, seed=seed,
                  functional=cfg.functional.merge(kind=objective),
                  method=cfg.method.merge(kind="pgd", preconditioner=preconditioner, a=a),
                  scheme=cfg.scheme.merge(seed=None))
    init = build_init(cfg)
    target = build_target(cfg, init.d)
    functional = build_functional(cfg, init.d, target)
    _, trace = run(init, functional, build_method(cfg, init.d), cfg.scheme_config())
    return index, {
        "objective": objective,
        "seed": seed,
        "preconditioner": preconditioner,
        "a": a if preconditioner == "polynomial" else np.nan,
        "iterations": trace.iterations,
        "termination": trace.termination,
        "final_objective": trace.records[-1].objective,
    }


@optional_logger
def compare_preconditioning(cfg: ExperimentConfig, grid=(1.25, 1.5, 1.75), seeds=(0, 1, 2),
                            objectives=("sw", "sinkhorn", "sliced_ed"), logger=None) -> pd.DataFrame:
    """
    Identity against polynomial preconditioning on the alignment problem of `cfg`.

    Every (objective, seed) pair runs once with the identity and once per
    exponent in `grid`; runs are spread over ``cfg.resources.ncpu`` processes.

    Returns
    -------
    pandas.DataFrame
        One row per run: objective, seed, preconditioner, a, iterations,
        termination, final_objective.
    """
    tasks = []
    for objective in objectives:
        for seed in seeds:
            tasks.append((objective, seed, "identity", 1.5))
            tasks.extend((objective, seed, "polynomial", a) for a in grid)
    args = [(i, cfg, *task) for i, task in enumerate(tasks)]
    logger.info(f"Comparing preconditioners over {len(args)} runs",
                extra={"step": "compare_preconditioning", "status": "started"})
    rows = parallel_map_ordered(_comparison_task, args, ncpu=cfg.resources.ncpu, desc="Runs")
    logger.info("Comparison finished", extra={"step": "compare_preconditioning", "status": "success"})
    return pd.DataFrame(rows)


def summarize_comparison(frame: pd.DataFrame) -> pd.DataFrame:
    """Per (objective, seed): identity iterations against the best polynomial exponent."""
    rows = []
    for (objective, seed), group in frame.groupby(["objective", "seed"], sort=True):
        identity = group[group["preconditioner"] == "identity"].iloc[0]
        poly = group[group["preconditioner"] == "polynomial"].sort_values(["iterations", "a"]).iloc[0]
        rows.append({"objective": objective, "seed": seed,
                     "identity_iterations": int(identity["iterations"]),
                     "best_a": float(poly["a"]), "best_iterations": int(poly["iterations"]),
                     "improved": bool(poly["iterations"] < identity["iterations"])})
    return pd.DataFrame(rows)
