"""
Particle-level iteration schemes and the run loop.

Two methods share one loop:

- mirror descent, ``grad phi(T_{k+1}) = grad phi(Id) - tau grad_W F(mu_k)``,
  explicit when phi has a closed-form inverse mirror map, Newton otherwise
- preconditioned gradient descent, ``T_{k+1} = Id - tau grad h*(grad_W F(mu_k))``

The loop records one `TraceRecord` per iterate (iteration 0 included), stops on
relative objective change, and flags objective increases.
"""

from __future__ import annotations

import time
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from wflow.bregman import BregmanPotential, NewtonConfig, NewtonFailure, newton_implicit_step
from wflow.functionals import Functional
from wflow.measures import ParticleCloud, VelocityField, center
from wflow.pipeline.logging_utils import optional_logger
from wflow.preconditioners import Identity, Preconditioner
from wflow.utils.progress import progress

__all__ = [
    "SchemeConfig",
    "TraceRecord",
    "DescentViolation",
    "Trace",
    "TRACE_COLUMNS",
    "Method",
    "MirrorDescent",
    "PreconditionedGD",
    "md_step",
    "pgd_step",
    "wasserstein_gd_step",
    "run",
    "read_trace_csv",
]

TRACE_COLUMNS = ("iter", "objective", "grad_magnitude", "step_div", "ms")
DESCENT_RTOL = 1e-9
NOISE_FACTOR = 3.0


@dataclass(slots=True)
class SchemeConfig:
    """
    step_size: tau > 0
    max_iter: number of steps, >= 1
    rel_tol: stop when |F_k - F_{k-1}| / |F_{k-1}| <= rel_tol; 0 disables early stopping
    seed: key of the per-iteration Monte-Carlo streams ``(seed, k)``
    descent_check: flag objective increases beyond 1e-9 relative
    center: re-center the cloud after every step
    fresh_projections: redraw Monte-Carlo projections every iteration
    progress: show a progress bar
    """
    step_size: float = 0.1
    max_iter: int = 100
    rel_tol: float = 0.0
    seed: int = 0
    descent_check: bool = True
    center: bool = False
    fresh_projections: bool = True
    progress: bool = False

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError(f"step size must be > 0, got {self.step_size}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.rel_tol < 0:
            raise ValueError(f"rel_tol must be >= 0, got {self.rel_tol}")

    def merge(self, **kw) -> "SchemeConfig":
        return replace(self, **kw)


@dataclass(frozen=True, slots=True)
class TraceRecord:
    iter: int
    objective: float
    grad_magnitude: float
    step_div: float
    ms: float


@dataclass(frozen=True, slots=True)
class DescentViolation:
    iter: int
    increase: float
    standard_error: float
    within_noise: bool


@dataclass(slots=True)
class Trace:
    records: list[TraceRecord] = field(default_factory=list)
    termination: str | None = None
    violations: list[DescentViolation] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def objectives(self) -> np.ndarray:
        return np.array([rec.objective for rec in self.records])

    @property
    def grad_magnitudes(self) -> np.ndarray:
        return np.array([rec.grad_magnitude for rec in self.records])

    @property
    def iterations(self) -> int:
        """Number of steps taken."""
        return max(len(self.records) - 1, 0)

    @property
    def monotone(self) -> bool:
        """No descent violation outside Monte-Carlo noise."""
        return not any(not v.within_noise for v in self.violations)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([asdict(rec) for rec in self.records], columns=list(TRACE_COLUMNS))
        return frame.astype({"iter": np.int64})

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        return path


def read_trace_csv(path: str | Path) -> Trace:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trace file not found: {path}")
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError as exc:
        raise ValueError(f"empty trace file: {path}") from exc
    if tuple(frame.columns) != TRACE_COLUMNS:
        raise ValueError(f"malformed trace {path}: header {list(frame.columns)}, expected {list(TRACE_COLUMNS)}")
    if frame.empty:
        raise ValueError(f"empty trace: {path}")
    if frame.isna().any().any():
        raise ValueError(f"malformed trace {path}: missing values")
    records = [TraceRecord(int(row.iter), float(row.objective), float(row.grad_magnitude),
                           float(row.step_div), float(row.ms))
               for row in frame.itertuples(index=False)]
    return Trace(records=records)


# -------- steps ------------------------------------------------------------------

def _check_step(tau: float):
    if not tau >= 0:
        raise ValueError(f"step size must be >= 0, got {tau}")


def md_step(cloud: ParticleCloud, functional: Functional, potential: BregmanPotential, tau: float,
            newton: NewtonConfig | None = None, grad: VelocityField | None = None) -> ParticleCloud:
    """
    One mirror descent step.

    Explicit potentials move every particle to ``grad V*(grad V(x_i) - tau g_i)``;
    interaction potentials solve ``grad phi_nu = grad phi_mu - tau g`` by Newton.
    `grad` may be passed when already computed at `cloud`.
    """
    _check_step(tau)
    if tau == 0:
        return cloud
    grad = functional.wgrad(cloud) if grad is None else grad
    dual = potential.forward(cloud) - grad.check_matches(cloud) * tau
    if potential.explicit_inverse:
        return ParticleCloud(potential.inverse(dual).values)
    return newton_implicit_step(potential, cloud, dual, newton).cloud


def pgd_step(cloud: ParticleCloud, functional: Functional, preconditioner: Preconditioner, tau: float,
             grad: VelocityField | None = None) -> ParticleCloud:
    _check_step(tau)
    grad = functional.wgrad(cloud) if grad is None else grad
    direction = preconditioner.apply(cloud, grad)
    return ParticleCloud(cloud.positions - tau * direction.values)


def wasserstein_gd_step(cloud: ParticleCloud, functional: Functional, tau: float) -> ParticleCloud:
    """x_i - tau grad_W F(mu)(x_i)."""
    _check_step(tau)
    return ParticleCloud(cloud.positions - tau * functional.wgrad(cloud).values)


class Method(ABC):
    name: str

    @abstractmethod
    def step(self, cloud: ParticleCloud, functional: Functional, tau: float,
             grad: VelocityField | None = None) -> ParticleCloud:
        ...

    @abstractmethod
    def magnitude(self, cloud: ParticleCloud, grad: VelocityField) -> float:
        """Descent quantity of the gradient recorded in the trace."""

    @abstractmethod
    def step_divergence(self, cloud: ParticleCloud, new: ParticleCloud) -> float:
        """Size of the step from `cloud` to `new`, particle by particle."""


@dataclass(slots=True)
class MirrorDescent(Method):
    potential: BregmanPotential
    newton: NewtonConfig = field(default_factory=NewtonConfig)
    name: str = "md"

    def step(self, cloud, functional, tau, grad=None):
        return md_step(cloud, functional, self.potential, tau, newton=self.newton, grad=grad)

    def magnitude(self, cloud, grad):
        return Identity().magnitude(cloud, grad)

    def step_divergence(self, cloud, new):
        # d_phi(T_{k+1}, Id) at mu_k
        return self.potential.divergence(cloud, VelocityField(new.positions), VelocityField.identity(cloud))


@dataclass(slots=True)
class PreconditionedGD(Method):
    preconditioner: Preconditioner
    name: str = "pgd"

    def step(self, cloud, functional, tau, grad=None):
        return pgd_step(cloud, functional, self.preconditioner, tau, grad=grad)

    def magnitude(self, cloud, grad):
        return self.preconditioner.magnitude(cloud, grad)

    def step_divergence(self, cloud, new):
        return float(0.5 * np.mean(np.sum((new.positions - cloud.positions) ** 2, axis=1)))


def _relative_change(previous: float, current: float) -> float:
    if previous == 0.0:
        return abs(current)
    return abs(current - previous) / abs(previous)


@optional_logger
def run(init: ParticleCloud, functional: Functional, method: Method, cfg: SchemeConfig,
        logger=None) -> tuple[ParticleCloud, Trace]:
    """
    Iterate `method` on `functional` from `init`.

    Parameters
    ----------
    init : ParticleCloud
    functional : Functional
        Objective. For Monte-Carlo functionals the traced objective (and the
        stopping rule) always uses the functional's own frozen draw, while
        steps use the draw ``(cfg.seed, k)`` when ``cfg.fresh_projections``.
    method : Method
        `MirrorDescent` or `PreconditionedGD`.
    cfg : SchemeConfig

    Returns
    -------
    cloud : ParticleCloud
        Last iterate.
    trace : Trace
        One record per iterate; termination is ``tolerance``, ``max_iter`` or
        ``newton_failure``.
    """
    cloud = center(init) if cfg.center else init
    trace = Trace()
    fresh = functional.stochastic and cfg.fresh_projections
    step_div, elapsed_ms = 0.0, 0.0
    previous = None

    logger.info(f"Running {method.name} for at most {cfg.max_iter} iterations, tau={cfg.step_size}",
                extra={"step": "run", "status": "started"})
    for k in progress(range(cfg.max_iter + 1), total=cfg.max_iter + 1, desc=method.name, enabled=cfg.progress):
        step_functional = functional.resample((cfg.seed, k)) if fresh else functional
        grad = step_functional.wgrad(cloud)
        objective = functional.value(cloud)
        trace.records.append(TraceRecord(k, objective, method.magnitude(cloud, grad), step_div, elapsed_ms))

        if previous is not None:
            if cfg.descent_check and objective > previous + DESCENT_RTOL * abs(previous):
                noise = functional.standard_error(cloud)
                increase = objective - previous
                violation = DescentViolation(k, increase, noise, increase <= NOISE_FACTOR * noise)
                trace.violations.append(violation)
                logger.warning(f"Objective increased by {increase:.3e} at iteration {k}"
                               + (" (within Monte-Carlo noise)" if violation.within_noise else ""),
                               extra={"step": "descent_check", "status": "warning"})
            if cfg.rel_tol > 0 and _relative_change(previous, objective) <= cfg.rel_tol:
                trace.termination = "tolerance"
                break
        if k == cfg.max_iter:
            trace.termination = "max_iter"
            break

        start = time.perf_counter()
        try:
            new = method.step(cloud, step_functional, cfg.step_size, grad=grad)
        except NewtonFailure as exc:
            logger.error(f"Iteration {k + 1} failed: {exc}", extra={"step": "run", "status": "failed"})
            trace.termination = "newton_failure"
            break
        step_div = method.step_divergence(cloud, new)
        cloud = center(new) if cfg.center else new
        elapsed_ms = 1e3 * (time.perf_counter() - start)
        previous = objective

    logger.info(f"Stopped after {trace.iterations} iterations ({trace.termination}), "
                f"objective {trace.records[-1].objective:.6g}",
                extra={"step": "run", "status": "success"})
    return cloud, trace
