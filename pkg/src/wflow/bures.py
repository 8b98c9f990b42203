"""
Closed-form Gaussian (Bures-Wasserstein) flows for ``F = int U dmu + H(mu)``.

With ``U(x) = 1/2 (x - m)^T Sigma^{-1} (x - m)`` and ``H`` the negative entropy,
F is KL(mu || N(m, Sigma)) up to a constant, and every scheme below maps a
Gaussian iterate to a Gaussian iterate:

- ``NEM``: mirror descent with the negative entropy as Bregman potential
- ``HEAT``: the same mirror scheme on the entropy alone
- ``FB`` / ``PFB``: forward-backward with a quadratic Bregman potential
  ``1/2 x^T Lambda^{-1} x`` (``PFB`` takes ``Lambda = Sigma``)
- ``KLM``: mirror descent with KL(. || N(0, Lambda)) as Bregman potential

The FB, PFB and KLM formulas hold for commuting matrices only; inputs are
checked and rejected otherwise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg
from scipy.stats import ortho_group

from wflow.measures import GaussianState, NotSPDError, check_spd, make_rng
from wflow.pipeline.logging_utils import optional_logger
from wflow.schemes import Trace, TraceRecord
from wflow.utils.progress import progress

__all__ = [
    "SCHEMES",
    "CommutationError",
    "KLMDivergence",
    "GaussianFlowConfig",
    "nem_step",
    "heat_step",
    "wasserstein_heat_step",
    "fb_step",
    "pfb_step",
    "klm_step",
    "gaussian_step",
    "kl_gaussian",
    "negative_entropy",
    "heat_negative_entropy",
    "nem_smoothness_condition",
    "commutator_norm",
    "random_spd_target",
    "run_gaussian_flow",
    "iterations_to_tolerance",
]

SCHEMES = ("NEM", "HEAT", "FB", "PFB", "KLM")
COMMUTATOR_TOL = 1e-8
EIGEN_FLOOR = 1e-14
DISCRIMINANT_RTOL = 1e-10


class CommutationError(ArithmeticError):
    """Matrices that the closed form assumes to commute do not."""

    def __init__(self, names: str, commutator: float):
        super().__init__(f"{names} do not commute (relative commutator {commutator:.3e} > {COMMUTATOR_TOL:g})")
        self.commutator = commutator


class KLMDivergence(ArithmeticError):
    """The KL mirror step has no real covariance solution."""

    def __init__(self, min_eigenvalue: float):
        super().__init__(f"KL mirror step diverged: discriminant eigenvalue {min_eigenvalue:.3e} < 0")
        self.min_eigenvalue = min_eigenvalue


def _sym(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


def _spd_output(matrix: np.ndarray, name: str = "covariance iterate") -> np.ndarray:
    return check_spd(_sym(matrix), name)


def _eig_function(matrix: np.ndarray, func) -> np.ndarray:
    eigenvalues, eigenvectors = linalg.eigh(_sym(matrix))
    return _sym((eigenvectors * func(eigenvalues)) @ eigenvectors.T)


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    return _eig_function(matrix, lambda w: np.sqrt(np.maximum(w, EIGEN_FLOOR)))


def _inv(matrix: np.ndarray, name: str) -> np.ndarray:
    try:
        return _sym(linalg.inv(matrix))
    except (linalg.LinAlgError, ValueError) as exc:
        raise NotSPDError(f"cannot invert {name}: {exc}") from exc


def commutator_norm(a: np.ndarray, b: np.ndarray) -> float:
    """|AB - BA|_F / (|A|_F |B|_F)."""
    scale = np.linalg.norm(a) * np.linalg.norm(b)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a @ b - b @ a) / scale)


def _require_commuting(**matrices):
    names = list(matrices)
    for i, first in enumerate(names):
        for second in names[i + 1:]:
            value = commutator_norm(matrices[first], matrices[second])
            if value > COMMUTATOR_TOL:
                raise CommutationError(f"{first} and {second}", value)


def nem_step(cov_k, cov, tau: float) -> np.ndarray:
    """
    Negative-entropy mirror step for zero-mean Gaussians,
    ``Sigma_{k+1}^{-1} = A^T Sigma_k A`` with ``A = (1 - tau) Sigma_k^{-1} + tau Sigma^{-1}``.
    """
    cov_k = check_spd(cov_k, "Sigma_k")
    cov = check_spd(cov, "Sigma")
    if tau < 0:
        raise ValueError(f"step size must be >= 0, got {tau}")
    if tau == 0:
        return cov_k.copy()
    a = (1.0 - tau) * _inv(cov_k, "Sigma_k") + tau * _inv(cov, "Sigma")
    precision = _spd_output(a.T @ cov_k @ a, "NEM precision")
    return _spd_output(_inv(precision, "NEM precision"))


def heat_step(cov_k, tau: float) -> np.ndarray:
    """Negative-entropy mirror step on the entropy alone, Sigma_k / (1 - tau)^2."""
    if not 0 <= tau < 1:
        raise ValueError(f"heat step needs 0 <= tau < 1, got {tau}")
    return check_spd(cov_k, "Sigma_k") / (1.0 - tau) ** 2


def wasserstein_heat_step(cov_k, tau: float) -> np.ndarray:
    """Wasserstein gradient step on the entropy, Sigma_k (I + tau Sigma_k^{-1})^2."""
    if tau < 0:
        raise ValueError(f"step size must be >= 0, got {tau}")
    cov_k = check_spd(cov_k, "Sigma_k")
    push = np.eye(cov_k.shape[0]) + tau * _inv(cov_k, "Sigma_k")
    return _spd_output(push @ cov_k @ push.T)


def negative_entropy(cov) -> float:
    """int rho log rho for N(m, Sigma)."""
    cov = check_spd(cov, "Sigma")
    d = cov.shape[0]
    _, logdet = np.linalg.slogdet(cov)
    return float(-0.5 * d * np.log(2 * np.pi * np.e) - 0.5 * logdet)


def heat_negative_entropy(cov0, tau: float, k: int) -> float:
    """Negative entropy after k heat steps, -(d/2) log(2 pi e) - 1/2 sum log lambda_i - d k log(1 / (1 - tau))."""
    cov0 = check_spd(cov0, "Sigma_0")
    d = cov0.shape[0]
    eigenvalues = np.linalg.eigvalsh(cov0)
    return float(-0.5 * d * np.log(2 * np.pi * np.e) - 0.5 * np.sum(np.log(eigenvalues))
                 - d * k * np.log(1.0 / (1.0 - tau)))


def _affine_forward(state: GaussianState, target: GaussianState, matrix: np.ndarray, tau: float):
    """Mean update and contraction shared by FB and KLM: (I - tau Lambda Sigma^{-1}) m_k + tau Lambda Sigma^{-1} m."""
    d = state.d
    gain = tau * matrix @ _inv(target.cov, "Sigma")
    contraction = np.eye(d) - gain
    mean = contraction @ state.mean + gain @ target.mean
    return mean, contraction


@dataclass(slots=True)
class GaussianFlowConfig:
    """
    target: the Gaussian N(m, Sigma) minimizing the flow's KL objective
    matrix: Lambda; identity when omitted, and Sigma for ``PFB``
    step_size: tau
    scheme: one of ``SCHEMES``
    """
    target: GaussianState
    step_size: float = 0.01
    scheme: str = "NEM"
    matrix: np.ndarray | None = None

    def __post_init__(self):
        self.scheme = self.scheme.upper()
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown Gaussian scheme {self.scheme!r}, expected one of {SCHEMES}")
        if self.step_size < 0:
            raise ValueError(f"step size must be >= 0, got {self.step_size}")
        if self.scheme == "PFB":
            self.matrix = self.target.cov
        elif self.matrix is None:
            self.matrix = np.eye(self.target.d)
        self.matrix = check_spd(self.matrix, "Lambda")
        if self.matrix.shape[0] != self.target.d:
            raise ValueError(f"Lambda of size {self.matrix.shape[0]} for a target of dimension {self.target.d}")

    def merge(self, **kw) -> "GaussianFlowConfig":
        return replace(self, **kw)


def fb_step(state: GaussianState, cfg: GaussianFlowConfig) -> GaussianState:
    """
    Forward-backward step: explicit affine step on the potential, then the
    Bregman proximal step on the entropy,
    ``Sigma_{k+1} = 1/2 (S + 2 tau Lambda + (S (4 tau Lambda + S))^{1/2})`` with ``S = Sigma_{k+1/2}``.
    """
    tau, lam = cfg.step_size, cfg.matrix
    _require_commuting(Lambda=lam, Sigma=cfg.target.cov, Sigma_k=state.cov)
    mean, contraction = _affine_forward(state, cfg.target, lam, tau)
    half = _spd_output(contraction.T @ state.cov @ contraction, "forward half-step covariance")
    root = _psd_sqrt(half @ (4.0 * tau * lam + half))
    return GaussianState(mean, _spd_output(0.5 * (half + 2.0 * tau * lam + root)))


def pfb_step(state: GaussianState, cfg: GaussianFlowConfig) -> GaussianState:
    return fb_step(state, cfg.merge(scheme="PFB"))


def klm_step(state: GaussianState, cfg: GaussianFlowConfig) -> GaussianState:
    """
    KL mirror step, plus root of ``Sigma_{k+1}^2 - C Sigma_{k+1} + Lambda^2 = 0``.

    For commuting inputs ``C - 2 Lambda = D^2`` with
    ``D = (I - tau Lambda Sigma^{-1}) Sigma_k^{1/2} - (1 - tau) Lambda Sigma_k^{-1/2}``,
    so the root ``1/2 (C + (C^2 - 4 Lambda^2)^{1/2})`` is evaluated as
    ``1/2 (C + |D| (D^2 + 4 Lambda)^{1/2})``, which stays accurate where the
    discriminant vanishes.
    """
    tau, lam = cfg.step_size, cfg.matrix
    cov, cov_k = cfg.target.cov, state.cov
    _require_commuting(Lambda=lam, Sigma=cov, Sigma_k=cov_k)
    mean, contraction = _affine_forward(state, cfg.target, lam, tau)

    lam2 = lam @ lam
    c = _sym(contraction @ contraction @ cov_k + 2.0 * tau * lam
             + 2.0 * tau * (1.0 - tau) * lam2 @ _inv(cov, "Sigma")
             + (1.0 - tau) ** 2 * lam2 @ _inv(cov_k, "Sigma_k"))
    discriminant = linalg.eigvalsh(_sym(c @ c - 4.0 * lam2))
    if discriminant.min() < -DISCRIMINANT_RTOL * np.linalg.norm(c, 2) ** 2:
        raise KLMDivergence(float(discriminant.min()))

    half_root = _psd_sqrt(cov_k)
    inv_half_root = _eig_function(cov_k, lambda w: 1.0 / np.sqrt(w))
    d_mat = _sym(contraction @ half_root - (1.0 - tau) * lam @ inv_half_root)
    abs_d = _eig_function(d_mat, np.abs)
    root = _sym(abs_d @ _psd_sqrt(d_mat @ d_mat + 4.0 * lam))
    return GaussianState(mean, _spd_output(0.5 * (c + root)))


def gaussian_step(state: GaussianState, cfg: GaussianFlowConfig) -> GaussianState:
    """One step of ``cfg.scheme``."""
    if cfg.scheme == "NEM":
        if np.any(state.mean != 0) or np.any(cfg.target.mean != 0):
            raise ValueError("the negative-entropy mirror step is only defined here for zero means")
        return GaussianState(state.mean, nem_step(state.cov, cfg.target.cov, cfg.step_size))
    if cfg.scheme == "HEAT":
        return GaussianState(state.mean, heat_step(state.cov, cfg.step_size))
    if cfg.scheme in ("FB", "PFB"):
        return fb_step(state, cfg)
    return klm_step(state, cfg)


def kl_gaussian(a: GaussianState, b: GaussianState) -> float:
    """KL(a || b) = 1/2 (tr(Sb^{-1} Sa) - d + (mb - ma)^T Sb^{-1} (mb - ma) + log det Sb - log det Sa)."""
    if a.d != b.d:
        raise ValueError(f"Gaussians of dimensions {a.d} and {b.d}")
    try:
        factor = linalg.cho_factor(b.cov, lower=True)
    except linalg.LinAlgError as exc:
        raise NotSPDError(f"cannot factor the reference covariance: {exc}") from exc
    diff = b.mean - a.mean
    trace = np.trace(linalg.cho_solve(factor, a.cov))
    mahalanobis = diff @ linalg.cho_solve(factor, diff)
    logdet_b = 2.0 * np.sum(np.log(np.diag(factor[0])))
    _, logdet_a = np.linalg.slogdet(a.cov)
    return float(0.5 * (trace - a.d + mahalanobis + logdet_b - logdet_a))


def nem_smoothness_condition(cov_next, cov_k, cov, tau: float, atol: float = 1e-12) -> bool:
    """Whether (1 - tau) Sigma_{k+1} Sigma_k^{-1} + tau Sigma_{k+1} Sigma^{-1} has no negative eigenvalue."""
    matrix = (1.0 - tau) * cov_next @ _inv(cov_k, "Sigma_k") + tau * cov_next @ _inv(cov, "Sigma")
    return bool(np.min(np.linalg.eigvals(matrix).real) >= -atol)


def random_spd_target(seed: int, d: int, low: float = 1.0, high: float = 100.0,
                      spectrum: str = "logspace") -> tuple[np.ndarray, np.ndarray]:
    """
    Random covariance ``U D U^T`` with Haar-random orthogonal ``U``.

    ``spectrum="logspace"`` spaces the eigenvalues evenly in log scale between
    `low` and `high`; ``"uniform"`` draws them uniformly in ``(0, high]`` and
    keeps ``U`` the identity (diagonal targets).

    Returns
    -------
    cov, basis : ndarray
    """
    rng = make_rng(seed)
    if spectrum == "logspace":
        eigenvalues = np.logspace(np.log10(low), np.log10(high), d)
        basis = ortho_group.rvs(d, random_state=rng) if d > 1 else np.ones((1, 1))
    elif spectrum == "uniform":
        eigenvalues = high * (1.0 - rng.random(d))
        basis = np.eye(d)
    else:
        raise ValueError(f"unknown spectrum {spectrum!r}")
    return _sym((basis * eigenvalues) @ basis.T), basis


def _kl_grad_magnitude(state: GaussianState, target: GaussianState) -> float:
    """1/2 |grad_W KL|^2 in L2(mu) for Gaussian mu."""
    precision = _inv(target.cov, "Sigma")
    gap = precision - _inv(state.cov, "Sigma_k")
    shift = precision @ (state.mean - target.mean)
    return float(0.5 * (np.trace(gap @ state.cov @ gap) + shift @ shift))


@optional_logger
def run_gaussian_flow(init: GaussianState, cfg: GaussianFlowConfig, max_iter: int, kl_tol: float = 0.0,
                      show_progress: bool = False, logger=None) -> tuple[GaussianState, Trace]:
    """
    Iterate `gaussian_step`, tracing KL(mu_k || target).

    Returns
    -------
    state : GaussianState
        Last valid iterate.
    trace : Trace
        Objective is the KL, grad magnitude is ``1/2 |grad_W KL|^2``, step
        divergence is KL(mu_{k+1} || mu_k). Termination is ``tolerance`` when
        the KL falls to `kl_tol` (> 0), ``max_iter``, or ``scheme_failure``
        when a step raises a numerical error.
    """
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")
    state = init
    trace = Trace()
    step_div, elapsed_ms = 0.0, 0.0
    flagged = False
    logger.info(f"Running {cfg.scheme} Gaussian flow, tau={cfg.step_size}, d={init.d}",
                extra={"step": "gaussian_flow", "status": "started"})
    for k in progress(range(max_iter + 1), total=max_iter + 1, desc=cfg.scheme, enabled=show_progress):
        kl = kl_gaussian(state, cfg.target)
        trace.records.append(TraceRecord(k, kl, _kl_grad_magnitude(state, cfg.target), step_div, elapsed_ms))
        if kl_tol > 0 and kl <= kl_tol:
            trace.termination = "tolerance"
            break
        if k == max_iter:
            trace.termination = "max_iter"
            break
        start = time.perf_counter()
        try:
            new = gaussian_step(state, cfg)
        except (NotSPDError, CommutationError, KLMDivergence) as exc:
            logger.error(f"{cfg.scheme} step {k + 1} failed: {exc}", extra={"step": "gaussian_flow", "status": "failed"})
            trace.termination = "scheme_failure"
            break
        elapsed_ms = 1e3 * (time.perf_counter() - start)
        if cfg.scheme == "NEM" and not flagged and not nem_smoothness_condition(new.cov, state.cov, cfg.target.cov, cfg.step_size):
            flagged = True
            logger.warning(f"relative smoothness condition fails at step {k + 1}",
                           extra={"step": "gaussian_flow", "status": "warning"})
        step_div = kl_gaussian(new, state)
        state = new
    logger.info(f"{cfg.scheme} stopped after {trace.iterations} iterations ({trace.termination}), "
                f"KL {trace.records[-1].objective:.3e}", extra={"step": "gaussian_flow", "status": "success"})
    return state, trace


def iterations_to_tolerance(trace: Trace, tol: float) -> int | None:
    """First iteration whose objective is at most `tol`, or None."""
    for record in trace.records:
        if record.objective <= tol:
            return record.iter
    return None
