"""
Optimal transport primitives shared by the sliced and entropic objectives.

- uniform directions on the unit sphere, drawn from a counter-based stream
- one-dimensional optimal transport between uniform empirical measures
  through the monotone (north-west corner) coupling of sorted supports
- a log-domain Sinkhorn solver for the squared Euclidean cost
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from wflow.measures import make_rng
from wflow.pipeline.logging_utils import optional_logger

__all__ = [
    "Projections",
    "DualPotentials",
    "SinkhornNotConverged",
    "sample_sphere",
    "sort_stable",
    "monotone_coupling",
    "quantile_displacement",
    "wasserstein_1d_squared",
    "squared_distances",
    "sinkhorn_solve",
]


class SinkhornNotConverged(RuntimeError):
    """Sinkhorn iterations hit ``max_iter`` before the marginal tolerance."""

    def __init__(self, residual: float, iterations: int):
        super().__init__(f"Sinkhorn did not converge in {iterations} iterations (marginal residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True, slots=True, eq=False)
class Projections:
    directions: np.ndarray
    seed: int
    stream: tuple[int, ...] = ()

    @property
    def count(self) -> int:
        return self.directions.shape[0]

    def project(self, positions: np.ndarray) -> np.ndarray:
        """(n, L) array of <x_i, theta_l>."""
        return positions @ self.directions.T


@dataclass(frozen=True, slots=True, eq=False)
class DualPotentials:
    f: np.ndarray
    g: np.ndarray
    residual: float
    iterations: int
    epsilon: float
    history: list[float] = field(default_factory=list)

    @property
    def value(self) -> float:
        """Entropic transport cost at the duals, <f, a> + <g, b> for uniform a, b."""
        return float(self.f.mean() + self.g.mean())


def sample_sphere(seed: int, count: int, d: int, stream: tuple[int, ...] = ()) -> Projections:
    """Normalized i.i.d. standard Gaussian vectors, one per row."""
    if count < 1 or d < 1:
        raise ValueError(f"need count >= 1 and d >= 1, got count={count}, d={d}")
    rng = make_rng(seed, *stream)
    directions = rng.standard_normal((count, d))
    norms = np.linalg.norm(directions, axis=1)
    # zero-norm draws have probability zero but would divide by zero
    while np.any(norms == 0.0):
        zero = norms == 0.0
        directions[zero] = rng.standard_normal((int(zero.sum()), d))
        norms = np.linalg.norm(directions, axis=1)
    directions = directions / norms[:, None]
    directions.setflags(write=False)
    return Projections(directions=directions, seed=seed, stream=tuple(stream))


def sort_stable(values: np.ndarray, axis: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Sorted values and the permutation, ties broken by original index."""
    order = np.argsort(values, axis=axis, kind="stable")
    return np.take_along_axis(values, order, axis=axis), order


def monotone_coupling(n: int, m: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    North-west corner coupling between n and m uniform atoms in sorted order.

    Cumulative masses are handled as integers over the common denominator
    ``n * m`` so that coinciding breakpoints are detected exactly.

    Returns
    -------
    src_index, tgt_index, mass : ndarray
        One entry per nonzero cell of the coupling; masses sum to one.
    """
    if n < 1 or m < 1:
        raise ValueError(f"both measures need at least one atom, got n={n}, m={m}")
    src_cum = np.arange(1, n + 1, dtype=np.int64) * m
    tgt_cum = np.arange(1, m + 1, dtype=np.int64) * n
    breaks = np.union1d(src_cum, tgt_cum)
    prev = np.concatenate(([0], breaks[:-1]))
    src_index = np.searchsorted(src_cum, breaks, side="left")
    tgt_index = np.searchsorted(tgt_cum, breaks, side="left")
    mass = (breaks - prev) / float(n * m)
    return src_index, tgt_index, mass


def quantile_displacement(src: np.ndarray, tgt: np.ndarray) -> np.ndarray:
    """
    Displacement t - T(t) of the optimal 1D map evaluated at sorted source atoms.

    For equal sizes this is rank pairing, ``src_i - tgt_i``. For unequal sizes,
    T(src_i) is the barycentre of the target mass the monotone coupling sends
    src_i to, which is the gradient of the exact squared 1D Wasserstein
    distance (it agrees with brute-force assignment on replicated atoms).
    Both inputs must be sorted ascending; works column-wise on 2D inputs.
    """
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if tgt.shape[0] == 0:
        raise ValueError("empty target")
    n, m = src.shape[0], tgt.shape[0]
    if n == m:
        return src - tgt
    src_index, tgt_index, mass = monotone_coupling(n, m)
    weighted = mass.reshape((-1,) + (1,) * (tgt.ndim - 1)) * tgt[tgt_index]
    barycentre = np.zeros_like(src)
    np.add.at(barycentre, src_index, weighted)
    return src - n * barycentre


def wasserstein_1d_squared(src: np.ndarray, tgt: np.ndarray) -> np.ndarray:
    """Squared W2 between uniform measures on sorted supports; column-wise on 2D inputs."""
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if tgt.shape[0] == 0:
        raise ValueError("empty target")
    n, m = src.shape[0], tgt.shape[0]
    if n == m:
        return np.mean((src - tgt) ** 2, axis=0)
    src_index, tgt_index, mass = monotone_coupling(n, m)
    diff = src[src_index] - tgt[tgt_index]
    return np.tensordot(mass, diff**2, axes=(0, 0))


def squared_distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return cdist(x, y, metric="sqeuclidean")


def _softmin(cost: np.ndarray, potential: np.ndarray, epsilon: float) -> np.ndarray:
    """-eps * log mean_j exp((potential_j - cost_ij) / eps), row-wise, max-shifted by logsumexp."""
    size = potential.shape[0]
    return -epsilon * (logsumexp((potential[None, :] - cost) / epsilon, axis=1) - np.log(size))


@optional_logger
def sinkhorn_solve(src: np.ndarray, tgt: np.ndarray | None, epsilon: float, max_iter: int = 1000,
                   tol: float = 1e-6, logger=None) -> DualPotentials:
    """
    Entropic OT duals between two uniform point clouds, squared Euclidean cost.

    Parameters
    ----------
    src, tgt : ndarray
        ``(n, d)`` and ``(m, d)`` supports. ``tgt=None``, or a `tgt` equal to
        `src`, solves the symmetric self-problem OT_eps(mu, mu) with the
        averaged fixed-point update ``f <- (f + softmin(f)) / 2``, whose
        iterates stay symmetric.
    epsilon : float
        Entropic regularization, > 0.
    max_iter : int
        Maximum number of (pairs of) dual updates.
    tol : float
        Stop when the linear-domain marginal violation
        ``max_i |sum_j gamma_ij - 1/n| * n`` is at most `tol`.

    Returns
    -------
    DualPotentials
        ``f`` is always the exact softmin of ``g`` (row marginals exact).

    Raises
    ------
    SinkhornNotConverged
        When `max_iter` is exhausted; carries the final residual.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    src = np.asarray(src, dtype=np.float64)
    symmetric = tgt is None or np.array_equal(src, tgt)
    tgt = src if symmetric else np.asarray(tgt, dtype=np.float64)
    if tgt.shape[0] == 0:
        raise ValueError("empty target")
    cost = squared_distances(src, tgt)

    history: list[float] = []
    residual = np.inf
    if symmetric:
        f = _softmin(cost, np.zeros(src.shape[0]), epsilon)
        for iteration in range(1, max_iter + 1):
            f_next = _softmin(cost, f, epsilon)
            residual = float(np.max(np.abs(np.expm1((f - f_next) / epsilon))))
            history.append(residual)
            f = 0.5 * (f + f_next)
            if residual <= tol:
                break
        g = f
    else:
        f = _softmin(cost, np.zeros(tgt.shape[0]), epsilon)
        g = np.zeros(tgt.shape[0])
        for iteration in range(1, max_iter + 1):
            g = _softmin(cost.T, f, epsilon)
            f_next = _softmin(cost, g, epsilon)
            residual = float(np.max(np.abs(np.expm1((f - f_next) / epsilon))))
            history.append(residual)
            f = f_next
            if residual <= tol:
                break

    logger.debug(f"Sinkhorn finished after {iteration} iterations, residual {residual:.3e}")
    if residual > tol:
        raise SinkhornNotConverged(residual, iteration)
    return DualPotentials(f=f, g=g, residual=residual, iterations=iteration, epsilon=epsilon, history=history)
