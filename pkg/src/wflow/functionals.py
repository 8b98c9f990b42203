"""
Objective functionals on empirical measures.

Every functional exposes ``value(cloud)`` and ``wgrad(cloud)``. The Wasserstein
gradient is the L2(mu) gradient, i.e. at particle ``i`` it is ``n`` times the
partial derivative of ``value`` with respect to ``x_i``; this is the scaling
`wflow.diagnostics.grad_check` verifies.

Sliced functionals are Monte-Carlo: their projections are drawn once from
``(seed, *stream)`` and shared between ``value`` and ``wgrad``;
``resample(stream)`` returns the same functional with a fresh draw.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln, softmax

from wflow import ot1d
from wflow.measures import DomainError, ParticleCloud, ShapeError, VelocityField, check_spd

__all__ = [
    "Functional",
    "SumFunctional",
    "ScaledFunctional",
    "QuadraticPotentialParams",
    "QuadraticPotential",
    "DirichletPotential",
    "InteractionKernel",
    "InteractionEnergy",
    "SWParams",
    "SinkhornParams",
    "EDParams",
    "SlicedWasserstein",
    "SinkhornDivergence",
    "SlicedEnergyDistance",
    "KDEEntropy",
    "DuplicateParticlesError",
    "potential_value",
    "potential_grad",
    "interaction_value",
    "interaction_grad",
    "sw_value",
    "sw_grad",
    "sinkhorn_value",
    "sinkhorn_grad",
    "sliced_ed_value",
    "sliced_ed_grad",
    "kde_entropy_grad",
    "silverman_bandwidth",
    "kozachenko_leonenko_entropy",
]


class DuplicateParticlesError(ValueError):
    """Nearest-neighbour entropy estimation met two particles at the same position."""


class Functional(ABC):
    """Objective F with value and Wasserstein gradient at an empirical measure."""

    stochastic: bool = False

    @abstractmethod
    def value(self, cloud: ParticleCloud) -> float:
        ...

    @abstractmethod
    def wgrad(self, cloud: ParticleCloud) -> VelocityField:
        ...

    def resample(self, stream: int | tuple[int, ...]) -> "Functional":
        """Same functional with Monte-Carlo draws from `stream`; deterministic functionals return themselves."""
        return self

    def standard_error(self, cloud: ParticleCloud) -> float:
        """Monte-Carlo standard error of ``value``; zero for deterministic functionals."""
        return 0.0

    def __add__(self, other: "Functional") -> "SumFunctional":
        return SumFunctional((self, other))

    def __mul__(self, weight: float) -> "ScaledFunctional":
        return ScaledFunctional(self, float(weight))

    __rmul__ = __mul__


class SumFunctional(Functional):
    def __init__(self, terms):
        flat = []
        for term in terms:
            flat.extend(term.terms if isinstance(term, SumFunctional) else [term])
        self.terms = tuple(flat)
        self.stochastic = any(term.stochastic for term in self.terms)

    def value(self, cloud):
        return float(sum(term.value(cloud) for term in self.terms))

    def wgrad(self, cloud):
        values = sum(term.wgrad(cloud).values for term in self.terms)
        return VelocityField(values)

    def resample(self, stream):
        return SumFunctional(term.resample(stream) for term in self.terms)

    def standard_error(self, cloud):
        return float(np.sqrt(sum(term.standard_error(cloud) ** 2 for term in self.terms)))


class ScaledFunctional(Functional):
    def __init__(self, inner: Functional, weight: float):
        self.inner = inner
        self.weight = weight
        self.stochastic = inner.stochastic

    def value(self, cloud):
        return self.weight * self.inner.value(cloud)

    def wgrad(self, cloud):
        return self.inner.wgrad(cloud) * self.weight

    def resample(self, stream):
        return ScaledFunctional(self.inner.resample(stream), self.weight)

    def standard_error(self, cloud):
        return abs(self.weight) * self.inner.standard_error(cloud)


# -------- potential energies -------------------------------------------------

@dataclass(slots=True)
class QuadraticPotentialParams:
    """V(x) = 1/2 (x - m)^T P (x - m) with P = Sigma^{-1} the precision."""
    precision: np.ndarray
    shift: np.ndarray | None = None

    def __post_init__(self):
        self.precision = check_spd(self.precision, "precision")
        d = self.precision.shape[0]
        self.shift = np.zeros(d) if self.shift is None else np.asarray(self.shift, dtype=np.float64).reshape(d)

    @classmethod
    def from_covariance(cls, covariance, shift=None) -> "QuadraticPotentialParams":
        return cls(np.linalg.inv(check_spd(covariance, "covariance")), shift)

    def merge(self, **kw) -> "QuadraticPotentialParams":
        return replace(self, **kw)


class QuadraticPotential(Functional):
    """Potential energy int V dmu for a quadratic V, with its convex conjugate in closed form."""

    def __init__(self, params: QuadraticPotentialParams):
        self.params = params

    @property
    def dim(self) -> int:
        return self.params.precision.shape[0]

    def _check(self, x: np.ndarray):
        if x.shape[-1] != self.dim:
            raise ShapeError(f"potential of dimension {self.dim} evaluated at points of dimension {x.shape[-1]}")

    def pointwise(self, x: np.ndarray) -> np.ndarray:
        self._check(x)
        y = x - self.params.shift
        return 0.5 * np.einsum("...i,ij,...j->...", y, self.params.precision, y)

    def pointwise_grad(self, x: np.ndarray) -> np.ndarray:
        self._check(x)
        return (x - self.params.shift) @ self.params.precision

    def conjugate_grad(self, y: np.ndarray) -> np.ndarray:
        """grad V*(y) = P^{-1} y + m."""
        self._check(y)
        return np.linalg.solve(self.params.precision, y.T).T + self.params.shift

    def value(self, cloud):
        return float(np.mean(self.pointwise(cloud.positions)))

    def wgrad(self, cloud):
        return VelocityField(self.pointwise_grad(cloud.positions))


class DirichletPotential(Functional):
    """
    V(x) = -sum_c a_c log x_c - a_{d+1} log(1 - sum_c x_c) on the open simplex,
    the negative log-density of Dirichlet(a) up to its normalizing constant.
    """

    def __init__(self, alpha):
        alpha = np.asarray(alpha, dtype=np.float64)
        if alpha.ndim != 1 or alpha.size < 2 or np.any(alpha <= 0):
            raise ValueError(f"Dirichlet concentrations must be >= 2 positive numbers, got {alpha}")
        self.alpha = alpha

    def _slack(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.alpha.size - 1:
            raise ShapeError(f"Dirichlet({self.alpha.size}) potential needs points of dimension {self.alpha.size - 1}")
        slack = 1.0 - x.sum(axis=-1)
        if np.any(x <= 0) or np.any(slack <= 0):
            raise DomainError("particle outside the open simplex")
        return slack

    def pointwise(self, x):
        slack = self._slack(x)
        return -(np.log(x) @ self.alpha[:-1]) - self.alpha[-1] * np.log(slack)

    def pointwise_grad(self, x):
        slack = self._slack(x)
        return -self.alpha[:-1] / x + (self.alpha[-1] / slack)[..., None]

    def value(self, cloud):
        return float(np.mean(self.pointwise(cloud.positions)))

    def wgrad(self, cloud):
        return VelocityField(self.pointwise_grad(cloud.positions))


def potential_value(cloud: ParticleCloud, params: QuadraticPotentialParams) -> float:
    return QuadraticPotential(params).value(cloud)


def potential_grad(cloud: ParticleCloud, params: QuadraticPotentialParams) -> VelocityField:
    return QuadraticPotential(params).wgrad(cloud)


# -------- interaction energies ----------------------------------------------

_FAMILIES = ("K2", "K4", "quartic_well")


@dataclass(frozen=True, slots=True, eq=False)
class InteractionKernel:
    """
    Even interaction kernel in the metric ``|z|_A^2 = z^T A z``.

    ``K2``: 1/2 q, ``K4``: 1/4 q^2 + 1/2 q, ``quartic_well``: 1/4 q^2 - 1/2 q,
    with ``q = |z|_A^2``. The ``*_sigma`` tags use ``A = Sigma^{-1}``.
    """
    family: str
    metric: np.ndarray

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}, expected one of {_FAMILIES}")
        metric = check_spd(self.metric, "kernel metric").copy()
        metric.setflags(write=False)
        object.__setattr__(self, "metric", metric)

    @classmethod
    def from_tag(cls, tag: str, dim: int, sigma=None) -> "InteractionKernel":
        """Build from a tag in {K2, K4, quartic_well} with optional ``_sigma`` suffix."""
        tag = tag.replace("-", "_")
        family, anisotropic = (tag[:-6], True) if tag.endswith("_sigma") else (tag, False)
        if anisotropic:
            if sigma is None:
                raise ValueError(f"kernel {tag!r} needs a covariance sigma")
            metric = np.linalg.inv(check_spd(sigma, "sigma"))
        else:
            metric = np.eye(dim)
        return cls(family, metric)

    @property
    def dim(self) -> int:
        return self.metric.shape[0]

    def _q(self, z):
        az = z @ self.metric
        return np.einsum("...i,...i->...", z, az), az

    def __call__(self, z: np.ndarray) -> np.ndarray:
        q, _ = self._q(z)
        if self.family == "K2":
            return 0.5 * q
        if self.family == "K4":
            return 0.25 * q**2 + 0.5 * q
        return 0.25 * q**2 - 0.5 * q

    def _coefficient(self, q):
        if self.family == "K2":
            return np.ones_like(q)
        if self.family == "K4":
            return q + 1.0
        return q - 1.0

    def grad(self, z: np.ndarray) -> np.ndarray:
        q, az = self._q(z)
        return self._coefficient(q)[..., None] * az

    def hessian(self, z: np.ndarray) -> np.ndarray:
        q, az = self._q(z)
        base = self._coefficient(q)[..., None, None] * self.metric
        if self.family == "K2":
            return np.broadcast_to(base, z.shape + (z.shape[-1],)).copy()
        return base + 2.0 * az[..., :, None] * az[..., None, :]


def pairwise_differences(positions: np.ndarray) -> np.ndarray:
    """(n, n, d) array of x_i - x_j."""
    return positions[:, None, :] - positions[None, :, :]


class InteractionEnergy(Functional):
    """1/2 iint W(x - y) dmu(x) dmu(y); sums run over all ordered pairs including i = j."""

    def __init__(self, kernel: InteractionKernel):
        self.kernel = kernel

    def value(self, cloud):
        diffs = pairwise_differences(cloud.positions)
        return float(0.5 * np.mean(self.kernel(diffs)))

    def wgrad(self, cloud):
        diffs = pairwise_differences(cloud.positions)
        return VelocityField(self.kernel.grad(diffs).mean(axis=1))


def interaction_value(cloud: ParticleCloud, kernel: InteractionKernel) -> float:
    return InteractionEnergy(kernel).value(cloud)


def interaction_grad(cloud: ParticleCloud, kernel: InteractionKernel) -> VelocityField:
    return InteractionEnergy(kernel).wgrad(cloud)


# -------- discrepancies to a target cloud -----------------------------------

@dataclass(slots=True)
class SWParams:
    n_projections: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.n_projections < 1:
            raise ValueError(f"need at least one projection, got {self.n_projections}")

    def merge(self, **kw) -> "SWParams":
        return replace(self, **kw)


@dataclass(slots=True)
class SinkhornParams:
    epsilon: float = 1.0
    max_iter: int = 1000
    tol: float = 1e-6

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("Sinkhorn needs tol > 0 and max_iter >= 1")

    def merge(self, **kw) -> "SinkhornParams":
        return replace(self, **kw)


@dataclass(slots=True)
class EDParams:
    n_projections: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.n_projections < 1:
            raise ValueError(f"need at least one projection, got {self.n_projections}")

    def merge(self, **kw) -> "EDParams":
        return replace(self, **kw)


def _check_target(target: ParticleCloud | None, dim: int | None = None) -> ParticleCloud:
    if target is None or target.n == 0:
        raise ValueError("empty target")
    if dim is not None and target.d != dim:
        raise ShapeError(f"target of dimension {target.d} compared with a cloud of dimension {dim}")
    return target


class _SlicedFunctional(Functional):
    stochastic = True

    def __init__(self, target: ParticleCloud, params, stream: tuple[int, ...] = ()):
        self.target = _check_target(target)
        self.params = params
        self.stream = stream
        self.projections = ot1d.sample_sphere(params.seed, params.n_projections, target.d, stream=stream)

    def resample(self, stream):
        return type(self)(self.target, self.params, stream=tuple(int(s) for s in np.atleast_1d(stream)))

    @abstractmethod
    def slice_values(self, cloud: ParticleCloud) -> np.ndarray:
        ...

    def value(self, cloud):
        return float(np.mean(self.slice_values(cloud)))

    def standard_error(self, cloud):
        values = self.slice_values(cloud)
        if values.size < 2:
            return 0.0
        return float(np.std(values, ddof=1) / np.sqrt(values.size))

    def _projected(self, cloud):
        _check_target(self.target, cloud.d)
        return self.projections.project(cloud.positions), self.projections.project(self.target.positions)


class SlicedWasserstein(_SlicedFunctional):
    """1/(2L) sum_l W2^2(theta_l # mu, theta_l # nu)."""

    def slice_values(self, cloud):
        src, tgt = self._projected(cloud)
        src_sorted, _ = ot1d.sort_stable(src, axis=0)
        tgt_sorted, _ = ot1d.sort_stable(tgt, axis=0)
        return 0.5 * ot1d.wasserstein_1d_squared(src_sorted, tgt_sorted)

    def wgrad(self, cloud):
        src, tgt = self._projected(cloud)
        src_sorted, order = ot1d.sort_stable(src, axis=0)
        tgt_sorted, _ = ot1d.sort_stable(tgt, axis=0)
        displacement = np.empty_like(src)
        np.put_along_axis(displacement, order, ot1d.quantile_displacement(src_sorted, tgt_sorted), axis=0)
        return VelocityField(displacement @ self.projections.directions / self.projections.count)


def _abs_sum_against(points: np.ndarray, sorted_ref: np.ndarray, ref_prefix: np.ndarray) -> np.ndarray:
    """sum_j |p - r_j| for each p, with ``ref_prefix`` the cumulative sums of sorted_ref (leading 0)."""
    below = np.searchsorted(sorted_ref, points, side="left")
    total = ref_prefix[-1]
    return points * (2 * below - sorted_ref.size) - 2 * ref_prefix[below] + total


def _self_abs_sum(sorted_values: np.ndarray) -> float:
    """sum_{i,j} |s_i - s_j| for sorted s."""
    n = sorted_values.size
    ranks = np.arange(n)
    return float(2.0 * np.sum((2 * ranks - n + 1) * sorted_values))


def _sign_count(points: np.ndarray, sorted_ref: np.ndarray) -> np.ndarray:
    """sum_j sign(p - r_j) with sign(0) = 0."""
    below = np.searchsorted(sorted_ref, points, side="left")
    above = sorted_ref.size - np.searchsorted(sorted_ref, points, side="right")
    return below - above


class SlicedEnergyDistance(_SlicedFunctional):
    """
    Sliced energy distance, value and gradient from the same 1D slices.

    Per slice: 2/(nm) sum|s_i - t_j| - 1/n^2 sum|s_i - s_j| - 1/m^2 sum|t_i - t_j|.
    """

    def _slices(self, cloud):
        src, tgt = self._projected(cloud)
        return src, np.sort(tgt, axis=0, kind="stable")

    def slice_values(self, cloud):
        src, tgt_sorted = self._slices(cloud)
        n, m = src.shape[0], tgt_sorted.shape[0]
        values = np.empty(src.shape[1])
        for col in range(src.shape[1]):
            t = tgt_sorted[:, col]
            prefix = np.concatenate(([0.0], np.cumsum(t)))
            cross = _abs_sum_against(src[:, col], t, prefix).sum()
            values[col] = (2.0 * cross / (n * m) - _self_abs_sum(np.sort(src[:, col])) / n**2
                           - _self_abs_sum(t) / m**2)
        return values

    def wgrad(self, cloud):
        src, tgt_sorted = self._slices(cloud)
        n, m = src.shape[0], tgt_sorted.shape[0]
        slopes = np.empty_like(src)
        for col in range(src.shape[1]):
            s = src[:, col]
            s_sorted = np.sort(s)
            slopes[:, col] = 2.0 * _sign_count(s, tgt_sorted[:, col]) / m - 2.0 * _sign_count(s, s_sorted) / n
        return VelocityField(slopes @ self.projections.directions / self.projections.count)


class SinkhornDivergence(Functional):
    """
    Debiased entropic OT, OT_eps(mu, nu) - 1/2 OT_eps(mu, mu) - 1/2 OT_eps(nu, nu).

    Gradients use the envelope theorem: duals are held fixed and only the cost
    is differentiated, giving grad f_{mu nu}(x_i) - grad f_{mu mu}(x_i).
    """

    def __init__(self, target: ParticleCloud, params: SinkhornParams | None = None):
        self.target = _check_target(target)
        self.params = params or SinkhornParams()

    def _solve(self, src, tgt):
        return ot1d.sinkhorn_solve(src, tgt, self.params.epsilon, max_iter=self.params.max_iter, tol=self.params.tol)

    @cached_property
    def _target_self(self) -> ot1d.DualPotentials:
        return self._solve(self.target.positions, None)

    def value(self, cloud):
        _check_target(self.target, cloud.d)
        cross = self._solve(cloud.positions, self.target.positions)
        own = self._solve(cloud.positions, None)
        return float(cross.value - 0.5 * own.value - 0.5 * self._target_self.value)

    def _barycentres(self, x, y, potential):
        weights = softmax((potential[None, :] - ot1d.squared_distances(x, y)) / self.params.epsilon, axis=1)
        return weights @ y

    def wgrad(self, cloud):
        _check_target(self.target, cloud.d)
        x = cloud.positions
        cross = self._solve(x, self.target.positions)
        own = self._solve(x, None)
        to_target = self._barycentres(x, self.target.positions, cross.g)
        to_self = self._barycentres(x, x, own.f)
        return VelocityField(2.0 * (to_self - to_target))


def sw_value(cloud: ParticleCloud, target: ParticleCloud, params: SWParams) -> float:
    return SlicedWasserstein(target, params).value(cloud)


def sw_grad(cloud: ParticleCloud, target: ParticleCloud, params: SWParams) -> VelocityField:
    return SlicedWasserstein(target, params).wgrad(cloud)


def sinkhorn_value(cloud: ParticleCloud, target: ParticleCloud, params: SinkhornParams) -> float:
    return SinkhornDivergence(target, params).value(cloud)


def sinkhorn_grad(cloud: ParticleCloud, target: ParticleCloud, params: SinkhornParams) -> VelocityField:
    return SinkhornDivergence(target, params).wgrad(cloud)


def sliced_ed_value(cloud: ParticleCloud, target: ParticleCloud, params: EDParams) -> float:
    return SlicedEnergyDistance(target, params).value(cloud)


def sliced_ed_grad(cloud: ParticleCloud, target: ParticleCloud, params: EDParams) -> VelocityField:
    return SlicedEnergyDistance(target, params).wgrad(cloud)


# -------- entropy -------------------------------------------------------------

def silverman_bandwidth(cloud: ParticleCloud) -> np.ndarray:
    """Per-dimension Silverman rule, sigma_c * (4 / ((d + 2) n))^(1 / (d + 4))."""
    n, d = cloud.shape
    sigma = cloud.positions.std(axis=0, ddof=1) if n > 1 else np.zeros(d)
    return sigma * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))


def kde_entropy_grad(cloud: ParticleCloud, bandwidth=None) -> VelocityField:
    """
    Score of a Gaussian kernel density estimate at the particles, grad log rho_h(x_i).

    Row i is sum_j grad k_h(x_i - x_j) / sum_j k_h(x_i - x_j), the self term
    included. `bandwidth` is a scalar or a per-dimension vector; Silverman's
    rule when omitted.
    """
    if cloud.n < 2:
        raise ValueError("kernel density estimation needs at least two particles")
    h = silverman_bandwidth(cloud) if bandwidth is None else np.broadcast_to(np.asarray(bandwidth, dtype=np.float64), (cloud.d,))
    if np.any(~np.isfinite(h)) or np.any(h <= 0):
        raise ValueError(f"bandwidth must be positive, got {h}")
    diffs = pairwise_differences(cloud.positions) / h
    weights = softmax(-0.5 * np.sum(diffs**2, axis=-1), axis=1)
    return VelocityField(-np.einsum("ij,ijc->ic", weights, diffs) / h)


def kozachenko_leonenko_entropy(cloud: ParticleCloud, k: int = 1) -> float:
    """
    Differential entropy estimate from k-th nearest-neighbour distances,
    psi(n) - psi(k) + log V_d + (d / n) sum_i log r_i.
    """
    n, d = cloud.shape
    if n < k + 1:
        raise ValueError(f"need more than {k} particles for a {k}-nearest-neighbour estimate")
    distances, _ = cKDTree(cloud.positions).query(cloud.positions, k=k + 1)
    radii = distances[:, k]
    if np.any(radii <= 0.0):
        raise DuplicateParticlesError("duplicate particles give a zero nearest-neighbour distance")
    log_unit_ball = 0.5 * d * np.log(np.pi) - gammaln(0.5 * d + 1.0)
    return float(digamma(n) - digamma(k) + log_unit_ball + d * np.mean(np.log(radii)))


class KDEEntropy(Functional):
    """
    Negative entropy int rho log rho. The value is the nearest-neighbour
    estimate, the gradient the KDE score (the only subgradient, grad log rho).
    """

    def __init__(self, bandwidth=None):
        self.bandwidth = bandwidth

    def value(self, cloud):
        return -kozachenko_leonenko_entropy(cloud)

    def wgrad(self, cloud):
        return kde_entropy_grad(cloud, self.bandwidth)
