"""
Bregman potentials phi_mu on empirical measures, their mirror maps and divergences.

For a map ``T`` given by its values at the particles of ``mu``, a potential
evaluates ``phi(T # mu)`` (`BregmanPotential.value`) and its L2(mu) gradient
``grad phi_mu(T)`` (`BregmanPotential.forward_at`). The mirror map at the
identity is `BregmanPotential.forward`. Potentials with a closed-form pointwise
conjugate (``explicit_inverse``) invert it with `BregmanPotential.inverse`;
interaction potentials are inverted by damped Newton iterations.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg
from scipy.special import softmax, xlogy

from wflow.functionals import InteractionKernel, QuadraticPotential, pairwise_differences
from wflow.measures import DomainError, ParticleCloud, ShapeError, VelocityField, check_spd
from wflow.pipeline.logging_utils import optional_logger

__all__ = [
    "BregmanPotential",
    "PotentialBregman",
    "InteractionBregman",
    "SimplexEntropy",
    "QuadraticMatrix",
    "NewtonConfig",
    "NewtonResult",
    "NewtonFailure",
    "forward",
    "inverse_pointwise",
    "divergence",
    "newton_implicit_step",
]

# smallest coordinate (slack included) returned by the simplex inverse
SIMPLEX_FLOOR = 1e-12


class NewtonFailure(RuntimeError):
    """Newton iterations for an implicit mirror step did not reach the tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


def _l2_inner(a: np.ndarray, b: np.ndarray) -> float:
    """<a, b>_{L2(mu)} for uniform mu."""
    return float(np.sum(a * b) / a.shape[0])


class BregmanPotential(ABC):
    explicit_inverse: bool = False

    def _check(self, cloud: ParticleCloud, *fields: VelocityField):
        for fld in fields:
            fld.check_matches(cloud)

    @abstractmethod
    def value(self, cloud: ParticleCloud, transport: VelocityField) -> float:
        """phi(T # mu)."""

    @abstractmethod
    def forward_at(self, cloud: ParticleCloud, transport: VelocityField) -> VelocityField:
        """grad phi_mu(T), the L2(mu) gradient of T -> phi(T # mu)."""

    def forward(self, cloud: ParticleCloud) -> VelocityField:
        return self.forward_at(cloud, VelocityField.identity(cloud))

    def inverse(self, field: VelocityField) -> VelocityField:
        raise TypeError(f"{type(self).__name__} has no closed-form inverse mirror map")

    def divergence(self, cloud: ParticleCloud, transport: VelocityField, other: VelocityField) -> float:
        """d_phi(T, S) = phi(T) - phi(S) - <grad phi_mu(S), T - S>_{L2(mu)}."""
        self._check(cloud, transport, other)
        return (self.value(cloud, transport) - self.value(cloud, other)
                - _l2_inner(self.forward_at(cloud, other).values, transport.values - other.values))


class PotentialBregman(BregmanPotential):
    """phi(mu) = int V dmu for a potential V with closed-form grad V*."""

    explicit_inverse = True

    def __init__(self, potential: QuadraticPotential):
        self.potential = potential

    def value(self, cloud, transport):
        self._check(cloud, transport)
        return float(np.mean(self.potential.pointwise(transport.values)))

    def forward_at(self, cloud, transport):
        self._check(cloud, transport)
        return VelocityField(self.potential.pointwise_grad(transport.values))

    def inverse(self, field):
        return VelocityField(self.potential.conjugate_grad(field.values))

    def divergence(self, cloud, transport, other):
        # (1/n) sum_i d_V(T_i, S_i)
        self._check(cloud, transport, other)
        t, s = transport.values, other.values
        d_v = (self.potential.pointwise(t) - self.potential.pointwise(s)
               - np.einsum("ij,ij->i", self.potential.pointwise_grad(s), t - s))
        return float(np.mean(d_v))


class InteractionBregman(BregmanPotential):
    """phi(mu) = 1/2 iint W(x - y) dmu(x) dmu(y); inverted by `newton_implicit_step`."""

    explicit_inverse = False

    def __init__(self, kernel: InteractionKernel):
        self.kernel = kernel

    def value(self, cloud, transport):
        self._check(cloud, transport)
        return float(0.5 * np.mean(self.kernel(pairwise_differences(transport.values))))

    def forward_at(self, cloud, transport):
        self._check(cloud, transport)
        return VelocityField(self.kernel.grad(pairwise_differences(transport.values)).mean(axis=1))

    def divergence(self, cloud, transport, other):
        # 1/(2 n^2) sum_{i,j} d_W(T_i - T_j, S_i - S_j)
        self._check(cloud, transport, other)
        a = pairwise_differences(transport.values)
        b = pairwise_differences(other.values)
        d_w = self.kernel(a) - self.kernel(b) - np.einsum("ijc,ijc->ij", self.kernel.grad(b), a - b)
        return float(0.5 * np.mean(d_w))

    def residual(self, positions: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        """G_j(x) = (1/n) sum_l grad W(x_j - x_l) - rhs_j."""
        return self.kernel.grad(pairwise_differences(positions)).mean(axis=1) - rhs

    def jacobian(self, positions: np.ndarray) -> np.ndarray:
        """
        Dense (n d, n d) Jacobian of the residual.

        With ``H_jl = (1/n) hess W(x_j - x_l)``, block (j, i) is ``-H_ji`` and
        the diagonal block j adds ``sum_l H_jl`` over all l. The l = j term of
        that sum cancels the ``-H_jj`` already placed on the diagonal.
        """
        n, d = positions.shape
        blocks = self.kernel.hessian(pairwise_differences(positions)) / n
        jac = -blocks.transpose(0, 2, 1, 3).reshape(n * d, n * d)
        diagonal = blocks.sum(axis=1)
        for j in range(n):
            jac[j * d:(j + 1) * d, j * d:(j + 1) * d] += diagonal[j]
        return jac


class SimplexEntropy(BregmanPotential):
    """
    Entropic mirror map of the open simplex in first-``d``-coordinates form,
    psi(x) = sum_c x_c log x_c + s log s with slack s = 1 - sum_c x_c.
    """

    explicit_inverse = True

    @staticmethod
    def _slack(x: np.ndarray) -> np.ndarray:
        slack = 1.0 - x.sum(axis=-1)
        if np.any(x <= 0) or np.any(slack <= 0):
            raise DomainError("particle outside the open simplex")
        return slack

    def value(self, cloud, transport):
        self._check(cloud, transport)
        x = transport.values
        slack = self._slack(x)
        return float(np.mean(xlogy(x, x).sum(axis=1) + xlogy(slack, slack)))

    def forward_at(self, cloud, transport):
        self._check(cloud, transport)
        x = transport.values
        slack = self._slack(x)
        return VelocityField(np.log(x) - np.log(slack)[:, None])

    def inverse(self, field):
        # softmax against an implicit zero logit for the slack coordinate
        y = field.values
        full = softmax(np.concatenate([y, np.zeros((y.shape[0], 1))], axis=1), axis=1)
        if np.any(full < SIMPLEX_FLOOR):
            # saturated logits: every coordinate and the slack stay >= SIMPLEX_FLOOR
            full = np.maximum(full, SIMPLEX_FLOOR)
            full /= full.sum(axis=1, keepdims=True)
        return VelocityField(full[:, :-1])


class QuadraticMatrix(BregmanPotential):
    """phi(mu) = 1/2 int x^T Lambda^{-1} x dmu; mirror map Lambda^{-1} x, inverse Lambda y."""

    explicit_inverse = True

    def __init__(self, matrix):
        self.matrix = check_spd(matrix, "Lambda")
        self.precision = np.linalg.inv(self.matrix)

    def _check(self, cloud, *fields):
        super()._check(cloud, *fields)
        if cloud.d != self.matrix.shape[0]:
            raise ShapeError(f"Lambda of size {self.matrix.shape[0]} used on a cloud of dimension {cloud.d}")

    def value(self, cloud, transport):
        self._check(cloud, transport)
        x = transport.values
        return float(0.5 * np.mean(np.einsum("ij,jk,ik->i", x, self.precision, x)))

    def forward_at(self, cloud, transport):
        self._check(cloud, transport)
        return VelocityField(transport.values @ self.precision)

    def inverse(self, field):
        return VelocityField(field.values @ self.matrix)


@dataclass(slots=True)
class NewtonConfig:
    """Damped Newton iterations for the implicit mirror step."""
    damping: float = 1.0
    tol: float = 1e-10
    max_iter: int = 50
    ridge: float = 1e-8
    max_halvings: int = 20

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")
        if not self.tol > 0:
            raise ValueError(f"tolerance must be > 0, got {self.tol}")
        if self.max_iter < 1 or self.ridge < 0 or self.max_halvings < 0:
            raise ValueError("Newton needs max_iter >= 1, ridge >= 0 and max_halvings >= 0")

    def merge(self, **kw) -> "NewtonConfig":
        return replace(self, **kw)


@dataclass(frozen=True, slots=True)
class NewtonResult:
    cloud: ParticleCloud
    residual: float
    iterations: int


def _residual_norm(residual: np.ndarray) -> float:
    return float(np.max(np.linalg.norm(residual, axis=1)))


@optional_logger
def newton_implicit_step(potential: InteractionBregman, cloud: ParticleCloud, rhs: VelocityField,
                         cfg: NewtonConfig | None = None, logger=None) -> NewtonResult:
    """
    Solve ``grad phi_nu(x) = rhs`` for the positions of nu, starting from `cloud`.

    Interaction mirror maps are translation invariant, so the mean of `rhs` is
    removed before solving (its mean is zero whenever it comes from an
    interaction gradient) and the returned cloud keeps the mean of `cloud`.

    Parameters
    ----------
    potential : InteractionBregman
    cloud : ParticleCloud
        Current particles, used as the initial guess.
    rhs : VelocityField
        Target values of the mirror map, one row per particle.
    cfg : NewtonConfig, optional

    Returns
    -------
    NewtonResult
        Solution cloud, final ``max_j |G_j|_2`` and the number of Newton steps.

    Raises
    ------
    NewtonFailure
        Singular system after the ridge, no decrease after all step halvings,
        or `cfg.max_iter` exhausted.
    """
    if not isinstance(potential, InteractionBregman):
        raise TypeError("Newton iterations are only needed for interaction potentials")
    cfg = cfg or NewtonConfig()
    rhs.check_matches(cloud)
    target = rhs.values - rhs.values.mean(axis=0)
    origin = cloud.mean()
    n, d = cloud.shape

    x = cloud.positions - origin
    residual = potential.residual(x, target)
    norm = _residual_norm(residual)
    if norm <= cfg.tol:
        return NewtonResult(cloud=cloud, residual=norm, iterations=0)
    iteration = 0
    while norm > cfg.tol:
        if iteration == cfg.max_iter:
            raise NewtonFailure("Newton iterations exhausted", norm, iteration)
        iteration += 1
        jac = potential.jacobian(x) + cfg.ridge * np.eye(n * d)
        try:
            delta = linalg.solve(jac, residual.reshape(-1), assume_a="sym").reshape(n, d)
        except (linalg.LinAlgError, ValueError) as exc:
            raise NewtonFailure(f"linear solve failed: {exc}", norm, iteration) from exc

        step = cfg.damping
        for _ in range(cfg.max_halvings + 1):
            trial = x - step * delta
            trial_residual = potential.residual(trial, target)
            trial_norm = _residual_norm(trial_residual)
            if trial_norm < norm:
                break
            step *= 0.5
        else:
            raise NewtonFailure("no residual decrease along the Newton direction", norm, iteration)

        x, residual, norm = trial, trial_residual, trial_norm
        logger.debug(f"Newton iteration {iteration}: residual {norm:.3e}, step {step:g}")

    x = x - x.mean(axis=0) + origin
    return NewtonResult(cloud=ParticleCloud(x), residual=norm, iterations=iteration)


def forward(potential: BregmanPotential, cloud: ParticleCloud) -> VelocityField:
    return potential.forward(cloud)


def inverse_pointwise(potential: BregmanPotential, field: VelocityField) -> VelocityField:
    if not potential.explicit_inverse:
        raise TypeError(f"{type(potential).__name__} has no closed-form inverse mirror map")
    return potential.inverse(field)


def divergence(potential: BregmanPotential, cloud: ParticleCloud, transport: VelocityField,
               other: VelocityField) -> float:
    if not isinstance(potential, BregmanPotential):
        raise TypeError(f"unsupported potential kind {type(potential).__name__}")
    return potential.divergence(cloud, transport, other)
