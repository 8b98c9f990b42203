"""
Gradient preconditioners grad h* for the preconditioned scheme
``T = Id - tau * grad h*(grad_W F(mu))``.

``magnitude`` is the descent quantity ``(1/n) sum_i h*(g_i)``; ``apply`` is its
gradient in each particle's gradient.
"""

from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np

from wflow.measures import ParticleCloud, ShapeError, VelocityField, check_spd

__all__ = ["Preconditioner", "Identity", "Polynomial", "MatrixQuadratic", "Covariance", "apply", "magnitude"]


class Preconditioner(ABC):
    @abstractmethod
    def apply(self, cloud: ParticleCloud, grad: VelocityField) -> VelocityField:
        ...

    @abstractmethod
    def magnitude(self, cloud: ParticleCloud, grad: VelocityField) -> float:
        ...


class Identity(Preconditioner):
    """h* = 1/2 |.|^2, plain Wasserstein gradient descent."""

    def apply(self, cloud, grad):
        return grad.check_matches(cloud)

    def magnitude(self, cloud, grad):
        grad.check_matches(cloud)
        return float(0.5 * np.mean(np.sum(grad.values**2, axis=1)))


class Polynomial(Preconditioner):
    """
    h*(g) = (|g|^a + 1)^(1/a) - 1, which grows linearly at infinity.

    grad h*(g) = |g|^(a-2) (|g|^a + 1)^(1/a - 1) g, with grad h*(0) = 0.
    """

    def __init__(self, a: float):
        if not a > 1:
            raise ValueError(f"polynomial preconditioner needs a > 1, got {a}")
        self.a = float(a)

    def apply(self, cloud, grad):
        grad.check_matches(cloud)
        g = grad.values
        norm = np.linalg.norm(g, axis=1)
        scale = np.zeros_like(norm)
        nonzero = norm > 0
        r = norm[nonzero]
        scale[nonzero] = r ** (self.a - 2) * (r**self.a + 1.0) ** (1.0 / self.a - 1.0)
        return VelocityField(scale[:, None] * g)

    def magnitude(self, cloud, grad):
        grad.check_matches(cloud)
        norm = np.linalg.norm(grad.values, axis=1)
        return float(np.mean((norm**self.a + 1.0) ** (1.0 / self.a) - 1.0))


class MatrixQuadratic(Preconditioner):
    """h*(g) = 1/2 g^T Lambda g."""

    def __init__(self, matrix):
        self.matrix = check_spd(matrix, "Lambda")

    def _checked(self, cloud, grad):
        grad.check_matches(cloud)
        if cloud.d != self.matrix.shape[0]:
            raise ShapeError(f"Lambda of size {self.matrix.shape[0]} used on a cloud of dimension {cloud.d}")
        return grad.values

    def apply(self, cloud, grad):
        return VelocityField(self._checked(cloud, grad) @ self.matrix)

    def magnitude(self, cloud, grad):
        g = self._checked(cloud, grad)
        return float(0.5 * np.mean(np.einsum("ij,jk,ik->i", g, self.matrix, g)))


class Covariance(Preconditioner):
    """Kalman-Wasserstein preconditioning by the biased empirical covariance of the current cloud."""

    def _matrix(self, cloud):
        if cloud.n < 2:
            raise ValueError("covariance preconditioning needs at least two particles")
        return cloud.covariance()

    def apply(self, cloud, grad):
        grad.check_matches(cloud)
        return VelocityField(grad.values @ self._matrix(cloud))

    def magnitude(self, cloud, grad):
        grad.check_matches(cloud)
        g = grad.values
        return float(0.5 * np.mean(np.einsum("ij,jk,ik->i", g, self._matrix(cloud), g)))


def apply(p: Preconditioner, cloud: ParticleCloud, grad: VelocityField) -> VelocityField:
    return p.apply(cloud, grad)


def magnitude(p: Preconditioner, cloud: ParticleCloud, grad: VelocityField) -> float:
    return p.magnitude(cloud, grad)
