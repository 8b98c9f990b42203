"""
Particle clouds, velocity fields and Gaussian states.

A `ParticleCloud` stores the support of a uniform empirical measure
(1/n) sum_i delta_{x_i} as an ``(n, d)`` array, particle index outer. Maps in
L2(mu) are only ever needed at the particles, so a `VelocityField` is the
``(n, d)`` array of their values. Both are immutable once constructed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import linalg

__all__ = [
    "ShapeError",
    "NotSPDError",
    "DomainError",
    "ParticleCloud",
    "VelocityField",
    "GaussianState",
    "make_rng",
    "center",
    "pushforward",
    "sample_gaussian",
    "sample_dirichlet",
    "read_cloud_csv",
    "write_cloud_csv",
    "check_spd",
]

SYMMETRY_RTOL = 1e-10


class ShapeError(ValueError):
    """Array shapes of clouds, fields or matrices do not agree."""


class NotSPDError(ValueError):
    """A matrix required to be symmetric positive definite is not."""


class DomainError(ValueError):
    """A particle lies outside the domain of a potential or mirror map."""


def _frozen(array) -> np.ndarray:
    out = np.array(array, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, slots=True, eq=False)
class ParticleCloud:
    positions: np.ndarray

    def __post_init__(self):
        positions = _frozen(self.positions)
        if positions.ndim == 1:
            positions = _frozen(positions[:, None])
        if positions.ndim != 2:
            raise ShapeError(f"positions must be an (n, d) array, got shape {positions.shape}")
        n, d = positions.shape
        if n < 1 or d < 1:
            raise ShapeError(f"a cloud needs n >= 1 particles in d >= 1 dimensions, got {positions.shape}")
        if not np.all(np.isfinite(positions)):
            raise ValueError("particle positions must be finite")
        object.__setattr__(self, "positions", positions)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.positions.shape

    def mean(self) -> np.ndarray:
        return self.positions.mean(axis=0)

    def covariance(self) -> np.ndarray:
        """Biased (1/n) empirical covariance."""
        centered = self.positions - self.mean()
        return centered.T @ centered / self.n

    def __len__(self) -> int:
        return self.n


@dataclass(frozen=True, slots=True, eq=False)
class VelocityField:
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim == 1:
            values = _frozen(values[:, None])
        if values.ndim != 2:
            raise ShapeError(f"field values must be an (n, d) array, got shape {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def check_matches(self, cloud: ParticleCloud) -> "VelocityField":
        if self.shape != cloud.shape:
            raise ShapeError(f"field of shape {self.shape} evaluated against cloud of shape {cloud.shape}")
        return self

    @classmethod
    def identity(cls, cloud: ParticleCloud) -> "VelocityField":
        return cls(cloud.positions)

    def __add__(self, other: "VelocityField") -> "VelocityField":
        return VelocityField(self.values + other.values)

    def __sub__(self, other: "VelocityField") -> "VelocityField":
        return VelocityField(self.values - other.values)

    def __mul__(self, scalar: float) -> "VelocityField":
        return VelocityField(float(scalar) * self.values)

    __rmul__ = __mul__


def check_spd(matrix, name: str = "matrix") -> np.ndarray:
    """Return `matrix` as a float array after checking symmetry (1e-10 relative) and positive eigenvalues."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {matrix.shape}")
    scale = max(np.abs(matrix).max(), np.finfo(float).tiny)
    if np.abs(matrix - matrix.T).max() > SYMMETRY_RTOL * scale:
        raise NotSPDError(f"{name} is not symmetric")
    eigenvalues = np.linalg.eigvalsh(0.5 * (matrix + matrix.T))
    if not np.all(np.isfinite(eigenvalues)) or eigenvalues.min() <= 0.0:
        raise NotSPDError(f"{name} is not positive definite (min eigenvalue {eigenvalues.min():.3e})")
    return matrix


@dataclass(frozen=True, slots=True, eq=False)
class GaussianState:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = _frozen(np.atleast_1d(self.mean))
        cov = _frozen(check_spd(self.cov, "covariance"))
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ShapeError(f"mean of shape {mean.shape} does not match covariance of shape {cov.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def d(self) -> int:
        return self.mean.size

    @classmethod
    def standard(cls, d: int, scale: float = 1.0) -> "GaussianState":
        return cls(np.zeros(d), scale**2 * np.eye(d))


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Counter-based generator for ``(seed, *stream)``.

    Philox keyed through a SeedSequence whose spawn key is `stream`: the same
    tuple always yields the same draws, and distinct streams are independent.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(sequence))


def center(cloud: ParticleCloud) -> ParticleCloud:
    """Shift the cloud by minus its mean."""
    return ParticleCloud(cloud.positions - cloud.mean())


def pushforward(cloud: ParticleCloud, transport: VelocityField) -> ParticleCloud:
    """Law of T(X) for X ~ cloud, T given by its values at the particles."""
    transport.check_matches(cloud)
    return ParticleCloud(transport.values)


def sample_gaussian(seed: int, n: int, state: GaussianState) -> ParticleCloud:
    """Draw `n` i.i.d. samples of `state` as ``mean + L z`` with ``L`` the Cholesky factor of the covariance."""
    if n < 1:
        raise ValueError(f"cannot sample an empty cloud (n={n})")
    try:
        chol = linalg.cholesky(state.cov, lower=True)
    except linalg.LinAlgError as exc:
        raise NotSPDError(f"Cholesky factorization failed: {exc}") from exc
    z = make_rng(seed).standard_normal((n, state.d))
    return ParticleCloud(state.mean + z @ chol.T)


def sample_dirichlet(seed: int, n: int, alpha) -> ParticleCloud:
    """
    Dirichlet samples stored by their first ``len(alpha) - 1`` coordinates.

    Draws on the boundary of the simplex (possible in floating point for
    small concentrations) are rejected and redrawn.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if n < 1:
        raise ValueError(f"cannot sample an empty cloud (n={n})")
    if alpha.ndim != 1 or alpha.size < 2 or np.any(alpha <= 0):
        raise ValueError(f"Dirichlet concentrations must be >= 2 positive numbers, got {alpha}")
    rng = make_rng(seed)
    samples = rng.dirichlet(alpha, size=n)
    bad = np.any(samples <= 0.0, axis=1)
    while np.any(bad):
        samples[bad] = rng.dirichlet(alpha, size=int(bad.sum()))
        bad = np.any(samples <= 0.0, axis=1)
    return ParticleCloud(samples[:, :-1])


def write_cloud_csv(cloud: ParticleCloud, path: str | Path) -> Path:
    """One particle per line, comma separated, no header, 17 significant digits."""
    path = Path(path)
    pd.DataFrame(cloud.positions).to_csv(path, header=False, index=False, float_format="%.17g")
    return path


def read_cloud_csv(path: str | Path) -> ParticleCloud:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"point cloud file not found: {path}")
    frame = pd.read_csv(path, header=None, dtype=np.float64, float_precision="round_trip")
    return ParticleCloud(frame.to_numpy())
