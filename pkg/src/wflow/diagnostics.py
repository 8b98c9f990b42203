"""
Numerical checks of the calculus the schemes rely on.

- `grad_check`: Wasserstein gradients against central finite differences
- `smoothness_probe`: ratios of Bregman divergences along transport curves
- `entropy_kl_estimate`: nearest-neighbour KL trace for sampling experiments
- `run_check_suite`: the battery behind ``wflow check``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from wflow.bregman import (
    BregmanPotential,
    InteractionBregman,
    PotentialBregman,
    QuadraticMatrix,
    SimplexEntropy,
)
from wflow.functionals import (
    EDParams,
    Functional,
    InteractionEnergy,
    InteractionKernel,
    QuadraticPotential,
    QuadraticPotentialParams,
    SinkhornDivergence,
    SinkhornParams,
    SlicedEnergyDistance,
    SlicedWasserstein,
    SWParams,
    kozachenko_leonenko_entropy,
)
from wflow.measures import ParticleCloud, VelocityField, make_rng, sample_dirichlet
from wflow.pipeline.logging_utils import optional_logger
from wflow.pipeline.parallel import parallel_map_ordered

__all__ = [
    "CheckResult",
    "PROBE_GRID",
    "grad_check",
    "smoothness_probe",
    "entropy_kl_estimate",
    "random_spd",
    "run_check_suite",
]

PROBE_GRID = 11
PROBE_FLOOR = 1e-12


def grad_check(functional: Functional, cloud: ParticleCloud, h: float = 1e-5) -> float:
    """
    Max relative error between `functional.wgrad` and ``n`` times the central
    difference of `functional.value`, ``|fd - g| / max(1, |g|)`` over all coordinates.
    """
    if not h > 0:
        raise ValueError(f"finite-difference step must be > 0, got {h}")
    grad = functional.wgrad(cloud).check_matches(cloud).values
    n, d = cloud.shape
    worst = 0.0
    for i in range(n):
        for c in range(d):
            plus = cloud.positions.copy()
            minus = cloud.positions.copy()
            plus[i, c] += h
            minus[i, c] -= h
            fd = n * (functional.value(ParticleCloud(plus)) - functional.value(ParticleCloud(minus))) / (2 * h)
            worst = max(worst, abs(fd - grad[i, c]) / max(1.0, abs(grad[i, c])))
    return worst


def _functional_divergence(functional: Functional, cloud: ParticleCloud, a: VelocityField, b: VelocityField) -> float:
    pushed_b = ParticleCloud(b.values)
    inner = np.sum(functional.wgrad(pushed_b).values * (a.values - b.values)) / cloud.n
    return functional.value(ParticleCloud(a.values)) - functional.value(pushed_b) - inner


def smoothness_probe(functional: Functional, potential: BregmanPotential, cloud: ParticleCloud,
                     transport: VelocityField, samples: int = PROBE_GRID) -> tuple[float, float]:
    """
    Extremes of d_F(T_s, T_t) / d_phi(T_s, T_t) along ``T_r = (1 - r) Id + r T``.

    Pairs ``s < t`` of a uniform grid of [0, 1] are taken in both orders;
    pairs whose phi-divergence is below 1e-12 are skipped.

    Returns
    -------
    sup_ratio, inf_ratio : float
    """
    transport.check_matches(cloud)
    grid = np.linspace(0.0, 1.0, samples)
    curve = [VelocityField((1.0 - r) * cloud.positions + r * transport.values) for r in grid]
    ratios = []
    for i in range(samples):
        for j in range(i + 1, samples):
            for a, b in ((curve[i], curve[j]), (curve[j], curve[i])):
                denominator = potential.divergence(cloud, a, b)
                if denominator < PROBE_FLOOR:
                    continue
                ratios.append(_functional_divergence(functional, cloud, a, b) / denominator)
    if not ratios:
        raise ValueError("every sampled pair has a degenerate Bregman divergence")
    return float(max(ratios)), float(min(ratios))


def entropy_kl_estimate(cloud: ParticleCloud, reference: Functional) -> float:
    """
    KL(mu || exp(-V)) up to the reference's log normalizing constant:
    ``int V dmu_hat`` minus the Kozachenko-Leonenko entropy of the cloud.
    `reference` is the potential-energy functional of V.
    """
    if cloud.n < 2:
        raise ValueError("the nearest-neighbour estimate needs at least two particles")
    return reference.value(cloud) - kozachenko_leonenko_entropy(cloud)


def random_spd(rng: np.random.Generator, d: int, low: float = 0.5, high: float = 2.0) -> np.ndarray:
    """Random rotation of a diagonal with eigenvalues uniform in [low, high]."""
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return (q * rng.uniform(low, high, d)) @ q.T


# -------- check suite ---------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class CheckResult:
    name: str
    value: float
    threshold: float
    passed: bool
    error: str | None = None


def _grad_checks(rng, name):
    worst = 0.0
    for d in (1, 2, 3):
        cloud = ParticleCloud(rng.standard_normal((5, d)))
        if name == "grad_potential":
            functionals = [QuadraticPotential(QuadraticPotentialParams(random_spd(rng, d), rng.standard_normal(d)))]
            h = 1e-5
        elif name == "grad_interaction":
            functionals = [InteractionEnergy(InteractionKernel.from_tag(tag, d)) for tag in ("K2", "K4", "quartic_well")]
            h = 1e-5
        elif name == "grad_sinkhorn":
            target = ParticleCloud(rng.standard_normal((4, d)))
            functionals = [SinkhornDivergence(target, SinkhornParams(epsilon=1.0, tol=1e-12, max_iter=100000))]
            h = 1e-4
        elif name == "grad_sw":
            target = ParticleCloud(rng.standard_normal((6, d)))
            functionals = [SlicedWasserstein(target, SWParams(n_projections=64, seed=int(rng.integers(2**31))))]
            h = 1e-7
        else:
            target = ParticleCloud(rng.standard_normal((6, d)))
            functionals = [SlicedEnergyDistance(target, EDParams(n_projections=64, seed=int(rng.integers(2**31))))]
            h = 1e-7
        worst = max(worst, max(grad_check(f, cloud, h) for f in functionals))
    return worst


def _potentials(rng, d):
    params = QuadraticPotentialParams(random_spd(rng, d), rng.standard_normal(d))
    return [PotentialBregman(QuadraticPotential(params)), QuadraticMatrix(random_spd(rng, d)),
            InteractionBregman(InteractionKernel.from_tag("K4", d))]


def _bregman_nonnegativity(rng):
    worst = np.inf
    for _ in range(50):
        d = int(rng.integers(1, 4))
        cloud = ParticleCloud(rng.standard_normal((6, d)))
        t = VelocityField(rng.standard_normal((6, d)))
        s = VelocityField(rng.standard_normal((6, d)))
        for potential in _potentials(rng, d):
            worst = min(worst, potential.divergence(cloud, t, s))
        simplex = sample_dirichlet(int(rng.integers(2**31)), 6, np.ones(d + 1))
        t_s = VelocityField(sample_dirichlet(int(rng.integers(2**31)), 6, np.ones(d + 1)).positions)
        worst = min(worst, SimplexEntropy().divergence(simplex, t_s, VelocityField.identity(simplex)))
    return worst


def _three_point(rng):
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 4))
        cloud = ParticleCloud(rng.standard_normal((6, d)))
        potential = _potentials(rng, d)[0]
        s, t, u = (VelocityField(rng.standard_normal((6, d))) for _ in range(3))
        lhs = potential.divergence(cloud, s, u) - potential.divergence(cloud, s, t) - potential.divergence(cloud, t, u)
        gap = potential.forward_at(cloud, t).values - potential.forward_at(cloud, u).values
        rhs = np.sum(gap * (s.values - t.values)) / cloud.n
        worst = max(worst, abs(lhs - rhs))
    return worst


def _conjugacy(rng):
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(1, 4))
        cloud = ParticleCloud(rng.standard_normal((6, d)))
        simplex = sample_dirichlet(int(rng.integers(2**31)), 6, np.full(d + 1, 2.0))
        for potential, points in [(p, cloud) for p in _potentials(rng, d)[:2]] + [(SimplexEntropy(), simplex)]:
            back = potential.inverse(potential.forward(points)).values
            worst = max(worst, float(np.max(np.abs(back - points.positions))))
    return worst


def _sinkhorn_axioms(rng):
    worst = 0.0
    params = SinkhornParams(epsilon=0.5, tol=1e-12, max_iter=100000)
    for _ in range(10):
        d = int(rng.integers(1, 4))
        mu = ParticleCloud(rng.standard_normal((8, d)))
        nu = ParticleCloud(rng.standard_normal((7, d)) + 0.5)
        forward = SinkhornDivergence(nu, params).value(mu)
        backward = SinkhornDivergence(mu, params).value(nu)
        worst = max(worst, abs(SinkhornDivergence(mu, params).value(mu)), abs(forward - backward),
                    max(-forward, 0.0))
    return worst


def _smoothness(rng):
    worst = 0.0
    for _ in range(5):
        d = 2
        points = rng.uniform(-1, 1, (20, d))
        points /= np.maximum(1.0, np.linalg.norm(points, axis=1))[:, None]
        target = rng.uniform(-1, 1, (20, d))
        target /= np.maximum(1.0, np.linalg.norm(target, axis=1))[:, None]
        cloud = ParticleCloud(points)
        functional = InteractionEnergy(InteractionKernel.from_tag("quartic_well", d))
        potential = InteractionBregman(InteractionKernel.from_tag("K4", d))
        sup_ratio, _ = smoothness_probe(functional, potential, cloud, VelocityField(target))
        worst = max(worst, sup_ratio)
    return worst


# name -> (threshold, comparison); ">=" checks are lower bounds
CHECKS = {
    "grad_potential": (1e-6, "<="),
    "grad_interaction": (1e-6, "<="),
    "grad_sinkhorn": (1e-6, "<="),
    "grad_sw": (1e-4, "<="),
    "grad_sliced_ed": (1e-3, "<="),
    "bregman_nonnegativity": (-1e-12, ">="),
    "three_point_identity": (1e-10, "<="),
    "mirror_conjugacy": (1e-10, "<="),
    "sinkhorn_axioms": (1e-8, "<="),
    "smoothness_quartic_well_k4": (4.0 + 1e-6, "<="),
}


def _evaluate(name: str, rng) -> float:
    if name.startswith("grad_"):
        return _grad_checks(rng, name)
    if name == "bregman_nonnegativity":
        return _bregman_nonnegativity(rng)
    if name == "three_point_identity":
        return _three_point(rng)
    if name == "mirror_conjugacy":
        return _conjugacy(rng)
    if name == "sinkhorn_axioms":
        return _sinkhorn_axioms(rng)
    return _smoothness(rng)


def _run_check(args) -> tuple[int, CheckResult]:
    index, name, seed = args
    threshold, comparison = CHECKS[name]
    try:
        value = _evaluate(name, make_rng(seed, index))
    except (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        # solver and numerical failures fail the check
        return index, CheckResult(name, float("nan"), threshold, False, error=f"{type(exc).__name__}: {exc}")
    passed = value <= threshold if comparison == "<=" else value >= threshold
    return index, CheckResult(name, float(value), threshold, bool(passed))


@optional_logger
def run_check_suite(seed: int = 0, ncpu: int = 1, names=None, logger=None) -> list[CheckResult]:
    """Run the named checks (all by default), one process-pool task per check."""
    names = list(CHECKS) if names is None else list(names)
    unknown = [name for name in names if name not in CHECKS]
    if unknown:
        raise ValueError(f"unknown checks: {unknown}")
    results = parallel_map_ordered(_run_check, [(i, name, seed) for i, name in enumerate(names)],
                                   ncpu=ncpu, desc="Checks")
    for result in results:
        status = "success" if result.passed else "failed"
        if result.error is not None:
            logger.error(f"{result.name} raised {result.error}", extra={"step": result.name, "status": status})
            continue
        logger.info(f"{result.name}: {result.value:.3e} (threshold {result.threshold:g})",
                    extra={"step": result.name, "status": status})
    return results
