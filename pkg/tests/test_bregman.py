"""
Tests for Bregman potentials, mirror maps, divergences and the Newton solver of implicit mirror steps.
"""

import numpy as np
import pytest

from wflow.bregman import (
    BregmanPotential,
    InteractionBregman,
    NewtonConfig,
    NewtonFailure,
    PotentialBregman,
    QuadraticMatrix,
    SimplexEntropy,
    divergence,
    forward,
    inverse_pointwise,
    newton_implicit_step,
)
from wflow.diagnostics import random_spd
from wflow.functionals import InteractionKernel, QuadraticPotential, QuadraticPotentialParams
from wflow.measures import DomainError, ParticleCloud, ShapeError, VelocityField, sample_dirichlet
from wflow.schemes import md_step


def _quadratic_bregman(rng, d):
    return PotentialBregman(QuadraticPotential(QuadraticPotentialParams(random_spd(rng, d), rng.standard_normal(d))))


class TestDivergences:
    """Test Bregman divergence identities."""

    def test_three_point_identity(self, rng):
        """d(S, U) - d(S, T) - d(T, U) = <grad phi(T) - grad phi(U), S - T> for potential energies."""
        for _ in range(200):
            d = int(rng.integers(1, 4))
            cloud = ParticleCloud(rng.standard_normal((6, d)))
            potential = _quadratic_bregman(rng, d)
            s, t, u = (VelocityField(rng.standard_normal((6, d))) for _ in range(3))
            lhs = potential.divergence(cloud, s, u) - potential.divergence(cloud, s, t) - potential.divergence(cloud, t, u)
            gap = potential.forward_at(cloud, t).values - potential.forward_at(cloud, u).values
            rhs = np.sum(gap * (s.values - t.values)) / cloud.n
            assert lhs == pytest.approx(rhs, abs=1e-10)

    def test_nonnegative_and_zero_on_diagonal(self, rng):
        """Divergences are nonnegative and vanish at T = S."""
        cloud = ParticleCloud(rng.standard_normal((7, 2)))
        t = VelocityField(rng.standard_normal((7, 2)))
        s = VelocityField(rng.standard_normal((7, 2)))
        for potential in (_quadratic_bregman(rng, 2), QuadraticMatrix(random_spd(rng, 2)),
                          InteractionBregman(InteractionKernel.from_tag("K4", 2))):
            assert potential.divergence(cloud, t, s) >= -1e-12
            assert potential.divergence(cloud, t, t) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("tag", ["K2", "K4", "quartic_well"])
    def test_interaction_closed_form_matches_generic(self, tag, rng):
        """The pairwise closed form equals phi(T) - phi(S) - <grad phi(S), T - S>."""
        potential = InteractionBregman(InteractionKernel.from_tag(tag, 2))
        cloud = ParticleCloud(rng.standard_normal((6, 2)))
        t = VelocityField(rng.standard_normal((6, 2)))
        s = VelocityField(rng.standard_normal((6, 2)))
        generic = BregmanPotential.divergence(potential, cloud, t, s)
        assert potential.divergence(cloud, t, s) == pytest.approx(generic, abs=1e-10)

    def test_potential_closed_form_matches_generic(self, rng):
        """Pointwise divergences average to the generic formula."""
        potential = _quadratic_bregman(rng, 3)
        cloud = ParticleCloud(rng.standard_normal((5, 3)))
        t = VelocityField(rng.standard_normal((5, 3)))
        s = VelocityField(rng.standard_normal((5, 3)))
        generic = BregmanPotential.divergence(potential, cloud, t, s)
        assert divergence(potential, cloud, t, s) == pytest.approx(generic, abs=1e-10)

    def test_simplex_divergence_is_kl(self):
        """On the simplex the divergence is the KL divergence of the full coordinate vectors."""
        cloud = ParticleCloud(np.array([[0.2, 0.3]]))
        t = VelocityField(np.array([[0.5, 0.25]]))
        p, q = np.array([0.5, 0.25, 0.25]), np.array([0.2, 0.3, 0.5])
        expected = float(np.sum(p * np.log(p / q)))
        assert SimplexEntropy().divergence(cloud, t, VelocityField.identity(cloud)) == pytest.approx(expected)

    def test_divergence_rejects_other_types(self, small_cloud):
        """The module-level dispatcher only accepts Bregman potentials."""
        field = VelocityField.identity(small_cloud)
        with pytest.raises(TypeError):
            divergence("K4", small_cloud, field, field)


class TestMirrorMaps:
    """Test forward and inverse mirror maps."""

    def test_quadratic_conjugacy(self, rng):
        """Explicit inverses undo the forward map."""
        cloud = ParticleCloud(rng.standard_normal((8, 3)))
        for potential in (_quadratic_bregman(rng, 3), QuadraticMatrix(random_spd(rng, 3))):
            assert potential.explicit_inverse
            back = inverse_pointwise(potential, forward(potential, cloud))
            np.testing.assert_allclose(back.values, cloud.positions, atol=1e-10)

    def test_simplex_conjugacy(self):
        """Softmax with a zero slack logit inverts log-ratios."""
        cloud = sample_dirichlet(4, 50, [2.0, 2.0, 2.0, 2.0])
        potential = SimplexEntropy()
        back = potential.inverse(potential.forward(cloud))
        np.testing.assert_allclose(back.values, cloud.positions, atol=1e-12)

    def test_simplex_domain(self):
        """Points outside the open simplex raise DomainError."""
        with pytest.raises(DomainError):
            SimplexEntropy().forward(ParticleCloud(np.array([[0.7, 0.4]])))

    def test_simplex_inverse_of_saturated_logits(self):
        """Huge dual coordinates still map strictly inside the simplex."""
        potential = SimplexEntropy()
        back = potential.inverse(VelocityField(np.array([[800.0, -800.0], [-1e3, -1e3]])))
        assert np.all(back.values > 0)
        assert np.all(back.values.sum(axis=1) < 1)
        potential.forward(ParticleCloud(back.values))

    def test_interaction_has_no_pointwise_inverse(self, small_cloud):
        """Interaction mirror maps are inverted by Newton only."""
        potential = InteractionBregman(InteractionKernel.from_tag("K4", 2))
        assert not potential.explicit_inverse
        with pytest.raises(TypeError):
            inverse_pointwise(potential, potential.forward(small_cloud))

    def test_quadratic_matrix_dimension(self):
        """Lambda and the cloud must have the same dimension."""
        with pytest.raises(ShapeError):
            QuadraticMatrix(np.eye(2)).forward(ParticleCloud(np.zeros((3, 3))))

    def test_interaction_forward_is_translation_invariant(self, small_cloud):
        """Shifting all particles leaves the mirror map unchanged."""
        potential = InteractionBregman(InteractionKernel.from_tag("K4", 2))
        shifted = ParticleCloud(small_cloud.positions + np.array([3.0, -1.0]))
        np.testing.assert_allclose(potential.forward(shifted).values, potential.forward(small_cloud).values,
                                   atol=1e-12)


class TestNewton:
    """Test the damped Newton solver."""

    def test_jacobian_matches_finite_differences(self, rng):
        """The dense Jacobian is the derivative of the residual."""
        potential = InteractionBregman(InteractionKernel.from_tag("K4", 2))
        x = rng.standard_normal((4, 2))
        rhs = np.zeros_like(x)
        h = 1e-6
        fd = np.empty((8, 8))
        for col in range(8):
            step = np.zeros(8)
            step[col] = h
            plus = potential.residual(x + step.reshape(4, 2), rhs).reshape(-1)
            minus = potential.residual(x - step.reshape(4, 2), rhs).reshape(-1)
            fd[:, col] = (plus - minus) / (2 * h)
        np.testing.assert_allclose(potential.jacobian(x), fd, rtol=1e-5, atol=1e-7)

    def test_k2_matches_closed_form(self, rng):
        """With a K2 mirror the step is x_i - tau (g_i - mean g)."""
        potential = InteractionBregman(InteractionKernel.from_tag("K2", 2))
        for _ in range(20):
            cloud = ParticleCloud(rng.standard_normal((30, 2)))
            functional = QuadraticPotential(QuadraticPotentialParams(random_spd(rng, 2), rng.standard_normal(2)))
            tau = float(rng.uniform(0.01, 0.5))
            g = functional.wgrad(cloud).values
            expected = cloud.positions - tau * (g - g.mean(axis=0))
            new = md_step(cloud, functional, potential, tau)
            np.testing.assert_allclose(new.positions, expected, atol=1e-6)

    def test_solution_satisfies_mirror_equation(self, rng):
        """The returned cloud solves grad phi = rhs and keeps the input mean."""
        potential = InteractionBregman(InteractionKernel.from_tag("K4", 2))
        cloud = ParticleCloud(rng.standard_normal((10, 2)))
        rhs = potential.forward(cloud) - VelocityField(0.1 * rng.standard_normal((10, 2)))
        result = newton_implicit_step(potential, cloud, rhs)
        target = rhs.values - rhs.values.mean(axis=0)
        np.testing.assert_allclose(potential.forward(result.cloud).values, target, atol=1e-9)
        np.testing.assert_allclose(result.cloud.mean(), cloud.mean(), atol=1e-12)
        assert result.iterations >= 1
        assert result.residual <= 1e-10

    def test_already_solved(self, small_cloud):
        """A right-hand side that the cloud already solves returns it untouched."""
        potential = InteractionBregman(InteractionKernel.from_tag("K4", 2))
        result = newton_implicit_step(potential, small_cloud, potential.forward(small_cloud))
        assert result.iterations == 0
        assert result.cloud is small_cloud

    def test_failure_carries_diagnostics(self, rng):
        """Exhausting the iteration budget raises NewtonFailure with residual and count."""
        potential = InteractionBregman(InteractionKernel.from_tag("K4", 2))
        cloud = ParticleCloud(rng.standard_normal((5, 2)))
        rhs = potential.forward(cloud) - VelocityField(rng.standard_normal((5, 2)))
        with pytest.raises(NewtonFailure) as info:
            newton_implicit_step(potential, cloud, rhs, NewtonConfig(max_iter=1, tol=1e-30))
        assert info.value.iterations == 1
        assert info.value.residual > 0

    def test_only_interaction_potentials(self, small_cloud):
        """Explicit potentials never go through Newton."""
        potential = QuadraticMatrix(np.eye(2))
        with pytest.raises(TypeError):
            newton_implicit_step(potential, small_cloud, potential.forward(small_cloud))

    def test_config_validation_and_merge(self):
        """Damping must lie in (0, 1]; merge returns a modified copy."""
        with pytest.raises(ValueError):
            NewtonConfig(damping=0.0)
        cfg = NewtonConfig()
        merged = cfg.merge(tol=1e-8)
        assert cfg.tol == 1e-10
        assert merged.tol == 1e-8
        assert merged.max_iter == cfg.max_iter
