"""
Tests for particle clouds, velocity fields, Gaussian states, seeded sampling and cloud CSV files.
"""

import numpy as np
import pytest

from wflow.measures import (
    GaussianState,
    NotSPDError,
    ParticleCloud,
    ShapeError,
    VelocityField,
    center,
    check_spd,
    make_rng,
    pushforward,
    read_cloud_csv,
    sample_dirichlet,
    sample_gaussian,
    write_cloud_csv,
)


class TestParticleCloud:
    """Test construction and statistics of ParticleCloud."""

    def test_one_dimensional_input_becomes_column(self):
        """A flat array is read as n particles in one dimension."""
        cloud = ParticleCloud(np.array([0.0, 1.0, 2.0]))
        assert cloud.shape == (3, 1)
        assert cloud.n == 3
        assert cloud.d == 1
        assert len(cloud) == 3

    def test_rejects_bad_shapes(self):
        """Empty clouds and higher-rank arrays raise ShapeError."""
        with pytest.raises(ShapeError):
            ParticleCloud(np.zeros((0, 2)))
        with pytest.raises(ShapeError):
            ParticleCloud(np.zeros((2, 2, 2)))

    def test_rejects_non_finite_positions(self):
        """NaN positions are rejected."""
        with pytest.raises(ValueError):
            ParticleCloud(np.array([[0.0, np.nan]]))

    def test_positions_are_read_only(self):
        """The stored array cannot be modified in place."""
        source = np.zeros((2, 2))
        cloud = ParticleCloud(source)
        source[0, 0] = 5.0
        assert cloud.positions[0, 0] == 0.0
        with pytest.raises(ValueError):
            cloud.positions[0, 0] = 1.0

    def test_mean_and_biased_covariance(self):
        """Covariance uses the 1/n normalization."""
        cloud = ParticleCloud(np.array([[0.0], [2.0]]))
        np.testing.assert_allclose(cloud.mean(), [1.0])
        np.testing.assert_allclose(cloud.covariance(), [[1.0]])

    def test_center_removes_mean(self, small_cloud):
        """Centering leaves a zero-mean cloud."""
        np.testing.assert_allclose(center(small_cloud).mean(), 0.0, atol=1e-15)


class TestVelocityField:
    """Test VelocityField arithmetic and shape checks."""

    def test_check_matches(self, small_cloud):
        """A field of the wrong shape is rejected against a cloud."""
        VelocityField(np.zeros(small_cloud.shape)).check_matches(small_cloud)
        with pytest.raises(ShapeError):
            VelocityField(np.zeros((small_cloud.n + 1, small_cloud.d))).check_matches(small_cloud)

    def test_arithmetic(self, small_cloud):
        """Sums, differences and scalar multiples act on the values."""
        ident = VelocityField.identity(small_cloud)
        np.testing.assert_allclose((ident + ident).values, 2 * small_cloud.positions)
        np.testing.assert_allclose((ident - ident).values, 0.0)
        np.testing.assert_allclose((3 * ident).values, 3 * small_cloud.positions)
        np.testing.assert_allclose((ident * 0.5).values, 0.5 * small_cloud.positions)

    def test_pushforward_takes_field_values(self, small_cloud):
        """Pushing forward by a map gives the cloud of its values."""
        moved = pushforward(small_cloud, VelocityField(small_cloud.positions + 1.0))
        np.testing.assert_allclose(moved.positions, small_cloud.positions + 1.0)


class TestCheckSPD:
    """Test the SPD validation helper."""

    def test_accepts_spd(self):
        """A diagonal positive matrix passes through."""
        np.testing.assert_array_equal(check_spd(np.diag([1.0, 2.0])), np.diag([1.0, 2.0]))

    @pytest.mark.parametrize("matrix", [
        [[1.0, 0.5], [0.0, 1.0]],
        [[1.0, 0.0], [0.0, -1.0]],
        [[0.0, 0.0], [0.0, 0.0]],
    ])
    def test_rejects_non_spd(self, matrix):
        """Asymmetric, indefinite and singular matrices raise NotSPDError."""
        with pytest.raises(NotSPDError):
            check_spd(matrix)

    def test_rejects_non_square(self):
        """Rectangular matrices raise ShapeError."""
        with pytest.raises(ShapeError):
            check_spd(np.ones((2, 3)))

    def test_gaussian_state_shapes(self):
        """Mean and covariance sizes must agree."""
        with pytest.raises(ShapeError):
            GaussianState(np.zeros(3), np.eye(2))
        state = GaussianState.standard(3, scale=2.0)
        np.testing.assert_allclose(state.cov, 4.0 * np.eye(3))


class TestSeededSampling:
    """Test counter-based random streams and samplers."""

    def test_same_stream_same_draws(self):
        """Equal (seed, stream) keys reproduce their draws."""
        a = make_rng(7, 1, 2).standard_normal(5)
        b = make_rng(7, 1, 2).standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_streams_differ(self):
        """Different streams of the same seed are different sequences."""
        a = make_rng(7, 1).standard_normal(5)
        b = make_rng(7, 2).standard_normal(5)
        assert not np.allclose(a, b)

    def test_seed_range(self):
        """Negative seeds are rejected."""
        with pytest.raises(ValueError):
            make_rng(-1)

    def test_sample_gaussian_reproducible(self):
        """Gaussian samples depend only on the seed."""
        state = GaussianState(np.array([1.0, -1.0]), np.diag([4.0, 0.25]))
        a = sample_gaussian(3, 50, state)
        b = sample_gaussian(3, 50, state)
        np.testing.assert_array_equal(a.positions, b.positions)
        assert a.shape == (50, 2)

    def test_sample_gaussian_moments(self):
        """Empirical moments of 10^4 draws sit within five standard errors of the state."""
        n = 10_000
        standard = sample_gaussian(0, n, GaussianState.standard(2))
        assert np.all(np.abs(standard.mean()) <= 5.0 / np.sqrt(n))

        cov = np.array([[4.0, 0.5], [0.5, 1.0]])
        cloud = sample_gaussian(1, n, GaussianState(np.array([1.0, -1.0]), cov))
        mean_se = np.sqrt(np.diag(cov) / n)
        assert np.all(np.abs(cloud.mean() - [1.0, -1.0]) <= 5.0 * mean_se)
        # var(s_jk) = (s_jk^2 + s_jj s_kk) / n
        cov_se = np.sqrt((cov**2 + np.outer(np.diag(cov), np.diag(cov))) / n)
        assert np.all(np.abs(cloud.covariance() - cov) <= 5.0 * cov_se)

    def test_sample_dirichlet_in_open_simplex(self):
        """Dirichlet samples keep d coordinates, all strictly inside the simplex."""
        cloud = sample_dirichlet(0, 200, [1.0, 1.0, 1.0])
        assert cloud.shape == (200, 2)
        assert np.all(cloud.positions > 0)
        assert np.all(cloud.positions.sum(axis=1) < 1)

    def test_sample_dirichlet_rejects_bad_alpha(self):
        """Concentrations must be positive."""
        with pytest.raises(ValueError):
            sample_dirichlet(0, 10, [1.0, 0.0])


class TestCloudCSV:
    """Test the headerless point cloud file format."""

    def test_write_then_read_is_exact(self, tmp_path, rng):
        """17 significant digits reproduce every coordinate bit for bit."""
        cloud = ParticleCloud(rng.standard_normal((10, 3)) * 1e3)
        path = write_cloud_csv(cloud, tmp_path / "cloud.csv")
        np.testing.assert_array_equal(read_cloud_csv(path).positions, cloud.positions)
        assert "," in path.read_text().splitlines()[0]

    def test_missing_file(self, tmp_path):
        """Reading a missing file raises FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            read_cloud_csv(tmp_path / "missing.csv")
