"""Tests for structured regression, confidence sets and the consistency test."""

import unittest
import sys
import os

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from sklearn.exceptions import NotFittedError

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from robust_control.estimation import (
    ConfidenceEllipsoid, NoiseModel, RegressionState, StructuredModel, StructuredRegressor,
    beta, compute_features, confidence_ellipsoid, consistency_test, convex_combination_feasible,
    ellipsoid_to_box, ellipsoid_to_polytope, ellipsoid_to_polytope_tight, noise_bounds, observe,
    rls_solve, rls_update
)
from robust_control.exceptions import (
    CapacityError, ConfigurationError, NumericalError, StructureError
)


def scalar_model(A=0.0, B=1.0, phi=(-1.0,), S=2.0):
    return StructuredModel([[A]], [[B]], [[1.0]], [[[value]] for value in phi], S)


def unit_noise(p=1):
    return NoiseModel.constant(np.eye(p), -0.05 * np.ones(p), 0.05 * np.ones(p))


class TestStructuredModel(unittest.TestCase):
    """Test model structure validation and assembly."""

    def test_state_matrix(self):
        """Test A(theta) = A + sum theta_i phi_i."""
        model = StructuredModel(np.zeros((2, 2)), np.eye(2), np.eye(2), [np.eye(2), [[0, 1], [0, 0]]], 1.0)
        assert_allclose(model.state_matrix([2.0, 3.0]), [[2.0, 3.0], [0.0, 2.0]])

    def test_dimension_mismatch(self):
        """Test that inconsistent dimensions are rejected."""
        with self.assertRaises(StructureError):
            StructuredModel(np.zeros((2, 2)), np.eye(3), np.eye(2), [np.eye(2)], 1.0)
        with self.assertRaises(StructureError):
            StructuredModel(np.zeros((2, 2)), np.eye(2), np.eye(2), [np.eye(3)], 1.0)

    def test_bound_must_be_positive(self):
        """Test that S <= 0 is a configuration error."""
        with self.assertRaises(ConfigurationError):
            scalar_model(S=0.0)

    def test_singular_noise_rejected(self):
        """Test that a singular sigma_p is rejected."""
        with self.assertRaises(ConfigurationError):
            NoiseModel.constant(np.zeros((1, 1)), [0.0], [0.0])


class TestFeaturesAndTargets(unittest.TestCase):
    """Test feature matrices and regression targets."""

    def test_identity_feature(self):
        """Test an identity feature returns x as its single column."""
        model = StructuredModel(np.zeros((2, 2)), np.eye(2), np.eye(2), [np.eye(2)], 1.0)
        assert_allclose(compute_features(model, [1.0, 2.0]), [[1.0], [2.0]])

    def test_zero_features(self):
        """Test zero features give a zero matrix."""
        model = StructuredModel(np.zeros((2, 2)), np.eye(2), np.eye(2), [np.zeros((2, 2))] * 3, 1.0)
        assert_array_equal(compute_features(model, [1.0, -4.0]), np.zeros((2, 3)))

    def test_scalar_two_parameters(self):
        """Test p=1, d=2 with phi = ([2], [-1]) and x = 3."""
        model = scalar_model(phi=(2.0, -1.0))
        assert_allclose(compute_features(model, [3.0]), [[6.0, -3.0]])

    def test_observe(self):
        """Test y = meas - A x - B u."""
        model = scalar_model(A=-1.0, B=1.0)
        assert_allclose(observe(model, [2.0], [0.5], [1.0]), [2.5])

    def test_observe_nominal_is_zero(self):
        """Test a measurement equal to A x + B u gives y = 0."""
        model = scalar_model(A=-1.0, B=2.0)
        assert_allclose(observe(model, [3.0], [1.0], [-1.0]), [0.0])


class TestRegression(unittest.TestCase):
    """Test regularized least squares."""

    def setUp(self):
        """Set up a scalar regression problem."""
        self.noise = unit_noise()
        self.state = RegressionState.initial(1, 1.0)

    def test_uninformative_sample(self):
        """Test a zero feature leaves G and b unchanged."""
        updated = rls_update(self.state, [[0.0]], [5.0], self.noise)
        assert_allclose(updated.G, np.eye(1))
        assert_allclose(updated.b, [0.0])
        self.assertEqual(updated.N, 1)

    def test_scalar_accumulation(self):
        """Test G: 1 -> 2 and b: 0 -> 2 for Phi = 1, y = 2."""
        updated = rls_update(self.state, [[1.0]], [2.0], self.noise)
        assert_allclose(updated.G, [[2.0]])
        assert_allclose(updated.b, [2.0])
        assert_allclose(rls_solve(updated), [1.0])
        # the input state is left untouched
        assert_allclose(self.state.G, [[1.0]])

    def test_two_samples(self):
        """Test theta_hat = 4/3 after samples y = 3 and y = 1."""
        updated = rls_update(rls_update(self.state, [[1.0]], [3.0], self.noise), [[1.0]], [1.0], self.noise)
        assert_allclose(rls_solve(updated), [4.0 / 3.0])

    def test_updates_commute(self):
        """Test the order of two samples does not matter."""
        noise = NoiseModel.constant(np.diag([1.0, 2.0]), [0.0, 0.0], [0.0, 0.0])
        state = RegressionState.initial(2, 0.5)
        first = ([[1.0, 2.0], [0.0, 1.0]], [1.0, -1.0])
        second = ([[3.0, -1.0], [1.0, 1.0]], [0.5, 2.0])
        a = rls_update(rls_update(state, *first, noise), *second, noise)
        b = rls_update(rls_update(state, *second, noise), *first, noise)
        assert_allclose(a.G, b.G)
        assert_allclose(a.b, b.b)

    def test_gram_grows(self):
        """Test G - lambda I stays positive semidefinite as samples are added."""
        rng = np.random.default_rng(3)
        noise = NoiseModel.constant(np.eye(3), np.zeros(3), np.zeros(3))
        state = RegressionState.initial(2, 1.0)
        for _ in range(20):
            previous = state.G
            state = rls_update(state, rng.normal(size=(3, 2)), rng.normal(size=3), noise)
            self.assertGreaterEqual(np.linalg.eigvalsh(state.G - previous).min(), -1e-10)
            self.assertGreaterEqual(np.linalg.eigvalsh(state.G - np.eye(2)).min(), -1e-10)

    def test_lambda_must_be_positive(self):
        """Test that a non-positive regularizer is rejected."""
        with self.assertRaises(ConfigurationError):
            RegressionState.initial(1, 0.0)

    def test_non_spd_gram(self):
        """Test that solving with a non-SPD Gram matrix raises NumericalError."""
        broken = RegressionState(np.array([[-1.0]]), np.zeros(1), 0, 1.0)
        with self.assertRaises(NumericalError):
            rls_solve(broken)


class TestBeta(unittest.TestCase):
    """Test the confidence radius."""

    def test_prior_radius(self):
        """Test beta at N = 0 equals sqrt(2 ln(1/delta)) + sqrt(lambda d) S."""
        state = RegressionState.initial(1, 1.0)
        self.assertAlmostEqual(beta(state, 0.9, 2.0), np.sqrt(2 * np.log(1 / 0.9)) + 2.0)
        self.assertAlmostEqual(beta(state, 0.9, 2.0), 2.459, places=3)

    def test_after_one_sample(self):
        """Test beta for G = 2 lambda."""
        state = RegressionState(np.array([[2.0]]), np.zeros(1), 1, 1.0)
        self.assertAlmostEqual(beta(state, 0.9, 2.0), np.sqrt(2 * np.log(np.sqrt(2) / 0.9)) + 2.0)

    def test_shrinkage_rate(self):
        """Test beta^2 / lambda_min(G) decays like 1/N under persistently exciting features."""
        rng = np.random.default_rng(2)
        noise = NoiseModel.constant(np.eye(2), np.zeros(2), np.zeros(2))
        state = RegressionState.initial(2, 1.0)
        checkpoints = [10, 20, 40, 80, 160, 320, 640]
        ratios = []
        for n in range(1, checkpoints[-1] + 1):
            state = rls_update(state, rng.normal(size=(2, 2)), rng.normal(size=2), noise)
            if n in checkpoints:
                ratios.append(beta(state, 0.9, 2.0) ** 2 / np.linalg.eigvalsh(state.G).min())
        slope = np.polyfit(np.log(checkpoints), np.log(ratios), 1)[0]
        self.assertGreaterEqual(slope, -1.3)
        self.assertLessEqual(slope, -0.7)

    def test_confidence_ellipsoid(self):
        """Test the ellipsoid is centered at theta_hat with radius beta."""
        state = RegressionState(np.array([[2.0]]), np.array([2.0]), 1, 1.0)
        e = confidence_ellipsoid(state, 0.9, 2.0)
        assert_allclose(e.theta_hat, [1.0])
        self.assertAlmostEqual(e.beta, beta(state, 0.9, 2.0))
        self.assertTrue(e.contains([1.0 + e.beta / np.sqrt(2.0) - 1e-6]))
        self.assertFalse(e.contains([1.0 + e.beta / np.sqrt(2.0) + 1e-3]))

    def test_invalid_delta(self):
        """Test that delta outside (0, 1) is rejected."""
        with self.assertRaises(ConfigurationError):
            beta(RegressionState.initial(1), 1.0, 1.0)


class TestPolytopes(unittest.TestCase):
    """Test ellipsoid to polytope conversions."""

    def setUp(self):
        """Set up a two-parameter model."""
        self.model = StructuredModel(np.zeros((2, 2)), np.eye(2), np.eye(2),
                                     [[[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 1.0]]], 2.0)

    def _ellipsoid(self, G, radius):
        return ConfidenceEllipsoid(np.zeros(len(G)), np.asarray(G, dtype=float), radius, 0.9)

    def test_unit_ball_box(self):
        """Test G = I, beta = 1 gives the four offsets (+-1, +-1)."""
        polytope = ellipsoid_to_box(self._ellipsoid(np.eye(2), 1.0), self.model)
        self.assertEqual(polytope.vertex_count, 4)
        self.assertEqual({tuple(row) for row in polytope.theta_deltas},
                         {(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)})

    def test_diagonal_box(self):
        """Test G = diag(4, 1), beta = 2 gives half-widths (1, 2)."""
        polytope = ellipsoid_to_box(self._ellipsoid(np.diag([4.0, 1.0]), 2.0), self.model)
        assert_allclose(np.abs(polytope.theta_deltas).max(axis=0), [1.0, 2.0])

    def test_scalar_interval(self):
        """Test d = 1 gives theta_hat +- beta / sqrt(g)."""
        model = scalar_model()
        e = ConfidenceEllipsoid(np.array([1.5]), np.array([[4.0]]), 1.0, 0.9)
        polytope = ellipsoid_to_box(e, model)
        assert_allclose(np.sort(polytope.theta_deltas[:, 0]), [-0.5, 0.5])
        assert_allclose(polytope.a_center, [[-1.5]])

    def test_vertex_matrices_follow_features(self):
        """Test each Delta A_i equals sum_j (theta_deltas_i)_j phi_j."""
        polytope = ellipsoid_to_box(self._ellipsoid(np.diag([4.0, 1.0]), 2.0), self.model)
        for delta, offset in zip(polytope.deltas, polytope.theta_deltas):
            assert_allclose(delta, np.tensordot(offset, self.model.phi, axes=1))

    def test_tight_diagonal(self):
        """Test the tight polytope of G = diag(4, 1), beta = 2 has offsets (+-1, +-2)."""
        polytope = ellipsoid_to_polytope_tight(self._ellipsoid(np.diag([4.0, 1.0]), 2.0), self.model)
        offsets = {tuple(np.round(np.abs(row), 12)) for row in polytope.theta_deltas}
        self.assertEqual(offsets, {(1.0, 2.0)})

    def test_tight_isotropic_matches_box(self):
        """Test the tight and box polytopes coincide for G = I."""
        e = self._ellipsoid(np.eye(2), 1.5)
        box = {tuple(np.round(row, 12)) for row in ellipsoid_to_box(e, self.model).theta_deltas}
        tight = {tuple(np.round(np.abs(row), 12)) for row in ellipsoid_to_polytope_tight(e, self.model).theta_deltas}
        self.assertEqual(tight, {(1.5, 1.5)})
        self.assertEqual(len(box), 4)

    def test_rotated_boundary_contained(self):
        """Test boundary samples of a rotated ellipsoid lie inside the tight polytope."""
        angle = 0.7
        R = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        G = R.T @ np.diag([9.0, 0.5]) @ R
        e = ConfidenceEllipsoid(np.array([0.3, -0.2]), G, 1.3, 0.9)
        polytope = ellipsoid_to_polytope_tight(e, self.model)
        rng = np.random.default_rng(0)
        for theta in e.sample(rng, 50, boundary=True):
            self.assertAlmostEqual(e.distance(theta), e.beta, places=9)
            self.assertTrue(polytope.contains_parameter(theta, tol=1e-7))

    def test_box_contains_ellipsoid_state_matrices(self):
        """Test the polytope contains A(theta) for sampled in-ellipsoid theta."""
        e = self._ellipsoid([[3.0, 1.0], [1.0, 2.0]], 1.0)
        polytope = ellipsoid_to_box(e, self.model)
        vertices = polytope.vertex_matrices().reshape(polytope.vertex_count, -1)
        for theta in e.sample(np.random.default_rng(1), 20):
            target = self.model.state_matrix(theta).ravel()
            self.assertTrue(convex_combination_feasible(vertices, target, tol=1e-7))

    def test_capacity(self):
        """Test more parameters than d_max raise CapacityError."""
        with self.assertRaises(CapacityError):
            ellipsoid_to_box(self._ellipsoid(np.eye(2), 1.0), self.model, d_max=1)

    def test_unknown_mode(self):
        """Test an unknown polytope mode is a configuration error."""
        with self.assertRaises(ConfigurationError):
            ellipsoid_to_polytope(self._ellipsoid(np.eye(2), 1.0), self.model, mode='round')

    def test_tight_volume_below_box(self):
        """Test the eigen-aligned polytope is smaller than the box for an anisotropic rotated G."""
        angle = 0.5
        R = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        e = self._ellipsoid(R.T @ np.diag([25.0, 0.4]) @ R, 1.0)
        tight = ellipsoid_to_polytope_tight(e, self.model).volume()
        box = ellipsoid_to_box(e, self.model).volume()
        self.assertLess(tight, box)
        # both match the closed forms 4 beta^2 / sqrt(det G) and 4 beta^2 sqrt(Ginv_11 Ginv_22)
        self.assertAlmostEqual(tight, 4.0 / np.sqrt(10.0))
        G_inv = np.linalg.inv(e.G)
        self.assertAlmostEqual(box, 4.0 * np.sqrt(G_inv[0, 0] * G_inv[1, 1]))

    def test_scaling_nests(self):
        """Test a polytope scaled by 1/2 has a quarter of the area in two dimensions."""
        polytope = ellipsoid_to_box(self._ellipsoid(np.eye(2), 1.0), self.model)
        self.assertAlmostEqual(polytope.volume(), 4.0)
        self.assertAlmostEqual(polytope.scaled(0.5).volume(), 1.0)


class TestConsistency(unittest.TestCase):
    """Test the adequacy check of a transition against a polytope."""

    def setUp(self):
        """Set up the theta in [1, 2] scalar polytope."""
        self.model = scalar_model()
        e = ConfidenceEllipsoid(np.array([1.5]), np.array([[4.0]]), 1.0, 0.9)
        self.polytope = ellipsoid_to_box(e, self.model)

    def test_nominal_transition(self):
        """Test y = A_N x + B u is consistent when 0 is within the noise bounds."""
        y = -1.5 * 2.0 + 0.3
        self.assertTrue(consistency_test(self.polytope, self.model, ([2.0], [0.3], [y]), [-0.1], [0.1]))

    def test_far_transition(self):
        """Test a derivative out of every reachable value is inconsistent."""
        y = -1.5 * 2.0 + 5.0
        self.assertFalse(consistency_test(self.polytope, self.model, ([2.0], [0.0], [y]), [-0.1], [0.1]))

    def test_boundary_transition(self):
        """Test y exactly at A_N x + Delta A x + eta_upper is consistent."""
        y = -1.5 * 2.0 + 0.5 * 2.0 + 0.1
        self.assertTrue(consistency_test(self.polytope, self.model, ([2.0], [0.0], [y]), [-0.1], [0.1]))
        self.assertFalse(consistency_test(self.polytope, self.model, ([2.0], [0.0], [y + 0.01]), [-0.1], [0.1]))

    def test_no_false_rejection(self):
        """Test 10^4 transitions generated inside the polytope and noise bounds are all consistent."""
        rng = np.random.default_rng(13)
        for _ in range(10000):
            theta = rng.uniform(1.0, 2.0)
            x = rng.uniform(-3.0, 3.0)
            u = rng.uniform(-1.0, 1.0)
            y = -theta * x + u + rng.uniform(-0.1, 0.1)
            self.assertTrue(consistency_test(self.polytope, self.model, ([x], [u], [y]), [-0.1], [0.1]))

    def test_infinite_bounds(self):
        """Test infinite noise bounds are a configuration error."""
        with self.assertRaises(ConfigurationError):
            consistency_test(self.polytope, self.model, ([1.0], [0.0], [0.0]), [-np.inf], [np.inf])

    def test_noise_bounds_widen_disturbance(self):
        """Test the noise bounds contain D [omega_lower, omega_upper] with a positive margin."""
        lower, upper = noise_bounds(self.model, unit_noise(), 0.0, 10, 0.05)
        margin = np.sqrt(2.0 * np.log(2.0 * 10 / 0.05))
        assert_allclose(lower, [-0.05 - margin])
        assert_allclose(upper, [0.05 + margin])


class TestStructuredRegressor(unittest.TestCase):
    """Test the estimator wrapper."""

    def setUp(self):
        """Set up a regressor on the scalar decay model."""
        self.model = scalar_model()
        self.noise = NoiseModel.constant(0.01 * np.eye(1), [-0.05], [0.05])
        self.regressor = StructuredRegressor(self.model, self.noise)

    def test_predict_before_fit(self):
        """Test predicting before any sample raises NotFittedError."""
        with self.assertRaises(NotFittedError):
            self.regressor.predict([1.0], [0.0])

    def test_prior_ellipsoid(self):
        """Test the ellipsoid before any sample is centered at zero with the prior radius."""
        e = self.regressor.confidence_ellipsoid(0.9)
        assert_allclose(e.theta_hat, [0.0])
        self.assertAlmostEqual(e.beta, 2.459, places=3)

    def test_fit_recovers_parameter(self):
        """Test noiseless samples of x' = -1.5 x + u recover theta = 1.5."""
        X = np.linspace(-2.0, 2.0, 30)[:, None]
        U = np.zeros((30, 1))
        Y = -1.5 * X
        self.regressor.fit(X, U, Y)
        self.assertAlmostEqual(self.regressor.theta_[0], 1.5, places=2)
        assert_allclose(self.regressor.predict([2.0], [1.0]), -2.0 * self.regressor.theta_ + 1.0)
        self.assertTrue(self.regressor.confidence_ellipsoid(0.9).contains([1.5]))

    def test_fit_matches_partial_fit(self):
        """Test fit replays partial_fit from the prior."""
        samples = [([1.0], [0.0], [-1.4]), ([-0.5], [1.0], [1.8])]
        other = StructuredRegressor(self.model, self.noise)
        for sample in samples:
            other.partial_fit(*sample)
        self.regressor.fit(*zip(*samples))
        assert_allclose(self.regressor.regression_state.G, other.regression_state.G)
        assert_allclose(self.regressor.theta_, other.theta_)

    def test_fit_logs_through_class_logger(self):
        """Test fitting reports on the estimator's own logger."""
        self.assertEqual(self.regressor.logger.name, 'robust_control.estimation.StructuredRegressor')
        with self.assertLogs('robust_control.estimation.StructuredRegressor', level='INFO') as logs:
            self.regressor.fit([[1.0]], [[0.0]], [[-1.4]])
        self.assertIn('on 1 transitions', logs.output[0])
        # the logger is not an estimator parameter
        self.assertNotIn('logger', self.regressor.get_params())

    def test_confidence_polytope_modes(self):
        """Test box and tight polytopes agree for a scalar parameter."""
        self.regressor.partial_fit([1.0], [0.0], [-1.5])
        box = self.regressor.confidence_polytope(0.9, 'box')
        tight = self.regressor.confidence_polytope(0.9, 'tight')
        assert_allclose(np.sort(box.theta_deltas[:, 0]), np.sort(tight.theta_deltas[:, 0]))

    def test_missing_model(self):
        """Test a regressor without a model is a configuration error."""
        with self.assertRaises(ConfigurationError):
            StructuredRegressor().partial_fit([1.0], [0.0], [0.0])


if __name__ == '__main__':
    unittest.main()
