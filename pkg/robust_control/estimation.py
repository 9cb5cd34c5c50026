"""
Online structured linear regression with high-confidence parameter sets.

The state matrix is known up to a parameter vector, A(theta) = A + sum_i theta_i phi_i.
This module estimates theta by regularized least squares from noisy derivative
measurements, wraps the estimate in a confidence ellipsoid, converts the ellipsoid
into a polytope of state matrices, and tests whether a new transition is still
consistent with a candidate structure.
"""

import logging
import os
import sys
from dataclasses import dataclass, replace
from typing import Callable, Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.optimize import linprog
from scipy.spatial import ConvexHull
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

# Add parent directory to path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from project_config import Config
from robust_control.exceptions import (
    CapacityError, ConfigurationError, NumericalError, SolverError, StructureError
)
from robust_control.utils import as_matrix, as_vector, setup_logger, sign_patterns

# Configure logger
logger = setup_logger(__name__)


@dataclass
class StructuredModel:
    """Known system structure: x' = A(theta) x + B u + D omega."""
    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    phi: np.ndarray
    S: float
    name: str = 'model'

    def __post_init__(self):
        self.A = as_matrix(self.A, name='A')
        p = self.A.shape[0]
        if self.A.shape != (p, p):
            raise StructureError(f"A must be square, got shape {self.A.shape}")
        self.B = as_matrix(self.B, (p, None), 'B')
        self.D = as_matrix(self.D, (p, None), 'D')
        features = [as_matrix(matrix, (p, p), 'phi') for matrix in self.phi]
        if not features:
            raise StructureError("phi must contain at least one feature matrix")
        self.phi = np.stack(features)
        self.S = float(self.S)
        if not self.S > 0.0:
            raise ConfigurationError(f"parameter bound S must be positive, got {self.S}")

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def control_dim(self) -> int:
        return self.B.shape[1]

    @property
    def disturbance_dim(self) -> int:
        return self.D.shape[1]

    @property
    def param_dim(self) -> int:
        return self.phi.shape[0]

    def state_matrix(self, theta) -> np.ndarray:
        """Assemble A(theta) = A + sum_i theta_i phi_i."""
        theta = as_vector(theta, self.param_dim, 'theta')
        return self.A + np.tensordot(theta, self.phi, axes=1)


@dataclass(frozen=True)
class ConstantBound:
    """Time-invariant disturbance bound, callable as a function of time."""
    value: Tuple[float, ...]

    def __call__(self, t: float) -> np.ndarray:
        return np.array(self.value, dtype=float)


@dataclass
class NoiseModel:
    """Sub-Gaussian proxy of the combined noise and known disturbance bounds."""
    sigma_p: np.ndarray
    omega_lower: Callable[[float], np.ndarray]
    omega_upper: Callable[[float], np.ndarray]

    def __post_init__(self):
        self.sigma_p = as_matrix(self.sigma_p, name='sigma_p')
        if not np.allclose(self.sigma_p, self.sigma_p.T, atol=Config.TOLERANCE):
            raise ConfigurationError("sigma_p must be symmetric")
        try:
            linalg.cholesky(self.sigma_p, lower=True)
        except linalg.LinAlgError as exc:
            raise ConfigurationError(f"sigma_p must be positive definite: {exc}")

    @classmethod
    def constant(cls, sigma_p, lower, upper) -> 'NoiseModel':
        """Noise model whose disturbance bounds do not depend on time."""
        lower = tuple(as_vector(lower, name='omega_lower'))
        upper = tuple(as_vector(upper, len(lower), 'omega_upper'))
        return cls(sigma_p, ConstantBound(lower), ConstantBound(upper))

    def omega_bounds(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        """Evaluate the disturbance bounds at time t."""
        lower = as_vector(self.omega_lower(t), name='omega_lower')
        upper = as_vector(self.omega_upper(t), lower.shape[0], 'omega_upper')
        if np.any(lower > upper):
            raise ConfigurationError(f"omega_lower exceeds omega_upper at t={t}")
        return lower, upper


@dataclass(frozen=True)
class RegressionState:
    """Running Gram matrix G and moment vector b of the regularized regression."""
    G: np.ndarray
    b: np.ndarray
    N: int
    lam: float

    @classmethod
    def initial(cls, param_dim: int, lam: float = Config.LAMBDA) -> 'RegressionState':
        """State with no samples: G = lam * I, b = 0."""
        if not lam > 0.0:
            raise ConfigurationError(f"regularizer lambda must be positive, got {lam}")
        return cls(lam * np.eye(param_dim), np.zeros(param_dim), 0, float(lam))

    @property
    def param_dim(self) -> int:
        return self.b.shape[0]


@dataclass
class ConfidenceEllipsoid:
    """The set {theta : ||theta - theta_hat||_G <= beta}."""
    theta_hat: np.ndarray
    G: np.ndarray
    beta: float
    delta: float

    @property
    def param_dim(self) -> int:
        return self.theta_hat.shape[0]

    def distance(self, theta) -> float:
        """G-norm of theta - theta_hat."""
        diff = as_vector(theta, self.param_dim, 'theta') - self.theta_hat
        return float(np.sqrt(max(diff @ self.G @ diff, 0.0)))

    def contains(self, theta, tol: float = Config.TOLERANCE) -> bool:
        return self.distance(theta) <= self.beta + tol

    def sample(self, rng: np.random.Generator, n: int, boundary: bool = False) -> np.ndarray:
        """
        Draw points of the ellipsoid.

        Args:
            rng: Random generator
            n: Number of points
            boundary: Sample the boundary surface instead of the solid ellipsoid

        Returns:
            Array of shape (n, d)
        """
        d = self.param_dim
        directions = rng.standard_normal((n, d))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        if not boundary:
            directions *= rng.uniform(size=(n, 1)) ** (1.0 / d)
        cholesky = linalg.cholesky(self.G, lower=True)
        # ||L^-T v||_G = ||v||
        offsets = linalg.solve_triangular(cholesky, directions.T, lower=True, trans='T').T
        return self.theta_hat + self.beta * offsets


@dataclass
class ConfidencePolytope:
    """A_N + conv{Delta A_i}, with the matching parameter-space vertex offsets."""
    a_center: np.ndarray
    deltas: np.ndarray
    theta_center: np.ndarray
    theta_deltas: np.ndarray

    @property
    def vertex_count(self) -> int:
        return self.deltas.shape[0]

    def vertex_matrices(self) -> np.ndarray:
        """The state matrices A_N + Delta A_i, shape (n, p, p)."""
        return self.a_center[None, :, :] + self.deltas

    def contains_parameter(self, theta, tol: float = Config.TOLERANCE) -> bool:
        """Whether theta - theta_center is a convex combination of the vertex offsets."""
        point = as_vector(theta, self.theta_center.shape[0], 'theta') - self.theta_center
        return convex_combination_feasible(self.theta_deltas, point, tol)

    def volume(self) -> float:
        """Lebesgue volume of the parameter-space polytope."""
        if self.theta_deltas.shape[1] == 1:
            return float(np.ptp(self.theta_deltas[:, 0]))
        return float(ConvexHull(self.theta_deltas).volume)

    def scaled(self, factor: float) -> 'ConfidencePolytope':
        """Same center, every vertex offset multiplied by factor."""
        return replace(self, deltas=self.deltas * factor, theta_deltas=self.theta_deltas * factor)


def convex_combination_feasible(vertices: np.ndarray, point: np.ndarray,
                                tol: float = Config.TOLERANCE) -> bool:
    """
    Decide whether point lies in conv(vertices) up to tol, by LP feasibility.

    Args:
        vertices: Array of shape (n, k), one vertex per row
        point: Array of shape (k,)
        tol: Absolute slack allowed on every coordinate

    Returns:
        True when a convex combination within tol exists

    Raises:
        SolverError: If the LP solver fails without a verdict
    """
    vertices = np.asarray(vertices, dtype=float)
    n = vertices.shape[0]
    a_ub = np.vstack([vertices.T, -vertices.T])
    b_ub = np.concatenate([point + tol, -point + tol])
    result = linprog(np.zeros(n), A_ub=a_ub, b_ub=b_ub,
                     A_eq=np.ones((1, n)), b_eq=np.ones(1),
                     bounds=[(0.0, None)] * n, method='highs')
    if result.status == 0:
        return True
    if result.status == 2:
        return False
    raise SolverError(f"convex combination LP failed: {result.message}")


def compute_features(model: StructuredModel, x) -> np.ndarray:
    """
    Feature matrix Phi = [phi_1 x, ..., phi_d x].

    Args:
        model: Known structure
        x: State vector of length p

    Returns:
        Array of shape (p, d)
    """
    x = as_vector(x, model.state_dim, 'x')
    return np.einsum('kij,j->ik', model.phi, x)


def observe(model: StructuredModel, x, u, x_dot_meas) -> np.ndarray:
    """Regression target y = x_dot_meas - A x - B u, so that y = Phi theta + eta."""
    x = as_vector(x, model.state_dim, 'x')
    u = as_vector(u, model.control_dim, 'u')
    x_dot_meas = as_vector(x_dot_meas, model.state_dim, 'x_dot_meas')
    return x_dot_meas - model.A @ x - model.B @ u


def rls_update(state: RegressionState, Phi, y, noise: NoiseModel) -> RegressionState:
    """
    Add one sample to the regression.

    Args:
        state: Current regression state
        Phi: Feature matrix of shape (p, d)
        y: Regression target of length p
        noise: Noise model providing the weights sigma_p

    Returns:
        New regression state with G += Phi^T sigma_p^-1 Phi and b += Phi^T sigma_p^-1 y

    Raises:
        ConfigurationError: If sigma_p is singular
    """
    Phi = as_matrix(Phi, (None, state.param_dim), 'Phi')
    y = as_vector(y, Phi.shape[0], 'y')
    if noise.sigma_p.shape != (Phi.shape[0], Phi.shape[0]):
        raise StructureError(f"sigma_p shape {noise.sigma_p.shape} does not match p={Phi.shape[0]}")
    try:
        factor = linalg.cho_factor(noise.sigma_p, lower=True)
    except linalg.LinAlgError as exc:
        raise ConfigurationError(f"sigma_p is singular: {exc}")
    weighted = linalg.cho_solve(factor, Phi)
    gram = state.G + Phi.T @ weighted
    gram = 0.5 * (gram + gram.T)
    moment = state.b + weighted.T @ y
    return RegressionState(gram, moment, state.N + 1, state.lam)


def _cholesky(G: np.ndarray):
    try:
        return linalg.cho_factor(G, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"Gram matrix is not positive definite: {exc}")


def rls_solve(state: RegressionState) -> np.ndarray:
    """Regularized least-squares estimate theta_hat = G^-1 b, by Cholesky solve."""
    return linalg.cho_solve(_cholesky(state.G), state.b)


def log_det(G: np.ndarray) -> float:
    """Log-determinant of an SPD matrix from its Cholesky factor."""
    factor, _ = _cholesky(G)
    return float(2.0 * np.sum(np.log(np.diag(factor))))


def beta(state: RegressionState, delta: float, S: float) -> float:
    """
    Confidence radius beta_N(delta) of the self-normalized ellipsoid.

    Args:
        state: Regression state
        delta: Confidence level in (0, 1)
        S: Parameter magnitude bound

    Returns:
        sqrt(2 ln(det(G)^1/2 / (delta det(lam I)^1/2))) + sqrt(lam d) S
    """
    if not 0.0 < delta < 1.0:
        raise ConfigurationError(f"delta must lie in (0, 1), got {delta}")
    if not S > 0.0:
        raise ConfigurationError(f"S must be positive, got {S}")
    d = state.param_dim
    log_ratio = 0.5 * (log_det(state.G) - d * np.log(state.lam)) - np.log(delta)
    return float(np.sqrt(2.0 * max(log_ratio, 0.0)) + np.sqrt(state.lam * d) * S)


def confidence_ellipsoid(state: RegressionState, delta: float, S: float) -> ConfidenceEllipsoid:
    """Ellipsoid around the current estimate containing theta with probability 1 - delta."""
    return ConfidenceEllipsoid(rls_solve(state), state.G.copy(), beta(state, delta, S), delta)


def _polytope_from_offsets(theta_hat: np.ndarray, theta_deltas: np.ndarray,
                           model: StructuredModel) -> ConfidencePolytope:
    deltas = np.tensordot(theta_deltas, model.phi, axes=1)
    return ConfidencePolytope(model.state_matrix(theta_hat), deltas, theta_hat.copy(), theta_deltas)


def _check_capacity(d: int, d_max: int):
    if d > d_max:
        raise CapacityError(f"2^{d} vertices requested, above the limit d_max={d_max}")


def ellipsoid_to_box(e: ConfidenceEllipsoid, model: StructuredModel,
                     d_max: int = Config.D_MAX) -> ConfidencePolytope:
    """
    Enclose the ellipsoid in its axis-aligned bounding box.

    The half-width along coordinate i is beta * sqrt((G^-1)_ii).
    """
    d = e.param_dim
    _check_capacity(d, d_max)
    g_inverse = linalg.cho_solve(_cholesky(e.G), np.eye(d))
    half_widths = e.beta * np.sqrt(np.diag(g_inverse))
    return _polytope_from_offsets(e.theta_hat, sign_patterns(d) * half_widths, model)


def ellipsoid_to_polytope_tight(e: ConfidenceEllipsoid, model: StructuredModel,
                                d_max: int = Config.D_MAX) -> ConfidencePolytope:
    """
    Enclose the ellipsoid in the box aligned with the eigenvectors of G.

    With G = Q diag(w) Q^T the vertex offsets are beta * Q diag(w)^-1/2 h for h in {-1, 1}^d.
    """
    d = e.param_dim
    _check_capacity(d, d_max)
    eigenvalues, eigenvectors = linalg.eigh(e.G)
    if np.any(eigenvalues <= 0.0):
        raise NumericalError("Gram matrix has a non-positive eigenvalue")
    theta_deltas = e.beta * (sign_patterns(d) / np.sqrt(eigenvalues)) @ eigenvectors.T
    return _polytope_from_offsets(e.theta_hat, theta_deltas, model)


def ellipsoid_to_polytope(e: ConfidenceEllipsoid, model: StructuredModel, mode: str = 'box',
                          d_max: int = Config.D_MAX) -> ConfidencePolytope:
    """Dispatch on the polytope mode ('box' or 'tight')."""
    if mode == 'box':
        return ellipsoid_to_box(e, model, d_max)
    if mode == 'tight':
        return ellipsoid_to_polytope_tight(e, model, d_max)
    raise ConfigurationError(f"unknown polytope mode: {mode}")


def noise_bounds(model: StructuredModel, noise: NoiseModel, t: float, n_max: int,
                 delta_test: float = Config.DELTA_TEST) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-coordinate bounds on eta = C nu + D omega used by the adequacy test.

    The disturbance part D [omega_lower, omega_upper] is widened by the sub-Gaussian
    tail sqrt(2 (sigma_p)_ii ln(2 p n_max / delta_test)), union-bounded over the
    p coordinates and n_max transitions.
    """
    if not 0.0 < delta_test < 1.0:
        raise ConfigurationError(f"delta_test must lie in (0, 1), got {delta_test}")
    lower, upper = noise.omega_bounds(t)
    d_plus = np.maximum(model.D, 0.0)
    d_minus = np.maximum(-model.D, 0.0)
    p = model.state_dim
    margin = np.sqrt(2.0 * np.diag(noise.sigma_p) * np.log(2.0 * p * max(n_max, 1) / delta_test))
    return d_plus @ lower - d_minus @ upper - margin, d_plus @ upper - d_minus @ lower + margin


def consistency_test(polytope: ConfidencePolytope, model: StructuredModel, transition,
                     eta_lower, eta_upper, tol: float = Config.TOLERANCE) -> bool:
    """
    Whether a transition can be explained by some matrix of the polytope.

    Decides, by LP feasibility, if there are alpha in the simplex and eta within
    [eta_lower, eta_upper] with y = A_N x + B u + sum_i alpha_i Delta A_i x + eta.

    Args:
        polytope: Confidence polytope of the candidate structure
        model: Candidate structure (provides B)
        transition: Tuple (x, u, y) with y the measured state derivative
        eta_lower: Lower noise bound, length p
        eta_upper: Upper noise bound, length p
        tol: Absolute slack on the noise bounds

    Returns:
        False when the candidate is rejected by the transition

    Raises:
        SolverError: If the LP solver fails without a verdict
    """
    x, u, y = transition
    p = model.state_dim
    x = as_vector(x, p, 'x')
    u = as_vector(u, model.control_dim, 'u')
    y = as_vector(y, p, 'y')
    eta_lower = as_vector(eta_lower, p, 'eta_lower')
    eta_upper = as_vector(eta_upper, p, 'eta_upper')
    if not (np.all(np.isfinite(eta_lower)) and np.all(np.isfinite(eta_upper))):
        raise ConfigurationError("noise bounds must be finite")

    residual = y - polytope.a_center @ x - model.B @ u
    columns = np.einsum('nij,j->in', polytope.deltas, x)
    n = polytope.vertex_count
    a_eq = np.block([[columns, np.eye(p)],
                     [np.ones((1, n)), np.zeros((1, p))]])
    b_eq = np.concatenate([residual, [1.0]])
    bounds = [(0.0, None)] * n + [(lo - tol, hi + tol) for lo, hi in zip(eta_lower, eta_upper)]
    result = linprog(np.zeros(n + p), A_eq=a_eq, b_eq=b_eq, bounds=bounds, method='highs')
    if result.status == 0:
        return True
    if result.status == 2:
        logger.debug(f"Transition inconsistent with structure '{model.name}'")
        return False
    raise SolverError(f"consistency LP failed: {result.message}")


class StructuredRegressor(BaseEstimator):
    """
    Online estimator for one candidate structure.

    Follows the scikit-learn estimator API: ``partial_fit`` adds one transition,
    ``fit`` replays a batch, ``predict`` returns the nominal derivative A(theta_hat) x + B u.
    """

    def __init__(self, model: Optional[StructuredModel] = None, noise: Optional[NoiseModel] = None,
                 lam: float = Config.LAMBDA, d_max: int = Config.D_MAX):
        self.model = model
        self.noise = noise
        self.lam = lam
        self.d_max = d_max

    def _check_setup(self):
        if self.model is None or self.noise is None:
            raise ConfigurationError("StructuredRegressor needs a model and a noise model")

    @property
    def logger(self) -> logging.Logger:
        return setup_logger(f"{__name__}.{self.__class__.__name__}")

    @property
    def regression_state(self) -> RegressionState:
        """Current regression state, the prior one before any sample."""
        self._check_setup()
        if not hasattr(self, 'state_'):
            return RegressionState.initial(self.model.param_dim, self.lam)
        return self.state_

    def reset(self) -> 'StructuredRegressor':
        for attribute in ('state_', 'theta_'):
            if hasattr(self, attribute):
                delattr(self, attribute)
        return self

    def partial_fit(self, x, u, x_dot_meas) -> 'StructuredRegressor':
        """Add one transition (x, u, measured derivative)."""
        self._check_setup()
        features = compute_features(self.model, x)
        target = observe(self.model, x, u, x_dot_meas)
        self.state_ = rls_update(self.regression_state, features, target, self.noise)
        self.theta_ = rls_solve(self.state_)
        return self

    def fit(self, X, U, Y) -> 'StructuredRegressor':
        """Fit from scratch on arrays of states, controls and measured derivatives."""
        self.reset()
        for x, u, y in zip(X, U, Y):
            self.partial_fit(x, u, y)
        self.logger.info(f"Fitted structure '{self.model.name}' on {self.regression_state.N} transitions")
        return self

    def predict(self, x, u) -> np.ndarray:
        check_is_fitted(self, 'theta_')
        x = as_vector(x, self.model.state_dim, 'x')
        u = as_vector(u, self.model.control_dim, 'u')
        return self.model.state_matrix(self.theta_) @ x + self.model.B @ u

    def confidence_ellipsoid(self, delta: float = Config.DELTA) -> ConfidenceEllipsoid:
        return confidence_ellipsoid(self.regression_state, delta, self.model.S)

    def confidence_polytope(self, delta: float = Config.DELTA, mode: str = 'box') -> ConfidencePolytope:
        return ellipsoid_to_polytope(self.confidence_ellipsoid(delta), self.model, mode, self.d_max)
