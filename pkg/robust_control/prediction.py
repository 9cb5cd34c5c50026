"""
Interval predictors for linear systems with polytopic parameter uncertainty.

Given a confidence polytope for the state matrix, the predictors evolve a lower and
an upper state bound such that every trajectory of x' = A x + B u + D omega, with A
in the polytope and omega within its bounds, stays between them.
"""

import os
import sys
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

# Add parent directory to path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from project_config import Config
from robust_control.estimation import ConfidencePolytope, NoiseModel, StructuredModel
from robust_control.exceptions import ConfigurationError, IntervalOrderError, StructureError
from robust_control.utils import as_matrix, as_vector, negative_part, positive_part, setup_logger

# Configure logger
logger = setup_logger(__name__)

Controller = Tuple[np.ndarray, np.ndarray]

PREDICTOR_MODES = ('simple', 'enhanced', 'auto')


@dataclass
class StateInterval:
    """Per-coordinate enclosure lower <= x <= upper at a given time."""
    lower: np.ndarray
    upper: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.lower = as_vector(self.lower, name='lower')
        self.upper = as_vector(self.upper, self.lower.shape[0], 'upper')
        self.time = float(self.time)
        _check_order(self.lower, self.upper)

    @classmethod
    def point(cls, x, time: float = 0.0) -> 'StateInterval':
        """Degenerate interval [x, x]."""
        x = as_vector(x, name='x')
        return cls(x.copy(), x.copy(), time)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def width(self) -> np.ndarray:
        return np.maximum(self.upper - self.lower, 0.0)

    def contains(self, x, tol: float = Config.TOLERANCE) -> bool:
        x = as_vector(x, self.lower.shape[0], 'x')
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))


@dataclass
class IntervalMatrix:
    """Entrywise matrix bounds lower <= A <= upper."""
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = as_matrix(self.lower, name='lower')
        self.upper = as_matrix(self.upper, self.lower.shape, 'upper')
        if np.any(self.lower > self.upper):
            raise StructureError("interval matrix has lower > upper")


@dataclass
class PredictorConfig:
    """Sensing step and integration refinement of the predictors."""
    mode: str = Config.PREDICTOR_MODE
    dt: float = 0.1
    substeps: int = Config.SUBSTEPS

    def __post_init__(self):
        if self.mode not in PREDICTOR_MODES:
            raise ConfigurationError(f"unknown predictor mode: {self.mode}")
        if not self.dt > 0.0:
            raise ConfigurationError(f"dt must be positive, got {self.dt}")
        if int(self.substeps) < 1:
            raise ConfigurationError(f"substeps must be at least 1, got {self.substeps}")
        self.substeps = int(self.substeps)


@dataclass
class PolytopicDynamics:
    """
    Polytopic dynamics for the enhanced predictor.

    ``a_center``, ``B`` and ``D`` are in original coordinates. ``delta_plus`` and
    ``delta_minus`` are expressed in the predictor's working coordinates, which are
    z = Z^-1 x when a transform (Z, Z^-1) is present and x otherwise.
    """
    a_center: np.ndarray
    delta_plus: np.ndarray
    delta_minus: np.ndarray
    B: np.ndarray
    D: np.ndarray
    transform: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def __post_init__(self):
        self.a_center = as_matrix(self.a_center, name='a_center')
        p = self.a_center.shape[0]
        self.delta_plus = as_matrix(self.delta_plus, (p, p), 'delta_plus')
        self.delta_minus = as_matrix(self.delta_minus, (p, p), 'delta_minus')
        self.B = as_matrix(self.B, (p, None), 'B')
        self.D = as_matrix(self.D, (p, None), 'D')
        if np.any(self.delta_plus < 0.0) or np.any(self.delta_minus < 0.0):
            raise StructureError("delta_plus and delta_minus must be non-negative")
        if self.transform is not None:
            Z, Z_inv = (as_matrix(m, (p, p), 'transform') for m in self.transform)
            self.transform = (Z, Z_inv)
        if not is_metzler(self.working_a, _metzler_tolerance(self.a_center)):
            raise StructureError("enhanced predictor needs a Metzler state matrix in working coordinates")

    @classmethod
    def from_polytope(cls, polytope: ConfidencePolytope, model: StructuredModel,
                      transform: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> 'PolytopicDynamics':
        """Sum the positive and negative parts of the vertex offsets in working coordinates."""
        deltas = polytope.deltas
        if transform is not None:
            Z, Z_inv = transform
            deltas = np.einsum('ij,njk,kl->nil', Z_inv, deltas, Z)
        return cls(polytope.a_center, positive_part(deltas).sum(axis=0),
                   negative_part(deltas).sum(axis=0), model.B, model.D, transform)

    def _to_working(self, matrix: np.ndarray, right: bool = False) -> np.ndarray:
        if self.transform is None:
            return matrix
        Z, Z_inv = self.transform
        return Z_inv @ matrix @ Z if right else Z_inv @ matrix

    @property
    def working_a(self) -> np.ndarray:
        return self._to_working(self.a_center, right=True)

    @property
    def working_b(self) -> np.ndarray:
        return self._to_working(self.B)

    @property
    def working_d(self) -> np.ndarray:
        return self._to_working(self.D)


def _metzler_tolerance(matrix: np.ndarray) -> float:
    return Config.TOLERANCE * (1.0 + np.abs(matrix).max()) * 1e3


def _check_order(lower: np.ndarray, upper: np.ndarray):
    slack = Config.TOLERANCE * (1.0 + np.abs(upper))
    if np.any(lower > upper + slack):
        raise IntervalOrderError(
            f"interval ordering violated by {float(np.max(lower - upper)):.3e}; the step dt is too large"
        )


def is_metzler(A, tol: float = Config.TOLERANCE) -> bool:
    """Whether every off-diagonal entry of A is at least -tol."""
    A = as_matrix(A, name='A')
    if A.shape[0] != A.shape[1]:
        raise StructureError(f"A must be square, got shape {A.shape}")
    off_diagonal = A - np.diag(np.diag(A))
    return bool(np.all(off_diagonal >= -tol))


def metzler_transform(A_N, tol: float = Config.TOLERANCE,
                      max_condition: float = Config.MAX_CONDITION) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """
    Find an invertible Z such that Z^-1 A_N Z is Metzler.

    A matrix that is already Metzler gets the identity. Otherwise the real eigenvector
    basis is used, which makes Z^-1 A_N Z diagonal.

    Args:
        A_N: Square matrix
        tol: Tolerance on imaginary parts and off-diagonal entries
        max_condition: Largest accepted condition number of Z

    Returns:
        (Z, Z^-1), or None when the spectrum is complex or the basis ill-conditioned
    """
    A_N = as_matrix(A_N, name='A_N')
    p = A_N.shape[0]
    if is_metzler(A_N, tol):
        return np.eye(p), np.eye(p)

    eigenvalues, eigenvectors = np.linalg.eig(A_N)
    scale = 1.0 + np.abs(A_N).max()
    if np.any(np.abs(eigenvalues.imag) > tol * scale):
        logger.debug("No real eigenbasis: complex spectrum")
        return None
    Z = eigenvectors.real
    condition = np.linalg.cond(Z)
    if not np.isfinite(condition) or condition > max_condition:
        logger.debug(f"Eigenbasis rejected, condition number {condition:.3e}")
        return None
    Z_inv = np.linalg.inv(Z)
    if not is_metzler(Z_inv @ A_N @ Z, _metzler_tolerance(A_N) * condition):
        return None
    return Z, Z_inv


def interval_linear_map(M: Union[np.ndarray, IntervalMatrix], x: StateInterval) -> StateInterval:
    """
    Enclose {M x : x in [lower, upper]} (and M in its range, for an interval matrix).

    Constant M:  M+ lower - M- upper <= M x <= M+ upper - M- lower.
    Interval M:  the four-term products of the positive and negative parts.
    """
    lower_plus, lower_minus = positive_part(x.lower), negative_part(x.lower)
    upper_plus, upper_minus = positive_part(x.upper), negative_part(x.upper)
    if isinstance(M, IntervalMatrix):
        a_lo_p, a_lo_m = positive_part(M.lower), negative_part(M.lower)
        a_hi_p, a_hi_m = positive_part(M.upper), negative_part(M.upper)
        if M.lower.shape[1] != x.lower.shape[0]:
            raise StructureError(f"matrix shape {M.lower.shape} does not match interval length {x.lower.shape[0]}")
        lower = a_lo_p @ lower_plus - a_hi_p @ lower_minus - a_lo_m @ upper_plus + a_hi_m @ upper_minus
        upper = a_hi_p @ upper_plus - a_lo_p @ upper_minus - a_hi_m @ lower_plus + a_lo_m @ lower_minus
    else:
        M = as_matrix(M, (None, x.lower.shape[0]), 'M')
        m_plus, m_minus = positive_part(M), negative_part(M)
        lower = m_plus @ x.lower - m_minus @ x.upper
        upper = m_plus @ x.upper - m_minus @ x.lower
    return StateInterval(lower, upper, x.time)


def interval_bounds(polytope: ConfidencePolytope) -> IntervalMatrix:
    """Entrywise bounds of the polytope: A_N + min_i Delta A_i <= A <= A_N + max_i Delta A_i."""
    return IntervalMatrix(polytope.a_center + polytope.deltas.min(axis=0),
                          polytope.a_center + polytope.deltas.max(axis=0))


def _disturbance_terms(D: np.ndarray, noise: NoiseModel, t: float) -> Tuple[np.ndarray, np.ndarray]:
    omega_lower, omega_upper = noise.omega_bounds(t)
    if omega_lower.shape[0] != D.shape[1]:
        raise StructureError(f"disturbance bounds of length {omega_lower.shape[0]} do not match D {D.shape}")
    d_plus, d_minus = positive_part(D), negative_part(D)
    return d_plus @ omega_lower - d_minus @ omega_upper, d_plus @ omega_upper - d_minus @ omega_lower


def _integrate_simple(lower, upper, t, bounds, bu, D, noise, cfg, slack):
    step = cfg.dt / cfg.substeps
    for k in range(cfg.substeps):
        dist_lower, dist_upper = _disturbance_terms(D, noise, t + k * step)
        ax = interval_linear_map(bounds, StateInterval(lower, upper, t))
        lower = lower + step * (ax.lower + bu + dist_lower - slack)
        upper = upper + step * (ax.upper + bu + dist_upper + slack)
        _check_order(lower, upper)
    return lower, upper


def _integrate_enhanced(lower, upper, t, dyn: PolytopicDynamics, bu, noise, cfg, slack):
    A = dyn.working_a
    D = dyn.working_d
    step = cfg.dt / cfg.substeps
    for k in range(cfg.substeps):
        dist_lower, dist_upper = _disturbance_terms(D, noise, t + k * step)
        d_lower = (A @ lower - dyn.delta_plus @ negative_part(lower) - dyn.delta_minus @ positive_part(upper)
                   + bu + dist_lower - slack)
        d_upper = (A @ upper + dyn.delta_plus @ positive_part(upper) + dyn.delta_minus @ negative_part(lower)
                   + bu + dist_upper + slack)
        lower = lower + step * d_lower
        upper = upper + step * d_upper
        _check_order(lower, upper)
    return lower, upper


def step_simple(x: StateInterval, bounds: IntervalMatrix, u, noise: NoiseModel, cfg: PredictorConfig,
                B, D, feedback_slack: Optional[np.ndarray] = None) -> StateInterval:
    """
    Advance the interval-matrix predictor by one sensing step dt.

    Args:
        x: Current state interval
        bounds: Entrywise bounds on A
        u: Control held over the step
        noise: Disturbance bounds
        cfg: Step size and sub-steps
        B: Control matrix
        D: Disturbance matrix
        feedback_slack: Extra symmetric derivative slack (feedback mismatch)

    Returns:
        State interval at time x.time + dt
    """
    p = x.lower.shape[0]
    B = as_matrix(B, (p, None), 'B')
    D = as_matrix(D, (p, None), 'D')
    bu = B @ as_vector(u, B.shape[1], 'u')
    slack = np.zeros(p) if feedback_slack is None else feedback_slack
    lower, upper = _integrate_simple(x.lower, x.upper, x.time, bounds, bu, D, noise, cfg, slack)
    return StateInterval(lower, upper, x.time + cfg.dt)


def step_enhanced(x: StateInterval, dyn: PolytopicDynamics, u, noise: NoiseModel, cfg: PredictorConfig,
                  feedback_slack: Optional[np.ndarray] = None) -> StateInterval:
    """
    Advance the polytopic (Metzler) predictor by one sensing step dt.

    With a transform, x is mapped to z = Z^-1 x, stepped, and mapped back with Z.
    """
    bu = dyn.working_b @ as_vector(u, dyn.B.shape[1], 'u')
    slack = np.zeros(x.lower.shape[0]) if feedback_slack is None else feedback_slack
    if dyn.transform is None:
        lower, upper = _integrate_enhanced(x.lower, x.upper, x.time, dyn, bu, noise, cfg, slack)
        return StateInterval(lower, upper, x.time + cfg.dt)
    Z, Z_inv = dyn.transform
    z = interval_linear_map(Z_inv, x)
    lower, upper = _integrate_enhanced(z.lower, z.upper, z.time, dyn, bu, noise, cfg, np.abs(Z_inv) @ slack)
    return interval_linear_map(Z, StateInterval(lower, upper, x.time + cfg.dt))


class IntervalPredictor:
    """
    Per-model interval simulator used by the planner.

    States are carried in working coordinates (transformed when the enhanced
    predictor needed a change of basis) and mapped back by ``to_original``.
    """

    def __init__(self, noise: NoiseModel, cfg: PredictorConfig, B, D,
                 dynamics: Optional[PolytopicDynamics] = None, bounds: Optional[IntervalMatrix] = None):
        if dynamics is None and bounds is None:
            raise ConfigurationError("IntervalPredictor needs polytopic dynamics or interval bounds")
        self.noise = noise
        self.cfg = cfg
        self.B = as_matrix(B, name='B')
        self.D = as_matrix(D, (self.B.shape[0], None), 'D')
        self.dynamics = dynamics
        self.bounds = bounds
        self.mode = 'enhanced' if dynamics is not None else 'simple'
        self.logger = setup_logger(f"{__name__}.{self.__class__.__name__}")

    @classmethod
    def from_polytope(cls, polytope: ConfidencePolytope, model: StructuredModel, noise: NoiseModel,
                      cfg: PredictorConfig) -> 'IntervalPredictor':
        """Pick the predictor for cfg.mode; 'auto' falls back to the simple one without a transform."""
        bounds = interval_bounds(polytope)
        if cfg.mode == 'simple':
            return cls(noise, cfg, model.B, model.D, bounds=bounds)
        transform = metzler_transform(polytope.a_center)
        if transform is None:
            if cfg.mode == 'enhanced':
                raise ConfigurationError("no Metzler transform exists for the nominal state matrix")
            predictor = cls(noise, cfg, model.B, model.D, bounds=bounds)
            predictor.logger.warning("No Metzler transform for A_N, falling back to the simple predictor")
            return predictor
        if np.array_equal(transform[0], np.eye(model.state_dim)):
            transform = None
        dynamics = PolytopicDynamics.from_polytope(polytope, model, transform)
        return cls(noise, cfg, model.B, model.D, dynamics=dynamics, bounds=bounds)

    @property
    def transform(self) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        return None if self.dynamics is None else self.dynamics.transform

    def initial(self, x, t: float = 0.0) -> StateInterval:
        state = StateInterval.point(x, t)
        if self.transform is None:
            return state
        return interval_linear_map(self.transform[1], state)

    def to_original(self, state: StateInterval) -> StateInterval:
        if self.transform is None:
            return state
        return interval_linear_map(self.transform[0], state)

    def step(self, state: StateInterval, controller: Controller) -> StateInterval:
        """Apply u = -K x_c + u_a, x_c the interval center, for one step dt."""
        K, u_a = controller
        K = as_matrix(K, (self.B.shape[1], self.B.shape[0]), 'K')
        transform = self.transform
        Z = np.eye(self.B.shape[0]) if transform is None else transform[0]
        u = -K @ (Z @ state.center) + as_vector(u_a, self.B.shape[1], 'u_a')
        if self.dynamics is None:
            slack = np.abs(self.B @ K) @ (0.5 * state.width)
            lower, upper = _integrate_simple(state.lower, state.upper, state.time, self.bounds,
                                             self.B @ u, self.D, self.noise, self.cfg, slack)
        else:
            feedback = self.dynamics.working_b @ K @ Z
            slack = np.abs(feedback) @ (0.5 * state.width)
            lower, upper = _integrate_enhanced(state.lower, state.upper, state.time, self.dynamics,
                                               self.dynamics.working_b @ u, self.noise, self.cfg, slack)
        return StateInterval(lower, upper, state.time + self.cfg.dt)


class PointPredictor:
    """Nominal point simulator x' = A x + B u with zero disturbance."""

    def __init__(self, A, B, cfg: PredictorConfig):
        self.A = as_matrix(A, name='A')
        self.B = as_matrix(B, (self.A.shape[0], None), 'B')
        self.cfg = cfg

    def initial(self, x, t: float = 0.0) -> StateInterval:
        return StateInterval.point(x, t)

    def to_original(self, state: StateInterval) -> StateInterval:
        return state

    def step(self, state: StateInterval, controller: Controller) -> StateInterval:
        K, u_a = controller
        x = state.lower
        u = -as_matrix(K, (self.B.shape[1], self.A.shape[0]), 'K') @ x + as_vector(u_a, self.B.shape[1], 'u_a')
        step = self.cfg.dt / self.cfg.substeps
        for _ in range(self.cfg.substeps):
            x = x + step * (self.A @ x + self.B @ u)
        return StateInterval.point(x, state.time + self.cfg.dt)


def predict_trajectory(x0, action_controls: Sequence[Controller],
                       dynamics: Union[PolytopicDynamics, IntervalMatrix], noise: NoiseModel,
                       cfg: PredictorConfig, horizon: Optional[int] = None, B=None, D=None,
                       t0: float = 0.0) -> List[StateInterval]:
    """
    Interval prediction of a control sequence from the exact state x0.

    Args:
        x0: Current state (the initial interval is [x0, x0])
        action_controls: One (K_a, u_a) pair per step
        dynamics: PolytopicDynamics for the enhanced predictor or IntervalMatrix for the simple one
        noise: Disturbance bounds
        cfg: Step size and sub-steps
        horizon: Number of steps H (defaults to the number of controls)
        B: Control matrix, required with an IntervalMatrix
        D: Disturbance matrix, required with an IntervalMatrix
        t0: Initial time

    Returns:
        H state intervals in original coordinates
    """
    horizon = len(action_controls) if horizon is None else int(horizon)
    if horizon < 1:
        raise ConfigurationError(f"horizon must be at least 1, got {horizon}")
    if len(action_controls) < horizon:
        raise StructureError(f"{len(action_controls)} controls given for a horizon of {horizon}")
    if isinstance(dynamics, PolytopicDynamics):
        predictor = IntervalPredictor(noise, cfg, dynamics.B, dynamics.D, dynamics=dynamics)
    else:
        if B is None or D is None:
            raise StructureError("B and D are required with interval matrix bounds")
        predictor = IntervalPredictor(noise, cfg, B, D, bounds=dynamics)

    x0 = as_vector(x0, predictor.B.shape[0], 'x0')
    if not np.all(np.isfinite(x0)):
        raise ConfigurationError("x0 must be finite")
    state = predictor.initial(x0, t0)
    trajectory = []
    for controller in action_controls[:horizon]:
        state = predictor.step(state, controller)
        trajectory.append(predictor.to_original(state))
    return trajectory
