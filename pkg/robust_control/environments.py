"""
Reference systems for the estimation, prediction and planning stack.

Each environment bundles the true dynamics (with a parameter hidden from agents),
the known structure, noise levels, an action set, and a scene that scores states
and pessimistically scores state intervals.
"""

import os
import sys
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

# Add parent directory to path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from project_config import Config
from robust_control.estimation import ConfidencePolytope, NoiseModel, StructuredModel
from robust_control.exceptions import ConfigurationError, StructureError
from robust_control.planning import ActionSpace
from robust_control.prediction import StateInterval
from robust_control.utils import as_vector, setup_logger

# Configure logger
logger = setup_logger(__name__)

SCENE_KEYS = {
    'obstacles', 'goal', 'start', 'theta_true', 'omega_amplitude',
    'measurement_std', 'dt', 'horizon', 'substeps'
}

# Smallest measurement variance used in the noise proxy, so that it stays definite
MIN_VARIANCE = 1e-6


@dataclass
class Obstacle:
    """Axis-aligned rectangle [lower, upper] or disc (center, radius) in the position plane."""
    kind: str
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    center: Optional[np.ndarray] = None
    radius: float = 0.0

    def __post_init__(self):
        if self.kind == 'rectangle':
            self.lower = as_vector(self.lower, name='obstacle min')
            self.upper = as_vector(self.upper, self.lower.shape[0], 'obstacle max')
            if np.any(self.upper <= self.lower):
                raise ConfigurationError("rectangle obstacles need positive extents")
        elif self.kind == 'disc':
            self.center = as_vector(self.center, name='obstacle center')
            self.radius = float(self.radius)
            if not self.radius > 0.0:
                raise ConfigurationError("disc obstacles need a positive radius")
        else:
            raise ConfigurationError(f"unknown obstacle kind: {self.kind}")

    @classmethod
    def rectangle(cls, lower, upper) -> 'Obstacle':
        return cls('rectangle', lower=lower, upper=upper)

    @classmethod
    def disc(cls, center, radius: float) -> 'Obstacle':
        return cls('disc', center=center, radius=radius)

    @classmethod
    def from_dict(cls, data: dict) -> 'Obstacle':
        kind = data.get('kind', 'rectangle')
        if kind == 'rectangle':
            return cls.rectangle(data['min'], data['max'])
        if kind == 'disc':
            return cls.disc(data['center'], data['radius'])
        raise ConfigurationError(f"unknown obstacle kind: {kind}")

    def bounding_box(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.kind == 'rectangle':
            return self.lower, self.upper
        return self.center - self.radius, self.center + self.radius

    def contains(self, position: np.ndarray) -> bool:
        if self.kind == 'rectangle':
            return bool(np.all(position >= self.lower) and np.all(position <= self.upper))
        return bool(np.linalg.norm(position - self.center) <= self.radius)

    def intersects_box(self, lower: np.ndarray, upper: np.ndarray) -> bool:
        """Exact for rectangles; for discs, overlap with the disc's bounding square."""
        obstacle_lower, obstacle_upper = self.bounding_box()
        return bool(np.all(lower <= obstacle_upper) and np.all(upper >= obstacle_lower))


@dataclass
class Scene:
    """Goal and obstacles over the position coordinates of the state."""
    goal: np.ndarray
    obstacles: List[Obstacle] = field(default_factory=list)
    position: Tuple[int, ...] = (0, 1)

    def __post_init__(self):
        self.position = tuple(int(i) for i in self.position)
        self.goal = as_vector(self.goal, len(self.position), 'goal')
        for obstacle in self.obstacles:
            lower, _ = obstacle.bounding_box()
            if lower.shape[0] != len(self.position):
                raise StructureError("obstacle dimension does not match the position coordinates")

    def _positions(self, x) -> np.ndarray:
        return as_vector(x, name='x')[list(self.position)]

    def collides(self, x) -> bool:
        position = self._positions(x)
        return any(obstacle.contains(position) for obstacle in self.obstacles)

    def reward(self, x) -> float:
        """delta(x) / (1 + ||position - goal||), delta(x) = 0 on collision."""
        if self.collides(x):
            return 0.0
        return 1.0 / (1.0 + float(np.linalg.norm(self._positions(x) - self.goal)))

    def box_collides(self, box: StateInterval) -> bool:
        """Whether the position part of the interval may overlap an obstacle."""
        lower = box.lower[list(self.position)]
        upper = box.upper[list(self.position)]
        return any(obstacle.intersects_box(lower, upper) for obstacle in self.obstacles)

    def reward_lower(self, box: StateInterval) -> float:
        """Lower bound of the reward over a state interval, exact without disc obstacles."""
        if self.box_collides(box):
            return 0.0
        lower = box.lower[list(self.position)]
        upper = box.upper[list(self.position)]
        farthest = np.maximum(np.abs(lower - self.goal), np.abs(upper - self.goal))
        return 1.0 / (1.0 + float(np.linalg.norm(farthest)))


@dataclass
class EnvironmentSpec:
    """A reference system: true dynamics, known structure, noise, actions and scene."""
    name: str
    model: StructuredModel
    theta_true: np.ndarray
    action_space: ActionSpace
    scene: Scene
    x0: np.ndarray
    gamma: float = Config.GAMMA
    dt: float = 0.1
    horizon: int = 30
    substeps: int = Config.SUBSTEPS
    omega_amplitude: float = 0.1
    measurement_std: float = 0.1
    candidates: List[StructuredModel] = field(default_factory=list)
    noise: Optional[NoiseModel] = None

    def __post_init__(self):
        self.theta_true = as_vector(self.theta_true, self.model.param_dim, 'theta_true')
        self.x0 = as_vector(self.x0, self.model.state_dim, 'x0')
        if np.any(np.abs(self.theta_true) > self.model.S):
            raise ConfigurationError("theta_true must lie in [-S, S]^d")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.dt > 0.0 or int(self.horizon) < 1 or int(self.substeps) < 1:
            raise ConfigurationError("dt must be positive, horizon and substeps at least 1")
        if self.omega_amplitude < 0.0 or self.measurement_std < 0.0:
            raise ConfigurationError("noise levels must be non-negative")
        self.horizon = int(self.horizon)
        self.substeps = int(self.substeps)
        if not self.candidates:
            self.candidates = [self.model]
        for candidate in self.candidates:
            if candidate.state_dim != self.model.state_dim or candidate.control_dim != self.model.control_dim:
                raise StructureError(f"candidate '{candidate.name}' does not match the system dimensions")
        if self.noise is None:
            r = self.model.disturbance_dim
            amplitude = np.full(r, self.omega_amplitude)
            self.noise = NoiseModel.constant(self.sigma_p(), -amplitude, amplitude)

    def sigma_p(self) -> np.ndarray:
        """Sub-Gaussian proxy of eta = D omega + nu."""
        p = self.model.state_dim
        variance = max(self.measurement_std ** 2, MIN_VARIANCE)
        return variance * np.eye(p) + self.omega_amplitude ** 2 * self.model.D @ self.model.D.T

    @property
    def true_matrix(self) -> np.ndarray:
        return self.model.state_matrix(self.theta_true)

    def reward(self, x) -> float:
        return self.scene.reward(x)

    def reward_lower(self, box: StateInterval) -> float:
        return self.scene.reward_lower(box)

    def collides(self, x) -> bool:
        return self.scene.collides(x)

    def box_collides(self, box: StateInterval) -> bool:
        return self.scene.box_collides(box)


def true_step(spec: EnvironmentSpec, x, u, rng: np.random.Generator,
              theta: Optional[np.ndarray] = None, omega: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Integrate the true dynamics over one step dt.

    The disturbance is drawn uniformly in [-a, a]^r and held over the step; the
    measurement is the derivative at the start of the step plus Gaussian noise.

    Args:
        spec: Environment
        x: Current state
        u: Control held over the step
        rng: Random generator (draws omega, then the measurement noise)
        theta: Parameter to simulate instead of theta_true
        omega: Disturbance to apply instead of a random draw

    Returns:
        (x_next, y) with y the noisy derivative measurement
    """
    model = spec.model
    x = as_vector(x, model.state_dim, 'x')
    u = as_vector(u, model.control_dim, 'u')
    A = spec.true_matrix if theta is None else model.state_matrix(theta)
    if omega is None:
        omega = rng.uniform(-spec.omega_amplitude, spec.omega_amplitude, size=model.disturbance_dim)
    forcing = model.B @ u + model.D @ as_vector(omega, model.disturbance_dim, 'omega')
    y = A @ x + forcing + rng.normal(0.0, spec.measurement_std, size=model.state_dim)

    step = spec.dt / spec.substeps
    for _ in range(spec.substeps):
        x = x + step * (A @ x + forcing)
    return x, y


DIAGONAL_ACTIONS = ((-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0))

DEFAULT_OBSTACLES = (
    {'kind': 'rectangle', 'min': [1.2, 0.0], 'max': [1.8, 0.5]},
    {'kind': 'rectangle', 'min': [0.3, 0.9], 'max': [0.7, 1.5]},
    {'kind': 'rectangle', 'min': [2.0, 2.4], 'max': [2.6, 3.0]},
)

DEFAULT_SCENE = {
    'obstacles': [dict(obstacle) for obstacle in DEFAULT_OBSTACLES],
    'goal': [2.5, 1.8],
    'start': [0.0, 0.0, 0.0, 0.0],
    'theta_true': [0.5, 1.0],
    'omega_amplitude': 0.1,
    'measurement_std': 0.1,
    'dt': 0.1,
    'horizon': 30,
    'substeps': Config.SUBSTEPS,
}


def load_scene(path: Union[str, Path]) -> dict:
    """
    Read a YAML scene file and merge it over the default scene.

    A bare file name that does not exist is looked up in SCENE_DIR.

    Raises:
        ConfigurationError: On unknown keys or a malformed document
    """
    path = Path(path)
    if not path.exists() and (Config.SCENE_DIR / path).exists():
        path = Config.SCENE_DIR / path
    with open(path, 'r') as handle:
        try:
            data = yaml.safe_load(handle) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"invalid YAML in {path}: {exc}")
    if not isinstance(data, dict):
        raise ConfigurationError(f"scene file {path} must hold a mapping")
    unknown = set(data) - SCENE_KEYS
    if unknown:
        raise ConfigurationError(f"unknown scene keys in {path}: {sorted(unknown)}")
    scene = dict(DEFAULT_SCENE)
    scene.update(data)
    logger.info(f"Loaded scene from {path}")
    return scene


def obstacle_model(S: float = 2.0) -> StructuredModel:
    """Double integrator (p_x, p_y, v_x, v_y) with unknown friction on each velocity."""
    A = np.zeros((4, 4))
    A[0, 2] = A[1, 3] = 1.0
    B = np.vstack([np.zeros((2, 2)), np.eye(2)])
    phi = np.zeros((2, 4, 4))
    phi[0, 2, 2] = -1.0
    phi[1, 3, 3] = -1.0
    return StructuredModel(A, B, B.copy(), phi, S, name='friction')


def obstacle_env(scene_path: Optional[Union[str, Path]] = None, **overrides) -> EnvironmentSpec:
    """
    Navigation to a goal among obstacles under anisotropic friction.

    Args:
        scene_path: Optional YAML scene file
        **overrides: Scene keys applied on top of the file

    Returns:
        EnvironmentSpec
    """
    scene_data = load_scene(scene_path) if scene_path is not None else dict(DEFAULT_SCENE)
    unknown = set(overrides) - SCENE_KEYS
    if unknown:
        raise ConfigurationError(f"unknown scene keys: {sorted(unknown)}")
    scene_data.update(overrides)
    try:
        obstacles = [Obstacle.from_dict(item) for item in scene_data['obstacles']]
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"malformed obstacle entry: {exc}")
    model = obstacle_model()
    return EnvironmentSpec(
        name='obstacle',
        model=model,
        theta_true=scene_data['theta_true'],
        action_space=ActionSpace.constant(DIAGONAL_ACTIONS, model.state_dim),
        scene=Scene(scene_data['goal'], obstacles),
        x0=scene_data['start'],
        dt=float(scene_data['dt']),
        horizon=int(scene_data['horizon']),
        substeps=int(scene_data['substeps']),
        omega_amplitude=float(scene_data['omega_amplitude']),
        measurement_std=float(scene_data['measurement_std'])
    )


@lru_cache(maxsize=None)
def _default_scene() -> Scene:
    return obstacle_env().scene


def obstacle_reward(x) -> float:
    """Reward of the default obstacle scene."""
    return _default_scene().reward(x)


def obstacle_reward_lower(box: StateInterval) -> float:
    """Pessimistic reward of the default obstacle scene over a state interval."""
    return _default_scene().reward_lower(box)


def scalar_model(S: float = 2.0) -> StructuredModel:
    """x' = -theta x + u + omega."""
    return StructuredModel(np.zeros((1, 1)), np.eye(1), np.eye(1), [[[-1.0]]], S, name='decay')


def scalar_env(theta_true: float = 1.5, omega_amplitude: float = 0.05,
               measurement_std: float = 0.1, dt: float = 0.05, horizon: int = 40) -> EnvironmentSpec:
    """Scalar decay with theta in [1, 2] and |omega| <= 0.05, started at x = 1."""
    model = scalar_model()
    return EnvironmentSpec(
        name='scalar',
        model=model,
        theta_true=[theta_true],
        action_space=ActionSpace.constant([[-1.0], [0.0], [1.0]], 1),
        scene=Scene([0.0], position=(0,)),
        x0=[1.0],
        dt=dt,
        horizon=horizon,
        omega_amplitude=omega_amplitude,
        measurement_std=measurement_std
    )


def scalar_polytope() -> ConfidencePolytope:
    """The theta in [1, 2] set of the scalar system: A_N = -1.5, Delta A = -/+ 0.5."""
    return ConfidencePolytope(
        a_center=np.array([[-1.5]]),
        deltas=np.array([[[-0.5]], [[0.5]]]),
        theta_center=np.array([1.5]),
        theta_deltas=np.array([[0.5], [-0.5]])
    )


def two_model_env(noise_level: float = 1e-3, theta_true: float = 1.0, dt: float = 0.1,
                  horizon: int = 20) -> EnvironmentSpec:
    """
    Two candidate structures that agree while the second coordinate is zero.

    The true structure damps both coordinates; the wrong one amplifies the second.
    The goal on the second axis forces the revealing excitation.
    """
    phi_true = [-np.eye(2)]
    phi_wrong = [np.diag([-1.0, 1.0])]
    true_model = StructuredModel(np.zeros((2, 2)), np.eye(2), np.eye(2), phi_true, 2.0, name='damped')
    wrong_model = StructuredModel(np.zeros((2, 2)), np.eye(2), np.eye(2), phi_wrong, 2.0, name='flipped')
    actions = ((1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0))
    return EnvironmentSpec(
        name='two-model',
        model=true_model,
        theta_true=[theta_true],
        action_space=ActionSpace.constant(actions, 2),
        scene=Scene([0.0, 1.0], position=(0, 1)),
        x0=[1.0, 0.0],
        dt=dt,
        horizon=horizon,
        omega_amplitude=noise_level,
        measurement_std=noise_level,
        candidates=[true_model, wrong_model]
    )


ENVIRONMENTS: Dict[str, Callable[..., EnvironmentSpec]] = {
    'obstacle': obstacle_env,
    'scalar': scalar_env,
    'two-model': two_model_env,
}


def make_env(name: str, scene_path: Optional[Union[str, Path]] = None) -> EnvironmentSpec:
    """Build a registered environment; a scene file only applies to the obstacle system."""
    if name not in ENVIRONMENTS:
        raise ConfigurationError(f"unknown environment: {name} (expected one of {sorted(ENVIRONMENTS)})")
    if scene_path is not None:
        if name != 'obstacle':
            raise ConfigurationError("scene files apply to the obstacle environment only")
        return obstacle_env(scene_path)
    return ENVIRONMENTS[name]()
