"""
Episode driver and experiment helpers.

An episode repeats estimate -> predict -> plan -> act on an environment; batches
run seeded episodes in parallel and aggregate their metrics with pandas.
"""

import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.stats import norm

# Add parent directory to path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from project_config import Config
from robust_control.environments import EnvironmentSpec, scalar_model, scalar_polytope, true_step
from robust_control.estimation import (
    ConfidencePolytope, NoiseModel, StructuredRegressor, consistency_test, noise_bounds, rls_solve
)
from robust_control.exceptions import ConfigurationError, EpisodeError, RobustControlError
from robust_control.planning import PredictorModel, plan_tree, recommend
from robust_control.prediction import (
    IntervalPredictor, PointPredictor, PolytopicDynamics, PredictorConfig, StateInterval,
    interval_bounds, predict_trajectory
)
from robust_control.utils import as_vector, log_execution_time, setup_logger

# Configure logger
logger = setup_logger(__name__)

AGENTS = ('robust', 'nominal', 'oracle')
TRACE_SCHEMA = 'rh-trace/1'
METRIC_COLUMNS = [
    'seed', 'agent', 'samples', 'return', 'oracle_value', 'suboptimality', 'collision', 'error'
]


@dataclass
class AgentConfig:
    """How an agent estimates, predicts and plans."""
    kind: str = 'robust'
    delta: float = Config.DELTA
    lam: float = Config.LAMBDA
    gamma: Optional[float] = None
    budget: int = Config.BUDGET
    predictor_mode: str = Config.PREDICTOR_MODE
    polytope_mode: str = Config.POLYTOPE_MODE
    multi_model: bool = False
    seed: int = Config.BASE_SEED
    delta_test: float = Config.DELTA_TEST
    d_max: int = Config.D_MAX

    def __post_init__(self):
        if self.kind not in AGENTS:
            raise ConfigurationError(f"unknown agent kind: {self.kind} (expected one of {AGENTS})")
        if not 0.0 < self.delta < 1.0:
            raise ConfigurationError(f"delta must lie in (0, 1), got {self.delta}")
        if not self.lam > 0.0:
            raise ConfigurationError(f"lambda must be positive, got {self.lam}")
        if self.gamma is not None and not 0.0 < self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in (0, 1), got {self.gamma}")
        if int(self.budget) < 1:
            raise ConfigurationError(f"budget must be at least 1, got {self.budget}")
        if self.polytope_mode not in ('box', 'tight'):
            raise ConfigurationError(f"unknown polytope mode: {self.polytope_mode}")
        # validates the predictor mode
        PredictorConfig(self.predictor_mode)
        self.budget = int(self.budget)
        self.seed = int(self.seed)


@dataclass
class StepRecord:
    t: float
    x: List[float]
    u: List[float]
    y: List[float]
    action: int
    reward: float
    pessimistic_reward: float
    lower: List[float]
    upper: List[float]
    theta_vertices: List[List[float]]
    collision: bool
    wall_ms: float = 0.0


@dataclass
class EpisodeTrace:
    """Everything an episode did, in step order."""
    seed: int
    agent: str
    env: str
    steps: List[StepRecord] = field(default_factory=list)
    rejections: List[Dict] = field(default_factory=list)
    discounted_return: float = 0.0
    collision: bool = False
    final_state: List[float] = field(default_factory=list)

    @property
    def samples(self) -> int:
        return len(self.steps)

    def to_dict(self, include_timing: bool = False) -> dict:
        data = asdict(self)
        data['schema'] = TRACE_SCHEMA
        if not include_timing:
            for step in data['steps']:
                step.pop('wall_ms', None)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'EpisodeTrace':
        if data.get('schema') != TRACE_SCHEMA:
            raise ConfigurationError(f"unsupported trace schema: {data.get('schema')}")
        steps = [StepRecord(**step) for step in data['steps']]
        return cls(
            seed=data['seed'], agent=data['agent'], env=data['env'], steps=steps,
            rejections=data['rejections'], discounted_return=data['discounted_return'],
            collision=data['collision'], final_state=data['final_state']
        )


@dataclass
class MetricsRow:
    seed: int
    agent: str
    samples: int
    discounted_return: float
    oracle_value: float
    suboptimality: float
    collision: bool
    wall_ms: float
    error: str = ''

    def to_record(self) -> dict:
        record = asdict(self)
        record['return'] = record.pop('discounted_return')
        return record


def _build_models(env: EnvironmentSpec, config: AgentConfig, candidates, regressors, cfg: PredictorConfig):
    """Per-candidate predictors, the planning models wrapping them, and the parameter vertices."""
    predictors, vertices = [], []
    for candidate, regressor in zip(candidates, regressors):
        if config.kind == 'robust':
            polytope = regressor.confidence_polytope(config.delta, config.polytope_mode)
            predictors.append(IntervalPredictor.from_polytope(polytope, candidate, env.noise, cfg))
            vertices.append((polytope.theta_center + polytope.theta_deltas).tolist())
        elif config.kind == 'nominal':
            theta_hat = rls_solve(regressor.regression_state)
            predictors.append(PointPredictor(candidate.state_matrix(theta_hat), candidate.B, cfg))
            vertices.append([theta_hat.tolist()])
        else:
            predictors.append(PointPredictor(env.true_matrix, env.model.B, cfg))
            vertices.append([env.theta_true.tolist()])
        if config.kind != 'robust':
            # point agents plan with a single model
            break
    models = [PredictorModel(predictor, env.action_space, env.reward_lower, env.box_collides)
              for predictor in predictors]
    return predictors, models, vertices[0]


def run_episode(env: EnvironmentSpec, config: AgentConfig, horizon: Optional[int] = None) -> EpisodeTrace:
    """
    Run one receding-horizon episode.

    Each step tests the surviving candidate structures against the last transition,
    adds the transition to their regressions, builds one simulator per candidate,
    plans, and applies the first control of the recommended branch. The episode
    stops at the first collision.

    Args:
        env: Environment
        config: Agent configuration (seed included)
        horizon: Number of steps, defaults to env.horizon

    Returns:
        EpisodeTrace

    Raises:
        EpisodeError: If any step fails; carries the step index
    """
    horizon = env.horizon if horizon is None else int(horizon)
    gamma = env.gamma if config.gamma is None else config.gamma
    rng = np.random.default_rng(config.seed)
    cfg = PredictorConfig(config.predictor_mode, env.dt, env.substeps)
    candidates = list(env.candidates) if config.multi_model else [env.model]
    regressors = [StructuredRegressor(candidate, env.noise, config.lam, config.d_max) for candidate in candidates]
    trace = EpisodeTrace(config.seed, config.kind, env.name)

    x = env.x0.copy()
    last_transition = None
    for n in range(horizon):
        start = time.perf_counter()
        t = n * env.dt
        try:
            if last_transition is not None:
                if len(candidates) > 1:
                    eta_lower, eta_upper = noise_bounds(env.model, env.noise, t, horizon, config.delta_test)
                    survivors = []
                    for candidate, regressor in zip(candidates, regressors):
                        polytope = regressor.confidence_polytope(config.delta, config.polytope_mode)
                        if consistency_test(polytope, candidate, last_transition, eta_lower, eta_upper):
                            survivors.append((candidate, regressor))
                        else:
                            logger.info(f"Seed {config.seed}: structure '{candidate.name}' rejected at step {n}")
                            trace.rejections.append({'name': candidate.name, 'step': n})
                    if not survivors:
                        raise EpisodeError("every candidate structure was rejected", n)
                    candidates = [candidate for candidate, _ in survivors]
                    regressors = [regressor for _, regressor in survivors]
                for regressor in regressors:
                    regressor.partial_fit(*last_transition)

            predictors, models, theta_vertices = _build_models(env, config, candidates, regressors, cfg)
            root_states = [predictor.initial(x, t) for predictor in predictors]
            tree = plan_tree(root_states, models, env.action_space, gamma, config.budget)
            action = recommend(tree).path[0]
            child = tree.root.children[action]
            predicted = predictors[0].to_original(child.states[0])

            K, u_a = env.action_space.controller(action)
            u = -K @ x + u_a
            x_next, y = true_step(env, x, u, rng)
        except EpisodeError:
            raise
        except RobustControlError as error:
            raise EpisodeError(f"{type(error).__name__}: {error}", n) from error

        reward = env.reward(x_next)
        collision = env.collides(x_next)
        trace.discounted_return += gamma ** n * reward
        trace.steps.append(StepRecord(
            t=t, x=x.tolist(), u=u.tolist(), y=y.tolist(), action=int(action), reward=reward,
            pessimistic_reward=float(np.min(child.rewards)), lower=predicted.lower.tolist(),
            upper=predicted.upper.tolist(), theta_vertices=theta_vertices, collision=collision,
            wall_ms=1000.0 * (time.perf_counter() - start)
        ))
        last_transition = (x, u, y)
        x = x_next
        if collision:
            trace.collision = True
            logger.info(f"Seed {config.seed}: collision at step {n}")
            break

    trace.final_state = x.tolist()
    logger.info(f"Episode seed={config.seed} agent={config.kind}: return {trace.discounted_return:.4f}, "
                f"{trace.samples} steps, collision={trace.collision}")
    return trace


def oracle_value(env: EnvironmentSpec, x, budget: Optional[int] = None, t: float = 0.0,
                 gamma: Optional[float] = None) -> float:
    """
    Lower estimate of the optimal value V(x): the root lower bound of a plan on the true dynamics.

    Args:
        env: Environment (its theta_true is used)
        x: State
        budget: Expansions, default ORACLE_BUDGET_FACTOR * BUDGET
        t: Time of x
        gamma: Discount, default env.gamma

    Returns:
        Root U value, non-decreasing in the budget
    """
    budget = Config.ORACLE_BUDGET_FACTOR * Config.BUDGET if budget is None else int(budget)
    gamma = env.gamma if gamma is None else gamma
    cfg = PredictorConfig('auto', env.dt, env.substeps)
    predictor = PointPredictor(env.true_matrix, env.model.B, cfg)
    model = PredictorModel(predictor, env.action_space, env.reward_lower, env.box_collides)
    tree = plan_tree([predictor.initial(x, t)], [model], env.action_space, gamma, budget)
    return float(tree.root.u)


def oracle_rollout(env: EnvironmentSpec, x, steps: int, budget: Optional[int] = None, t: float = 0.0,
                   gamma: Optional[float] = None) -> float:
    """
    Discounted return of a receding-horizon planner on the true, disturbance-free dynamics.

    Each step plans from the current state with the oracle budget and applies the first
    recommended action, exactly as the oracle agent does. The rollout stops at a collision;
    a state that already collides is worth 0.

    Args:
        env: Environment (its theta_true is used)
        x: Start state
        steps: Number of steps, the horizon the realized return is measured over
        budget: Expansions per step, default ORACLE_BUDGET_FACTOR * BUDGET
        t: Time of x
        gamma: Discount, default env.gamma

    Returns:
        sum over k < steps of gamma^k R(x_{k+1})
    """
    budget = Config.ORACLE_BUDGET_FACTOR * Config.BUDGET if budget is None else int(budget)
    gamma = env.gamma if gamma is None else gamma
    x = as_vector(x, env.model.state_dim, 'x')
    if env.collides(x):
        return 0.0
    cfg = PredictorConfig('auto', env.dt, env.substeps)
    predictor = PointPredictor(env.true_matrix, env.model.B, cfg)
    model = PredictorModel(predictor, env.action_space, env.reward_lower, env.box_collides)
    state = predictor.initial(x, t)
    value = 0.0
    for k in range(int(steps)):
        tree = plan_tree([state], [model], env.action_space, gamma, budget)
        state = model.step(state, recommend(tree).path[0])
        value += gamma ** k * env.reward(state.lower)
        if env.collides(state.lower):
            break
    return value


def _batch_row(env: EnvironmentSpec, config: AgentConfig, seed: int, with_oracle: bool,
               oracle_budget: Optional[int]) -> dict:
    agent = AgentConfig(**{**asdict(config), 'seed': seed})
    start = time.perf_counter()
    try:
        trace = run_episode(env, agent)
    except EpisodeError as error:
        logger.error(f"Seed {seed}: {error}")
        return MetricsRow(seed, agent.kind, error.step, np.nan, np.nan, np.nan, False,
                          1000.0 * (time.perf_counter() - start), str(error)).to_record()
    if with_oracle:
        gamma = env.gamma if agent.gamma is None else agent.gamma
        value = oracle_rollout(env, env.x0, env.horizon, oracle_budget, gamma=gamma)
    else:
        value = np.nan
    return MetricsRow(
        seed=seed, agent=agent.kind, samples=trace.samples, discounted_return=trace.discounted_return,
        oracle_value=value, suboptimality=value - trace.discounted_return, collision=trace.collision,
        wall_ms=1000.0 * (time.perf_counter() - start)
    ).to_record()


@log_execution_time
def run_batch(env: EnvironmentSpec, config: AgentConfig, n_seeds: int, base_seed: int = Config.BASE_SEED,
              n_jobs: int = Config.N_JOBS, with_oracle: bool = True,
              oracle_budget: Optional[int] = None) -> pd.DataFrame:
    """
    Run seeded episodes (seed = base_seed + index) and collect one metrics row each.

    Failed episodes are kept as rows with an error message.

    Returns:
        DataFrame sorted by seed
    """
    if int(n_seeds) < 1:
        raise ConfigurationError(f"n_seeds must be at least 1, got {n_seeds}")
    seeds = [base_seed + index for index in range(int(n_seeds))]
    logger.info(f"Running {len(seeds)} {config.kind} episodes on '{env.name}' with n_jobs={n_jobs}")
    rows = Parallel(n_jobs=n_jobs)(
        delayed(_batch_row)(env, config, seed, with_oracle, oracle_budget) for seed in seeds
    )
    frame = pd.DataFrame(rows, columns=METRIC_COLUMNS + ['wall_ms'])
    return frame.sort_values('seed', kind='stable').reset_index(drop=True)


def summarize(metrics: pd.DataFrame) -> pd.DataFrame:
    """Failure rate, min return and mean/std of returns per agent kind."""
    grouped = metrics.groupby('agent', sort=True)
    summary = pd.DataFrame({
        'episodes': grouped['seed'].count(),
        'failures': grouped['collision'].mean(),
        'min_return': grouped['return'].min(),
        'mean_return': grouped['return'].mean(),
        'std_return': grouped['return'].std(ddof=0),
    })
    return summary.reset_index()


def _curve_rows(env: EnvironmentSpec, config: AgentConfig, seed: int, buckets: Sequence[int],
                eval_horizon: int, oracle_budget: Optional[int]) -> List[dict]:
    agent = AgentConfig(**{**asdict(config), 'seed': seed})
    gamma = env.gamma if agent.gamma is None else agent.gamma
    trace = run_episode(env, agent, horizon=max(buckets) + eval_horizon)
    rewards = np.array([step.reward for step in trace.steps])
    rows = []
    for n in buckets:
        if n < trace.samples:
            state = trace.steps[n].x
            window = rewards[n:n + eval_horizon]
        else:
            state = trace.final_state
            window = np.zeros(0)
        realized = float(np.sum(gamma ** np.arange(window.shape[0]) * window))
        value = oracle_rollout(env, state, eval_horizon, oracle_budget, t=n * env.dt, gamma=gamma)
        rows.append({'seed': seed, 'N': n, 'realized': realized, 'oracle_value': value,
                     'suboptimality': value - realized})
    return rows


@log_execution_time
def suboptimality_curve(env: EnvironmentSpec, config: AgentConfig, n_seeds: int,
                        buckets: Sequence[int] = Config.SUBOPTIMALITY_BUCKETS, eval_horizon: int = 20,
                        base_seed: int = Config.BASE_SEED, n_jobs: int = Config.N_JOBS,
                        oracle_budget: Optional[int] = None, confidence: float = 0.95) -> pd.DataFrame:
    """
    Suboptimality V(x_N) - realized return after N collected samples.

    One episode per seed serves every bucket N. Both sides cover the eval_horizon steps
    that follow step N: the realized return sums the agent's rewards, V(x_N) is an
    oracle rollout from the same state. Rewards after a collision count as 0.

    Returns:
        DataFrame with columns N, mean, ci_low, ci_high, max, count
    """
    per_seed = Parallel(n_jobs=n_jobs)(
        delayed(_curve_rows)(env, config, base_seed + index, sorted(buckets), eval_horizon, oracle_budget)
        for index in range(int(n_seeds))
    )
    samples = pd.DataFrame([row for rows in per_seed for row in rows])
    z = norm.ppf(0.5 + confidence / 2.0)
    grouped = samples.groupby('N', sort=True)['suboptimality']
    curve = pd.DataFrame({
        'mean': grouped.mean(),
        'std': grouped.std(ddof=1).fillna(0.0),
        'max': grouped.max(),
        'count': grouped.count(),
    })
    half_width = z * curve['std'] / np.sqrt(curve['count'])
    curve['ci_low'] = curve['mean'] - half_width
    curve['ci_high'] = curve['mean'] + half_width
    return curve.reset_index()[['N', 'mean', 'ci_low', 'ci_high', 'max', 'count']]


def predictor_comparison(t_final: float = 2.0, dt: float = 0.05, substeps: int = Config.SUBSTEPS,
                         omega_amplitude: float = 0.05, x0: float = 1.0) -> pd.DataFrame:
    """
    Simple and enhanced interval predictions of x' = -theta x + omega, theta in [1, 2].

    Returns:
        DataFrame with columns t, simple_lower, simple_upper, enhanced_lower, enhanced_upper
    """
    model = scalar_model()
    polytope = scalar_polytope()
    noise = NoiseModel.constant(np.eye(1), [-omega_amplitude], [omega_amplitude])
    steps = int(round(t_final / dt))
    controls = [(np.zeros((1, 1)), np.zeros(1))] * steps
    cfg = PredictorConfig('simple', dt, substeps)
    simple = predict_trajectory([x0], controls, interval_bounds(polytope), noise, cfg,
                                B=model.B, D=model.D)
    enhanced = predict_trajectory([x0], controls, PolytopicDynamics.from_polytope(polytope, model), noise,
                                  PredictorConfig('enhanced', dt, substeps))
    rows = [{'t': 0.0, 'simple_lower': x0, 'simple_upper': x0, 'enhanced_lower': x0, 'enhanced_upper': x0}]
    for a, b in zip(simple, enhanced):
        rows.append({'t': a.time, 'simple_lower': a.lower[0], 'simple_upper': a.upper[0],
                     'enhanced_lower': b.lower[0], 'enhanced_upper': b.upper[0]})
    return pd.DataFrame(rows)


def check_safety_chain(trace: EpisodeTrace, env: EnvironmentSpec, n_samples: int = 100,
                       rng: Optional[np.random.Generator] = None,
                       tol: float = 1e3 * Config.TOLERANCE) -> pd.DataFrame:
    """
    Re-simulate every logged step under sampled in-set dynamics and disturbances.

    For each step and sample, theta is a random convex combination of that step's
    parameter vertices and omega is uniform within its bounds; the logged control is
    applied from the logged state.

    Returns:
        DataFrame with columns step, sample, contained, collided, predicted_safe
    """
    rng = np.random.default_rng(trace.seed) if rng is None else rng
    rows = []
    for index, step in enumerate(trace.steps):
        vertices = np.asarray(step.theta_vertices)
        box = StateInterval(step.lower, step.upper, step.t + env.dt)
        for sample in range(n_samples):
            weights = rng.dirichlet(np.ones(vertices.shape[0]))
            theta = weights @ vertices
            x_next, _ = true_step(env, step.x, step.u, rng, theta=theta)
            rows.append({
                'step': index, 'sample': sample,
                'contained': box.contains(x_next, tol),
                'collided': env.collides(x_next),
                'predicted_safe': step.pessimistic_reward > 0.0,
            })
    return pd.DataFrame(rows, columns=['step', 'sample', 'contained', 'collided', 'predicted_safe'])


def _vertex_polytope(model, vertices: np.ndarray) -> ConfidencePolytope:
    """Polytope of a logged, centrally symmetric set of parameter vertices."""
    center = vertices.mean(axis=0)
    a_center = model.state_matrix(center)
    deltas = np.stack([model.state_matrix(vertex) - a_center for vertex in vertices])
    return ConfidencePolytope(a_center, deltas, center, vertices - center)


def check_sequence_safety(trace: EpisodeTrace, env: EnvironmentSpec, n_samples: int = 100,
                          rng: Optional[np.random.Generator] = None,
                          tol: float = 1e3 * Config.TOLERANCE) -> pd.DataFrame:
    """
    Replay the whole logged control sequence from the first logged state under sampled in-set dynamics.

    The parameter region is the last logged one. Its interval tube is predicted once
    along the open-loop controls; each sample draws theta as a random convex
    combination of the region's vertices and a fresh disturbance sequence within
    bounds, then simulates the same controls.

    Returns:
        DataFrame with one row per sample and columns sample, contained (every state
        inside its tube interval), collided, predicted_safe (every tube interval has a
        positive pessimistic reward) and planned_safe (every planned pessimistic reward
        of the episode was positive)
    """
    columns = ['sample', 'contained', 'collided', 'predicted_safe', 'planned_safe']
    if not trace.steps:
        return pd.DataFrame(columns=columns)
    rng = np.random.default_rng(trace.seed) if rng is None else rng
    vertices = np.asarray(trace.steps[-1].theta_vertices, dtype=float)
    polytope = _vertex_polytope(env.model, vertices)
    cfg = PredictorConfig(Config.PREDICTOR_MODE, env.dt, env.substeps)
    predictor = IntervalPredictor.from_polytope(polytope, env.model, env.noise, cfg)
    zero_gain = np.zeros((env.model.control_dim, env.model.state_dim))
    controls = [(zero_gain, np.asarray(step.u, dtype=float)) for step in trace.steps]

    state = predictor.initial(trace.steps[0].x, trace.steps[0].t)
    tube = []
    for controller in controls:
        state = predictor.step(state, controller)
        tube.append(predictor.to_original(state))
    predicted_safe = all(env.reward_lower(box) > 0.0 for box in tube)
    planned_safe = all(step.pessimistic_reward > 0.0 for step in trace.steps)

    rows = []
    for sample in range(n_samples):
        theta = rng.dirichlet(np.ones(vertices.shape[0])) @ vertices
        x = np.asarray(trace.steps[0].x, dtype=float)
        contained, collided = True, False
        for (_, u), box in zip(controls, tube):
            x, _ = true_step(env, x, u, rng, theta=theta)
            contained = contained and box.contains(x, tol)
            collided = collided or env.collides(x)
        rows.append({'sample': sample, 'contained': contained, 'collided': collided,
                     'predicted_safe': predicted_safe, 'planned_safe': planned_safe})
    logger.debug(f"Sequence check seed={trace.seed}: {sum(row['collided'] for row in rows)} of "
                 f"{n_samples} replays collided, tube safe={predicted_safe}")
    return pd.DataFrame(rows, columns=columns)


def export(data: Union[EpisodeTrace, pd.DataFrame], path: Union[str, Path], fmt: Optional[str] = None,
           include_timing: bool = False):
    """
    Write a trace as JSON or a metrics table as CSV.

    Floats keep 17 significant digits in CSV and their shortest round-trip form in JSON.
    """
    path = Path(path)
    fmt = fmt or ('json' if isinstance(data, EpisodeTrace) else 'csv')
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == 'json':
        if not isinstance(data, EpisodeTrace):
            raise ConfigurationError("JSON export expects an episode trace")
        with open(path, 'w') as handle:
            json.dump(data.to_dict(include_timing), handle, indent=2)
    elif fmt == 'csv':
        columns = [column for column in data.columns
                   if include_timing or column != 'wall_ms']
        data.to_csv(path, index=False, columns=columns, float_format='%.17g')
    else:
        raise ConfigurationError(f"unknown export format: {fmt}")
    logger.info(f"Wrote {fmt.upper()} to {path}")


def load_trace(path: Union[str, Path]) -> EpisodeTrace:
    with open(path, 'r') as handle:
        return EpisodeTrace.from_dict(json.load(handle))


def load_metrics(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, float_precision='round_trip')
