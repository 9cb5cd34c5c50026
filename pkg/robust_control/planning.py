"""
Pessimistic tree search over a finite action set.

Optimistic planning of deterministic systems applied to the pessimistic surrogate
return: every node stores, for each candidate model, the discounted sum of the
lower-bound rewards collected along its path. The robust backup takes the minimum
over models at the leaves and the maximum over children above them.
"""

import os
import sys
from dataclasses import dataclass, field
from itertools import product
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

# Add parent directory to path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from project_config import Config
from robust_control.exceptions import (
    BudgetExhausted, ConfigurationError, RewardContractError, RobustControlError,
    SimulationError, StructureError
)
from robust_control.utils import as_matrix, as_vector, setup_logger

# Configure logger
logger = setup_logger(__name__)

BACKUPS = ('robust', 'naive')


@dataclass
class ActionSpace:
    """Finite action set; action a applies the affine feedback u = -K_a x + u_a."""
    labels: Tuple[str, ...]
    controllers: Optional[Tuple[Tuple[np.ndarray, np.ndarray], ...]] = None

    def __post_init__(self):
        self.labels = tuple(str(label) for label in self.labels)
        if not self.labels:
            raise ConfigurationError("action space must not be empty")
        if self.controllers is None:
            return
        if len(self.controllers) != len(self.labels):
            raise StructureError("one controller per action is required")
        checked = []
        shape = None
        for K, u in self.controllers:
            K = as_matrix(K, shape, 'K')
            shape = K.shape
            checked.append((K, as_vector(u, K.shape[0], 'u')))
        self.controllers = tuple(checked)

    @classmethod
    def constant(cls, controls: Sequence, state_dim: int, labels: Optional[Sequence[str]] = None) -> 'ActionSpace':
        """Open-loop actions u_a with K_a = 0."""
        controls = [as_vector(u, name='u') for u in controls]
        controllers = tuple((np.zeros((u.shape[0], state_dim)), u) for u in controls)
        if labels is None:
            labels = [str(tuple(float(v) for v in u)) for u in controls]
        return cls(tuple(labels), controllers)

    @classmethod
    def indexed(cls, n_actions: int) -> 'ActionSpace':
        """Abstract actions 0..n-1, for models that interpret the index themselves."""
        return cls(tuple(str(a) for a in range(n_actions)))

    def __len__(self) -> int:
        return len(self.labels)

    def controller(self, action: int) -> Tuple[np.ndarray, np.ndarray]:
        if self.controllers is None:
            raise ConfigurationError("this action space has no controllers")
        return self.controllers[action]


class PredictorModel:
    """
    Planning model backed by an interval (or point) predictor and a pessimistic reward.

    When ``absorbing`` is given, a predicted state for which it holds ends the model's
    trajectory: that node and all its descendants score 0 for this model.
    """

    def __init__(self, predictor, action_space: ActionSpace, reward_lower: Callable,
                 absorbing: Optional[Callable] = None):
        self.predictor = predictor
        self.action_space = action_space
        self.reward_lower = reward_lower
        self.absorbing = absorbing

    def step(self, state, action: int):
        return self.predictor.step(state, self.action_space.controller(action))

    def reward(self, state) -> float:
        return self.reward_lower(self.predictor.to_original(state))

    def terminal(self, state) -> bool:
        if self.absorbing is None:
            return False
        return bool(self.absorbing(self.predictor.to_original(state)))


@dataclass(eq=False)
class PlanNode:
    """A node of the planning tree: one action path and its per-model predictions."""
    path: Tuple[int, ...]
    states: List[Any]
    returns: np.ndarray
    rewards: np.ndarray
    children: Dict[int, 'PlanNode'] = field(default_factory=dict)
    expanded: bool = False
    u: float = 0.0
    b: float = 0.0
    u_models: Optional[np.ndarray] = None
    b_models: Optional[np.ndarray] = None
    alive: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.alive is None:
            self.alive = np.ones(len(self.states), dtype=bool)

    @property
    def depth(self) -> int:
        return len(self.path)

    @property
    def model_count(self) -> int:
        return len(self.states)

    def set_leaf_values(self, gamma: float):
        # absorbed models collect nothing after this node
        tail = gamma ** self.depth / (1.0 - gamma) * self.alive
        self.u = float(np.min(self.returns))
        self.u_models = self.returns.copy()
        self.b_models = self.returns + tail
        self.b = float(np.min(self.b_models))

    def backup(self):
        children = [self.children[a] for a in sorted(self.children)]
        self.u = max(child.u for child in children)
        self.b = max(child.b for child in children)
        self.u_models = np.max([child.u_models for child in children], axis=0)
        self.b_models = np.max([child.b_models for child in children], axis=0)

    def value(self, backup: str, upper: bool) -> float:
        if backup == 'robust':
            return self.b if upper else self.u
        return float(np.min(self.b_models if upper else self.u_models))


@dataclass
class PlanResult:
    recommended_action: int
    root_b_value: float
    root_u_value: float
    tree_depth: int
    expansions_used: int
    path: Tuple[int, ...] = ()
    history: List[Tuple[float, float]] = field(default_factory=list)


class PlanTree:
    """Planning tree with capacity K * |A| + 1 nodes and the root value history."""

    def __init__(self, root_states: Sequence, n_actions: int, gamma: float, budget: int,
                 backup: str = 'robust'):
        if not 0.0 < gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in (0, 1), got {gamma}")
        if int(budget) < 1:
            raise ConfigurationError(f"budget must be at least 1, got {budget}")
        if backup not in BACKUPS:
            raise ConfigurationError(f"unknown backup: {backup}")
        if not root_states:
            raise ConfigurationError("at least one model is required")
        self.gamma = gamma
        self.n_actions = n_actions
        self.backup = backup
        self.capacity = int(budget) * n_actions + 1
        m = len(root_states)
        self.root = PlanNode((), list(root_states), np.zeros(m), np.zeros(m))
        self.root.set_leaf_values(gamma)
        self.node_count = 1
        self.expansions = 0
        self.history: List[Tuple[float, float]] = []

    def nodes(self):
        """All nodes, depth-first in action order."""
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(node.children[a] for a in sorted(node.children, reverse=True))

    def node_at(self, path: Sequence[int]) -> PlanNode:
        node = self.root
        for action in path:
            node = node.children[action]
        return node

    def backup_path(self, path: Sequence[int]):
        """Refresh cached values from the node at path up to the root."""
        ancestors = [self.root]
        for action in path:
            ancestors.append(ancestors[-1].children[action])
        for node in reversed(ancestors):
            if node.expanded:
                node.backup()

    @property
    def depth(self) -> int:
        return max(node.depth for node in self.nodes())

    def grow(self, models: Sequence, action_space) -> PlanNode:
        """One iteration: select the max-B leaf, expand it, back up and record the root values."""
        leaf = select_leaf(self)
        expand(leaf, models, action_space, self.gamma)
        self.node_count += len(action_space)
        self.expansions += 1
        self.backup_path(leaf.path)
        self.history.append((self.root.value(self.backup, upper=False), self.root.value(self.backup, upper=True)))
        return leaf


def b_value(node: PlanNode, gamma: float) -> float:
    """Robust upper bound: min over models of the leaf return plus tail, max over children."""
    if not node.expanded:
        return float(np.min(node.returns + gamma ** node.depth / (1.0 - gamma) * node.alive))
    return max(b_value(child, gamma) for child in node.children.values())


def u_value(node: PlanNode, gamma: float) -> float:
    """Robust lower bound: min over models of the leaf return, max over children."""
    if not node.expanded:
        return float(np.min(node.returns))
    return max(u_value(child, gamma) for child in node.children.values())


def select_leaf(tree: PlanTree) -> PlanNode:
    """
    Follow the children with the highest upper bound down to an unexpanded leaf.

    Ties go to the lowest action index.

    Raises:
        BudgetExhausted: If expanding another leaf would exceed the tree capacity
    """
    if tree.node_count + tree.n_actions > tree.capacity:
        raise BudgetExhausted(f"tree holds {tree.node_count} of {tree.capacity} nodes")
    node = tree.root
    while node.expanded:
        best = None
        for action in sorted(node.children):
            child = node.children[action]
            if best is None or child.value(tree.backup, upper=True) > best.value(tree.backup, upper=True):
                best = child
        node = best
    return node


def _check_reward(reward: float, path: Tuple[int, ...]) -> float:
    reward = float(reward)
    if not 0.0 <= reward <= 1.0:
        raise RewardContractError(f"reward {reward!r} outside [0, 1] at node path {list(path)}")
    return reward


def _is_terminal(model, state) -> bool:
    terminal = getattr(model, 'terminal', None)
    return bool(terminal(state)) if terminal is not None else False


def expand(leaf: PlanNode, models: Sequence, action_space, gamma: float) -> List[PlanNode]:
    """
    Create one child per action by stepping every model from the leaf's states.

    A model whose state was terminal at the leaf stays absorbed: its state is carried
    over and its reward is 0.

    Args:
        leaf: Unexpanded node
        models: One planning model per candidate, each with step(state, action) and reward(state)
        action_space: ActionSpace (or anything with a length)
        gamma: Discount factor

    Returns:
        The new children, in action order

    Raises:
        RewardContractError: If a model emits a reward outside [0, 1]
        SimulationError: If a model step fails; carries the child path
    """
    if leaf.expanded:
        raise ConfigurationError(f"node {list(leaf.path)} is already expanded")
    if len(models) != leaf.model_count:
        raise StructureError(f"{len(models)} models for a node holding {leaf.model_count} states")
    discount = gamma ** leaf.depth
    children = []
    for action in range(len(action_space)):
        path = leaf.path + (action,)
        states, rewards, alive = [], [], []
        for model, state, running in zip(models, leaf.states, leaf.alive):
            if not running:
                states.append(state)
                rewards.append(0.0)
                alive.append(False)
                continue
            try:
                next_state = model.step(state, action)
                reward = model.reward(next_state)
                stopped = _is_terminal(model, next_state)
            except (RobustControlError, ArithmeticError, ValueError, np.linalg.LinAlgError) as error:
                if isinstance(error, RewardContractError):
                    raise
                raise SimulationError(f"simulation failed: {error}", path) from error
            states.append(next_state)
            rewards.append(_check_reward(reward, path))
            alive.append(not stopped)
        rewards = np.asarray(rewards)
        child = PlanNode(path, states, leaf.returns + discount * rewards, rewards,
                         alive=np.asarray(alive, dtype=bool))
        child.set_leaf_values(gamma)
        leaf.children[action] = child
        children.append(child)
    leaf.expanded = True
    leaf.backup()
    return children


def recommend(tree: PlanTree) -> PlanNode:
    """
    Node whose first action is recommended.

    Robust backup: among the expanded nodes of maximal depth (the root's children when
    only the root is expanded), the highest lower bound, then the lowest path.
    Naive backup: the root child with the highest naive lower bound.
    """
    if tree.backup == 'naive' or not tree.root.expanded:
        candidates = [tree.root.children[a] for a in sorted(tree.root.children)]
    else:
        expanded = [node for node in tree.nodes() if node.expanded]
        deepest = max(node.depth for node in expanded)
        if deepest == 0:
            candidates = [tree.root.children[a] for a in sorted(tree.root.children)]
        else:
            candidates = [node for node in expanded if node.depth == deepest]
    if not candidates:
        raise BudgetExhausted("no expanded node to recommend from")
    return min(candidates, key=lambda node: (-node.value(tree.backup, upper=False), node.path))


def plan(root_states: Sequence, models: Sequence, action_space, gamma: float = Config.GAMMA,
         budget: int = Config.BUDGET, backup: str = 'robust') -> PlanResult:
    """
    Run K iterations of leaf selection and expansion and recommend a first action.

    Args:
        root_states: One initial state per model
        models: Planning models, one per candidate
        action_space: ActionSpace
        gamma: Discount factor in (0, 1)
        budget: Number of expansions K
        backup: 'robust' (min over models at leaves) or 'naive' (min over per-model values at every node)

    Returns:
        PlanResult
    """
    tree = plan_tree(root_states, models, action_space, gamma, budget, backup)
    best = recommend(tree)
    logger.debug(f"Planned {tree.expansions} expansions, depth {tree.depth}, "
                 f"root U={tree.root.u:.4f} B={tree.root.b:.4f}, branch {list(best.path)}")
    return PlanResult(
        recommended_action=best.path[0],
        root_b_value=tree.root.value(backup, upper=True),
        root_u_value=tree.root.value(backup, upper=False),
        tree_depth=tree.depth,
        expansions_used=tree.expansions,
        path=best.path,
        history=tree.history
    )


def plan_tree(root_states: Sequence, models: Sequence, action_space, gamma: float, budget: int,
              backup: str = 'robust') -> PlanTree:
    """Run K iterations of leaf selection and expansion and return the tree."""
    if len(root_states) != len(models):
        raise StructureError(f"{len(root_states)} root states for {len(models)} models")
    tree = PlanTree(root_states, len(action_space), gamma, budget, backup)
    for _ in range(int(budget)):
        tree.grow(models, action_space)
    return tree


def model_returns(action_sequence: Sequence[int], root_states: Sequence, models: Sequence,
                  gamma: float) -> np.ndarray:
    """Per-model discounted sum of the pessimistic rewards along an action sequence, stopping at terminal states."""
    returns = np.zeros(len(models))
    for m, (model, state) in enumerate(zip(models, root_states)):
        for n, action in enumerate(action_sequence):
            state = model.step(state, action)
            returns[m] += gamma ** n * _check_reward(model.reward(state), tuple(action_sequence[:n + 1]))
            if _is_terminal(model, state):
                break
    return returns


def surrogate_value(action_sequence: Sequence[int], root_states: Sequence, models: Sequence,
                    gamma: float, horizon: Optional[int] = None) -> float:
    """
    Truncated pessimistic value: min over models of sum_{n<H} gamma^n R_n.

    Raises:
        ConfigurationError: If the horizon is below 1 or longer than the sequence
    """
    horizon = len(action_sequence) if horizon is None else int(horizon)
    if horizon < 1 or horizon > len(action_sequence):
        raise ConfigurationError(f"horizon must lie in [1, {len(action_sequence)}], got {horizon}")
    return float(np.min(model_returns(action_sequence[:horizon], root_states, models, gamma)))


def enumerate_robust_values(root_states: Sequence, models: Sequence, action_space, gamma: float,
                            depth: int) -> Dict[Tuple[int, ...], float]:
    """
    Surrogate value of every action sequence of the given depth (exhaustive max-min oracle).

    Returns:
        Mapping from action sequence to its min-over-models discounted return
    """
    if depth < 1:
        raise ConfigurationError(f"depth must be at least 1, got {depth}")
    n_actions = len(action_space)
    values = {}
    for sequence in product(range(n_actions), repeat=depth):
        values[sequence] = float(np.min(model_returns(sequence, root_states, models, gamma)))
    return values


def best_first_action(values: Dict[Tuple[int, ...], float]) -> Tuple[int, float]:
    """First action of the best enumerated sequence (lowest sequence on ties) and its value."""
    sequence = min(values, key=lambda seq: (-values[seq], seq))
    return sequence[0], values[sequence]
