"""
Core data model for finite average-cost MDPs: spaces, distributions, kernels,
costs, stationary policies, value vectors and the span seminorm.

All objects are immutable after construction; their arrays are flagged
read-only so they can be shared between sweep threads.
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from config import PROBABILITY_TOL
from errors import ShapeMismatchError, ValidationError

logger = logging.getLogger(__name__)


def _frozen(array, dtype=float):
    array = np.array(array, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


def _first_index(mask):
    """Index tuple of the first True entry of a boolean array."""
    return tuple(int(i) for i in np.argwhere(mask)[0])


@dataclass(frozen=True)
class _LabelledSpace:
    labels: Tuple
    coords: np.ndarray

    def __post_init__(self):
        labels = tuple(self.labels)
        coords = _frozen(self.coords if self.coords is not None else range(len(labels)))
        kind = type(self).__name__
        if len(labels) < 1:
            raise ValidationError(f"{kind} needs at least one label")
        if len(set(labels)) != len(labels):
            seen = set()
            for i, label in enumerate(labels):
                if label in seen:
                    raise ValidationError(f"{kind} label {label!r} at index {i} is duplicated")
                seen.add(label)
        if coords.shape != (len(labels),):
            raise ValidationError(
                f"{kind} has {len(labels)} labels but coords of shape {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ValidationError(f"{kind} coord at index {_first_index(~np.isfinite(coords))[0]} is not finite")
        object.__setattr__(self, 'labels', labels)
        object.__setattr__(self, 'coords', coords)

    def __len__(self):
        return len(self.labels)

    def index(self, label) -> int:
        return self.labels.index(label)

    def __eq__(self, other):
        return (type(self) is type(other) and self.labels == other.labels
                and np.array_equal(self.coords, other.coords))

    def __hash__(self):
        return hash((type(self).__name__, self.labels))


class StateSpace(_LabelledSpace):
    """States with one real coordinate each (the embedding used by the BL metric)."""

    @classmethod
    def from_coords(cls, coords: Sequence[float]) -> 'StateSpace':
        """Label each state by its coordinate."""
        return cls(labels=tuple(format(float(c), 'g') for c in coords), coords=coords)


class ActionSpace(_LabelledSpace):
    """Actions with one real coordinate each."""

    @classmethod
    def from_coords(cls, coords: Sequence[float]) -> 'ActionSpace':
        return cls(labels=tuple(format(float(c), 'g') for c in coords), coords=coords)

    @classmethod
    def single(cls) -> 'ActionSpace':
        """The trivial action space of a control-free model."""
        return cls(labels=('none',), coords=(0.0,))


def check_probability_rows(rows: np.ndarray, what: str = "row"):
    """
    Assert that the last axis of ``rows`` holds probability vectors.

    Raises:
        ValidationError naming the first offending index.
    """
    if not np.all(np.isfinite(rows)):
        raise ValidationError(f"{what} entry {_first_index(~np.isfinite(rows))} is not finite")
    if np.any(rows < 0.0) or np.any(rows > 1.0):
        bad = _first_index((rows < 0.0) | (rows > 1.0))
        raise ValidationError(f"{what} entry {bad} is {rows[bad]}, outside [0, 1]")
    sums = rows.sum(axis=-1)
    off = np.abs(sums - 1.0) > PROBABILITY_TOL
    if np.any(off):
        bad = _first_index(off)
        raise ValidationError(f"{what} {bad} sums to {sums[bad]!r}, not 1")


@dataclass(frozen=True, eq=False)
class Distribution:
    """A probability vector over the states of some space."""

    weights: np.ndarray

    def __post_init__(self):
        weights = _frozen(self.weights)
        if weights.ndim != 1 or weights.size < 1:
            raise ValidationError(f"distribution must be a nonempty vector, got shape {weights.shape}")
        check_probability_rows(weights, "distribution")
        object.__setattr__(self, 'weights', weights)

    @classmethod
    def point_mass(cls, n_states: int, index: int) -> 'Distribution':
        weights = np.zeros(n_states)
        weights[index] = 1.0
        return cls(weights)

    @classmethod
    def uniform(cls, n_states: int) -> 'Distribution':
        return cls(np.full(n_states, 1.0 / n_states))

    @classmethod
    def normalized(cls, mass: Sequence[float]) -> 'Distribution':
        """Build from nonnegative mass, renormalizing once here."""
        mass = np.asarray(mass, dtype=float)
        total = mass.sum()
        if total <= 0:
            raise ValidationError("cannot normalize a distribution with zero total mass")
        return cls(mass / total)

    def __len__(self):
        return self.weights.size

    def support(self) -> np.ndarray:
        return np.flatnonzero(self.weights > 0.0)


@dataclass(frozen=True, eq=False)
class Kernel:
    """Transition kernel indexed ``probs[state, action, next_state]``."""

    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.ndim != 3 or probs.shape[0] != probs.shape[2] or min(probs.shape) < 1:
            raise ValidationError(f"kernel must have shape (S, U, S), got {probs.shape}")
        check_probability_rows(probs, "kernel row (state, action)")
        object.__setattr__(self, 'probs', probs)

    @classmethod
    def normalized(cls, mass: np.ndarray) -> 'Kernel':
        """Build from nonnegative row mass, renormalizing once here."""
        mass = np.asarray(mass, dtype=float)
        totals = mass.sum(axis=-1, keepdims=True)
        if np.any(totals <= 0):
            raise ValidationError(f"kernel row {_first_index(totals[..., 0] <= 0)} has zero mass")
        return cls(mass / totals)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    def row(self, state: int, action: int) -> Distribution:
        return Distribution(self.probs[state, action])


@dataclass(frozen=True, eq=False)
class CostFn:
    """Stage cost table ``values[state, action]``."""

    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 2:
            raise ValidationError(f"cost must have shape (S, U), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValidationError(f"cost at {_first_index(~np.isfinite(values))} is not finite")
        object.__setattr__(self, 'values', values)


@dataclass(frozen=True, eq=False)
class FiniteMdp:
    """The controlled model: the pair (kernel, cost) on finite state and action spaces."""

    states: StateSpace
    actions: ActionSpace
    kernel: Kernel
    cost: CostFn

    def __post_init__(self):
        expected = (len(self.states), len(self.actions))
        if self.kernel.probs.shape != expected + (expected[0],):
            raise ShapeMismatchError(
                f"kernel shape {self.kernel.probs.shape} does not match |X|, |U| = {expected}")
        if self.cost.values.shape != expected:
            raise ShapeMismatchError(
                f"cost shape {self.cost.values.shape} does not match |X|, |U| = {expected}")

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def n_policies(self) -> int:
        return self.n_actions ** self.n_states

    def with_kernel(self, kernel: Kernel) -> 'FiniteMdp':
        """Same spaces and cost, another kernel."""
        return FiniteMdp(self.states, self.actions, kernel, self.cost)

    def require_same_shape(self, other: 'FiniteMdp'):
        if (self.n_states, self.n_actions) != (other.n_states, other.n_actions):
            raise ShapeMismatchError(
                f"models disagree on shape: {(self.n_states, self.n_actions)} "
                f"vs {(other.n_states, other.n_actions)}")
        if not np.array_equal(self.cost.values, other.cost.values):
            raise ShapeMismatchError("models disagree on the stage cost")


@dataclass(frozen=True, eq=False)
class StationaryPolicy:
    """Deterministic stationary policy: one action index per state."""

    choice: np.ndarray

    def __post_init__(self):
        choice = np.array(self.choice, dtype=np.int64, copy=True)
        if choice.ndim != 1 or choice.size < 1:
            raise ValidationError(f"policy must list one action per state, got shape {choice.shape}")
        if np.any(choice < 0):
            raise ValidationError(f"policy action at state {_first_index(choice < 0)[0]} is negative")
        choice.setflags(write=False)
        object.__setattr__(self, 'choice', choice)

    @classmethod
    def constant(cls, n_states: int, action: int = 0) -> 'StationaryPolicy':
        return cls(np.full(n_states, action))

    def check_for(self, mdp: FiniteMdp):
        if self.choice.size != mdp.n_states:
            raise ShapeMismatchError(
                f"policy covers {self.choice.size} states, model has {mdp.n_states}")
        if np.any(self.choice >= mdp.n_actions):
            state = _first_index(self.choice >= mdp.n_actions)[0]
            raise ValidationError(
                f"policy action {self.choice[state]} at state {state} is out of range "
                f"for {mdp.n_actions} actions")

    def __len__(self):
        return self.choice.size

    def __iter__(self):
        return iter(int(a) for a in self.choice)

    def __eq__(self, other):
        return isinstance(other, StationaryPolicy) and np.array_equal(self.choice, other.choice)

    def __hash__(self):
        return hash(tuple(self.choice))

    def to_list(self):
        return [int(a) for a in self.choice]


@dataclass(frozen=True, eq=False)
class ValueVector:
    """Bounded function on the states."""

    values: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 1:
            raise ValidationError(f"value vector must be 1-d, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValidationError(f"value at state {_first_index(~np.isfinite(values))[0]} is not finite")
        object.__setattr__(self, 'values', values)

    @classmethod
    def zeros(cls, n_states: int) -> 'ValueVector':
        return cls(np.zeros(n_states))

    def __len__(self):
        return self.values.size


def span(v: Union[ValueVector, np.ndarray, Sequence[float]]) -> float:
    """sp(v) = max v - min v."""
    values = v.values if isinstance(v, ValueVector) else np.asarray(v, dtype=float)
    return float(np.max(values) - np.min(values))


def policy_kernel(mdp: FiniteMdp, policy: StationaryPolicy) -> np.ndarray:
    """
    Row-stochastic matrix of the chain under a stationary policy.

    Row x is the kernel row at (x, policy(x)).
    """
    policy.check_for(mdp)
    matrix = mdp.kernel.probs[np.arange(mdp.n_states), policy.choice]
    matrix.setflags(write=False)
    return matrix


def policy_cost(mdp: FiniteMdp, policy: StationaryPolicy) -> np.ndarray:
    """Stage cost c(x, policy(x)) per state."""
    policy.check_for(mdp)
    return mdp.cost.values[np.arange(mdp.n_states), policy.choice]


def t_step_kernel(mdp: FiniteMdp, policy: StationaryPolicy, t: int) -> np.ndarray:
    """
    t-step transition matrix under a stationary policy.

    Args:
        mdp: the model
        policy: stationary policy
        t: number of steps, t >= 1

    Returns:
        The t-th matrix power of policy_kernel(mdp, policy).
    """
    if int(t) != t or t < 1:
        raise ValidationError(f"t must be a positive integer, got {t}")
    matrix = np.linalg.matrix_power(policy_kernel(mdp, policy), int(t))
    matrix.setflags(write=False)
    return matrix


def initial_distribution(n_states: int, initial: Union[int, Distribution, None]) -> np.ndarray:
    """Weights of an initial state given as an index, a Distribution or None (uniform)."""
    if initial is None:
        return np.full(n_states, 1.0 / n_states)
    if isinstance(initial, Distribution):
        if len(initial) != n_states:
            raise ShapeMismatchError(f"initial distribution has {len(initial)} states, model has {n_states}")
        return np.asarray(initial.weights)
    index = int(initial)
    if not 0 <= index < n_states:
        raise ValidationError(f"initial state {index} out of range for {n_states} states")
    return Distribution.point_mass(n_states, index).weights


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int,
               min_prob: float = 0.0, cost_scale: float = 1.0,
               sparsity: float = 0.0) -> FiniteMdp:
    """
    Random model with kernel entries >= min_prob and costs uniform on [0, cost_scale].

    Args:
        rng: numpy Generator
        n_states: |X|
        n_actions: |U|
        min_prob: floor of every kernel entry, must satisfy min_prob * n_states <= 1
        cost_scale: upper end of the cost range
        sparsity: probability that a free entry is zeroed before normalization
    """
    if min_prob * n_states > 1.0:
        raise ValidationError(f"min_prob {min_prob} is infeasible for {n_states} states")
    free = rng.random((n_states, n_actions, n_states))
    if sparsity > 0.0:
        free = free * (rng.random(free.shape) >= sparsity)
        # keep at least one free entry per row
        empty = free.sum(axis=-1) == 0
        free[empty, 0] = 1.0
    free = free / free.sum(axis=-1, keepdims=True)
    probs = min_prob + (1.0 - min_prob * n_states) * free
    probs = probs / probs.sum(axis=-1, keepdims=True)
    cost = rng.random((n_states, n_actions)) * cost_scale
    states = StateSpace(labels=tuple(f"s{i}" for i in range(n_states)), coords=np.arange(n_states, dtype=float))
    actions = ActionSpace(labels=tuple(f"a{i}" for i in range(n_actions)), coords=np.arange(n_actions, dtype=float))
    return FiniteMdp(states, actions, Kernel(probs), CostFn(cost))
