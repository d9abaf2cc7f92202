"""
Learning the kernel from simulated data and re-planning on the estimate.

Sampling is inverse-CDF on Philox counter-based streams keyed by
(seed, block, stream), so a block's draws never depend on what earlier blocks
consumed or on extra diagnostics.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from config import ACOE_MAX_ITER, ACOE_TOL, UNICHAIN_SV_THRESHOLD
from errors import AcoeError, BlockError, NoiseGridError, PreconditionError, ValidationError
from mdp_core import (CostFn, Distribution, FiniteMdp, Kernel, StateSpace, ActionSpace,
                      StationaryPolicy, initial_distribution)
from metrics import check_ergodicity, kernel_distance
from dp_solver import evaluate_policy, solve_acoe

logger = logging.getLogger(__name__)

TRANSITION_STREAM = 0
ACTION_STREAM = 1
INITIAL_STREAM = 2

ESTIMATORS = ('counts', 'inversion', 'truth')
SCHEDULES = ('factorial', 'geometric')


def stream_generator(seed: int, block: int, stream: int) -> np.random.Generator:
    """Philox generator for one (seed, block, stream) triple."""
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(block), int(stream)))
    return np.random.Generator(np.random.Philox(sequence))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """x_0..x_T with the actions u_0..u_{T-1} taken between them."""

    states: np.ndarray
    actions: np.ndarray
    seed: int = 0

    def __post_init__(self):
        states = np.array(self.states, dtype=np.int64, copy=True)
        actions = np.array(self.actions, dtype=np.int64, copy=True)
        if states.ndim != 1 or states.size < 1:
            raise ValidationError("trajectory needs at least one state")
        if actions.shape != (states.size - 1,):
            raise ValidationError(
                f"trajectory has {states.size} states but {actions.size} actions, expected {states.size - 1}")
        states.setflags(write=False)
        actions.setflags(write=False)
        object.__setattr__(self, 'states', states)
        object.__setattr__(self, 'actions', actions)

    def __len__(self):
        return self.actions.size

    def __eq__(self, other):
        return (isinstance(other, Trajectory) and self.seed == other.seed
                and np.array_equal(self.states, other.states)
                and np.array_equal(self.actions, other.actions))

    def check_for(self, n_states: int, n_actions: int):
        if self.states.size and (self.states.min() < 0 or self.states.max() >= n_states):
            step = int(np.flatnonzero((self.states < 0) | (self.states >= n_states))[0])
            raise ValidationError(f"trajectory state {self.states[step]} at step {step} out of range")
        if self.actions.size and (self.actions.min() < 0 or self.actions.max() >= n_actions):
            step = int(np.flatnonzero((self.actions < 0) | (self.actions >= n_actions))[0])
            raise ValidationError(f"trajectory action {self.actions[step]} at step {step} out of range")


class PolicyController:
    """Stationary policy mixed with uniform exploration at rate epsilon."""

    def __init__(self, policy: StationaryPolicy, epsilon: float = 0.0):
        if not 0.0 <= epsilon <= 1.0:
            raise ValidationError(f"exploration rate must be in [0, 1], got {epsilon}")
        self.policy = policy
        self.epsilon = float(epsilon)

    def action_plan(self, draws: np.ndarray, n_actions: int) -> Tuple[np.ndarray, np.ndarray]:
        """Per-step exploration flags and exploratory actions from (T x 2) uniforms."""
        explore = draws[:, 0] < self.epsilon
        random_actions = np.minimum((draws[:, 1] * n_actions).astype(np.int64), n_actions - 1)
        return explore, random_actions


def _controller(controller: Union[StationaryPolicy, PolicyController]) -> PolicyController:
    if isinstance(controller, StationaryPolicy):
        return PolicyController(controller, 0.0)
    return controller


def _rollout(mdp: FiniteMdp, controller: PolicyController, start: int, n_steps: int,
             seed: int, block: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Run n_steps from start; returns states (n_steps + 1), actions and stage costs."""
    controller.policy.check_for(mdp)
    cdf = np.cumsum(mdp.kernel.probs, axis=-1)
    cdf[..., -1] = 1.0
    uniforms = stream_generator(seed, block, TRANSITION_STREAM).random(n_steps)
    draws = stream_generator(seed, block, ACTION_STREAM).random((n_steps, 2))
    explore, random_actions = controller.action_plan(draws, mdp.n_actions)
    choice = controller.policy.choice

    states = np.empty(n_steps + 1, dtype=np.int64)
    actions = np.empty(n_steps, dtype=np.int64)
    x = int(start)
    for t in range(n_steps):
        a = int(random_actions[t]) if explore[t] else int(choice[x])
        states[t] = x
        actions[t] = a
        x = int(np.searchsorted(cdf[x, a], uniforms[t], side='right'))
    states[n_steps] = x
    costs = mdp.cost.values[states[:-1], actions]
    return states, actions, costs


def sample_initial(n_states: int, initial: Union[int, Distribution, None], seed: int) -> int:
    weights = initial_distribution(n_states, initial)
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return int(np.searchsorted(cdf, stream_generator(seed, 0, INITIAL_STREAM).random(), side='right'))


@dataclass(frozen=True, eq=False)
class SimulationResult:
    trajectory: Trajectory
    costs: np.ndarray
    checkpoints: np.ndarray
    running_average: np.ndarray


def simulate(mdp: FiniteMdp, controller: Union[StationaryPolicy, PolicyController], horizon: int,
             initial: Union[int, Distribution, None] = 0, seed: int = 0,
             stride: int = 1) -> SimulationResult:
    """
    Sample a trajectory of the given horizon.

    Args:
        mdp: the model to sample from
        controller: a StationaryPolicy or a PolicyController with exploration
        horizon: number of transitions, >= 1
        initial: initial state index, Distribution, or None for uniform
        seed: RNG seed; equal seeds give bit-identical trajectories
        stride: running average A_T = (1/T) sum_{t<T} c(x_t, u_t) is reported
            at every multiple of stride and at the horizon

    Returns:
        SimulationResult with the trajectory, stage costs and running averages.
    """
    if int(horizon) != horizon or horizon < 1:
        raise ValidationError(f"horizon must be a positive integer, got {horizon}")
    if stride < 1:
        raise ValidationError(f"stride must be positive, got {stride}")
    start = sample_initial(mdp.n_states, initial, seed)
    states, actions, costs = _rollout(mdp, _controller(controller), start, int(horizon), seed, block=0)
    checkpoints = np.arange(stride, horizon + 1, stride)
    if checkpoints.size == 0 or checkpoints[-1] != horizon:
        checkpoints = np.append(checkpoints, horizon)
    running = np.cumsum(costs)[checkpoints - 1] / checkpoints
    return SimulationResult(Trajectory(states, actions, seed), costs, checkpoints, running)


def accumulate_counts(counts: np.ndarray, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Add the transitions (x_t, u_t, x_{t+1}) to a count tensor in place."""
    np.add.at(counts, (states[:-1], actions, states[1:]), 1)
    return counts


@dataclass(frozen=True, eq=False)
class CountEstimate:
    """Empirical kernel from transition counts; unvisited rows use the fallback."""

    counts: np.ndarray
    kernel: Kernel
    unvisited: Tuple[Tuple[int, int], ...]
    fallback: str = 'uniform'

    @classmethod
    def from_counts(cls, counts: np.ndarray) -> 'CountEstimate':
        counts = np.array(counts, dtype=np.int64, copy=True)
        totals = counts.sum(axis=-1)
        visited = totals > 0
        probs = np.full(counts.shape, 1.0 / counts.shape[-1])
        probs[visited] = counts[visited] / totals[visited][:, None]
        counts.setflags(write=False)
        unvisited = tuple((int(x), int(u)) for x, u in np.argwhere(~visited))
        return cls(counts=counts, kernel=Kernel(probs), unvisited=unvisited)

    @property
    def visited(self) -> np.ndarray:
        return self.counts.sum(axis=-1) > 0

    def tv_error(self, truth: Kernel, visited_only: bool = True) -> float:
        """sup over (visited) pairs of the TV distance to a reference kernel."""
        table = kernel_distance(self.kernel, truth, 'tv', 'pointwise')
        if visited_only:
            table = table[self.visited]
        return float(table.max()) if table.size else 0.0


def estimate_counts(traj: Trajectory, shape: Tuple[int, int]) -> CountEstimate:
    """T_n(y|x,u) = #(x,u -> y) / #(x,u) over the trajectory's transitions."""
    n_states, n_actions = shape
    traj.check_for(n_states, n_actions)
    counts = np.zeros((n_states, n_actions, n_states), dtype=np.int64)
    return CountEstimate.from_counts(accumulate_counts(counts, traj.states, traj.actions))


@dataclass(frozen=True, eq=False)
class AdditiveNoiseDynamics:
    """
    x' = G(x, u) + w on a circular grid of n_states points.

    drift holds G as state indices; offsets are the integer noise grid,
    distinct modulo n_states.
    """

    drift: np.ndarray
    offsets: Tuple[int, ...]

    def __post_init__(self):
        drift = np.array(self.drift, dtype=np.int64, copy=True)
        if drift.ndim != 2:
            raise ValidationError(f"drift table must be (S, U), got shape {drift.shape}")
        n_states = drift.shape[0]
        if drift.min() < 0 or drift.max() >= n_states:
            raise ValidationError("drift table points outside the state grid")
        offsets = tuple(int(w) for w in self.offsets)
        if len(offsets) < 1 or len({w % n_states for w in offsets}) != len(offsets):
            raise ValidationError(f"noise offsets {offsets} must be nonempty and distinct modulo {n_states}")
        drift.setflags(write=False)
        object.__setattr__(self, 'drift', drift)
        object.__setattr__(self, 'offsets', offsets)

    @property
    def n_states(self) -> int:
        return self.drift.shape[0]

    @property
    def n_actions(self) -> int:
        return self.drift.shape[1]

    def kernel(self, noise: Union[Distribution, Sequence[float]]) -> Kernel:
        """Pushforward of a noise law over offsets through G(x, u) + ·."""
        weights = np.asarray(noise.weights if isinstance(noise, Distribution) else noise, dtype=float)
        if weights.shape != (len(self.offsets),):
            raise ValidationError(f"noise law has {weights.size} weights for {len(self.offsets)} offsets")
        probs = np.zeros((self.n_states, self.n_actions, self.n_states))
        x, u = np.meshgrid(np.arange(self.n_states), np.arange(self.n_actions), indexing='ij')
        for w, mass in zip(self.offsets, weights):
            probs[x, u, (self.drift + w) % self.n_states] += mass
        return Kernel(probs)

    def model(self, noise: Union[Distribution, Sequence[float]], cost: np.ndarray) -> FiniteMdp:
        states = StateSpace(labels=tuple(f"s{i}" for i in range(self.n_states)),
                            coords=np.arange(self.n_states, dtype=float))
        actions = ActionSpace(labels=tuple(f"a{i}" for i in range(self.n_actions)),
                              coords=np.arange(self.n_actions, dtype=float))
        return FiniteMdp(states, actions, self.kernel(noise), CostFn(cost))

    def noise_indices(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Offset index of each observed residual x_{t+1} - G(x_t, u_t)."""
        residuals = (states[1:] - self.drift[states[:-1], actions]) % self.n_states
        lookup = np.full(self.n_states, -1, dtype=np.int64)
        for i, w in enumerate(self.offsets):
            lookup[w % self.n_states] = i
        indices = lookup[residuals]
        if np.any(indices < 0):
            step = int(np.flatnonzero(indices < 0)[0])
            logger.error(f"Noise residual {int(residuals[step])} at step {step} is off the grid")
            raise NoiseGridError(step, int(residuals[step]))
        return indices


def estimate_noise_inversion(traj: Trajectory, dynamics: AdditiveNoiseDynamics,
                             noise_counts: Optional[np.ndarray] = None) -> Kernel:
    """
    Empirical noise law of the inverted residuals, pushed through every (x, u).

    All rows are populated from the shared residual sample, visited or not.

    Args:
        traj: observed trajectory
        dynamics: the known map G and noise grid
        noise_counts: earlier residual counts to add to (updated in place)

    Raises:
        NoiseGridError with the step of the first off-grid residual.
    """
    traj.check_for(dynamics.n_states, dynamics.n_actions)
    counts = np.zeros(len(dynamics.offsets), dtype=np.int64) if noise_counts is None else noise_counts
    if len(traj):
        np.add.at(counts, dynamics.noise_indices(traj.states, traj.actions), 1)
    if counts.sum() == 0:
        raise ValidationError("noise inversion needs at least one transition")
    return dynamics.kernel(counts / counts.sum())


@dataclass(frozen=True)
class Schedule:
    """Block lengths T_k and cumulative sizes n_k = sum_{l<=k} T_l."""

    kind: str = 'factorial'

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ValidationError(f"unknown schedule {self.kind!r}, expected one of {SCHEDULES}")

    def block_length(self, k: int) -> int:
        if k < 1:
            raise ValidationError(f"block index must be >= 1, got {k}")
        return math.factorial(k) if self.kind == 'factorial' else 2 ** k

    def cumulative(self, k: int) -> int:
        return sum(self.block_length(l) for l in range(1, k + 1))

    def certificate(self, k: int) -> bool:
        """n_k / T_k <= 1 + 2/k, in exact integer arithmetic."""
        return self.cumulative(k) * k <= self.block_length(k) * (k + 2)

    def failures(self, ks: Sequence[int]) -> List[int]:
        return [k for k in ks if not self.certificate(k)]


@dataclass(frozen=True)
class BlockRecord:
    k: int
    n_k: int
    block_length: int
    sup_tv_error: float
    bl_error: float
    j_applied_block: float
    running_average: float
    unvisited_pairs: int
    certified: bool
    epsilon: float

    def to_row(self) -> Dict:
        return {
            'k': self.k,
            'n_k': self.n_k,
            'sup_tv_error': self.sup_tv_error,
            'bl_error': self.bl_error,
            'j_applied_block': self.j_applied_block,
            'running_average': self.running_average,
            'unvisited_pairs': self.unvisited_pairs,
            'certified': self.certified,
        }


@dataclass
class AdaptiveResult:
    j_star: float
    blocks: List[BlockRecord] = field(default_factory=list)

    @property
    def final_gap(self) -> float:
        return abs(self.blocks[-1].running_average - self.j_star) if self.blocks else float('nan')


def inverse_k(k: int) -> float:
    return 1.0 / k


def adaptive_run(true_mdp: FiniteMdp, schedule: Optional[Schedule] = None, estimator: str = 'counts',
                 k_max: int = 8, seed: int = 0,
                 exploration: Optional[Callable[[int], float]] = inverse_k,
                 dynamics: Optional[AdditiveNoiseDynamics] = None,
                 initial: Union[int, Distribution, None] = 0,
                 tol: float = ACOE_TOL, max_iter: int = ACOE_MAX_ITER,
                 ergodicity: Optional[Mapping[str, Any]] = None) -> AdaptiveResult:
    """
    Certainty-equivalence control with re-planning at n_k.

    During block k the current policy runs with ε_k-uniform exploration. At the
    end of the block the kernel is re-estimated from all data so far; when the
    estimate certifies condition f its ACOE policy replaces the current one,
    otherwise the current policy is kept. The first block runs the myopic
    argmin of the stage cost.

    Args:
        true_mdp: model generating the data, certified ergodic
        schedule: block lengths (factorial by default)
        estimator: 'counts', 'inversion' (needs dynamics) or 'truth'
        k_max: number of blocks
        seed: RNG seed
        exploration: k -> ε_k; None means no exploration
        ergodicity: keyword arguments for every check_ergodicity call

    Returns:
        AdaptiveResult with j*(true_mdp) and one BlockRecord per block.

    Raises:
        PreconditionError if true_mdp is not certified.
        BlockError wrapping any solver failure with its block index.
    """
    schedule = schedule or Schedule()
    if estimator not in ESTIMATORS:
        raise ValidationError(f"unknown estimator {estimator!r}, expected one of {ESTIMATORS}")
    if estimator == 'inversion':
        if dynamics is None:
            raise ValidationError("the inversion estimator needs the additive-noise dynamics")
        if (dynamics.n_states, dynamics.n_actions) != (true_mdp.n_states, true_mdp.n_actions):
            raise ValidationError("dynamics shape does not match the true model")
    if k_max < 1:
        raise ValidationError(f"k_max must be >= 1, got {k_max}")

    ergodicity = dict(ergodicity or {})
    sv_threshold = ergodicity.get('sv_threshold', UNICHAIN_SV_THRESHOLD)
    report = check_ergodicity(true_mdp, **ergodicity)
    if not report.certified:
        raise PreconditionError("adaptive_run needs a true model certified by condition f")
    j_star = solve_acoe(true_mdp, tol=tol, max_iter=max_iter, report=report).j_star
    result = AdaptiveResult(j_star=j_star)

    policy = StationaryPolicy(np.argmin(true_mdp.cost.values, axis=1))
    counts = np.zeros(true_mdp.kernel.probs.shape, dtype=np.int64)
    noise_counts = np.zeros(len(dynamics.offsets), dtype=np.int64) if dynamics is not None else None
    state = sample_initial(true_mdp.n_states, initial, seed)
    total_cost = 0.0
    n_k = 0
    start_time = time.time()

    for k in range(1, k_max + 1):
        length = schedule.block_length(k)
        epsilon = exploration(k) if exploration is not None else 0.0
        states, actions, costs = _rollout(true_mdp, PolicyController(policy, epsilon), state,
                                          length, seed, block=k)
        state = int(states[-1])
        total_cost += float(costs.sum())
        n_k += length

        accumulate_counts(counts, states, actions)
        unvisited = int(np.count_nonzero(counts.sum(axis=-1) == 0))
        if estimator == 'counts':
            kernel = CountEstimate.from_counts(counts).kernel
        elif estimator == 'inversion':
            kernel = estimate_noise_inversion(Trajectory(states, actions, seed), dynamics, noise_counts)
        else:
            kernel = true_mdp.kernel
        estimate = true_mdp.with_kernel(kernel)

        try:
            sup_tv = kernel_distance(estimate, true_mdp, 'tv', 'sup_xu')
            bl = kernel_distance(estimate, true_mdp, 'bl', 'sup_xu')
            estimate_report = check_ergodicity(estimate, **ergodicity)
            certified = estimate_report.certified
            if certified:
                policy = solve_acoe(estimate, tol=tol, max_iter=max_iter, require_certificate=False,
                                    damping=0.5, report=estimate_report).policy
            else:
                logger.warning(f"Block {k}: estimate not certified, keeping the previous policy")
            j_applied = evaluate_policy(true_mdp, policy, sv_threshold=sv_threshold).j
        except AcoeError as e:
            logger.error(f"Adaptive run failed in block {k}: {e}")
            raise BlockError(k, e) from e

        record = BlockRecord(k=k, n_k=n_k, block_length=length, sup_tv_error=sup_tv, bl_error=bl,
                             j_applied_block=j_applied, running_average=total_cost / n_k,
                             unvisited_pairs=unvisited, certified=certified, epsilon=epsilon)
        result.blocks.append(record)
        logger.info(f"Block {k}: n_k = {n_k}, sup TV error {sup_tv:.4g}, "
                    f"J(true, γ) = {j_applied:.6g}, running average {record.running_average:.6g}")

    logger.info(f"Adaptive run finished: {k_max} blocks, {n_k} steps in {time.time() - start_time:.2f}s, "
                f"final gap {result.final_gap:.4g}")
    return result
