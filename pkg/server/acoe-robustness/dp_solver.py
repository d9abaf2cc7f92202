"""
Average-cost dynamic programming: the Bellman operator, finite-horizon costs,
policy evaluation, relative value iteration for the ACOE, and a brute-force
oracle over all stationary policies.
"""

import logging
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from config import ACOE_ANCHOR, ACOE_MAX_ITER, ACOE_TOL, POLICY_BUDGET, UNICHAIN_SV_THRESHOLD
from errors import ConvergenceError, MultichainError, PreconditionError, ValidationError
from mdp_core import (Distribution, FiniteMdp, StationaryPolicy, ValueVector,
                      initial_distribution, policy_cost, policy_kernel, span)
from metrics import ErgodicityReport, check_ergodicity, stationary_batch
from policy_sweep import PolicySweep

logger = logging.getLogger(__name__)

# horizons above this use repeated squaring of the cost-augmented kernel
_DOUBLING_HORIZON = 4096
# policies whose average cost is within this of the minimum count as tied
_TIE_TOL = 1e-12
# floating-point allowance, relative to max(1, |j*|), on top of tol in the mismatch gap check
_GAP_SLACK = 1e-12


@dataclass(frozen=True)
class AcoeSolution:
    """(j*, v*, γ*) with the span residual that certifies it."""

    j_star: float
    v_star: ValueVector
    policy: StationaryPolicy
    residual: float
    iterations: int
    anchor: int = ACOE_ANCHOR
    tol: float = ACOE_TOL

    def to_dict(self) -> Dict:
        return {
            'j_star': self.j_star,
            'v_star': self.v_star.values.tolist(),
            'policy': self.policy.to_list(),
            'residual': self.residual,
            'iterations': self.iterations,
            'anchor': self.anchor,
            'tol': self.tol,
        }


@dataclass(frozen=True)
class PolicyEvaluation:
    """Average cost, invariant measure and relative value of one stationary policy."""

    j: float
    pi: Distribution
    v_hat: ValueVector
    residual: float = 0.0

    def to_dict(self) -> Dict:
        return {
            'j': self.j,
            'pi': self.pi.weights.tolist(),
            'v_hat': self.v_hat.values.tolist(),
            'residual': self.residual,
        }


@dataclass(frozen=True)
class MismatchRecord:
    """Cost of applying a policy designed for one model to another."""

    j_true_opt: float
    j_design_opt: float
    j_applied: float
    gap: float
    design_policy: StationaryPolicy
    residual_true: float = 0.0
    residual_design: float = 0.0

    def to_dict(self) -> Dict:
        return {
            'j_true_opt': self.j_true_opt,
            'j_design_opt': self.j_design_opt,
            'j_applied': self.j_applied,
            'gap': self.gap,
            'design_policy': self.design_policy.to_list(),
            'residual_true': self.residual_true,
            'residual_design': self.residual_design,
        }


def _values(v: Union[ValueVector, np.ndarray]) -> np.ndarray:
    return np.asarray(v.values if isinstance(v, ValueVector) else v, dtype=float)


def q_values(mdp: FiniteMdp, v: Union[ValueVector, np.ndarray]) -> np.ndarray:
    """c(x, u) + sum_y v(y) T(y|x, u) as an |X| x |U| table."""
    values = _values(v)
    if values.shape != (mdp.n_states,):
        raise ValidationError(f"value vector has shape {values.shape}, model has {mdp.n_states} states")
    return mdp.cost.values + np.einsum('xuy,y->xu', mdp.kernel.probs, values)


def bellman_operator(mdp: FiniteMdp, v: Union[ValueVector, np.ndarray]) -> Tuple[ValueVector, StationaryPolicy]:
    """
    Tv(x) = min_u [c(x, u) + sum_y v(y) T(y|x, u)] and its argmin.

    Ties go to the lowest action index.
    """
    q = q_values(mdp, v)
    choice = np.argmin(q, axis=1)
    return ValueVector(q[np.arange(mdp.n_states), choice]), StationaryPolicy(choice)


def closed_classes(matrix: np.ndarray) -> List[List[int]]:
    """Closed communicating classes of a stochastic matrix, sorted by smallest state."""
    graph = csr_matrix(np.asarray(matrix) > 0.0)
    n_components, labels = connected_components(graph, directed=True, connection='strong')
    classes = []
    for component in range(n_components):
        members = np.flatnonzero(labels == component)
        leaves = np.asarray(matrix)[np.ix_(members, np.setdiff1d(np.arange(labels.size), members))]
        if leaves.size == 0 or not np.any(leaves > 0.0):
            classes.append(members.tolist())
    return sorted(classes)


def _multichain_error(matrix: np.ndarray, policy: Optional[StationaryPolicy]) -> MultichainError:
    classes = closed_classes(matrix)
    if len(classes) < 2:
        # numerically decomposable: name the two largest communicating classes
        _, labels = connected_components(csr_matrix(matrix > 0.0), directed=True, connection='strong')
        groups = sorted((np.flatnonzero(labels == c).tolist() for c in np.unique(labels)),
                        key=len, reverse=True)
        classes = (groups + [[]])[:2]
    logger.error(f"Multichain policy kernel, closed classes {classes[0]} and {classes[1]}")
    return MultichainError(classes, None if policy is None else policy.to_list())


def finite_horizon(mdp: FiniteMdp, t: int, policy: Optional[StationaryPolicy] = None,
                   initial_state: Union[int, Distribution, None] = 0) -> float:
    """
    Expected t-stage cost J_t = sum_{i<t} E[c(X_i, U_i)].

    Args:
        mdp: the model
        t: horizon, t >= 1
        policy: stationary policy to follow; None for the optimal t-stage cost
            (time-varying policies via backward DP)
        initial_state: state index, initial Distribution, or None for uniform

    Returns:
        J_t from the initial state (or initial distribution).
    """
    if int(t) != t or t < 1:
        raise ValidationError(f"horizon must be a positive integer, got {t}")
    t = int(t)
    mu = initial_distribution(mdp.n_states, initial_state)
    if policy is None:
        return float(mu @ finite_horizon_values(mdp, t)[-1])

    matrix = np.asarray(policy_kernel(mdp, policy))
    cost = policy_cost(mdp, policy)
    if t > _DOUBLING_HORIZON:
        # [[P, c], [0, 1]]^t e_last = [sum_{i<t} P^i c, 1]
        augmented = np.zeros((mdp.n_states + 1, mdp.n_states + 1))
        augmented[:-1, :-1] = matrix
        augmented[:-1, -1] = cost
        augmented[-1, -1] = 1.0
        accumulated = np.linalg.matrix_power(augmented, t)[:-1, -1]
        return float(mu @ accumulated)
    total = 0.0
    for _ in range(t):
        total += float(mu @ cost)
        mu = mu @ matrix
    return total


def finite_horizon_values(mdp: FiniteMdp, t: int) -> np.ndarray:
    """
    Backward DP table of optimal k-stage costs, V_0 = 0, V_{k+1} = T V_k.

    Returns:
        Array of shape (t + 1, |X|); row k is the optimal k-stage cost per initial state.
    """
    table = np.zeros((int(t) + 1, mdp.n_states))
    for k in range(1, int(t) + 1):
        table[k] = q_values(mdp, table[k - 1]).min(axis=1)
    return table


def evaluate_policy(mdp: FiniteMdp, policy: StationaryPolicy, method: str = 'linear',
                    tol: float = ACOE_TOL, max_iter: int = ACOE_MAX_ITER,
                    anchor: int = 0, sv_threshold: float = UNICHAIN_SV_THRESHOLD) -> PolicyEvaluation:
    """
    Average cost of a stationary policy with its invariant measure and relative value.

    The invariant measure solves pi P = pi, sum pi = 1, and j = pi . c_γ. The
    relative value is the fixed point of the anchored operator
    v -> c_γ + P v - (c_γ + P v)(anchor), found by a direct linear solve
    ('linear', also valid for periodic chains) or by damped iteration ('iterate').

    Raises:
        MultichainError if P_γ has more than one closed class.
        ConvergenceError if 'iterate' hits max_iter.
    """
    if method not in ('linear', 'iterate'):
        raise ValidationError(f"unknown evaluation method {method!r}")
    matrix = np.asarray(policy_kernel(mdp, policy))
    cost = policy_cost(mdp, policy)
    n_states = mdp.n_states
    if not 0 <= anchor < n_states:
        raise ValidationError(f"anchor {anchor} out of range for {n_states} states")

    pi, multichain = stationary_batch(matrix[None], sv_threshold)
    if multichain is not None:
        raise _multichain_error(matrix, policy)
    pi = pi[0]
    j = float(pi @ cost)

    if method == 'linear':
        system = np.zeros((n_states + 1, n_states + 1))
        system[:n_states, :n_states] = np.eye(n_states) - matrix
        system[:n_states, -1] = 1.0
        system[-1, anchor] = 1.0
        rhs = np.append(cost, 0.0)
        solution = linalg.solve(system, rhs)
        v_hat = solution[:-1]
        residual = span(cost + matrix @ v_hat - v_hat)
    else:
        v_hat = np.zeros(n_states)
        for iteration in range(1, max_iter + 1):
            diff = cost + matrix @ v_hat - v_hat
            residual = span(diff)
            if residual < tol:
                break
            v_hat = v_hat + 0.5 * (diff - diff[anchor])
        else:
            logger.error(f"Policy evaluation did not converge in {max_iter} iterations, residual {residual:.3g}")
            raise ConvergenceError(f"policy evaluation did not converge in {max_iter} iterations "
                                   f"(span residual {residual:.3g})", residual=residual, iterations=max_iter)

    return PolicyEvaluation(j=j, pi=Distribution(pi), v_hat=ValueVector(v_hat), residual=float(residual))


def solve_acoe(mdp: FiniteMdp, tol: float = ACOE_TOL, max_iter: int = ACOE_MAX_ITER,
               anchor: int = ACOE_ANCHOR, require_certificate: bool = True,
               damping: float = 1.0, report: Optional[ErgodicityReport] = None) -> AcoeSolution:
    """
    Solve the average cost optimality equation by relative value iteration.

    Starting from v = 0, iterates v <- v + damping * (Tv - v - (Tv - v)(anchor))
    until sp(Tv - v) < tol. With damping 1 this is v <- Tv - Tv(anchor).

    Args:
        mdp: the model
        tol: span tolerance on Tv - v
        max_iter: iteration cap
        anchor: state index pinned to zero
        require_certificate: demand condition f from check_ergodicity
        damping: step in (0, 1]; below 1 it is the aperiodicity transform
        report: a precomputed ErgodicityReport for this model

    Returns:
        AcoeSolution with j* = Tv(anchor) - v(anchor) at termination.

    Raises:
        PreconditionError without a certificate when one is required.
        ConvergenceError after max_iter.
    """
    if not 0 <= anchor < mdp.n_states:
        raise ValidationError(f"anchor {anchor} out of range for {mdp.n_states} states")
    if not 0.0 < damping <= 1.0:
        raise ValidationError(f"damping must be in (0, 1], got {damping}")
    if require_certificate:
        report = report or check_ergodicity(mdp)
        if not report.certified:
            logger.error("solve_acoe called on a model without condition f")
            raise PreconditionError(
                f"no ergodicity certificate: condition f fails for t <= {report.t_max} "
                f"(best β = {report.dobrushin_beta:.4g}); pass require_certificate=False to override")

    start_time = time.time()
    v = np.zeros(mdp.n_states)
    residual = float('inf')
    for iteration in range(1, max_iter + 1):
        q = q_values(mdp, v)
        choice = np.argmin(q, axis=1)
        tv = q[np.arange(mdp.n_states), choice]
        diff = tv - v
        residual = span(diff)
        if residual < tol:
            solution = AcoeSolution(
                j_star=float(diff[anchor]),
                v_star=ValueVector(v),
                policy=StationaryPolicy(choice),
                residual=residual,
                iterations=iteration,
                anchor=anchor,
                tol=tol,
            )
            logger.info(f"ACOE solved: j* = {solution.j_star:.10g} after {iteration} iterations "
                        f"({time.time() - start_time:.3f}s, residual {residual:.3g})")
            return solution
        v = v + damping * (diff - diff[anchor])
        logger.debug(f"RVI iteration {iteration}: span residual {residual:.3g}")

    logger.error(f"Relative value iteration did not converge in {max_iter} iterations, residual {residual:.3g}")
    raise ConvergenceError(f"relative value iteration did not converge in {max_iter} iterations "
                           f"(span residual {residual:.3g})", residual=residual, iterations=max_iter)


def brute_force_optimal(mdp: FiniteMdp, budget: int = POLICY_BUDGET) -> Tuple[float, StationaryPolicy]:
    """
    Minimum average cost over every deterministic stationary policy.

    Each policy is evaluated through its invariant measure, j = pi . c_γ.
    Ties within 1e-12 go to the lexicographically smallest policy.

    Raises:
        BudgetError if |U|^|X| exceeds the budget.
        MultichainError naming the first multichain policy.
    """
    sweep = PolicySweep(mdp, budget=budget)
    probs = np.asarray(mdp.kernel.probs)
    costs = np.asarray(mdp.cost.values)
    rows = np.arange(mdp.n_states)

    def chunk_fn(choices, first_index):
        matrices = probs[rows[None, :], choices]
        pi, multichain = stationary_batch(matrices)
        if multichain is not None:
            raise _multichain_error(matrices[multichain], StationaryPolicy(choices[multichain]))
        j = np.einsum('bx,bx->b', pi, costs[rows[None, :], choices])
        best = int(np.argmin(j))
        return float(j[best]), j, choices

    results = sweep.run(chunk_fn)
    j_min = min(best for best, _, _ in results)
    for _, j, choices in results:
        tied = np.flatnonzero(j <= j_min + _TIE_TOL)
        if tied.size:
            return j_min, StationaryPolicy(choices[tied[0]])
    raise AssertionError("unreachable: minimum not found")


def mismatch(true_mdp: FiniteMdp, design_mdp: FiniteMdp, tol: float = ACOE_TOL,
             max_iter: int = ACOE_MAX_ITER, design_policy: Optional[StationaryPolicy] = None,
             require_certificate: bool = True, anchor: int = ACOE_ANCHOR, damping: float = 1.0,
             sv_threshold: float = UNICHAIN_SV_THRESHOLD) -> MismatchRecord:
    """
    Apply the ACOE policy of design_mdp to true_mdp and measure the excess cost.

    The relative value iteration stops with |j - J*| < tol, so the gap can
    only be negative by tol. Anything below that is a solver failure.

    Args:
        true_mdp: the model the policy runs on
        design_mdp: the model the policy is designed for
        design_policy: use this policy instead of the ACOE selector of design_mdp
        sv_threshold: unichain threshold for evaluating the applied policy

    Returns:
        MismatchRecord with gap = J(true, γ_n*) - J*(true) and both span residuals.

    Raises:
        ConvergenceError if the gap is below -tol.
    """
    true_mdp.require_same_shape(design_mdp)
    true_solution = solve_acoe(true_mdp, tol=tol, max_iter=max_iter, anchor=anchor,
                               require_certificate=require_certificate, damping=damping)
    design_solution = solve_acoe(design_mdp, tol=tol, max_iter=max_iter, anchor=anchor,
                                 require_certificate=require_certificate, damping=damping)
    policy = design_policy if design_policy is not None else design_solution.policy
    j_applied = evaluate_policy(true_mdp, policy, sv_threshold=sv_threshold).j
    gap = j_applied - true_solution.j_star
    if gap < -(tol + _GAP_SLACK * max(1.0, abs(true_solution.j_star))):
        logger.error(f"Mismatch gap {gap:.3g} is below -tol = {-tol:.3g}")
        raise ConvergenceError(
            f"negative mismatch gap {gap:.6g}: J(true, γ) = {j_applied:.12g} is below "
            f"J*(true) = {true_solution.j_star:.12g} by more than tol = {tol:.3g}",
            residual=true_solution.residual, iterations=true_solution.iterations)
    return MismatchRecord(
        j_true_opt=true_solution.j_star,
        j_design_opt=design_solution.j_star,
        j_applied=j_applied,
        gap=gap,
        design_policy=policy,
        residual_true=true_solution.residual,
        residual_design=design_solution.residual,
    )
