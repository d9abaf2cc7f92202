"""
Distances between distributions and kernels, the Dobrushin coefficient, and
the ergodicity-condition checker with certificates.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linprog

from array_backend import KernelArithmetic, get_kernel_arithmetic
from config import (DECAY_RESIDUAL_TOL, ERGODICITY_T_MAX, POLICY_BUDGET,
                    UNICHAIN_SV_THRESHOLD)
from errors import AcoeError, ShapeMismatchError, ValidationError
from mdp_core import Distribution, FiniteMdp, Kernel
from policy_sweep import PolicySweep, policy_at

logger = logging.getLogger(__name__)

DISTANCE_MODES = ('tv', 'bl', 'setwise')
AGGREGATIONS = ('sup_xu', 'sup_u_per_x', 'pointwise')
CONDITION_LABELS = ('a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i')

# a certificate mass below this is treated as zero; at power t the floor is
# t * MASS_FLOOR, the most mass row-sum slack can leak in t steps
MASS_FLOOR = 1e-12
# a decay fit with rate or best distance above 1 - DECAY_MARGIN is not decay
DECAY_MARGIN = 1e-9
# stationary TV below this counts as exact convergence in the decay fit
DECAY_FLOOR = 1e-13

ArrayLike = Union[Distribution, np.ndarray, Sequence[float]]


def _weights(p: ArrayLike) -> np.ndarray:
    return np.asarray(p.weights if isinstance(p, Distribution) else p, dtype=float)


def _pair(p: ArrayLike, q: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    p, q = _weights(p), _weights(q)
    if p.shape != q.shape:
        raise ShapeMismatchError(f"distributions live on different spaces: {p.shape} vs {q.shape}")
    return p, q


def tv_distance(p: ArrayLike, q: ArrayLike) -> float:
    """
    Total variation distance sup_{|f| <= 1} |∫f dp - ∫f dq| = sum_x |p(x) - q(x)|.

    Disjoint point masses are at distance 2.
    """
    p, q = _pair(p, q)
    return float(np.abs(p - q).sum())


def bl_distance(p: ArrayLike, q: ArrayLike, coords: Sequence[float]) -> float:
    """
    Bounded-Lipschitz distance sup_{||f||_BL <= 1} |∫f dp - ∫f dq| on real coordinates.

    ||f||_BL = sup|f| + Lip(f) is encoded with auxiliary variables a >= sup|f| and
    L >= Lip(f), a + L <= 1, over the union of the two supports (a function on
    the support extends to the whole line with the same a and L).

    Args:
        p, q: distributions on the same states
        coords: one real coordinate per state

    Returns:
        The LP value, in [0, tv_distance(p, q)].
    """
    p, q = _pair(p, q)
    coords = np.asarray(coords, dtype=float)
    if coords.shape != p.shape:
        raise ShapeMismatchError(f"coords of shape {coords.shape} for distributions of shape {p.shape}")
    if np.array_equal(p, q):
        return 0.0
    support = np.flatnonzero((p > 0.0) | (q > 0.0))
    diff = (p - q)[support]
    x = coords[support]
    k = support.size
    n_vars = k + 2  # f values, a, L
    a_col, l_col = k, k + 1

    rows = []
    for i in range(k):
        for sign in (1.0, -1.0):
            row = np.zeros(n_vars)
            row[i] = sign
            row[a_col] = -1.0
            rows.append(row)
    for i, j in itertools.combinations(range(k), 2):
        gap = abs(x[i] - x[j])
        for sign in (1.0, -1.0):
            row = np.zeros(n_vars)
            row[i] = sign
            row[j] = -sign
            row[l_col] = -gap
            rows.append(row)
    budget = np.zeros(n_vars)
    budget[a_col] = budget[l_col] = 1.0
    rows.append(budget)
    a_ub = np.vstack(rows)
    b_ub = np.zeros(len(rows))
    b_ub[-1] = 1.0

    objective = np.zeros(n_vars)
    objective[:k] = -diff
    bounds = [(None, None)] * k + [(0.0, 1.0), (0.0, None)]
    result = linprog(objective, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method='highs')
    if result.status != 0:
        raise AcoeError(f"bounded-Lipschitz LP failed: {result.message}")
    value = -float(result.fun)
    return float(min(max(value, 0.0), np.abs(p - q).sum()))


def kernel_distance(a: Union[Kernel, FiniteMdp], b: Union[Kernel, FiniteMdp],
                    mode: str = 'tv', aggregation: str = 'sup_xu',
                    coords: Optional[Sequence[float]] = None):
    """
    Distance between two kernels row by row.

    Args:
        a, b: kernels (or models, whose kernels and state coords are used)
        mode: 'tv', 'bl' or 'setwise' (identical to tv on finite spaces)
        aggregation: 'pointwise' for the (x, u) table, 'sup_u_per_x' for the
            per-state sup over actions, 'sup_xu' for the overall sup

    Returns:
        float for sup_xu, a length-|X| array for sup_u_per_x, an |X| x |U| array for pointwise.
    """
    if mode not in DISTANCE_MODES:
        raise ValidationError(f"unknown distance mode {mode!r}, expected one of {DISTANCE_MODES}")
    if aggregation not in AGGREGATIONS:
        raise ValidationError(f"unknown aggregation {aggregation!r}, expected one of {AGGREGATIONS}")
    if coords is None and isinstance(a, FiniteMdp):
        coords = a.states.coords
    ka = a.kernel if isinstance(a, FiniteMdp) else a
    kb = b.kernel if isinstance(b, FiniteMdp) else b
    if ka.probs.shape != kb.probs.shape:
        raise ShapeMismatchError(f"kernel shapes differ: {ka.probs.shape} vs {kb.probs.shape}")

    if mode == 'bl':
        if coords is None:
            raise ValidationError("bl distance needs state coordinates")
        table = np.array([[bl_distance(ka.probs[x, u], kb.probs[x, u], coords)
                           for u in range(ka.n_actions)] for x in range(ka.n_states)])
    else:
        table = np.abs(ka.probs - kb.probs).sum(axis=-1)

    if aggregation == 'pointwise':
        return table
    if aggregation == 'sup_u_per_x':
        return table.max(axis=1)
    return float(table.max())


def dobrushin_coefficient(matrix: np.ndarray) -> float:
    """β(P) = 1/2 max_{x,x'} sum_y |P(y|x) - P(y|x')|, in [0, 1]."""
    matrix = np.asarray(matrix, dtype=float)
    rows_l1 = np.abs(matrix[:, None, :] - matrix[None, :, :]).sum(axis=-1)
    return float(min(1.0, 0.5 * rows_l1.max()))


def stationary_batch(matrices: np.ndarray,
                     sv_threshold: float = UNICHAIN_SV_THRESHOLD) -> Tuple[Optional[np.ndarray], Optional[int]]:
    """
    Invariant measures of a batch of stochastic matrices.

    Returns:
        (pi, None) with pi of shape (B x S) when every matrix is unichain, else
        (None, index of the first matrix whose fixed-point space has dimension > 1).
    """
    batch, n_states, _ = matrices.shape
    system = np.transpose(matrices, (0, 2, 1)) - np.eye(n_states)[None]
    singular_values = np.linalg.svd(system, compute_uv=False)
    nullity = (singular_values < sv_threshold).sum(axis=1)
    if np.any(nullity > 1):
        return None, int(np.flatnonzero(nullity > 1)[0])
    system = system.copy()
    system[:, -1, :] = 1.0
    rhs = np.zeros((batch, n_states, 1))
    rhs[:, -1, 0] = 1.0
    pi = np.linalg.solve(system, rhs)[..., 0]
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum(axis=1, keepdims=True), None


@dataclass(frozen=True)
class ErgodicityReport:
    """Which ergodicity conditions a model satisfies, with certificates."""

    condition_labels: Tuple[str, ...]
    dobrushin_beta: float
    t_star: int
    minorization_mass: float
    details: Dict[str, str] = field(default_factory=dict)
    t_max: int = ERGODICITY_T_MAX
    decay_rate: Optional[float] = None
    # labels proven by their own certificate, before the implication closure
    direct_labels: Tuple[str, ...] = ()
    certificate_t: Dict[str, int] = field(default_factory=dict)

    def holds(self, label: str) -> bool:
        return label in self.condition_labels

    def proven(self, label: str) -> bool:
        return label in self.direct_labels

    @property
    def certified(self) -> bool:
        """Condition f, the one solve_acoe needs."""
        return self.holds('f')

    def to_dict(self) -> Dict:
        return {
            'condition_labels': list(self.condition_labels),
            'direct_labels': list(self.direct_labels),
            'certificate_t': dict(sorted(self.certificate_t.items())),
            'dobrushin_beta': self.dobrushin_beta,
            't_star': self.t_star,
            'minorization_mass': self.minorization_mass,
            'decay_rate': self.decay_rate,
            't_max': self.t_max,
            'details': dict(sorted(self.details.items())),
        }


# direct consequences among the conditions on a finite space
IMPLICATIONS = {
    'a': ('b',), 'c': ('d',), 'd': ('b',), 'b': ('f',), 'e': ('f',),
    'f': ('g', 'h', 'i'), 'g': ('f',), 'h': ('f',), 'i': ('f',),
}


def violates_implications(labels) -> bool:
    labels = set(labels)
    return any(target not in labels for source in labels for target in IMPLICATIONS.get(source, ()))


def _first(mask: np.ndarray) -> Optional[int]:
    hits = np.flatnonzero(mask)
    return int(hits[0]) if hits.size else None


def _geometric_decay(distances: np.ndarray, decay_residual_tol: float = DECAY_RESIDUAL_TOL):
    """Least-squares fit of log distance against t; returns (holds, rate, rms)."""
    t = np.arange(1, distances.size + 1)
    if np.any(distances <= DECAY_FLOOR):
        return True, 0.0, 0.0
    if distances.size < 2:
        return False, None, None
    slope, intercept = np.polyfit(t, np.log(distances), 1)
    rms = float(np.sqrt(np.mean((np.log(distances) - (slope * t + intercept)) ** 2)))
    rate = float(np.exp(slope))
    holds = (rate < 1.0 - DECAY_MARGIN and rms <= decay_residual_tol
             and distances.min() < 1.0 - DECAY_MARGIN)
    return bool(holds), rate, rms


def check_ergodicity(mdp: FiniteMdp, t_max: int = ERGODICITY_T_MAX,
                     budget: int = POLICY_BUDGET,
                     arithmetic: Optional[KernelArithmetic] = None,
                     decay_residual_tol: float = DECAY_RESIDUAL_TOL,
                     sv_threshold: float = UNICHAIN_SV_THRESHOLD) -> ErgodicityReport:
    """
    Check the uniform-ergodicity conditions over all stationary policies.

    Every policy in Γ_s is enumerated (in chunks), and P_γ^t is formed for
    t = 1..t_max. Conditions proven directly get a certificate; conditions
    that follow from a proven one are added with "implied by" details.

    Args:
        mdp: the model
        t_max: largest power examined
        budget: cap on |U|^|X|
        decay_residual_tol: largest rms of the log-linear fit accepted as geometric decay
        sv_threshold: singular values below this count toward the fixed-point space

    Returns:
        ErgodicityReport

    Raises:
        BudgetError if |U|^|X| exceeds the budget.
    """
    if int(t_max) != t_max or t_max < 1:
        raise ValidationError(f"t_max must be a positive integer, got {t_max}")
    t_max = int(t_max)
    arithmetic = arithmetic or get_kernel_arithmetic()
    sweep = PolicySweep(mdp, budget=budget)
    probs = np.asarray(mdp.kernel.probs)
    rows = np.arange(mdp.n_states)

    def chunk_fn(choices, first_index):
        matrices = probs[rows[None, :], choices]
        pi, multichain = stationary_batch(matrices, sv_threshold)
        stats = arithmetic.sweep_statistics(matrices, t_max, pi)
        stats['multichain'] = None if multichain is None else first_index + multichain
        return stats

    chunk_stats = sweep.run(chunk_fn)
    dobrushin = np.max([s['dobrushin'] for s in chunk_stats], axis=0)
    column_min = np.min([s['column_min'] for s in chunk_stats], axis=0)
    column_max = np.max([s['column_max'] for s in chunk_stats], axis=0)
    policy_min_mass = np.min([s['policy_min_mass'] for s in chunk_stats], axis=0)
    multichain = next((s['multichain'] for s in chunk_stats if s['multichain'] is not None), None)
    slack = MASS_FLOOR * np.arange(1, t_max + 1)

    labels = set()
    details = {}
    bounds = {}  # label -> (t, beta bound) for condition f when implied

    best_column = int(np.argmax(column_min[0]))
    if column_min[0, best_column] > MASS_FLOOR:
        mass = float(column_min[0, best_column])
        labels.update(('a', 'c'))
        details['a'] = f"state {best_column} receives mass >= {mass:.6g} from every (x, γ)"
        details['c'] = f"counting-measure density >= {mass:.6g} on C = {{{best_column}}}"
        bounds['a'] = bounds['c'] = (1, 1.0 - mass)
    column_mass = column_min.sum(axis=1)
    if column_mass[0] > MASS_FLOOR:
        labels.add('d')
        details['d'] = f"p0(y) = min_(x,u) T(y|x,u) has total mass {column_mass[0]:.6g}"
        bounds['d'] = (1, 1.0 - float(column_mass[0]))

    minorization_mass = 0.0
    t_b = _first(column_mass > slack)
    if t_b is not None:
        minorization_mass = float(column_mass[t_b])
        labels.add('b')
        details['b'] = f"minorizing measure at t = {t_b + 1} with mass {minorization_mass:.6g}"
        bounds['b'] = (t_b + 1, 1.0 - minorization_mass)

    majorization_mass = column_max.sum(axis=1)
    t_e = _first(majorization_mass < 2.0 - 2.0 * slack)
    if t_e is not None:
        labels.add('e')
        details['e'] = f"majorizing measure at t = {t_e + 1} with mass {majorization_mass[t_e]:.6g} < 2"
        bounds['e'] = (t_e + 1, float(majorization_mass[t_e]) - 1.0)

    t_g = _first(policy_min_mass > slack)
    if t_g is not None:
        g_mass = float(policy_min_mass[t_g])
        if minorization_mass == 0.0:
            minorization_mass = g_mass
        labels.add('g')
        details['g'] = f"every policy minorized at t = {t_g + 1} with β = {g_mass:.6g}"
        bounds['g'] = (t_g + 1, 1.0 - g_mass)

    t_f = _first(dobrushin < 1.0 - slack)
    if t_f is not None:
        t_star, beta = t_f + 1, float(dobrushin[t_f])
        labels.add('f')
        details['f'] = f"sup_γ Dobrushin coefficient of T^{t_star} is {beta:.6g} < 1"
    else:
        t_star = int(np.argmin(dobrushin)) + 1
        beta = float(dobrushin[t_star - 1])

    decay_rate = None
    if multichain is not None:
        policy = policy_at(mdp, multichain).to_list()
        details['h'] = f"policy {policy} has more than one invariant measure"
        details['i'] = details['h']
    else:
        stationary_tv = np.max([s['stationary_tv'] for s in chunk_stats], axis=0)
        geometric, decay_rate, rms = _geometric_decay(stationary_tv, decay_residual_tol)
        if geometric:
            labels.add('h')
            details['h'] = (f"sup_(γ,x) TV(T^t, π_γ) decays geometrically, rate {decay_rate:.6g}, "
                            f"fit rms {rms:.3g}")
            t_h = _first(stationary_tv < 1.0 - DECAY_MARGIN)
            bounds['h'] = (t_h + 1, float(stationary_tv[t_h]))
        if stationary_tv[-1] <= 1e-6:
            labels.add('i')
            details['i'] = f"sup_(γ,x) TV(T^{t_max}, π_γ) = {stationary_tv[-1]:.3g}"
            bounds['i'] = (t_max, float(stationary_tv[-1]))

    direct = set(labels)
    certificate_t = {label: t for label, (t, _) in bounds.items()}
    if t_f is not None:
        certificate_t['f'] = t_f + 1
    # close under the implication graph
    changed = True
    while changed:
        changed = False
        for source in sorted(labels):
            for target in IMPLICATIONS.get(source, ()):
                if target not in labels:
                    labels.add(target)
                    details[target] = f"implied by {source}"
                    changed = True
    if 'f' in labels and t_f is None:
        source = next(label for label in ('a', 'c', 'd', 'b', 'e', 'g', 'h', 'i') if label in bounds)
        t_star, beta = bounds[source]
        details['f'] = f"implied by {source}: β <= {beta:.6g} at t = {t_star}"

    report = ErgodicityReport(
        condition_labels=tuple(label for label in CONDITION_LABELS if label in labels),
        dobrushin_beta=float(min(max(beta, 0.0), 1.0)),
        t_star=int(t_star),
        minorization_mass=float(min(max(minorization_mass, 0.0), 1.0)),
        details=details,
        t_max=t_max,
        decay_rate=decay_rate,
        direct_labels=tuple(label for label in CONDITION_LABELS if label in direct),
        certificate_t=certificate_t,
    )
    logger.info(f"Ergodicity check over {sweep.total_count} policies: "
                f"{''.join(report.condition_labels) or 'none'} (t* = {report.t_star}, β = {report.dobrushin_beta:.4g})")
    return report
