"""
Perturbation families n -> T_n converging (or not) to a limit kernel T.

Continuous-space examples are realized on the smallest grids that hold every
atom of their point masses plus the cost breakpoints, so each average cost is
computed exactly. A family's limit lives on member(n)'s grid (``limit(n)``);
for fixed-grid families every ``limit(n)`` is the same model.
"""

import logging
from functools import lru_cache
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from errors import ConfigError, ValidationError
from mdp_core import (ActionSpace, CostFn, Distribution, FiniteMdp, Kernel,
                      StateSpace, StationaryPolicy, random_mdp)
from metrics import kernel_distance
from model_io import load_model

logger = logging.getLogger(__name__)

CONVERGENCE_CLAIMS = ('weak', 'setwise', 'tv', 'none')
# distances may wobble by this much and still count as nonincreasing
MONOTONE_TOL = 1e-12


class PerturbationFamily:
    """
    Indexed sequence of models sharing spaces and cost with a limit model.

    Members and limits are built on demand and cached.
    """

    def __init__(self, name: str, member: Callable[[int], FiniteMdp],
                 limit: Callable[[int], FiniteMdp], convergence_claim: str,
                 n_max: Optional[int] = None, n0: int = 1,
                 fixtures: Optional[Mapping[str, Callable[[int], StationaryPolicy]]] = None,
                 description: str = ""):
        if convergence_claim not in CONVERGENCE_CLAIMS:
            raise ValidationError(f"unknown convergence claim {convergence_claim!r}")
        self.name = name
        self.convergence_claim = convergence_claim
        self.n_max = n_max
        self.n0 = n0
        self.description = description
        self._member = lru_cache(maxsize=None)(member)
        self._limit = lru_cache(maxsize=None)(limit)
        self._fixtures = dict(fixtures or {})

    def _check_n(self, n: int) -> int:
        if int(n) != n or n < 1:
            raise ValidationError(f"family {self.name}: n must be a positive integer, got {n}")
        if self.n_max is not None and n > self.n_max:
            raise ValidationError(f"family {self.name}: n = {n} exceeds n_max = {self.n_max}")
        return int(n)

    def member(self, n: int) -> FiniteMdp:
        return self._member(self._check_n(n))

    def limit_at(self, n: int) -> FiniteMdp:
        """The limit model realized on member(n)'s grid."""
        return self._limit(self._check_n(n))

    @property
    def limit(self) -> FiniteMdp:
        return self.limit_at(self.n_max or 1)

    @property
    def fixture_names(self) -> List[str]:
        return sorted(self._fixtures)

    def fixture(self, name: str, n: int) -> StationaryPolicy:
        if name not in self._fixtures:
            raise ValidationError(f"family {self.name} has no policy fixture {name!r}")
        return self._fixtures[name](self._check_n(n))

    def distances(self, n_grid: Sequence[int], mode: str) -> np.ndarray:
        """sup_{x,u} distance between member(n) and limit(n) for each n."""
        return np.array([kernel_distance(self.member(n), self.limit_at(n), mode, 'sup_xu')
                         for n in n_grid])

    def validate(self, n_grid: Sequence[int]) -> Dict:
        """
        Check shapes and the declared convergence claim on a sampled n grid.

        tv / setwise claims are checked with the TV distance, weak claims with
        the bounded-Lipschitz distance: beyond n0 the distance must be
        nonincreasing and end strictly below where it started (or at zero).

        Returns:
            Dictionary with the grid, the distances and the mode used.

        Raises:
            ValidationError naming the first offending n.
        """
        n_grid = [self._check_n(n) for n in n_grid]
        if not n_grid:
            raise ValidationError(f"family {self.name}: empty n grid")
        for n in n_grid:
            self.member(n).require_same_shape(self.limit_at(n))

        if self.convergence_claim == 'none':
            return {'family': self.name, 'claim': 'none', 'n_grid': n_grid, 'distances': []}

        mode = 'bl' if self.convergence_claim == 'weak' else 'tv'
        tail = [n for n in n_grid if n >= self.n0]
        values = self.distances(tail, mode)
        for i in range(1, len(tail)):
            if values[i] > values[i - 1] + MONOTONE_TOL:
                logger.error(f"Family {self.name}: {mode} distance grows at n = {tail[i]}")
                raise ValidationError(
                    f"family {self.name}: {mode} distance {values[i]:.6g} at n = {tail[i]} exceeds "
                    f"{values[i - 1]:.6g} at n = {tail[i - 1]}; claim {self.convergence_claim!r} fails")
        if len(tail) > 1 and values[0] > MONOTONE_TOL and values[-1] >= values[0] - MONOTONE_TOL:
            logger.error(f"Family {self.name}: {mode} distance does not decrease on the grid")
            raise ValidationError(
                f"family {self.name}: {mode} distance stays at {values[-1]:.6g} up to n = {tail[-1]}; "
                f"claim {self.convergence_claim!r} fails")
        logger.info(f"Family {self.name} validated ({self.convergence_claim}) on n = {n_grid}")
        return {'family': self.name, 'claim': self.convergence_claim, 'mode': mode,
                'n_grid': tail, 'distances': values.tolist()}


def _grid_model(coords: Sequence[float], actions: ActionSpace, probs: np.ndarray,
                cost: np.ndarray) -> FiniteMdp:
    return FiniteMdp(StateSpace.from_coords(coords), actions, Kernel.normalized(probs), CostFn(cost))


def _point_mass_rows(n_states: int, n_actions: int, target: Sequence[int]) -> np.ndarray:
    """Kernel whose (x, u) row is δ at target[x]."""
    probs = np.zeros((n_states, n_actions, n_states))
    probs[np.arange(n_states), :, np.asarray(target)] = 1.0
    return probs


def family_drift_grid(n_max: int) -> PerturbationFamily:
    """
    Deterministic drift x -> x + 1/n against the identity, cost min(|x|, 1).

    Grid {k/n : k = 0..2n+1}; the top state is absorbing and stands in for
    every x > 1, where the cost is already 1.
    """
    if int(n_max) != n_max or n_max < 1:
        raise ValidationError(f"n_max must be a positive integer, got {n_max}")

    def grid(n):
        coords = np.arange(2 * n + 2) / n
        return coords, np.minimum(np.abs(coords), 1.0)[:, None]

    def member(n):
        coords, cost = grid(n)
        target = np.minimum(np.arange(coords.size) + 1, coords.size - 1)
        return _grid_model(coords, ActionSpace.single(), _point_mass_rows(coords.size, 1, target), cost)

    def limit(n):
        coords, cost = grid(n)
        return _grid_model(coords, ActionSpace.single(),
                           _point_mass_rows(coords.size, 1, np.arange(coords.size)), cost)

    return PerturbationFamily('drift_grid', member, limit, 'weak', n_max=int(n_max),
                              description="δ_{x+1/n} vs δ_x, cost min(|x|,1)")


def family_coin_vs_delta() -> PerturbationFamily:
    """
    T_n = ½δ_1 + ½δ_{-1} for every n against T = δ_0 on X = U = {-1, 0, 1},
    cost (x - u)^2, with the two policies optimal for T_n but not for T.
    """
    coords = np.array([-1.0, 0.0, 1.0])
    actions = ActionSpace.from_coords(coords)
    cost = (coords[:, None] - coords[None, :]) ** 2

    def member(n):
        probs = np.zeros((3, 3, 3))
        probs[:, :, 0] = 0.5
        probs[:, :, 2] = 0.5
        return _grid_model(coords, actions, probs, cost)

    def limit(n):
        return _grid_model(coords, actions, _point_mass_rows(3, 3, [1, 1, 1]), cost)

    fixtures = {
        # u = x at ±1, u = 0 elsewhere
        'gamma1': lambda n: StationaryPolicy([0, 1, 2]),
        # u = 1 if x >= 0, u = -1 otherwise
        'gamma2': lambda n: StationaryPolicy([0, 2, 2]),
    }
    return PerturbationFamily('coin_vs_delta', member, limit, 'none', fixtures=fixtures,
                              description="½δ_1+½δ_-1 vs δ_0, two optimal policies")


def family_tv_counterexample(n_max: int) -> PerturbationFamily:
    """
    Kernels on {-1, -1/n, 0, 1/n, 1} with U = {0, 1, 2}: states with |x| >= 1/n
    move to ½δ_{1/n} + ½δ_{-1/n}, the others to ⅓ each on {-1/n, 0, 1/n};
    the limit is δ_0. Cost x·1{x>=0} for u in {0, 1} and 3 for u = 2.

    The 'optimal_from_minus_one' fixture is optimal for T_n from x = -1 but
    does not solve the ACOE at 0, and costs 3 on the limit.
    """
    if int(n_max) != n_max or n_max < 1:
        raise ValidationError(f"n_max must be a positive integer, got {n_max}")
    actions = ActionSpace.from_coords([0.0, 1.0, 2.0])

    def grid(n):
        coords = np.unique(np.array([-1.0, -1.0 / n, 0.0, 1.0 / n, 1.0]))
        cost = np.repeat((coords * (coords >= 0.0))[:, None], 3, axis=1)
        cost[:, 2] = 3.0
        return coords, cost

    def member(n):
        coords, cost = grid(n)
        lo, zero, hi = (int(np.flatnonzero(coords == v)[0]) for v in (-1.0 / n, 0.0, 1.0 / n))
        probs = np.zeros((coords.size, 3, coords.size))
        inner = np.abs(coords) < 1.0 / n
        probs[~inner, :, lo] += 0.5
        probs[~inner, :, hi] += 0.5
        probs[inner, :, lo] += 1.0
        probs[inner, :, zero] += 1.0
        probs[inner, :, hi] += 1.0
        return _grid_model(coords, actions, probs, cost)

    def limit(n):
        coords, cost = grid(n)
        zero = int(np.flatnonzero(coords == 0.0)[0])
        return _grid_model(coords, actions, _point_mass_rows(coords.size, 3, [zero] * coords.size), cost)

    def fixture(n):
        coords, _ = grid(n)
        choice = np.full(coords.size, 2)
        choice[coords <= -1.0 / n] = 1
        choice[coords >= 1.0 / n] = 0
        return StationaryPolicy(choice)

    # sup TV is 2 for every n; the BL distance is what decays
    return PerturbationFamily('tv_counterexample', member, limit, 'weak', n_max=int(n_max),
                              fixtures={'optimal_from_minus_one': fixture},
                              description="non-ACOE optimal policy that fails on the limit")


def family_weak_not_tv(n_max: int) -> PerturbationFamily:
    """T_n = δ_{1/n} against T = δ_0 on {0} ∪ {1/k : k <= n_max}, cost min(|x|, 1)."""
    if int(n_max) != n_max or n_max < 1:
        raise ValidationError(f"n_max must be a positive integer, got {n_max}")
    coords = np.concatenate(([0.0], 1.0 / np.arange(n_max, 0, -1)))
    cost = np.minimum(np.abs(coords), 1.0)[:, None]
    size = coords.size

    def member(n):
        target = int(np.flatnonzero(coords == 1.0 / n)[0])
        return _grid_model(coords, ActionSpace.single(), _point_mass_rows(size, 1, [target] * size), cost)

    def limit(n):
        return _grid_model(coords, ActionSpace.single(), _point_mass_rows(size, 1, [0] * size), cost)

    return PerturbationFamily('weak_not_tv', member, limit, 'weak', n_max=int(n_max),
                              description="δ_{1/n} vs δ_0: TV distance 2, weak convergence")


def family_noise_mixture(base: FiniteMdp, contaminant: Distribution,
                         rate: Callable[[int], float]) -> PerturbationFamily:
    """
    Misspecified noise law: T_n(.|x,u) = (1 - ε_n) T(.|x,u) + ε_n contaminant.

    Args:
        base: the true model T
        contaminant: distribution mixed into every row
        rate: n -> ε_n in [0, 1], decreasing to 0
    """
    if len(contaminant) != base.n_states:
        raise ValidationError(f"contaminant has {len(contaminant)} states, base has {base.n_states}")
    weights = np.asarray(contaminant.weights)

    def member(n):
        eps = float(rate(n))
        if not 0.0 <= eps <= 1.0:
            raise ValidationError(f"mixing rate ε_{n} = {eps} is outside [0, 1]")
        if eps == 0.0:
            return base
        probs = (1.0 - eps) * base.kernel.probs + eps * weights
        return base.with_kernel(Kernel.normalized(probs))

    return PerturbationFamily('noise_mixture', member, lambda n: base, 'tv',
                              description="(1-ε_n)T + ε_n·contaminant")


def family_constant(base: FiniteMdp) -> PerturbationFamily:
    """member(n) = limit = base for every n."""
    return PerturbationFamily('constant', lambda n: base, lambda n: base, 'tv',
                              description="every member equals the limit")


def power_rate(scale: float = 1.0, power: float = 1.0) -> Callable[[int], float]:
    """ε_n = min(1, scale / n^power)."""
    if scale < 0 or power <= 0:
        raise ValidationError(f"rate needs scale >= 0 and power > 0, got {scale}, {power}")
    return lambda n: min(1.0, scale / float(n) ** power)


def model_from_params(params: Mapping, path: str) -> FiniteMdp:
    """A base model from {"model": file} or {"random": {...}} parameters."""
    if 'model' in params:
        return load_model(params['model'])
    random_params = params.get('random')
    if not isinstance(random_params, Mapping):
        raise ConfigError(f"{path}", "needs either 'model' (a file) or 'random' (instance parameters)")
    try:
        rng = np.random.default_rng(int(random_params.get('seed', 0)))
        return random_mdp(rng, int(random_params.get('n_states', 5)), int(random_params.get('n_actions', 3)),
                          min_prob=float(random_params.get('min_prob', 0.02)),
                          cost_scale=float(random_params.get('cost_scale', 1.0)))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}.random", str(e))


def _contaminant(params: Mapping, n_states: int, path: str) -> Distribution:
    value = params.get('contaminant', 'uniform')
    if value == 'uniform':
        return Distribution.uniform(n_states)
    if isinstance(value, int) and not isinstance(value, bool):
        if not 0 <= value < n_states:
            raise ConfigError(f"{path}.contaminant", f"state {value} out of range")
        return Distribution.point_mass(n_states, value)
    if isinstance(value, list):
        try:
            return Distribution(value)
        except ValidationError as e:
            raise ConfigError(f"{path}.contaminant", str(e))
    raise ConfigError(f"{path}.contaminant", "expected 'uniform', a state index or a weight list")


def _n_max(params: Mapping, path: str) -> int:
    n_max = params.get('n_max', 64)
    if not isinstance(n_max, int) or isinstance(n_max, bool) or n_max < 1:
        raise ConfigError(f"{path}.n_max", f"expected a positive integer, got {n_max!r}")
    return n_max


def _noise_mixture_from_params(params: Mapping, path: str) -> PerturbationFamily:
    base = model_from_params(params, path)
    try:
        rate = power_rate(float(params.get('rate_scale', 1.0)), float(params.get('rate_power', 1.0)))
    except (TypeError, ValueError, ValidationError) as e:
        raise ConfigError(f"{path}.rate", str(e))
    return family_noise_mixture(base, _contaminant(params, base.n_states, path), rate)


FAMILIES: Dict[str, Dict] = {
    'drift_grid': {
        'build': lambda params, path: family_drift_grid(_n_max(params, path)),
        'params': ['n_max'],
        'description': "deterministic drift x+1/n vs identity; continuity fails without ergodicity",
    },
    'coin_vs_delta': {
        'build': lambda params, path: family_coin_vs_delta(),
        'params': [],
        'description': "two optimal policies for T_n with different costs on T",
    },
    'tv_counterexample': {
        'build': lambda params, path: family_tv_counterexample(_n_max(params, path)),
        'params': ['n_max'],
        'description': "optimal but non-ACOE policy for T_n costs 3 on the limit",
    },
    'weak_not_tv': {
        'build': lambda params, path: family_weak_not_tv(_n_max(params, path)),
        'params': ['n_max'],
        'description': "δ_{1/n} vs δ_0: TV distance 2 while average costs converge",
    },
    'noise_mixture': {
        'build': _noise_mixture_from_params,
        'params': ['model | random', 'contaminant', 'rate_scale', 'rate_power'],
        'description': "(1-ε_n)T + ε_n·contaminant with ε_n = rate_scale / n^rate_power",
    },
    'constant': {
        'build': lambda params, path: family_constant(model_from_params(params, path)),
        'params': ['model | random'],
        'description': "member(n) = limit for every n",
    },
}


def list_families() -> List[Dict]:
    return [{'name': name, 'params': entry['params'], 'description': entry['description']}
            for name, entry in sorted(FAMILIES.items())]


def build_family(name: str, params: Optional[Mapping] = None, path: str = "family") -> PerturbationFamily:
    """
    Build a registered family from JSON parameters.

    Raises:
        ConfigError naming the JSON path of the bad parameter.
    """
    if name not in FAMILIES:
        raise ConfigError(f"{path}.name", f"unknown family {name!r}, expected one of {sorted(FAMILIES)}")
    params = params or {}
    if not isinstance(params, Mapping):
        raise ConfigError(f"{path}.params", "expected an object")
    family = FAMILIES[name]['build'](params, f"{path}.params")
    logger.info(f"Built family {name} ({family.convergence_claim})")
    return family
