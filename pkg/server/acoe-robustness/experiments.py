"""
Config-driven experiment pipelines: continuity, robustness, distances,
ergodicity and learning sweeps over a perturbation family.

Per-n and per-seed work items run on a thread pool; rows are ordered by
(n, policy) or (seed, k) before anything is written, so reruns are
byte-identical.
"""

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from config import ENABLE_PARALLEL_PROCESSING, MAX_WORKERS
from dp_solver import evaluate_policy, mismatch, solve_acoe
from errors import ConfigError, PreconditionError, ValidationError
from learning import (ESTIMATORS, SCHEDULES, AdaptiveResult, AdditiveNoiseDynamics, Schedule,
                      adaptive_run, inverse_k)
from metrics import ErgodicityReport, check_ergodicity, kernel_distance
from mdp_core import FiniteMdp
from model_io import load_model, read_json, write_json
from perturbations import FAMILIES, PerturbationFamily, build_family, model_from_params

logger = logging.getLogger(__name__)

PIPELINES = ('continuity', 'robustness', 'distances', 'ergodicity', 'learning')

SWEEP_COLUMNS = ['n', 'policy', 'tv_sup', 'bl_sup', 'j_star_n', 'j_star_true', 'j_applied',
                 'gap', 'acoe_residual_n', 'acoe_residual_true']
DISTANCE_COLUMNS = ['n', 'tv_sup', 'bl_sup', 'setwise', 'tv_sup_u_per_x']
# on a finite space the setwise distance is the TV distance
SETWISE_NOTE = 'alias of tv on finite spaces'
ERGODICITY_COLUMNS = ['n', 'model', 'labels', 'dobrushin_beta', 't_star', 'minorization_mass']
LEARNING_COLUMNS = ['k', 'n_k', 'sup_tv_error', 'bl_error', 'j_applied_block', 'running_average',
                    'unvisited_pairs', 'certified']


@dataclass(frozen=True)
class SolverSettings:
    tol: float = 1e-10
    max_iter: int = 100000
    anchor: int = 0
    damping: float = 1.0


@dataclass(frozen=True)
class ErgodicitySettings:
    t_max: int = 64
    policy_budget: int = 1000000
    decay_residual_tol: float = 0.1
    unichain_sv_threshold: float = 1e-8

    def options(self) -> Dict[str, Any]:
        """Keyword arguments for check_ergodicity."""
        return {'t_max': self.t_max, 'budget': self.policy_budget,
                'decay_residual_tol': self.decay_residual_tol,
                'sv_threshold': self.unichain_sv_threshold}

    def check(self, mdp: FiniteMdp) -> ErgodicityReport:
        return check_ergodicity(mdp, **self.options())


@dataclass(frozen=True)
class LearningSettings:
    model: Mapping = field(default_factory=dict)
    estimator: str = 'counts'
    schedule: str = 'factorial'
    k_max: int = 8
    exploration: Union[str, float] = 'inverse_k'
    dynamics: Optional[AdditiveNoiseDynamics] = None

    def exploration_fn(self) -> Optional[Callable[[int], float]]:
        if self.exploration == 'inverse_k':
            return inverse_k
        rate = float(self.exploration)
        return lambda k: rate

    def true_model(self, path: str = "learning.model") -> FiniteMdp:
        if self.dynamics is not None:
            return self.dynamics.model(self.model['noise'], self.model['cost'])
        return model_from_params(self.model, path)


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment config; every knob except the thread count lives here."""

    n_grid: Tuple[int, ...]
    pipelines: Tuple[str, ...]
    output: str
    family_name: Optional[str] = None
    family_params: Mapping = field(default_factory=dict)
    models: Optional[Tuple[str, str]] = None
    solver: SolverSettings = SolverSettings()
    ergodicity: ErgodicitySettings = ErgodicitySettings()
    seeds: Tuple[int, ...] = (0,)
    override: bool = False
    fixtures: bool = True
    learning: Optional[LearningSettings] = None

    @classmethod
    def from_dict(cls, doc: Mapping, base_dir: Union[str, Path] = ".") -> 'ExperimentConfig':
        """
        Validate a decoded config document.

        Relative file paths are resolved against base_dir.

        Raises:
            ConfigError with the JSON path of the first problem.
        """
        if not isinstance(doc, Mapping):
            raise ConfigError("$", "expected an object")
        base_dir = Path(base_dir)

        pipelines = doc.get('pipelines', ['continuity'])
        if (not isinstance(pipelines, list) or not pipelines
                or any(p not in PIPELINES for p in pipelines)):
            raise ConfigError("$.pipelines", f"expected a nonempty subset of {list(PIPELINES)}")
        if len(set(pipelines)) != len(pipelines):
            raise ConfigError("$.pipelines", "duplicate pipeline")

        n_grid = doc.get('n_grid', [1])
        if (not isinstance(n_grid, list) or not n_grid
                or any(not isinstance(n, int) or isinstance(n, bool) or n < 1 for n in n_grid)):
            raise ConfigError("$.n_grid", "expected a nonempty list of positive integers")
        for i in range(1, len(n_grid)):
            if n_grid[i] <= n_grid[i - 1]:
                raise ConfigError(f"$.n_grid[{i}]", "n_grid must be strictly increasing")

        family_name, family_params, models = None, {}, None
        needs_family = any(p != 'learning' for p in pipelines)
        if 'family' in doc:
            family = doc['family']
            if not isinstance(family, Mapping) or 'name' not in family:
                raise ConfigError("$.family", "expected an object with a 'name'")
            family_name = family['name']
            if family_name not in FAMILIES:
                raise ConfigError("$.family.name", f"unknown family {family_name!r}")
            family_params = dict(family.get('params', {}))
            if 'model' in family_params:
                family_params['model'] = str(_existing(base_dir, family_params['model'],
                                                       "$.family.params.model"))
        elif 'models' in doc:
            pair = doc['models']
            if not isinstance(pair, Mapping) or 'true' not in pair or 'design' not in pair:
                raise ConfigError("$.models", "expected {\"true\": file, \"design\": file}")
            models = (str(_existing(base_dir, pair['true'], "$.models.true")),
                      str(_existing(base_dir, pair['design'], "$.models.design")))
        elif needs_family:
            raise ConfigError("$", "needs either 'family' or 'models'")

        solver_doc = doc.get('solver', {})
        if not isinstance(solver_doc, Mapping):
            raise ConfigError("$.solver", "expected an object")
        try:
            solver = SolverSettings(
                tol=float(solver_doc.get('tol', SolverSettings.tol)),
                max_iter=int(solver_doc.get('max_iter', SolverSettings.max_iter)),
                anchor=int(solver_doc.get('anchor', SolverSettings.anchor)),
                damping=float(solver_doc.get('damping', 1.0)),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError("$.solver", str(e))
        if solver.tol <= 0:
            raise ConfigError("$.solver.tol", "must be positive")
        if solver.max_iter < 1:
            raise ConfigError("$.solver.max_iter", "must be >= 1")
        if solver.anchor < 0:
            raise ConfigError("$.solver.anchor", "must be >= 0")
        if not 0.0 < solver.damping <= 1.0:
            raise ConfigError("$.solver.damping", "must be in (0, 1]")

        seeds = doc.get('seeds', [0])
        if (not isinstance(seeds, list) or not seeds
                or any(not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in seeds)):
            raise ConfigError("$.seeds", "expected a nonempty list of nonnegative integers")
        if len(set(seeds)) != len(seeds):
            raise ConfigError("$.seeds", "duplicate seed")

        output = doc.get('output', 'results')
        if not isinstance(output, str) or not output:
            raise ConfigError("$.output", "expected a directory path")

        learning = None
        if 'learning' in pipelines:
            learning = _learning_settings(doc.get('learning'), base_dir)

        return cls(
            n_grid=tuple(n_grid),
            pipelines=tuple(pipelines),
            output=str(base_dir / output) if not Path(output).is_absolute() else output,
            family_name=family_name,
            family_params=family_params,
            models=models,
            solver=solver,
            ergodicity=_ergodicity_settings(doc.get('ergodicity', {})),
            seeds=tuple(sorted(seeds)),
            override=bool(doc.get('override', False)),
            fixtures=bool(doc.get('fixtures', True)),
            learning=learning,
        )

    def build_family(self) -> PerturbationFamily:
        if self.models is not None:
            true_mdp, design_mdp = load_model(self.models[0]), load_model(self.models[1])
            true_mdp.require_same_shape(design_mdp)
            return PerturbationFamily('pair', lambda n: design_mdp, lambda n: true_mdp, 'none',
                                      description="fixed design model against the true model")
        if self.family_name is None:
            raise ConfigError("$.family", "no family configured")
        return build_family(self.family_name, self.family_params, path="$.family")


def _existing(base_dir: Path, value, path: str) -> Path:
    if not isinstance(value, str):
        raise ConfigError(path, "expected a file path")
    resolved = Path(value) if Path(value).is_absolute() else base_dir / value
    if not resolved.exists():
        raise ConfigError(path, f"file {value} does not exist")
    return resolved


def _ergodicity_settings(doc) -> ErgodicitySettings:
    if not isinstance(doc, Mapping):
        raise ConfigError("$.ergodicity", "expected an object")
    defaults = ErgodicitySettings()
    values = {}
    for name in ('t_max', 'policy_budget'):
        value = doc.get(name, getattr(defaults, name))
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise ConfigError(f"$.ergodicity.{name}", "expected a positive integer")
        values[name] = value
    for name in ('decay_residual_tol', 'unichain_sv_threshold'):
        value = doc.get(name, getattr(defaults, name))
        if not isinstance(value, (int, float)) or isinstance(value, bool) or not value > 0:
            raise ConfigError(f"$.ergodicity.{name}", "expected a positive number")
        values[name] = float(value)
    return ErgodicitySettings(**values)


def _learning_settings(doc, base_dir: Path) -> LearningSettings:
    if not isinstance(doc, Mapping):
        raise ConfigError("$.learning", "the learning pipeline needs a 'learning' object")
    model = dict(doc.get('model', {'random': {'n_states': 3, 'n_actions': 2,
                                              'min_prob': 0.1, 'cost_scale': 0.5}}))
    estimator = doc.get('estimator', 'counts')
    if estimator not in ESTIMATORS:
        raise ConfigError("$.learning.estimator", f"expected one of {list(ESTIMATORS)}")
    schedule = doc.get('schedule', 'factorial')
    if schedule not in SCHEDULES:
        raise ConfigError("$.learning.schedule", f"expected one of {list(SCHEDULES)}")
    k_max = doc.get('k_max', 8)
    if not isinstance(k_max, int) or isinstance(k_max, bool) or k_max < 1:
        raise ConfigError("$.learning.k_max", "expected a positive integer")
    exploration = doc.get('exploration', 'inverse_k')
    if exploration != 'inverse_k' and not (isinstance(exploration, (int, float))
                                           and 0.0 <= exploration <= 1.0):
        raise ConfigError("$.learning.exploration", "expected 'inverse_k' or a rate in [0, 1]")

    dynamics = None
    if 'dynamics' in model:
        entry = model['dynamics']
        try:
            dynamics = AdditiveNoiseDynamics(drift=entry['drift'], offsets=tuple(entry['offsets']))
            model = {'noise': list(entry['noise']), 'cost': np.asarray(entry['cost'], dtype=float)}
            dynamics.model(model['noise'], model['cost'])
        except (KeyError, TypeError, ValueError, ValidationError) as e:
            raise ConfigError("$.learning.model.dynamics", str(e))
    elif 'model' in model:
        model['model'] = str(_existing(base_dir, model['model'], "$.learning.model.model"))
    elif 'random' not in model:
        raise ConfigError("$.learning.model", "expected 'model', 'random' or 'dynamics'")
    if estimator == 'inversion' and dynamics is None:
        raise ConfigError("$.learning.estimator", "'inversion' needs learning.model.dynamics")
    return LearningSettings(model=model, estimator=estimator, schedule=schedule, k_max=k_max,
                            exploration=exploration, dynamics=dynamics)


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    return ExperimentConfig.from_dict(read_json(path), base_dir=path.parent)


@dataclass
class SweepResult:
    """Rows of one pipeline plus the family-wide ergodicity bound."""

    pipeline: str
    columns: List[str]
    rows: List[Dict[str, Any]] = field(default_factory=list)
    beta_sup: float = float('nan')

    def column(self, name: str) -> List[Any]:
        return [row[name] for row in self.rows]


def _map_ordered(fn: Callable, items: Sequence) -> List:
    """fn over items on the thread pool, results in item order."""
    if not ENABLE_PARALLEL_PROCESSING or MAX_WORKERS <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(MAX_WORKERS, len(items))) as executor:
        return list(executor.map(fn, items))


def _certify(family: PerturbationFamily, n_grid: Sequence[int], override: bool,
             ergodicity: ErgodicitySettings = ErgodicitySettings()) -> float:
    """
    β_sup over the sampled members and their limits.

    Raises:
        PreconditionError naming the first uncertified n unless override is set.
    """
    def check(n):
        return ergodicity.check(family.member(n)), ergodicity.check(family.limit_at(n))

    betas = []
    for n, (member_report, limit_report) in zip(n_grid, _map_ordered(check, list(n_grid))):
        for which, report in (('member', member_report), ('limit', limit_report)):
            if not report.certified:
                if not override:
                    logger.error(f"Family {family.name}: {which} at n = {n} is not certified")
                    raise PreconditionError(
                        f"family {family.name}: {which} at n = {n} has no condition-f certificate "
                        f"(best β = {report.dobrushin_beta:.4g}); set override to continue")
                logger.warning(f"Family {family.name}: {which} at n = {n} uncertified, override set")
            betas.append(report.dobrushin_beta)
    return float(max(betas))


def run_continuity(config: ExperimentConfig, family: Optional[PerturbationFamily] = None) -> SweepResult:
    """Per n: j*(member(n)) against j*(limit(n)); gap = |j*_n - j*|."""
    family = family or config.build_family()
    family.validate(config.n_grid)
    result = SweepResult('continuity', SWEEP_COLUMNS)
    result.beta_sup = _certify(family, config.n_grid, config.override, config.ergodicity)
    solver = config.solver

    def work(n):
        member = solve_acoe(family.member(n), tol=solver.tol, max_iter=solver.max_iter,
                            anchor=solver.anchor, damping=solver.damping, require_certificate=False)
        limit = solve_acoe(family.limit_at(n), tol=solver.tol, max_iter=solver.max_iter,
                           anchor=solver.anchor, damping=solver.damping, require_certificate=False)
        return {
            'n': n, 'policy': 'acoe',
            'tv_sup': kernel_distance(family.member(n), family.limit_at(n), 'tv', 'sup_xu'),
            'bl_sup': kernel_distance(family.member(n), family.limit_at(n), 'bl', 'sup_xu'),
            'j_star_n': member.j_star, 'j_star_true': limit.j_star, 'j_applied': float('nan'),
            'gap': abs(member.j_star - limit.j_star),
            'acoe_residual_n': member.residual, 'acoe_residual_true': limit.residual,
        }

    result.rows = _map_ordered(work, list(config.n_grid))
    logger.info(f"Continuity sweep over {family.name}: {len(result.rows)} rows, β_sup {result.beta_sup:.4g}")
    return result


def run_robustness(config: ExperimentConfig, family: Optional[PerturbationFamily] = None) -> SweepResult:
    """
    Per n: the ACOE policy of member(n) applied to limit(n), plus every policy
    fixture of the family when config.fixtures is set.
    """
    family = family or config.build_family()
    family.validate(config.n_grid)
    result = SweepResult('robustness', SWEEP_COLUMNS)
    result.beta_sup = _certify(family, config.n_grid, config.override, config.ergodicity)
    solver = config.solver
    fixture_names = family.fixture_names if config.fixtures else []
    sv_threshold = config.ergodicity.unichain_sv_threshold

    def work(n):
        true_mdp, design_mdp = family.limit_at(n), family.member(n)
        record = mismatch(true_mdp, design_mdp, tol=solver.tol, max_iter=solver.max_iter,
                          require_certificate=False, anchor=solver.anchor, damping=solver.damping,
                          sv_threshold=sv_threshold)
        base = {
            'n': n,
            'tv_sup': kernel_distance(design_mdp, true_mdp, 'tv', 'sup_xu'),
            'bl_sup': kernel_distance(design_mdp, true_mdp, 'bl', 'sup_xu'),
            'j_star_n': record.j_design_opt, 'j_star_true': record.j_true_opt,
            'acoe_residual_n': record.residual_design, 'acoe_residual_true': record.residual_true,
        }
        rows = [dict(base, policy='acoe', j_applied=record.j_applied, gap=record.gap)]
        for name in fixture_names:
            j_applied = evaluate_policy(true_mdp, family.fixture(name, n), sv_threshold=sv_threshold).j
            rows.append(dict(base, policy=name, j_applied=j_applied, gap=j_applied - record.j_true_opt))
        return rows

    for rows in _map_ordered(work, list(config.n_grid)):
        result.rows.extend(rows)
    logger.info(f"Robustness sweep over {family.name}: {len(result.rows)} rows")
    return result


def run_distances(config: ExperimentConfig, family: Optional[PerturbationFamily] = None) -> SweepResult:
    """Per n: sup TV, sup BL and the per-state sup over actions of TV."""
    family = family or config.build_family()
    result = SweepResult('distances', DISTANCE_COLUMNS)

    def work(n):
        member, limit = family.member(n), family.limit_at(n)
        tv_sup = kernel_distance(member, limit, 'tv', 'sup_xu')
        per_x = kernel_distance(member, limit, 'tv', 'sup_u_per_x')
        return {
            'n': n,
            'tv_sup': tv_sup,
            'bl_sup': kernel_distance(member, limit, 'bl', 'sup_xu'),
            'setwise': tv_sup,
            'tv_sup_u_per_x': [float(d) for d in per_x],
        }

    result.rows = _map_ordered(work, list(config.n_grid))
    return result


def run_ergodicity(config: ExperimentConfig, family: Optional[PerturbationFamily] = None) -> SweepResult:
    """Per n: the ErgodicityReport of member(n) and of limit(n)."""
    family = family or config.build_family()
    result = SweepResult('ergodicity', ERGODICITY_COLUMNS)

    def work(n):
        rows = []
        for which, mdp in (('member', family.member(n)), ('limit', family.limit_at(n))):
            report = config.ergodicity.check(mdp)
            rows.append({'n': n, 'model': which, 'labels': ''.join(report.condition_labels),
                         'dobrushin_beta': report.dobrushin_beta, 't_star': report.t_star,
                         'minorization_mass': report.minorization_mass})
        return rows

    for rows in _map_ordered(work, list(config.n_grid)):
        result.rows.extend(rows)
    certified = [row['dobrushin_beta'] for row in result.rows if 'f' in row['labels']]
    result.beta_sup = float(max(certified)) if len(certified) == len(result.rows) else 1.0
    return result


def run_learning(config: ExperimentConfig) -> Dict[str, Any]:
    """
    One adaptive run per seed and the per-k median across seeds.

    Returns:
        {'seeds': {seed: AdaptiveResult}, 'per_seed': {seed: SweepResult},
         'aggregate': SweepResult}
    """
    settings = config.learning
    if settings is None:
        raise ConfigError("$.learning", "no learning settings")
    true_mdp = settings.true_model()
    schedule = Schedule(settings.schedule)
    failures = schedule.failures(range(2, settings.k_max + 1))
    if failures:
        logger.warning(f"Schedule {schedule.kind} fails n_k/T_k <= 1 + 2/k at k = {failures}")

    def work(seed):
        return adaptive_run(true_mdp, schedule, estimator=settings.estimator, k_max=settings.k_max,
                            seed=seed, exploration=settings.exploration_fn(),
                            dynamics=settings.dynamics, tol=config.solver.tol,
                            max_iter=config.solver.max_iter, ergodicity=config.ergodicity.options())

    runs: List[AdaptiveResult] = _map_ordered(work, list(config.seeds))
    per_seed = {}
    for seed, run in zip(config.seeds, runs):
        per_seed[seed] = SweepResult('learning', LEARNING_COLUMNS, [block.to_row() for block in run.blocks])

    aggregate = SweepResult('learning_median', LEARNING_COLUMNS)
    for i in range(settings.k_max):
        blocks = [run.blocks[i] for run in runs]
        row = {'k': blocks[0].k, 'n_k': blocks[0].n_k}
        for name in ('sup_tv_error', 'bl_error', 'j_applied_block', 'running_average', 'unvisited_pairs'):
            row[name] = float(np.median([getattr(block, name) for block in blocks]))
        row['certified'] = all(block.certified for block in blocks)
        aggregate.rows.append(row)
    return {'seeds': dict(zip(config.seeds, runs)), 'per_seed': per_seed, 'aggregate': aggregate,
            'j_star': runs[0].j_star}


def _cell(value) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (list, tuple)):
        return ';'.join(_cell(v) for v in value)
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(result: SweepResult, path: Union[str, Path]):
    """Write rows with a fixed column order and repr-exact floats."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(result.columns)
        for row in result.rows:
            writer.writerow([_cell(row[name]) for name in result.columns])


def run_experiment(config: ExperimentConfig) -> Dict[str, Any]:
    """
    Run every configured pipeline and write <output>/<pipeline>.csv plus summary.json.

    Returns:
        The summary document.
    """
    start_time = time.time()
    output = Path(config.output)
    summary: Dict[str, Any] = {'pipelines': {}}
    family = config.build_family() if any(p != 'learning' for p in config.pipelines) else None
    if family is not None:
        summary['family'] = family.name
        summary['n_grid'] = list(config.n_grid)

    runners = {'continuity': run_continuity, 'robustness': run_robustness,
               'distances': run_distances, 'ergodicity': run_ergodicity}
    for pipeline in config.pipelines:
        if pipeline == 'learning':
            learned = run_learning(config)
            for seed, sweep in learned['per_seed'].items():
                write_csv(sweep, output / f"learning_seed{seed}.csv")
            write_csv(learned['aggregate'], output / "learning_median.csv")
            summary['pipelines']['learning'] = {
                'seeds': list(config.seeds),
                'j_star': learned['j_star'],
                'final_running_average_median': learned['aggregate'].rows[-1]['running_average'],
            }
            continue
        sweep = runners[pipeline](config, family)
        write_csv(sweep, output / f"{pipeline}.csv")
        beta_sup = None if np.isnan(sweep.beta_sup) else sweep.beta_sup
        summary['pipelines'][pipeline] = {'rows': len(sweep.rows), 'beta_sup': beta_sup}
        if pipeline == 'distances':
            summary['pipelines'][pipeline]['setwise'] = SETWISE_NOTE
        logger.info(f"Pipeline {pipeline} wrote {len(sweep.rows)} rows")

    write_json(output / "summary.json", summary)
    logger.info(f"Experiment finished in {time.time() - start_time:.2f}s, output in {output}")
    return summary
