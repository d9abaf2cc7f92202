"""
Command line entry point.

Exit codes: 0 success, 2 validation error, 3 convergence error, 4 budget error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from config import (ACOE_ANCHOR, ACOE_MAX_ITER, ACOE_TOL, ERGODICITY_T_MAX, LOG_LEVEL,
                    get_config_summary)
from dp_solver import evaluate_policy, mismatch, solve_acoe
from errors import AcoeError, ValidationError
from experiments import LEARNING_COLUMNS, SweepResult, load_config, run_experiment, write_csv
from learning import AdditiveNoiseDynamics, Schedule, adaptive_run, inverse_k
from metrics import check_ergodicity
from model_io import load_model, load_policy, read_json, save_model, save_policy, write_json
from perturbations import build_family, list_families

logger = logging.getLogger(__name__)


def _emit(doc, out: Optional[str]):
    if out:
        write_json(out, doc)
    else:
        print(json.dumps(doc, indent=2, sort_keys=True))


def cmd_check_ergodicity(args) -> int:
    report = check_ergodicity(load_model(args.model), t_max=args.t_max)
    _emit(report.to_dict(), args.out)
    return 0


def cmd_solve(args) -> int:
    solution = solve_acoe(load_model(args.model), tol=args.tol, max_iter=args.max_iter,
                          anchor=args.anchor, damping=args.damping,
                          require_certificate=not args.no_certificate)
    _emit(solution.to_dict(), args.out)
    if args.policy_out:
        save_policy(solution.policy, args.policy_out)
    return 0


def cmd_evaluate(args) -> int:
    evaluation = evaluate_policy(load_model(args.model), load_policy(args.policy), method=args.method)
    _emit(evaluation.to_dict(), args.out)
    return 0


def cmd_mismatch(args) -> int:
    design_policy = load_policy(args.policy) if args.policy else None
    record = mismatch(load_model(args.true_model), load_model(args.design_model), tol=args.tol,
                      design_policy=design_policy, require_certificate=not args.no_certificate)
    _emit(record.to_dict(), args.out)
    return 0


def _parse_params(pairs: List[str]) -> dict:
    params = {}
    for pair in pairs or []:
        if '=' not in pair:
            raise ValidationError(f"--param expects key=value, got {pair!r}")
        key, value = pair.split('=', 1)
        try:
            params[key] = json.loads(value)
        except json.JSONDecodeError:
            params[key] = value
    return params


def cmd_family(args) -> int:
    if args.name == 'list':
        _emit(list_families(), None)
        return 0
    if args.n is None:
        raise ValidationError("family needs --n to materialize a member")
    params = _parse_params(args.param)
    params.setdefault('n_max', args.n)
    family = build_family(args.name, params, path="family")
    member = family.member(args.n)
    if not args.emit:
        _emit({'family': family.name, 'n': args.n, 'convergence_claim': family.convergence_claim,
               'n_states': member.n_states, 'n_actions': member.n_actions}, None)
        return 0
    save_model(member, args.emit)
    emit = Path(args.emit)
    stem = emit.name[:-len('.json')] if emit.name.endswith('.json') else emit.name
    save_model(family.limit_at(args.n), emit.with_name(f"{stem}.limit.json"))
    for name in family.fixture_names:
        save_policy(family.fixture(name, args.n), emit.with_name(f"{stem}.{name}.policy.json"))
    logger.info(f"Emitted {family.name} member n = {args.n} to {emit}")
    return 0


def cmd_learn(args) -> int:
    true_mdp = load_model(args.true_model)
    dynamics = None
    if args.dynamics:
        doc = read_json(args.dynamics)
        try:
            dynamics = AdditiveNoiseDynamics(drift=doc['drift'], offsets=tuple(doc['offsets']))
        except (KeyError, TypeError) as e:
            raise ValidationError(f"{args.dynamics}: expected drift and offsets ({e})")
    exploration = inverse_k if args.epsilon is None else (lambda k: args.epsilon)
    result = adaptive_run(true_mdp, Schedule(args.schedule), estimator=args.estimator,
                          k_max=args.k_max, seed=args.seed, exploration=exploration,
                          dynamics=dynamics)
    write_csv(SweepResult('learning', LEARNING_COLUMNS, [b.to_row() for b in result.blocks]), args.out)
    _emit({'j_star': result.j_star, 'final_gap': result.final_gap, 'blocks': len(result.blocks)}, None)
    return 0


def cmd_run(args) -> int:
    summary = run_experiment(load_config(args.config))
    _emit(summary, None)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='acoe-robustness',
                                     description="Average-cost MDP continuity and robustness toolkit")
    parser.add_argument('--log-level', default=LOG_LEVEL, help="root logging level")
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('check-ergodicity', help="certify ergodicity conditions of a model")
    p.add_argument('model')
    p.add_argument('--t-max', type=int, default=ERGODICITY_T_MAX)
    p.add_argument('--out')
    p.set_defaults(func=cmd_check_ergodicity)

    def solver_args(p):
        p.add_argument('--tol', type=float, default=ACOE_TOL)
        p.add_argument('--no-certificate', action='store_true',
                       help="run without a condition-f certificate")
        p.add_argument('--out')

    p = sub.add_parser('solve', help="solve the ACOE by relative value iteration")
    p.add_argument('model')
    p.add_argument('--max-iter', type=int, default=ACOE_MAX_ITER)
    p.add_argument('--anchor', type=int, default=ACOE_ANCHOR)
    p.add_argument('--damping', type=float, default=1.0)
    p.add_argument('--policy-out', help="also write the ACOE policy here")
    solver_args(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser('evaluate', help="average cost of a stationary policy")
    p.add_argument('model')
    p.add_argument('policy')
    p.add_argument('--method', choices=['linear', 'iterate'], default='linear')
    p.add_argument('--out')
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser('mismatch', help="apply the design model's policy to the true model")
    p.add_argument('true_model')
    p.add_argument('design_model')
    p.add_argument('--policy', help="use this policy instead of the design ACOE policy")
    solver_args(p)
    p.set_defaults(func=cmd_mismatch)

    p = sub.add_parser('family', help="list families or materialize a member")
    p.add_argument('name', help="family name, or 'list'")
    p.add_argument('--n', type=int)
    p.add_argument('--param', action='append', metavar='KEY=VALUE')
    p.add_argument('--emit', help="write member(n) here, with the limit and policy fixtures beside it")
    p.set_defaults(func=cmd_family)

    p = sub.add_parser('learn', help="adaptive certainty-equivalence run")
    p.add_argument('true_model')
    p.add_argument('--estimator', choices=['counts', 'inversion', 'truth'], default='counts')
    p.add_argument('--schedule', choices=['factorial', 'geometric'], default='factorial')
    p.add_argument('--k-max', type=int, default=8)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--epsilon', type=float, help="constant exploration rate instead of 1/k")
    p.add_argument('--dynamics', help="drift/offsets JSON for the inversion estimator")
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser('run', help="run an experiment config")
    p.add_argument('config')
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    logger.debug(f"Configuration: {get_config_summary()}")
    try:
        return args.func(args)
    except AcoeError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
