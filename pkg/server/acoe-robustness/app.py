"""
Flask API over the solver, evaluator, mismatch pipeline and ergodicity checker.

Request and response bodies use the same JSON documents as the CLI files.
"""
import logging
import time

from flask import Flask, jsonify, request

from array_backend import get_kernel_arithmetic
from config import API_HOST, API_PORT, ACOE_TOL, ERGODICITY_T_MAX, LOG_LEVEL, get_config_summary
from dp_solver import evaluate_policy, mismatch, solve_acoe
from errors import AcoeError, ValidationError
from metrics import check_ergodicity
from model_io import model_from_dict, model_to_dict, policy_from_dict, policy_to_dict
from perturbations import build_family, list_families

logging.basicConfig(level=getattr(logging, LOG_LEVEL.upper(), logging.WARNING))
logger = logging.getLogger(__name__)

app = Flask(__name__)

request_stats = {'requests': 0, 'errors': 0, 'started': time.time()}


def _body():
    data = request.get_json(silent=True)
    if not isinstance(data, dict):
        raise ValidationError("request body must be a JSON object")
    return data


def _field(data, key):
    if key not in data:
        raise ValidationError(f"'{key}' is required")
    return data[key]


def _failure(e: Exception):
    request_stats['errors'] += 1
    if isinstance(e, AcoeError):
        logger.error(f"Request to {request.path} failed: {e}")
        return jsonify({'success': False, 'error': str(e), 'type': type(e).__name__}), e.http_status
    logger.error(f"Unexpected error on {request.path}: {str(e)}")
    return jsonify({'success': False, 'error': str(e)}), 500


@app.before_request
def count_request():
    request_stats['requests'] += 1


@app.route('/health', methods=['GET'])
def health_check():
    """Health check endpoint with backend status."""
    try:
        info = get_kernel_arithmetic().get_performance_info()
        return jsonify({
            'status': 'healthy',
            'service': 'acoe-robustness',
            'device': info['device'],
        })
    except Exception as e:
        return jsonify({
            'status': 'unhealthy',
            'error': str(e),
            'service': 'acoe-robustness'
        }), 500


@app.route('/status', methods=['GET'])
def get_status():
    """Configuration, backend and request counters."""
    return jsonify({
        'success': True,
        'config': get_config_summary(),
        'kernel_arithmetic': get_kernel_arithmetic().get_performance_info(),
        'requests': request_stats['requests'],
        'errors': request_stats['errors'],
        'uptime_seconds': time.time() - request_stats['started'],
    })


@app.route('/solve', methods=['POST'])
def solve():
    """Solve the ACOE for {"model": ..., "tol"?, "anchor"?, "damping"?, "require_certificate"?}."""
    try:
        data = _body()
        mdp = model_from_dict(_field(data, 'model'))
        solution = solve_acoe(mdp, tol=float(data.get('tol', ACOE_TOL)),
                              anchor=int(data.get('anchor', 0)),
                              damping=float(data.get('damping', 1.0)),
                              require_certificate=bool(data.get('require_certificate', True)))
        return jsonify({'success': True, 'solution': solution.to_dict()})
    except Exception as e:
        return _failure(e)


@app.route('/evaluate', methods=['POST'])
def evaluate():
    """Average cost of {"model": ..., "policy": {"choice": [...]}, "method"?}."""
    try:
        data = _body()
        mdp = model_from_dict(_field(data, 'model'))
        policy = policy_from_dict(_field(data, 'policy'))
        evaluation = evaluate_policy(mdp, policy, method=data.get('method', 'linear'))
        return jsonify({'success': True, 'evaluation': evaluation.to_dict()})
    except Exception as e:
        return _failure(e)


@app.route('/mismatch', methods=['POST'])
def model_mismatch():
    """Gap of the design model's policy on the true model."""
    try:
        data = _body()
        true_mdp = model_from_dict(_field(data, 'true_model'))
        design_mdp = model_from_dict(_field(data, 'design_model'))
        policy = policy_from_dict(data['policy']) if 'policy' in data else None
        record = mismatch(true_mdp, design_mdp, design_policy=policy,
                          require_certificate=bool(data.get('require_certificate', True)))
        return jsonify({'success': True, 'mismatch': record.to_dict()})
    except Exception as e:
        return _failure(e)


@app.route('/check-ergodicity', methods=['POST'])
def ergodicity():
    try:
        data = _body()
        mdp = model_from_dict(_field(data, 'model'))
        report = check_ergodicity(mdp, t_max=int(data.get('t_max', ERGODICITY_T_MAX)))
        return jsonify({'success': True, 'report': report.to_dict()})
    except Exception as e:
        return _failure(e)


@app.route('/families', methods=['GET'])
def families():
    return jsonify({'success': True, 'families': list_families()})


@app.route('/families/<name>', methods=['POST'])
def family_member(name):
    """Materialize member(n) and limit(n) of a registered family."""
    try:
        data = request.get_json(silent=True) or {}
        n = int(_field(data, 'n'))
        params = dict(data.get('params', {}))
        params.setdefault('n_max', n)
        family = build_family(name, params, path="params")
        return jsonify({
            'success': True,
            'family': family.name,
            'convergence_claim': family.convergence_claim,
            'member': model_to_dict(family.member(n)),
            'limit': model_to_dict(family.limit_at(n)),
            'fixtures': {f: policy_to_dict(family.fixture(f, n)) for f in family.fixture_names},
        })
    except Exception as e:
        return _failure(e)


if __name__ == '__main__':
    # Production mode - disable debug and reloader
    app.run(host=API_HOST, port=API_PORT, debug=False, use_reloader=False)
