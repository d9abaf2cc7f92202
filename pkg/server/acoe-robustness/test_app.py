"""HTTP endpoints through the Flask test client."""

import pytest

from app import app
from model_io import model_to_dict


@pytest.fixture
def client():
    app.config['TESTING'] = True
    with app.test_client() as client:
        yield client


def test_health_and_status(client):
    health = client.get('/health')
    assert health.status_code == 200
    assert health.get_json()['status'] == 'healthy'
    status = client.get('/status').get_json()
    assert status['success'] is True
    assert 'acoe_tol' in status['config']


def test_solve(client, learning_mdp):
    response = client.post('/solve', json={'model': model_to_dict(learning_mdp)})
    assert response.status_code == 200
    body = response.get_json()
    assert body['success'] is True
    assert body['solution']['residual'] < 1e-10
    assert len(body['solution']['policy']) == 3


def test_solve_uncertified_model(client, stay_swap_mdp):
    response = client.post('/solve', json={'model': model_to_dict(stay_swap_mdp)})
    assert response.status_code == 422
    body = response.get_json()
    assert body['success'] is False and body['type'] == 'PreconditionError'

    response = client.post('/solve', json={'model': model_to_dict(stay_swap_mdp),
                                           'require_certificate': False})
    assert response.get_json()['solution']['j_star'] == pytest.approx(0.0, abs=1e-12)


def test_evaluate(client, swap_only_mdp):
    response = client.post('/evaluate', json={'model': model_to_dict(swap_only_mdp),
                                              'policy': {'choice': [0, 0]}})
    assert response.status_code == 200
    assert response.get_json()['evaluation']['j'] == pytest.approx(0.5)


def test_mismatch(client, learning_mdp):
    doc = model_to_dict(learning_mdp)
    response = client.post('/mismatch', json={'true_model': doc, 'design_model': doc})
    assert response.status_code == 200
    assert response.get_json()['mismatch']['gap'] == pytest.approx(0.0, abs=1e-9)


def test_check_ergodicity(client, identity_mdp):
    response = client.post('/check-ergodicity', json={'model': model_to_dict(identity_mdp), 't_max': 4})
    assert response.status_code == 200
    assert 'f' not in response.get_json()['report']['condition_labels']


@pytest.mark.parametrize("path, body", [
    ('/solve', {}),
    ('/solve', {'model': {'kernel': [[[1.0]]]}}),
    ('/evaluate', {'model': None}),
    ('/mismatch', {'true_model': {}}),
    ('/families/weak_not_tv', {}),
    ('/families/spiral', {'n': 1}),
])
def test_bad_requests_return_400(client, path, body):
    response = client.post(path, json=body)
    assert response.status_code == 400
    assert response.get_json()['success'] is False


def test_families(client):
    listed = client.get('/families').get_json()
    assert 'weak_not_tv' in [entry['name'] for entry in listed['families']]
    response = client.post('/families/tv_counterexample', json={'n': 2})
    body = response.get_json()
    assert body['convergence_claim'] == 'weak'
    assert len(body['member']['kernel']) == 5
    assert body['fixtures']['optimal_from_minus_one']['choice'][0] in (0, 1, 2)
