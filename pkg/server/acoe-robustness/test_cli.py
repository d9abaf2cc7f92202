"""Command line: subcommands, output files and exit codes."""

import json

import numpy as np
import pytest

from cli import main
from mdp_core import StationaryPolicy, random_mdp
from model_io import load_model, load_policy, save_model, save_policy


@pytest.fixture
def model_file(tmp_path, learning_mdp):
    path = tmp_path / "model.json"
    save_model(learning_mdp, path)
    return path


def test_check_ergodicity_writes_a_report(tmp_path, model_file):
    out = tmp_path / "report.json"
    assert main(['check-ergodicity', str(model_file), '--out', str(out)]) == 0
    report = json.loads(out.read_text())
    assert 'f' in report['condition_labels']
    assert report['dobrushin_beta'] < 1.0


def test_check_ergodicity_over_budget_exits_4(tmp_path, capsys):
    path = tmp_path / "big.json"
    save_model(random_mdp(np.random.default_rng(0), 21, 2), path)
    assert main(['check-ergodicity', str(path)]) == 4
    assert capsys.readouterr().err.startswith("error:")


def test_solve_and_policy_output(tmp_path, model_file, capsys):
    policy_out = tmp_path / "policy.json"
    assert main(['solve', str(model_file), '--policy-out', str(policy_out)]) == 0
    solution = json.loads(capsys.readouterr().out)
    assert solution['residual'] < 1e-10
    assert load_policy(policy_out).to_list() == solution['policy']


def test_solve_without_certificate(tmp_path, stay_swap_mdp, capsys):
    path = tmp_path / "stay_swap.json"
    save_model(stay_swap_mdp, path)
    assert main(['solve', str(path)]) == 3
    assert "certificate" in capsys.readouterr().err
    assert main(['solve', str(path), '--no-certificate']) == 0
    assert json.loads(capsys.readouterr().out)['j_star'] == pytest.approx(0.0, abs=1e-12)


def test_periodic_chain_fails_to_converge(tmp_path, swap_only_mdp):
    path = tmp_path / "swap.json"
    save_model(swap_only_mdp, path)
    assert main(['solve', str(path), '--no-certificate', '--max-iter', '10']) == 3


def test_missing_file_exits_2(tmp_path, capsys):
    assert main(['solve', str(tmp_path / "absent.json")]) == 2
    assert "not found" in capsys.readouterr().err


def test_evaluate_and_mismatch(tmp_path, swap_only_mdp, model_file, capsys):
    model, policy = tmp_path / "swap.json", tmp_path / "hold.json"
    save_model(swap_only_mdp, model)
    save_policy(StationaryPolicy.constant(2), policy)
    assert main(['evaluate', str(model), str(policy)]) == 0
    assert json.loads(capsys.readouterr().out)['j'] == pytest.approx(0.5)

    out = tmp_path / "mismatch.json"
    assert main(['mismatch', str(model_file), str(model_file), '--out', str(out)]) == 0
    assert json.loads(out.read_text())['gap'] == pytest.approx(0.0, abs=1e-9)


def test_family_list_and_emit(tmp_path, capsys):
    assert main(['family', 'list']) == 0
    names = [entry['name'] for entry in json.loads(capsys.readouterr().out)]
    assert 'tv_counterexample' in names

    emit = tmp_path / "member.json"
    assert main(['family', 'tv_counterexample', '--n', '2', '--emit', str(emit)]) == 0
    assert load_model(emit).n_states == 5
    assert load_model(tmp_path / "member.limit.json").n_states == 5
    assert (tmp_path / "member.optimal_from_minus_one.policy.json").exists()


def test_family_errors_exit_2(capsys):
    assert main(['family', 'weak_not_tv']) == 2
    assert main(['family', 'spiral', '--n', '1']) == 2
    assert "unknown family" in capsys.readouterr().err


def test_learn_writes_block_rows(tmp_path, model_file):
    out = tmp_path / "learn.csv"
    assert main(['learn', str(model_file), '--k-max', '3', '--seed', '4', '--out', str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("k,n_k,")
    assert [line.split(',')[0] for line in lines[1:]] == ['1', '2', '3']


def test_run_config(tmp_path):
    config = tmp_path / "experiment.json"
    config.write_text(json.dumps({'family': {'name': 'weak_not_tv', 'params': {'n_max': 3}},
                                  'n_grid': [1, 2, 3], 'output': 'out'}))
    assert main(['run', str(config)]) == 0
    assert (tmp_path / "out" / "continuity.csv").exists()
    assert (tmp_path / "out" / "summary.json").exists()

    config.write_text(json.dumps({'family': {'name': 'weak_not_tv'}, 'n_grid': [2, 1]}))
    assert main(['run', str(config)]) == 2
