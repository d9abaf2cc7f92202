"""Tests for the Bellman operator, policy evaluation, RVI and the brute-force oracle."""

import numpy as np
import pytest

from conftest import make_mdp
import dp_solver
from dp_solver import (PolicyEvaluation, bellman_operator, brute_force_optimal, closed_classes, evaluate_policy,
                       finite_horizon, finite_horizon_values, mismatch, q_values, solve_acoe)
from errors import (BudgetError, ConvergenceError, MultichainError, PreconditionError,
                    ShapeMismatchError, ValidationError)
from mdp_core import Distribution, StationaryPolicy, ValueVector, random_mdp, span
from metrics import check_ergodicity
from policy_sweep import policy_at


def _duplicated_action_mdp():
    base = random_mdp(np.random.default_rng(12), 3, 1, min_prob=0.1)
    probs = np.repeat(np.asarray(base.kernel.probs), 2, axis=1)
    cost = np.repeat(np.asarray(base.cost.values), 2, axis=1)
    return make_mdp(probs, cost)


def test_bellman_operator_on_zero(stay_swap_mdp):
    tv, policy = bellman_operator(stay_swap_mdp, np.zeros(2))
    assert tv.values.tolist() == [0.0, 0.5]
    assert policy.to_list() == [0, 1]


def test_bellman_ties_go_to_lowest_action():
    mdp = _duplicated_action_mdp()
    _, policy = bellman_operator(mdp, np.array([0.3, -1.0, 2.0]))
    assert policy.to_list() == [0, 0, 0]


def test_q_values_rejects_wrong_length(stay_swap_mdp):
    assert q_values(stay_swap_mdp, np.array([1.0, 0.0])).shape == (2, 2)
    with pytest.raises(ValidationError):
        q_values(stay_swap_mdp, np.zeros(3))


def test_closed_classes():
    assert closed_classes(np.eye(3)) == [[0], [1], [2]]
    assert closed_classes(np.array([[0.0, 1.0], [1.0, 0.0]])) == [[0, 1]]
    assert closed_classes(np.array([[0.5, 0.5], [0.0, 1.0]])) == [[1]]


def test_finite_horizon_on_swap_chain(swap_only_mdp):
    swap = StationaryPolicy.constant(2)
    assert finite_horizon(swap_only_mdp, 3, swap, 0) == 1.0
    assert finite_horizon(swap_only_mdp, 4, swap, 0) == 2.0
    assert finite_horizon(swap_only_mdp, 1, swap, None) == 0.5
    assert finite_horizon(swap_only_mdp, 3, None, 1) == 2.0
    # above the doubling threshold
    assert finite_horizon(swap_only_mdp, 5000, swap, 0) == pytest.approx(2500.0, abs=1e-9)
    assert finite_horizon(swap_only_mdp, 2, swap, Distribution([0.25, 0.75])) == pytest.approx(1.0)
    with pytest.raises(ValidationError):
        finite_horizon(swap_only_mdp, 0, swap)


def test_finite_horizon_values_table(stay_swap_mdp):
    table = finite_horizon_values(stay_swap_mdp, 3)
    assert table.shape == (4, 2)
    assert table[0].tolist() == [0.0, 0.0]
    # staying in state 0 costs nothing; state 1 swaps once then stays
    assert table[3].tolist() == [0.0, 0.5]


def test_evaluate_swap_chain(swap_only_mdp):
    swap = StationaryPolicy.constant(2)
    linear = evaluate_policy(swap_only_mdp, swap)
    assert linear.j == pytest.approx(0.5, abs=1e-12)
    assert np.allclose(linear.pi.weights, [0.5, 0.5])
    assert np.allclose(linear.v_hat.values, [0.0, 0.5])
    iterate = evaluate_policy(swap_only_mdp, swap, method='iterate')
    assert iterate.j == pytest.approx(0.5, abs=1e-12)
    assert np.allclose(iterate.v_hat.values, [0.0, 0.5])


def test_evaluate_policy_methods_agree(certified_instances):
    for mdp in certified_instances(5, n_states=4, n_actions=2):
        policy = StationaryPolicy([1, 0, 0, 1])
        linear = evaluate_policy(mdp, policy, anchor=2)
        iterate = evaluate_policy(mdp, policy, method='iterate', anchor=2)
        assert linear.j == iterate.j
        assert linear.v_hat.values[2] == pytest.approx(0.0, abs=1e-12)
        assert np.allclose(linear.v_hat.values, iterate.v_hat.values, atol=1e-8)
        assert linear.residual < 1e-9


def test_evaluate_policy_rejects_multichain(identity_mdp):
    with pytest.raises(MultichainError) as info:
        evaluate_policy(identity_mdp, StationaryPolicy.constant(3))
    assert info.value.classes[:2] == [[0], [1]]
    assert info.value.exit_code == 3
    with pytest.raises(ValidationError):
        evaluate_policy(identity_mdp, StationaryPolicy.constant(3), method='power')


def test_solve_requires_certificate(identity_mdp, swap_only_mdp):
    with pytest.raises(PreconditionError, match="condition f"):
        solve_acoe(identity_mdp)
    with pytest.raises(PreconditionError):
        solve_acoe(swap_only_mdp)


def test_undamped_iteration_oscillates_on_periodic_chain(swap_only_mdp):
    with pytest.raises(ConvergenceError) as info:
        solve_acoe(swap_only_mdp, require_certificate=False, max_iter=100)
    assert info.value.iterations == 100
    assert info.value.residual == pytest.approx(1.0)


def test_damping_removes_periodicity(swap_only_mdp):
    solution = solve_acoe(swap_only_mdp, require_certificate=False, damping=0.5)
    assert solution.j_star == pytest.approx(0.5, abs=1e-12)
    assert solution.residual < 1e-10


def test_solve_argument_validation(learning_mdp):
    with pytest.raises(ValidationError):
        solve_acoe(learning_mdp, anchor=3)
    with pytest.raises(ValidationError):
        solve_acoe(learning_mdp, damping=0.0)


def test_solution_satisfies_acoe(learning_mdp):
    solution = solve_acoe(learning_mdp)
    v = solution.v_star.values
    tv = q_values(learning_mdp, v).min(axis=1)
    assert np.allclose(tv - v, solution.j_star, atol=1e-9)
    assert v[solution.anchor] == 0.0
    assert evaluate_policy(learning_mdp, solution.policy).j == pytest.approx(solution.j_star, abs=1e-9)
    assert set(solution.to_dict()) == {'j_star', 'v_star', 'policy', 'residual', 'iterations', 'anchor', 'tol'}


def test_average_cost_does_not_depend_on_anchor(learning_mdp):
    first = solve_acoe(learning_mdp, anchor=0)
    last = solve_acoe(learning_mdp, anchor=2)
    assert first.j_star == pytest.approx(last.j_star, abs=1e-9)
    shift = first.v_star.values - last.v_star.values
    assert span(shift) < 1e-8


def test_rvi_matches_oracle_on_small_instances(certified_instances):
    for mdp in certified_instances(5, n_states=4, n_actions=3):
        solution = solve_acoe(mdp)
        j_min, _ = brute_force_optimal(mdp)
        assert solution.j_star == pytest.approx(j_min, abs=1e-8)


@pytest.mark.slow
def test_rvi_matches_oracle_on_many_instances(certified_instances):
    for mdp in certified_instances(100):
        solution = solve_acoe(mdp)
        j_min, oracle_policy = brute_force_optimal(mdp)
        assert solution.j_star == pytest.approx(j_min, abs=1e-8)
        assert evaluate_policy(mdp, solution.policy).j == pytest.approx(j_min, abs=1e-8)
        assert evaluate_policy(mdp, oracle_policy).j == pytest.approx(j_min, abs=1e-12)


def _iterate_bellman(mdp, v, times):
    for _ in range(times):
        v = bellman_operator(mdp, v)[0].values
    return v


@pytest.mark.slow
def test_span_contraction_at_certified_power(certified_instances):
    rng = np.random.default_rng(6)
    for mdp in certified_instances(100):
        report = check_ergodicity(mdp)
        assert report.certified
        for _ in range(10):
            v, w = rng.normal(size=mdp.n_states), rng.normal(size=mdp.n_states)
            gap = _iterate_bellman(mdp, v, report.t_star) - _iterate_bellman(mdp, w, report.t_star)
            assert span(gap) <= report.dobrushin_beta * span(v - w) + 1e-10


def test_brute_force_tie_breaking():
    mdp = _duplicated_action_mdp()
    _, policy = brute_force_optimal(mdp)
    assert policy.to_list() == [0, 0, 0]
    assert solve_acoe(mdp).policy.to_list() == [0, 0, 0]


def test_brute_force_budget_and_multichain(identity_mdp):
    with pytest.raises(BudgetError) as info:
        brute_force_optimal(identity_mdp, budget=4)
    assert info.value.requested == 8 and info.value.exit_code == 4
    with pytest.raises(MultichainError):
        brute_force_optimal(identity_mdp)


def test_bellman_operator_contracts_in_span():
    mdp = random_mdp(np.random.default_rng(31), 4, 2, min_prob=0.1)
    report = check_ergodicity(mdp)
    assert report.t_star == 1
    rng = np.random.default_rng(32)
    for _ in range(50):
        v, w = rng.normal(size=4) * 5, rng.normal(size=4) * 5
        tv, _ = bellman_operator(mdp, v)
        tw, _ = bellman_operator(mdp, w)
        assert span(tv.values - tw.values) <= report.dobrushin_beta * span(v - w) + 1e-12


def test_long_horizon_costs_approach_average_cost(certified_instances):
    t = 10 ** 4
    for mdp in certified_instances(10, n_states=4, n_actions=2, seed=77):
        solution = solve_acoe(mdp)
        bias = span(solution.v_star)
        optimal_rows = finite_horizon_values(mdp, t)[-1]
        for x in range(mdp.n_states):
            assert abs(finite_horizon(mdp, t, solution.policy, x) / t - solution.j_star) <= bias / t + 1e-9
            assert abs(optimal_rows[x] - t * solution.j_star) <= 2 * bias + 1e-5
            assert abs(optimal_rows[x] / t - solution.j_star) < 0.01


def test_long_horizon_costs_of_every_policy(certified_instances):
    t = 10 ** 4
    for mdp in certified_instances(3, n_states=3, n_actions=2, seed=78):
        for index in range(mdp.n_policies):
            policy = policy_at(mdp, index)
            j = evaluate_policy(mdp, policy).j
            worst = max(abs(finite_horizon(mdp, t, policy, x) / t - j) for x in range(mdp.n_states))
            assert worst < 0.01


def test_mismatch_with_itself_has_no_gap(learning_mdp):
    record = mismatch(learning_mdp, learning_mdp)
    assert record.gap == pytest.approx(0.0, abs=1e-9)
    assert record.j_true_opt == record.j_design_opt
    assert record.design_policy == solve_acoe(learning_mdp).policy


def test_mismatch_gap_is_nonnegative(certified_instances):
    true_mdp, other = certified_instances(2, n_states=4, n_actions=3, seed=5)
    design = true_mdp.with_kernel(other.kernel)
    record = mismatch(true_mdp, design)
    assert record.gap >= -1e-9
    assert record.j_applied == pytest.approx(record.j_true_opt + record.gap)
    with pytest.raises(ShapeMismatchError):
        mismatch(true_mdp, random_mdp(np.random.default_rng(0), 3, 3, min_prob=0.1))


def test_mismatch_records_both_residuals(certified_instances):
    true_mdp, other = certified_instances(2, n_states=3, n_actions=2, seed=31)
    design = true_mdp.with_kernel(other.kernel)
    record = mismatch(true_mdp, design, tol=1e-9)
    assert record.residual_true == solve_acoe(true_mdp, tol=1e-9).residual
    assert record.residual_design == solve_acoe(design, tol=1e-9).residual
    assert 0.0 <= record.residual_true < 1e-9
    assert 0.0 <= record.residual_design < 1e-9
    doc = record.to_dict()
    assert doc['residual_true'] == record.residual_true
    assert doc['residual_design'] == record.residual_design


def test_mismatch_below_tolerance_raises(monkeypatch, learning_mdp):
    n = learning_mdp.n_states
    fake = PolicyEvaluation(j=-1.0, pi=Distribution(np.full(n, 1.0 / n)), v_hat=ValueVector(np.zeros(n)))
    monkeypatch.setattr(dp_solver, 'evaluate_policy', lambda mdp, policy, **kwargs: fake)
    with pytest.raises(ConvergenceError, match="negative mismatch gap"):
        mismatch(learning_mdp, learning_mdp)


def test_mismatch_gap_within_tolerance_is_kept(monkeypatch, learning_mdp):
    j_star = solve_acoe(learning_mdp, tol=1e-6).j_star
    n = learning_mdp.n_states
    fake = PolicyEvaluation(j=j_star - 5e-7, pi=Distribution(np.full(n, 1.0 / n)),
                            v_hat=ValueVector(np.zeros(n)))
    monkeypatch.setattr(dp_solver, 'evaluate_policy', lambda mdp, policy, **kwargs: fake)
    assert mismatch(learning_mdp, learning_mdp, tol=1e-6).gap == pytest.approx(-5e-7)
