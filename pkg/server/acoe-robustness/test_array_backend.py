"""
Batched kernel arithmetic: statistics against direct matrix powers, backend
fallback, and the chunked policy sweep feeding it.
"""

import numpy as np
import pytest

import array_backend
from array_backend import KernelArithmetic, get_kernel_arithmetic
from errors import BudgetError
from mdp_core import random_mdp
from metrics import dobrushin_coefficient, stationary_batch
from policy_sweep import PolicySweep, check_budget, policy_at, policy_choices, policy_count


def generate_batch(batch=6, n_states=4, seed=0):
    """Random row-stochastic matrices for the statistics checks."""
    rng = np.random.default_rng(seed)
    return rng.dirichlet(np.ones(n_states), size=(batch, n_states))


def test_numpy_statistics_match_direct_powers():
    matrices = generate_batch()
    pi, bad = stationary_batch(matrices)
    assert bad is None
    stats = KernelArithmetic('numpy').sweep_statistics(matrices, 5, pi)
    for t in range(1, 6):
        powers = np.stack([np.linalg.matrix_power(m, t) for m in matrices])
        assert stats['dobrushin'][t - 1] == pytest.approx(max(dobrushin_coefficient(p) for p in powers))
        assert np.allclose(stats['column_min'][t - 1], powers.min(axis=(0, 1)))
        assert np.allclose(stats['column_max'][t - 1], powers.max(axis=(0, 1)))
        assert stats['policy_min_mass'][t - 1] == pytest.approx(powers.min(axis=1).sum(axis=1).min())
        expected_tv = np.abs(powers - pi[:, None, :]).sum(axis=-1).max()
        assert stats['stationary_tv'][t - 1] == pytest.approx(expected_tv)
    # mixing: the sup distance to stationarity shrinks
    assert stats['stationary_tv'][-1] < stats['stationary_tv'][0]


def test_statistics_without_stationary_measures():
    stats = KernelArithmetic('numpy').sweep_statistics(generate_batch(), 3)
    assert np.all(np.isnan(stats['stationary_tv']))


@pytest.mark.skipif(array_backend.CUPY_AVAILABLE or array_backend.TORCH_AVAILABLE,
                    reason="accelerator library installed")
def test_unavailable_backend_falls_back_to_numpy():
    arithmetic = KernelArithmetic('cupy')
    assert arithmetic.device == 'numpy'
    info = arithmetic.get_performance_info()
    assert info['requested'] == 'cupy' and not info['cupy_available']


def test_global_instance_is_shared():
    assert get_kernel_arithmetic() is get_kernel_arithmetic()
    assert set(get_kernel_arithmetic().get_performance_info()) == {
        'requested', 'device', 'cupy_available', 'torch_available'}


def test_policy_choices_are_lexicographic():
    choices = policy_choices(3, 2, 0, 8)
    assert choices.tolist() == [[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1],
                                [1, 0, 0], [1, 0, 1], [1, 1, 0], [1, 1, 1]]
    assert policy_choices(3, 2, 5, 6).tolist() == [[1, 0, 1]]


def test_policy_budget():
    mdp = random_mdp(np.random.default_rng(0), 4, 3)
    assert policy_count(mdp) == 81
    assert check_budget(mdp, 81) == 81
    with pytest.raises(BudgetError):
        check_budget(mdp, 80)
    assert policy_at(mdp, 80).to_list() == [2, 2, 2, 2]


@pytest.mark.parametrize("max_workers", [1, 4])
def test_sweep_results_come_back_in_chunk_order(max_workers):
    mdp = random_mdp(np.random.default_rng(1), 5, 3)
    sweep = PolicySweep(mdp, batch_size=10, max_workers=max_workers)
    results = sweep.run(lambda choices, first: (first, choices.shape[0]))
    assert [first for first, _ in results] == list(range(0, 243, 10))
    assert sum(size for _, size in results) == 243
    assert sweep.completed_count == len(results)


def test_sweep_propagates_chunk_errors():
    mdp = random_mdp(np.random.default_rng(2), 3, 2)
    sweep = PolicySweep(mdp, batch_size=2, max_workers=2)

    def failing(choices, first):
        if first == 4:
            raise ValueError("chunk 4")
        return first

    with pytest.raises(ValueError, match="chunk 4"):
        sweep.run(failing)
