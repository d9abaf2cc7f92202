"""Tests for the perturbation families and their registry."""

import numpy as np
import pytest

from dp_solver import evaluate_policy, finite_horizon, mismatch, solve_acoe
from errors import ConfigError, ValidationError
from mdp_core import Distribution, StationaryPolicy, random_mdp
from metrics import kernel_distance
from model_io import save_model
from perturbations import (PerturbationFamily, build_family, family_coin_vs_delta, family_constant,
                           family_drift_grid, family_noise_mixture, family_tv_counterexample,
                           family_weak_not_tv, list_families, model_from_params, power_rate)


@pytest.mark.parametrize("n", [2, 5, 10])
def test_drift_grid_continuity_failure(n):
    family = family_drift_grid(10)
    member, limit = family.member(n), family.limit_at(n)
    hold = StationaryPolicy.constant(member.n_states)
    assert finite_horizon(member, 10 ** 4, hold, 0) / 10 ** 4 == pytest.approx(1.0, abs=0.05)
    assert finite_horizon(limit, 10 ** 4, hold, 0) == 0.0
    assert member.n_states == 2 * n + 2
    assert kernel_distance(member, limit, 'bl', 'sup_xu') <= 1.0 / n + 1e-12


def test_drift_grid_top_state_is_absorbing():
    member = family_drift_grid(3).member(3)
    assert member.kernel.probs[-1, 0, -1] == 1.0
    assert member.cost.values[-1, 0] == 1.0
    assert family_drift_grid(3).validate([1, 2, 3])['mode'] == 'bl'


def test_coin_vs_delta_policies_differ_on_limit():
    family = family_coin_vs_delta()
    gamma1, gamma2 = family.fixture('gamma1', 1), family.fixture('gamma2', 1)
    limit = family.limit
    # x0 = 0 is index 1 on the grid {-1, 0, 1}
    assert finite_horizon(limit, 1000, gamma1, 1) / 1000 == pytest.approx(0.0, abs=1e-9)
    assert finite_horizon(limit, 1000, gamma2, 1) / 1000 == pytest.approx(1.0, abs=1e-9)
    member = family.member(7)
    assert evaluate_policy(member, gamma1).j == pytest.approx(0.0, abs=1e-12)
    assert evaluate_policy(member, gamma2).j == pytest.approx(0.0, abs=1e-12)
    assert family.fixture_names == ['gamma1', 'gamma2']
    assert family.validate([1, 2])['distances'] == []


@pytest.mark.parametrize("n", [2, 4, 8, 16])
def test_tv_counterexample_needs_acoe_selectors(n):
    family = family_tv_counterexample(16)
    member, limit = family.member(n), family.limit_at(n)
    fixture = family.fixture('optimal_from_minus_one', n)
    t = 10 ** 6
    assert finite_horizon(member, t, fixture, 0) / t == pytest.approx(1.0 / (2 * n), abs=1e-6)
    assert evaluate_policy(member, fixture).j == pytest.approx(1.0 / (2 * n), abs=1e-12)
    assert evaluate_policy(limit, fixture).j == pytest.approx(3.0, abs=1e-12)
    assert solve_acoe(limit).j_star == pytest.approx(0.0, abs=1e-12)
    record = mismatch(limit, member)
    assert abs(record.gap) < 1e-6
    assert kernel_distance(member, limit, 'tv', 'sup_xu') == 2.0


def test_tv_counterexample_decays_weakly():
    family = family_tv_counterexample(16)
    report = family.validate([2, 4, 8, 16])
    assert report['mode'] == 'bl'
    assert report['distances'][-1] < report['distances'][0]


def test_weak_not_tv_contrast():
    family = family_weak_not_tv(10)
    j_limit = solve_acoe(family.limit).j_star
    assert j_limit == 0.0
    for n in range(1, 11):
        member = family.member(n)
        assert kernel_distance(member, family.limit, 'tv', 'sup_xu') == 2.0
        assert abs(solve_acoe(member).j_star - j_limit) == 1.0 / n
        assert kernel_distance(member, family.limit, 'bl', 'sup_xu') <= 1.0 / n + 1e-12
    assert family.validate(list(range(1, 11)))['claim'] == 'weak'


def test_noise_mixture_distances():
    base = random_mdp(np.random.default_rng(3), 4, 2, min_prob=0.1)
    rate = power_rate(1.0, 1.0)
    family = family_noise_mixture(base, Distribution.uniform(4), rate)
    for n in (1, 2, 5, 50):
        assert kernel_distance(family.member(n), base, 'tv', 'sup_xu') <= 2 * rate(n) + 1e-12
    report = family.validate([1, 2, 4, 8, 16])
    assert report['mode'] == 'tv'
    assert family_noise_mixture(base, Distribution.uniform(4), power_rate(0.0)).member(3) is base


def test_noise_mixture_mismatch_shrinks():
    base = random_mdp(np.random.default_rng(3), 4, 2, min_prob=0.1)
    family = family_noise_mixture(base, Distribution.point_mass(4, 0), power_rate(1.0, 1.0))
    gaps = [mismatch(base, family.member(n)).gap for n in (1, 10 ** 5)]
    assert all(gap >= -1e-9 for gap in gaps)
    assert gaps[-1] < 1e-3
    assert gaps[-1] <= gaps[0] + 1e-9


def test_constant_family_has_zero_distance():
    base = random_mdp(np.random.default_rng(4), 3, 2, min_prob=0.1)
    family = family_constant(base)
    assert family.member(9) is base
    assert family.distances([1, 5], 'tv').tolist() == [0.0, 0.0]


def test_validation_rejects_false_tv_claim():
    weak = family_weak_not_tv(5)
    bad = PerturbationFamily('mislabelled', weak.member, weak.limit_at, 'tv', n_max=5)
    with pytest.raises(ValidationError, match="claim 'tv' fails"):
        bad.validate([1, 2, 3, 4, 5])


def test_validation_rejects_growing_distance():
    base = random_mdp(np.random.default_rng(5), 3, 2, min_prob=0.1)
    growing = family_noise_mixture(base, Distribution.point_mass(3, 2), lambda n: min(1.0, n / 10.0))
    with pytest.raises(ValidationError, match="n = 2"):
        growing.validate([1, 2, 3])


def test_member_index_checks():
    family = family_weak_not_tv(4)
    assert family.member(2) is family.member(2)
    with pytest.raises(ValidationError, match="exceeds n_max"):
        family.member(5)
    with pytest.raises(ValidationError):
        family.member(0)
    with pytest.raises(ValidationError, match="no policy fixture"):
        family.fixture('gamma1', 1)
    with pytest.raises(ValidationError):
        family_noise_mixture(random_mdp(np.random.default_rng(0), 3, 2), Distribution.uniform(4), power_rate())


def test_registry_lists_and_builds():
    names = [entry['name'] for entry in list_families()]
    assert names == sorted(names)
    assert {'drift_grid', 'coin_vs_delta', 'tv_counterexample', 'weak_not_tv',
            'noise_mixture', 'constant'} <= set(names)
    family = build_family('noise_mixture', {'random': {'seed': 1, 'n_states': 3, 'n_actions': 2},
                                            'rate_scale': 0.5, 'contaminant': 1})
    assert family.convergence_claim == 'tv'
    assert build_family('weak_not_tv', {'n_max': 3}).n_max == 3


def test_registry_errors_carry_paths():
    with pytest.raises(ConfigError) as info:
        build_family('nope', {}, path="$.family")
    assert info.value.path == "$.family.name"
    with pytest.raises(ConfigError) as info:
        build_family('drift_grid', {'n_max': 0}, path="$.family")
    assert info.value.path == "$.family.params.n_max"
    with pytest.raises(ConfigError) as info:
        build_family('noise_mixture', {'random': {}, 'contaminant': 'lumpy'}, path="$.family")
    assert info.value.path == "$.family.params.contaminant"
    with pytest.raises(ConfigError):
        model_from_params({}, "$.family.params")


def test_model_from_file(tmp_path):
    base = random_mdp(np.random.default_rng(8), 3, 2, min_prob=0.1)
    save_model(base, tmp_path / "base.json")
    loaded = model_from_params({'model': str(tmp_path / "base.json")}, "params")
    assert loaded.n_states == 3
    assert np.allclose(loaded.kernel.probs, base.kernel.probs)
