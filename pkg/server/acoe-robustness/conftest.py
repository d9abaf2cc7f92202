"""Shared fixtures: small hand-built models and seeded random instances."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from mdp_core import ActionSpace, CostFn, FiniteMdp, Kernel, StateSpace, random_mdp


def make_mdp(probs, cost, state_coords=None, action_coords=None) -> FiniteMdp:
    probs = np.asarray(probs, dtype=float)
    n_states, n_actions = probs.shape[:2]
    states = StateSpace(labels=tuple(f"s{i}" for i in range(n_states)),
                        coords=state_coords if state_coords is not None else np.arange(n_states))
    actions = ActionSpace(labels=tuple(f"a{i}" for i in range(n_actions)),
                          coords=action_coords if action_coords is not None else np.arange(n_actions))
    return FiniteMdp(states, actions, Kernel(probs), CostFn(np.asarray(cost, dtype=float)))


@pytest.fixture
def stay_swap_mdp():
    """Two states; action 0 stays, action 1 swaps."""
    stay = np.eye(2)
    swap = stay[::-1]
    probs = np.stack([stay, swap], axis=1)
    return make_mdp(probs, [[0.0, 1.0], [2.0, 0.5]])


@pytest.fixture
def swap_only_mdp():
    """Periodic control-free chain 0 <-> 1 with costs 0 and 1."""
    return make_mdp([[[0.0, 1.0]], [[1.0, 0.0]]], [[0.0], [1.0]])


@pytest.fixture
def identity_mdp():
    """Every state absorbing: multichain under every policy."""
    probs = np.repeat(np.eye(3)[:, None, :], 2, axis=1)
    return make_mdp(probs, [[0.0, 1.0], [1.0, 0.5], [0.2, 0.3]])


@pytest.fixture
def certified_instances():
    """Factory of seeded random models with every kernel entry >= min_prob."""
    def build(count, n_states=5, n_actions=3, min_prob=0.02, seed=2024, cost_scale=1.0):
        rng = np.random.default_rng(seed)
        return [random_mdp(rng, n_states, n_actions, min_prob=min_prob, cost_scale=cost_scale)
                for _ in range(count)]
    return build


@pytest.fixture
def learning_mdp():
    """3-state 2-action instance used by the learning checks."""
    return random_mdp(np.random.default_rng(7), 3, 2, min_prob=0.1, cost_scale=0.5)
