"""
JSON codec for model, policy and result documents.

Model document:
    {"states": {"labels": [...], "coords": [...]},
     "actions": {"labels": [...], "coords": [...]},
     "kernel": [[[...]]],      # [state][action][next_state]
     "cost": [[...]]}          # [state][action]
Policy document:
    {"choice": [action index per state]}
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from errors import ValidationError
from mdp_core import ActionSpace, CostFn, FiniteMdp, Kernel, StateSpace, StationaryPolicy

logger = logging.getLogger(__name__)

# rows read from text are renormalized once if they are this close to 1
LOAD_ROW_TOL = 1e-9


def _require(doc: Dict, key: str, where: str):
    if not isinstance(doc, dict) or key not in doc:
        raise ValidationError(f"{where}: missing key {key!r}")
    return doc[key]


def _space_from_dict(doc, where, cls):
    labels = _require(doc, 'labels', where)
    coords = doc.get('coords') if isinstance(doc, dict) else None
    if not isinstance(labels, list):
        raise ValidationError(f"{where}.labels: expected a list")
    if coords is None:
        coords = list(range(len(labels)))
    return cls(labels=tuple(labels), coords=coords)


def model_from_dict(doc: Dict[str, Any]) -> FiniteMdp:
    """
    Build and validate a FiniteMdp from a decoded model document.

    Raises:
        ValidationError naming the first offending key or index.
    """
    states = _space_from_dict(_require(doc, 'states', 'model'), 'states', StateSpace)
    actions = _space_from_dict(_require(doc, 'actions', 'model'), 'actions', ActionSpace)
    try:
        probs = np.array(_require(doc, 'kernel', 'model'), dtype=float)
        cost = np.array(_require(doc, 'cost', 'model'), dtype=float)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"model: kernel/cost are not rectangular numeric arrays ({e})")
    expected = (len(states), len(actions), len(states))
    if probs.shape != expected:
        raise ValidationError(f"kernel: shape {probs.shape}, expected {expected}")
    sums = probs.sum(axis=-1)
    close = np.abs(sums - 1.0) <= LOAD_ROW_TOL
    if np.all(close) and np.all(probs >= 0.0):
        probs = probs / sums[..., None]
    return FiniteMdp(states, actions, Kernel(probs), CostFn(cost))


def model_to_dict(mdp: FiniteMdp) -> Dict[str, Any]:
    return {
        'states': {'labels': list(mdp.states.labels), 'coords': mdp.states.coords.tolist()},
        'actions': {'labels': list(mdp.actions.labels), 'coords': mdp.actions.coords.tolist()},
        'kernel': mdp.kernel.probs.tolist(),
        'cost': mdp.cost.values.tolist(),
    }


def policy_from_dict(doc: Dict[str, Any]) -> StationaryPolicy:
    choice = _require(doc, 'choice', 'policy')
    if not isinstance(choice, list) or not all(isinstance(a, int) for a in choice):
        raise ValidationError("policy.choice: expected a list of action indices")
    return StationaryPolicy(choice)


def policy_to_dict(policy: StationaryPolicy) -> Dict[str, Any]:
    return {'choice': policy.to_list()}


def read_json(path: Union[str, Path]) -> Any:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path}: file not found")
    try:
        with path.open('r', encoding='utf-8') as handle:
            return json.load(handle)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}")


def write_json(path: Union[str, Path], doc: Any):
    """Write a document with stable key order so reruns are byte-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', encoding='utf-8') as handle:
        json.dump(doc, handle, indent=2, sort_keys=True)
        handle.write('\n')


def load_model(path: Union[str, Path]) -> FiniteMdp:
    mdp = model_from_dict(read_json(path))
    logger.info(f"Loaded model {Path(path).name}: {mdp.n_states} states, {mdp.n_actions} actions")
    return mdp


def save_model(mdp: FiniteMdp, path: Union[str, Path]):
    write_json(path, model_to_dict(mdp))


def load_policy(path: Union[str, Path]) -> StationaryPolicy:
    return policy_from_dict(read_json(path))


def save_policy(policy: StationaryPolicy, path: Union[str, Path]):
    write_json(path, policy_to_dict(policy))
