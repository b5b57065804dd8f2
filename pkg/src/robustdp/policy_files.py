"""JSON documents for policies and adversaries, keyed by state and action names.

Policy kinds:

* ``stationary``: ``{"rule": {state: [probs]}}``
* ``markov_schedule``: ``{"rules": [rule, ...], "tail": rule}``
* ``periodic``: ``{"rules": [rule, ...]}``
* ``finite_memory``: ``{"initial": m, "decide": [{"memory", "state", "probs"}],
  "update": [{"memory", "state", "action", "next_state", "to"}]}`` where
  ``state``, ``action`` and ``next_state`` may be ``null`` as wildcards.

Adversary kinds:

* ``stationary``: ``{"kernel": {state: [[probs per action]]}}``
* ``vertex``: ``{"choice": {state: index}}`` into each state's vertex list
* ``markov``: ``{"kernels": [kernel, ...], "tail": kernel, "periodic": bool}``
"""

from __future__ import annotations

import json

import numpy as np

from .model import ModelError, RobustMdp
from .policy import (
    FiniteMemoryAdversary,
    FiniteMemoryPolicy,
    markov_adversary,
    markov_schedule,
    periodic_schedule,
    stationary_adversary,
    stationary_policy,
    table_policy,
    vertex_kernel,
)


def _field(doc: dict, key: str, where: str):
    if key not in doc:
        raise ModelError(f"{where}: missing field {key!r}")
    return doc[key]


def _rule(model: RobustMdp, doc, where: str) -> np.ndarray:
    if not isinstance(doc, dict) or set(doc) != set(model.states):
        raise ModelError(f"{where}: rule must map every state to an action distribution")
    rows = np.array([doc[s] for s in model.states], dtype=float)
    if rows.shape != (model.n_states, model.n_actions):
        raise ModelError(f"{where}: each row needs {model.n_actions} probabilities")
    if np.any(rows < -1e-9) or np.max(np.abs(rows.sum(axis=1) - 1.0)) > 1e-9:
        raise ModelError(f"{where}: rows must be probability distributions")
    return rows


def _kernel(model: RobustMdp, doc, where: str) -> np.ndarray:
    if not isinstance(doc, dict) or set(doc) != set(model.states):
        raise ModelError(f"{where}: kernel must map every state to a matrix")
    kernel = np.array([doc[s] for s in model.states], dtype=float)
    if kernel.shape != (model.n_states, model.n_actions, model.n_states):
        raise ModelError(f"{where}: each state needs an {model.n_actions} x {model.n_states} matrix")
    if np.any(kernel < -1e-9) or np.max(np.abs(kernel.sum(axis=2) - 1.0)) > 1e-9:
        raise ModelError(f"{where}: rows must be probability distributions")
    return kernel


def _name_index(names: tuple, value, where: str):
    if value is None:
        return None
    if value not in names:
        raise ModelError(f"{where}: unknown name {value!r}")
    return names.index(value)


def policy_from_dict(doc: dict, model: RobustMdp) -> FiniteMemoryPolicy:
    if not isinstance(doc, dict):
        raise ModelError("policy: top level must be an object")
    kind = _field(doc, "kind", "policy")
    name = str(doc.get("name", kind))
    if kind == "stationary":
        return stationary_policy(_rule(model, _field(doc, "rule", "policy"), "policy.rule"), name)
    if kind == "markov_schedule":
        rules = [_rule(model, r, f"policy.rules[{i}]") for i, r in enumerate(_field(doc, "rules", "policy"))]
        return markov_schedule(rules, _rule(model, _field(doc, "tail", "policy"), "policy.tail"), name)
    if kind == "periodic":
        rules = [_rule(model, r, f"policy.rules[{i}]") for i, r in enumerate(_field(doc, "rules", "policy"))]
        return periodic_schedule(rules, name)
    if kind == "finite_memory":
        decide = {}
        for i, entry in enumerate(_field(doc, "decide", "policy")):
            where = f"policy.decide[{i}]"
            state = _name_index(model.states, entry.get("state"), where)
            probs = np.array(_field(entry, "probs", where), dtype=float)
            if probs.shape != (model.n_actions,):
                raise ModelError(f"{where}: probs needs {model.n_actions} entries")
            decide[(_field(entry, "memory", where), state)] = probs
        update = {}
        for i, entry in enumerate(doc.get("update", [])):
            where = f"policy.update[{i}]"
            key = (
                _field(entry, "memory", where),
                _name_index(model.states, entry.get("state"), where),
                _name_index(model.actions, entry.get("action"), where),
                _name_index(model.states, entry.get("next_state"), where),
            )
            update[key] = _field(entry, "to", where)
        try:
            return table_policy(_field(doc, "initial", "policy"), decide, update, model.n_actions, name)
        except ValueError as exc:
            raise ModelError(f"policy: {exc}") from None
    raise ModelError(f"policy.kind: unknown kind {kind!r}")


def adversary_from_dict(doc: dict, model: RobustMdp) -> FiniteMemoryAdversary:
    if not isinstance(doc, dict):
        raise ModelError("adversary: top level must be an object")
    kind = _field(doc, "kind", "adversary")
    name = str(doc.get("name", kind))
    if kind == "stationary":
        return stationary_adversary(_kernel(model, _field(doc, "kernel", "adversary"), "adversary.kernel"), name)
    if kind == "vertex":
        choice = _field(doc, "choice", "adversary")
        if not isinstance(choice, dict) or set(choice) != set(model.states):
            raise ModelError("adversary.choice: must map every state to a vertex index")
        try:
            kernel = vertex_kernel(model, [choice[s] for s in model.states])
        except (IndexError, TypeError) as exc:
            raise ModelError(f"adversary.choice: {exc}") from None
        return stationary_adversary(kernel, name)
    if kind == "markov":
        kernels = [_kernel(model, k, f"adversary.kernels[{i}]") for i, k in enumerate(_field(doc, "kernels", "adversary"))]
        periodic = bool(doc.get("periodic", False))
        if not kernels:
            raise ModelError("adversary.kernels: need at least one kernel")
        tail = kernels[-1] if periodic else _kernel(model, _field(doc, "tail", "adversary"), "adversary.tail")
        return markov_adversary(kernels, tail, name, period=periodic)
    raise ModelError(f"adversary.kind: unknown kind {kind!r}")


def load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as handle:
            return json.load(handle)
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: not valid JSON ({exc})") from None
