"""Finite-memory controllers and adversaries, simulation and evaluation.

A policy is a deterministic memory automaton: ``decide(memory, state)``
returns an action distribution and ``update(memory, state, action,
next_state)`` returns the next memory. Stationary policies have a single
memory value and Markov schedules count time. Adversaries have the same
shape but decide a whole |A| x |S| matrix per (memory, state), which covers
both S- and SA-rectangular choices.

Memory values must be hashable; the reachable memory set is discovered
lazily, so policies with large but finite memory (such as the
explore-then-exploit learner) need no explicit enumeration.
"""

from __future__ import annotations

import bisect
import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Hashable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import bellman, linprog
from .model import GENERAL, HULL, SA, ModelError, RobustMdp

STATIONARY = "stationary"
MARKOV = "markov"
HISTORY = "history"
INFO_CLASSES = (HISTORY, MARKOV, STATIONARY)
_INFO_RANK = {STATIONARY: 0, MARKOV: 1, HISTORY: 2}

LINEAR_SOLVE = "linear_solve"
EXACT_TRUNCATED = "exact_truncated"
MONTE_CARLO = "monte_carlo"

DEFAULT_STATE_CAP = 10**6
DENSE_LIMIT = 400


class EvaluationError(RuntimeError):
    """Evaluation could not be carried out within the configured caps."""


def info_within(inner: str, outer: str) -> bool:
    """Whether information class ``inner`` is contained in ``outer``."""
    return _INFO_RANK[inner] <= _INFO_RANK[outer]


@dataclass(frozen=True, eq=False)
class FiniteMemoryPolicy:
    initial: Hashable
    decide_fn: Callable
    update_fn: Callable
    info_class: str = HISTORY
    name: str = ""

    def decide(self, memory, state: int) -> np.ndarray:
        return self.decide_fn(memory, state)

    def update(self, memory, state: int, action: int, next_state: int):
        return self.update_fn(memory, state, action, next_state)

    def memory_states(self, model: RobustMdp, cap: int = 10**5) -> list:
        """Memory values reachable when any next state may follow any action."""
        seen = {self.initial: None}
        queue = deque([self.initial])
        n_s = model.n_states
        while queue:
            mem = queue.popleft()
            for s in range(n_s):
                row = self.decide(mem, s)
                for a in np.flatnonzero(row > 0):
                    for s2 in range(n_s):
                        nxt = self.update(mem, s, int(a), s2)
                        if nxt not in seen:
                            if len(seen) >= cap:
                                raise EvaluationError(f"more than {cap} memory states")
                            seen[nxt] = None
                            queue.append(nxt)
        return list(seen)


@dataclass(frozen=True, eq=False)
class FiniteMemoryAdversary:
    initial: Hashable
    decide_fn: Callable
    update_fn: Callable
    info_class: str = HISTORY
    name: str = ""

    def decide(self, memory, state: int) -> np.ndarray:
        """Transition matrix (|A| x |S|) used at ``state``."""
        return self.decide_fn(memory, state)

    def update(self, memory, state: int, action: int, next_state: int):
        return self.update_fn(memory, state, action, next_state)


# ---------------------------------------------------------------- constructors


def _rows_array(rows, n_states: int | None = None) -> np.ndarray:
    arr = np.array(rows, dtype=float)
    if arr.ndim != 2:
        raise ValueError("decision rule must be a (states x actions) array")
    if np.any(arr < -1e-12) or np.max(np.abs(arr.sum(axis=1) - 1.0)) > 1e-9:
        raise ValueError("decision rule rows must be probability distributions")
    if n_states is not None and arr.shape[0] != n_states:
        raise ValueError(f"decision rule needs {n_states} rows")
    arr.setflags(write=False)
    return arr


def stationary_policy(rows, name: str = "stationary") -> FiniteMemoryPolicy:
    rule = _rows_array(rows)
    return FiniteMemoryPolicy(0, lambda m, s: rule[s], lambda m, s, a, s2: 0, STATIONARY, name)


def deterministic_policy(actions, n_actions: int, name: str = "deterministic") -> FiniteMemoryPolicy:
    rows = np.zeros((len(actions), n_actions))
    rows[np.arange(len(actions)), list(actions)] = 1.0
    return stationary_policy(rows, name)


def markov_schedule(rules, tail, name: str = "markov schedule") -> FiniteMemoryPolicy:
    """Play ``rules[t]`` at time ``t`` and ``tail`` once the list is exhausted."""
    rules = [_rows_array(r) for r in rules]
    tail = _rows_array(tail)
    horizon = len(rules)

    def decide(t, s):
        return rules[t][s] if t < horizon else tail[s]

    def update(t, s, a, s2):
        return min(t + 1, horizon)

    info = STATIONARY if horizon == 0 else MARKOV
    return FiniteMemoryPolicy(0, decide, update, info, name)


def periodic_schedule(rules, name: str = "periodic schedule") -> FiniteMemoryPolicy:
    """Cycle through ``rules`` forever (memory is time modulo the period)."""
    rules = [_rows_array(r) for r in rules]
    period = len(rules)
    if period == 0:
        raise ValueError("need at least one rule")
    info = STATIONARY if period == 1 else MARKOV
    return FiniteMemoryPolicy(
        0, lambda t, s: rules[t][s], lambda t, s, a, s2: (t + 1) % period, info, name
    )


def table_policy(initial, decide: dict, update: dict, n_actions: int, name: str = "finite memory") -> FiniteMemoryPolicy:
    """Explicit automaton; ``update`` keys may use ``None`` as a wildcard.

    ``decide[(memory, state)]`` is an action row; ``update`` maps
    ``(memory, state, action, next_state)`` to memory, trying exact keys
    first and then keys with wildcards in later positions.
    """
    decide = {k: _rows_array([v])[0] for k, v in decide.items()}

    def decide_fn(m, s):
        try:
            return decide[(m, s)]
        except KeyError:
            if (m, None) in decide:
                return decide[(m, None)]
            raise EvaluationError(f"no decision for memory {m!r} at state {s}") from None

    patterns = [
        lambda m, s, a, s2: (m, s, a, s2),
        lambda m, s, a, s2: (m, None, a, s2),
        lambda m, s, a, s2: (m, s, None, s2),
        lambda m, s, a, s2: (m, s, a, None),
        lambda m, s, a, s2: (m, None, None, s2),
        lambda m, s, a, s2: (m, None, a, None),
        lambda m, s, a, s2: (m, s, None, None),
        lambda m, s, a, s2: (m, None, None, None),
    ]

    def update_fn(m, s, a, s2):
        for pattern in patterns:
            key = pattern(m, s, a, s2)
            if key in update:
                return update[key]
        return m

    return FiniteMemoryPolicy(initial, decide_fn, update_fn, HISTORY, name)


def stationary_adversary(kernel, name: str = "stationary kernel") -> FiniteMemoryAdversary:
    kernel = np.array(kernel, dtype=float)
    if kernel.ndim != 3:
        raise ValueError("kernel must have shape (S, A, S)")
    kernel.setflags(write=False)
    return FiniteMemoryAdversary(0, lambda m, s: kernel[s], lambda m, s, a, s2: 0, STATIONARY, name)


def markov_adversary(kernels, tail, name: str = "markov adversary", period: bool = False) -> FiniteMemoryAdversary:
    """Time-indexed kernels; either a prefix then ``tail`` or a repeating cycle."""
    kernels = [np.array(k, dtype=float) for k in kernels]
    tail = np.array(tail, dtype=float)
    horizon = len(kernels)
    if period:
        return FiniteMemoryAdversary(
            0, lambda t, s: kernels[t][s], lambda t, s, a, s2: (t + 1) % horizon, MARKOV, name
        )
    return FiniteMemoryAdversary(
        0,
        lambda t, s: kernels[t][s] if t < horizon else tail[s],
        lambda t, s, a, s2: min(t + 1, horizon),
        MARKOV,
        name,
    )


def vertex_kernel(model: RobustMdp, choice) -> np.ndarray:
    """Kernel built from ambiguity vertices.

    ``choice[s]`` is a vertex index or a weight vector over the vertices of
    ``P_s``; for SA models ``choice[s]`` is a per-action sequence of those.
    """
    amb = model.ambiguity
    n_s, n_a = model.n_states, model.n_actions
    kernel = np.zeros((n_s, n_a, n_s))
    for s in range(n_s):
        if amb.rectangularity == SA:
            for a in range(n_a):
                kernel[s, a] = _pick(amb.sets[s][a].vertices, choice[s][a])
        elif amb.rectangularity == GENERAL:
            raise ModelError("vertex kernels need S or SA sets")
        else:
            kernel[s] = _pick(amb.sets[s].vertices, choice[s])
    return kernel


def _pick(vertices: np.ndarray, which) -> np.ndarray:
    if np.ndim(which) == 0:
        return vertices[int(which)]
    weights = np.asarray(which, float)
    return np.tensordot(weights, vertices, axes=1)


def adversary_membership(model: RobustMdp, adversary: FiniteMemoryAdversary, policy: FiniteMemoryPolicy | None = None,
                         mu=None, cap: int = 10**5, tol: float = 1e-9) -> list[str]:
    """Check every decided matrix against the ambiguity set; returns diagnostics."""
    amb = model.ambiguity
    n_s = model.n_states
    problems = []
    seen = set()
    queue = deque()
    starts = range(n_s) if mu is None else np.flatnonzero(np.asarray(mu) > 0)
    for s in starts:
        queue.append((adversary.initial, int(s)))
    while queue:
        node = queue.popleft()
        if node in seen:
            continue
        if len(seen) >= cap:
            problems.append(f"membership check stopped after {cap} adversary states")
            break
        seen.add(node)
        mem, s = node
        matrix = np.asarray(adversary.decide(mem, s))
        if not _matrix_member(amb, s, matrix, tol):
            problems.append(f"adversary memory {mem!r} state {model.states[s]}: matrix outside the ambiguity set")
        for a in range(model.n_actions):
            for s2 in np.flatnonzero(matrix[a] > 0):
                queue.append((adversary.update(mem, s, a, int(s2)), int(s2)))
    return problems


def _matrix_member(amb, s: int, matrix: np.ndarray, tol: float) -> bool:
    if amb.rectangularity == SA:
        return all(_member(amb.sets[s][a], matrix[a], tol) for a in range(matrix.shape[0]))
    return _member(amb.sets[s], matrix, tol)


def _member(dset, element: np.ndarray, tol: float) -> bool:
    verts = dset.vertices
    diffs = np.abs(verts - element[None]).reshape(len(verts), -1).max(axis=1)
    if np.any(diffs <= tol):
        return True
    if dset.kind == HULL:
        return linprog.in_convex_hull(element, verts, tol)
    return False


# ---------------------------------------------------------------- simulation


@dataclass(frozen=True)
class Trajectory:
    states: tuple
    actions: tuple

    def discounted_return(self, rewards: np.ndarray, gamma: float) -> float:
        total, weight = 0.0, 1.0
        for s, a in zip(self.states, self.actions):
            total += weight * rewards[s][a]
            weight *= gamma
        return total


def _stream(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def _cumulative(probs) -> list:
    return np.cumsum(np.asarray(probs, float), axis=-1).tolist()


def _draw_cum(rng: np.random.Generator, cum: list) -> int:
    idx = bisect.bisect_right(cum, rng.random() * cum[-1])
    return min(idx, len(cum) - 1)


def _draw(rng: np.random.Generator, probs: np.ndarray) -> int:
    return _draw_cum(rng, _cumulative(probs))


def _as_array(x) -> np.ndarray:
    return np.asarray(x, float)


class _DecisionCache:
    """Memoizes decisions; policies and adversaries are pure functions."""

    def __init__(self, fn, transform=_as_array):
        self.fn = fn
        self.transform = transform
        self.store = {}

    def __call__(self, memory, state):
        key = (memory, state)
        hit = self.store.get(key)
        if hit is None:
            hit = self.transform(self.fn(memory, state))
            self.store[key] = hit
        return hit


def _rollout(model, policy, adversary, mu, horizon, rng, pdecide, adecide):
    s = _draw(rng, mu)
    cm, am = policy.initial, adversary.initial
    states, actions = [s], []
    for t in range(horizon):
        a = _draw_cum(rng, pdecide(cm, s))
        s2 = _draw_cum(rng, adecide(am, s)[a])
        actions.append(a)
        cm = policy.update(cm, s, a, s2)
        am = adversary.update(am, s, a, s2)
        s = s2
        states.append(s)
    a = _draw_cum(rng, pdecide(cm, s))
    actions.append(a)
    return Trajectory(tuple(states), tuple(actions))


def simulate(model: RobustMdp, policy: FiniteMemoryPolicy, adversary: FiniteMemoryAdversary, mu, horizon: int,
             seed: int) -> Trajectory:
    """Sample ``(s_0, a_0, ..., s_T, a_T)``; the stream depends only on ``seed``."""
    mu = np.asarray(mu, float)
    pdecide = _DecisionCache(policy.decide, _cumulative)
    adecide = _DecisionCache(adversary.decide, _cumulative)
    return _rollout(model, policy, adversary, mu, int(horizon), _stream(seed, 0), pdecide, adecide)


# ---------------------------------------------------------------- exact evaluation


@dataclass(frozen=True)
class EvalResult:
    value: float
    error_bound: float
    method: str
    meta: dict = field(default_factory=dict)


def truncation_horizon(gamma: float, eps: float) -> int:
    return max(1, int(math.ceil(math.log(eps * (1.0 - gamma) / 2.0) / math.log(gamma))))


@dataclass
class _Chain:
    nodes: list
    matrix: sp.csr_matrix
    rewards: np.ndarray
    start: np.ndarray


def _build_chain(model, policy, adversary, mu, cap) -> _Chain:
    rewards = np.asarray(model.rewards)
    pdecide, adecide = _DecisionCache(policy.decide), _DecisionCache(adversary.decide)
    index: dict = {}
    nodes: list = []
    queue = deque()

    def visit(node):
        idx = index.get(node)
        if idx is None:
            if len(nodes) >= cap:
                raise EvaluationError(f"augmented chain exceeds {cap} states")
            idx = len(nodes)
            index[node] = idx
            nodes.append(node)
            queue.append(node)
        return idx

    start = {}
    for s in np.flatnonzero(mu > 0):
        start[visit((policy.initial, adversary.initial, int(s)))] = mu[s]
    rows, cols, vals, node_rewards = [], [], [], []
    while queue:
        cm, am, s = node = queue.popleft()
        i = index[node]
        phi = pdecide(cm, s)
        matrix = adecide(am, s)
        node_rewards.append((i, float(phi @ rewards[s])))
        for a in np.flatnonzero(phi > 0):
            a = int(a)
            row = matrix[a]
            for s2 in np.flatnonzero(row > 0):
                s2 = int(s2)
                j = visit((policy.update(cm, s, a, s2), adversary.update(am, s, a, s2), s2))
                rows.append(i)
                cols.append(j)
                vals.append(phi[a] * row[s2])
    n = len(nodes)
    matrix = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    r = np.zeros(n)
    for i, value in node_rewards:
        r[i] = value
    start_vec = np.zeros(n)
    for i, w in start.items():
        start_vec[i] = w
    return _Chain(nodes, matrix, r, start_vec)


def _solve_linear(matrix: sp.csr_matrix, rewards: np.ndarray, gamma: float) -> tuple[np.ndarray, float]:
    n = matrix.shape[0]
    if n <= DENSE_LIMIT:
        system = np.eye(n) - gamma * matrix.toarray()
        values = np.linalg.solve(system, rewards)
        residual = float(np.max(np.abs(system @ values - rewards))) if n else 0.0
    else:
        system = (sp.identity(n, format="csc") - gamma * matrix).tocsc()
        values = spla.spsolve(system, rewards)
        residual = float(np.max(np.abs(system @ values - rewards)))
    # ||v - v_true|| <= ||(I - gamma P)^-1|| * residual
    return values, residual / (1.0 - gamma)


def _truncated_forward(model, policy, adversary, mu, horizon) -> float:
    rewards = np.asarray(model.rewards)
    gamma = model.gamma
    pdecide, adecide = _DecisionCache(policy.decide), _DecisionCache(adversary.decide)
    dist = {}
    for s in np.flatnonzero(mu > 0):
        key = (policy.initial, adversary.initial, int(s))
        dist[key] = dist.get(key, 0.0) + float(mu[s])
    total, weight = 0.0, 1.0
    for t in range(horizon):
        nxt: dict = {}
        for (cm, am, s), w in dist.items():
            phi = pdecide(cm, s)
            total += weight * w * float(phi @ rewards[s])
            matrix = adecide(am, s)
            for a in np.flatnonzero(phi > 0):
                a = int(a)
                for s2 in np.flatnonzero(matrix[a] > 0):
                    s2 = int(s2)
                    key = (policy.update(cm, s, a, s2), adversary.update(am, s, a, s2), s2)
                    nxt[key] = nxt.get(key, 0.0) + w * phi[a] * matrix[a, s2]
        dist = nxt
        weight *= gamma
    return total


def evaluate_exact(model: RobustMdp, policy: FiniteMemoryPolicy, adversary: FiniteMemoryAdversary, mu,
                   eps: float = 1e-10, cap: int = DEFAULT_STATE_CAP, method: str | None = None) -> EvalResult:
    """Exact discounted value on the (controller memory, adversary memory, state) chain.

    Uses a linear solve when the reachable chain has at most ``cap`` states
    and otherwise (or when ``method == "exact_truncated"``) a forward
    distribution recursion truncated at the horizon that guarantees ``eps``.
    """
    mu = np.asarray(mu, float)
    gamma = model.gamma
    if method in (None, LINEAR_SOLVE):
        try:
            chain = _build_chain(model, policy, adversary, mu, cap)
        except EvaluationError:
            if method == LINEAR_SOLVE:
                raise
        else:
            values, bound = _solve_linear(chain.matrix, chain.rewards, gamma)
            return EvalResult(float(chain.start @ values), bound, LINEAR_SOLVE, {"states": len(chain.nodes)})
    horizon = truncation_horizon(gamma, eps)
    value = _truncated_forward(model, policy, adversary, mu, horizon)
    return EvalResult(value, gamma**horizon * 2.0 / (1.0 - gamma), EXACT_TRUNCATED, {"horizon": horizon})


def evaluate_mc(model: RobustMdp, policy: FiniteMemoryPolicy, adversary: FiniteMemoryAdversary, mu, n_samples: int,
                eps: float = 1e-3, seed: int = 0) -> EvalResult:
    """Mean of truncated discounted returns with a 95% normal half-width."""
    if n_samples < 2:
        raise ValueError("need at least two trajectories")
    mu = np.asarray(mu, float)
    horizon = truncation_horizon(model.gamma, eps)
    rewards = np.asarray(model.rewards).tolist()
    pdecide = _DecisionCache(policy.decide, _cumulative)
    adecide = _DecisionCache(adversary.decide, _cumulative)
    returns = np.empty(n_samples)
    for i in range(n_samples):
        traj = _rollout(model, policy, adversary, mu, horizon - 1, _stream(seed, i), pdecide, adecide)
        returns[i] = traj.discounted_return(rewards, model.gamma)
    spread = 0.0 if returns.min() == returns.max() else returns.std(ddof=1)
    half_width = 1.959963984540054 * spread / math.sqrt(n_samples)
    return EvalResult(float(returns.mean()), float(half_width), MONTE_CARLO,
                      {"samples": n_samples, "horizon": horizon, "seed": int(seed)})


# ---------------------------------------------------------------- robust evaluation


@dataclass(frozen=True)
class RobustValue:
    """Worst-case value of a policy over an adversary class.

    ``value`` is attained by ``adversary``; the true infimum lies in
    ``[lower, value]`` and ``exact`` says whether that interval is closed.
    """

    value: float
    lower: float
    exact: bool
    adversary_class: str
    adversary: FiniteMemoryAdversary | None
    meta: dict = field(default_factory=dict)


class _Reach:
    """Controller-memory x state nodes reachable under any adversary choice."""

    def __init__(self, model: RobustMdp, policy: FiniteMemoryPolicy, mu, cap: int):
        amb = model.ambiguity
        if amb.rectangularity == GENERAL:
            raise EvaluationError("robust evaluation needs S- or SA-rectangular sets")
        self.model = model
        n_s, n_a = model.n_states, model.n_actions
        if amb.rectangularity == SA:
            self.vertices = [[np.asarray(amb.sets[s][a].vertices) for a in range(n_a)] for s in range(n_s)]
            support = [[np.flatnonzero(v.max(axis=0) > 0) for v in row] for row in self.vertices]
        else:
            self.vertices = [np.asarray(amb.sets[s].vertices) for s in range(n_s)]
            support = [[np.flatnonzero(v[:, a].max(axis=0) > 0) for a in range(n_a)] for v in self.vertices]
        self.sa = amb.rectangularity == SA
        rewards = np.asarray(model.rewards)
        decide = _DecisionCache(policy.decide)
        self.index: dict = {}
        self.nodes: list = []
        self.phi: list = []
        self.reward: list = []
        # targets[i][a] = (next states array, next node indices array)
        self.targets: list = []
        queue = deque()

        def visit(node):
            idx = self.index.get(node)
            if idx is None:
                if len(self.nodes) >= cap:
                    raise EvaluationError(f"augmented chain exceeds {cap} states")
                idx = len(self.nodes)
                self.index[node] = idx
                self.nodes.append(node)
                queue.append(node)
            return idx

        mu = np.asarray(mu, float)
        self.start = {}
        for s in np.flatnonzero(mu > 0):
            self.start[visit((policy.initial, int(s)))] = float(mu[s])
        pending = []
        while queue:
            mem, s = node = queue.popleft()
            phi = decide(mem, s)
            per_action = {}
            for a in np.flatnonzero(phi > 0):
                a = int(a)
                nexts = support[s][a]
                idxs = [visit((policy.update(mem, s, a, int(s2)), int(s2))) for s2 in nexts]
                per_action[a] = (nexts, np.array(idxs, dtype=int))
            pending.append((self.index[node], phi, float(phi @ rewards[s]), per_action))
        pending.sort(key=lambda item: item[0])
        for _, phi, reward, per_action in pending:
            self.phi.append(phi)
            self.reward.append(reward)
            self.targets.append(per_action)
        self.reward = np.array(self.reward)
        self.n = len(self.nodes)
        self.start_vec = np.zeros(self.n)
        for i, w in self.start.items():
            self.start_vec[i] = w

    def state_of(self, i: int) -> int:
        return self.nodes[i][1]

    def n_choices(self, i: int, a: int | None = None) -> int:
        s = self.state_of(i)
        if self.sa:
            return len(self.vertices[s][a])
        return len(self.vertices[s])

    def row(self, i: int, choice) -> tuple[np.ndarray, np.ndarray]:
        """Successor indices and probabilities of node ``i`` under a vertex choice.

        ``choice`` is a vertex index (S) or a per-action dict of indices (SA).
        Weight vectors over vertices are accepted in place of indices.
        """
        s = self.state_of(i)
        cols, vals = [], []
        for a, (nexts, idxs) in self.targets[i].items():
            if self.sa:
                probs = _pick(self.vertices[s][a], choice[a])[nexts]
            else:
                probs = _pick(self.vertices[s], choice)[a, nexts]
            cols.append(idxs)
            vals.append(self.phi[i][a] * probs)
        if not cols:
            return np.zeros(0, int), np.zeros(0)
        return np.concatenate(cols), np.concatenate(vals)

    def matrix(self, choices) -> sp.csr_matrix:
        rows, cols, vals = [], [], []
        for i in range(self.n):
            c, v = self.row(i, choices[i])
            rows.append(np.full(len(c), i))
            cols.append(c)
            vals.append(v)
        if not rows:
            return sp.csr_matrix((self.n, self.n))
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(self.n, self.n)
        )


def _history_worst(reach: _Reach, gamma: float, tol: float):
    """Policy iteration for the adversary's minimization MDP on the reach graph."""
    n = reach.n
    if reach.sa:
        choices = [{a: 0 for a in reach.targets[i]} for i in range(n)]
    else:
        choices = [0] * n
    values = None
    for _ in range(10_000):
        values, _ = _solve_linear(reach.matrix(choices), reach.reward, gamma)
        changed = False
        for i in range(n):
            s = reach.state_of(i)
            if reach.sa:
                new = {}
                for a, (nexts, idxs) in reach.targets[i].items():
                    conts = reach.vertices[s][a][:, nexts] @ values[idxs]
                    current = conts[choices[i][a]]
                    k = int(np.argmin(conts))
                    new[a] = k if conts[k] < current - 1e-12 * max(1.0, abs(current)) else choices[i][a]
                if new != choices[i]:
                    choices[i] = new
                    changed = True
            else:
                scores = []
                for k in range(len(reach.vertices[s])):
                    c, v = reach.row(i, k)
                    scores.append(float(v @ values[c]))
                scores = np.array(scores)
                current = scores[choices[i]]
                k = int(np.argmin(scores))
                if scores[k] < current - 1e-12 * max(1.0, abs(current)):
                    choices[i] = k
                    changed = True
        if not changed:
            break
    else:
        raise EvaluationError("adversary policy iteration did not terminate")
    # Bellman residual of the minimization operator at the final values
    backup = reach.reward + gamma * (reach.matrix(choices) @ values)
    residual = float(np.max(np.abs(backup - values))) if n else 0.0
    if residual > tol:
        raise EvaluationError(f"adversary fixed point residual {residual:.3g} above {tol:g}")
    return values, choices, residual


def _history_adversary(reach: _Reach, policy: FiniteMemoryPolicy, choices) -> FiniteMemoryAdversary:
    """The worst adversary tracks the controller's memory and plays per node."""
    model = reach.model
    table = {}
    for i, (mem, s) in enumerate(reach.nodes):
        if reach.sa:
            per_action = [choices[i].get(a, 0) for a in range(model.n_actions)]
            table[(mem, s)] = vertex_kernel_row(model, s, per_action)
        else:
            table[(mem, s)] = vertex_kernel_row(model, s, choices[i])
    fallback = {s: vertex_kernel_row(model, s, [0] * model.n_actions if reach.sa else 0) for s in range(model.n_states)}
    return FiniteMemoryAdversary(
        policy.initial,
        lambda m, s: table.get((m, s), fallback[s]),
        policy.update_fn,
        HISTORY,
        "worst history-dependent adversary",
    )


def vertex_kernel_row(model: RobustMdp, s: int, choice) -> np.ndarray:
    amb = model.ambiguity
    if amb.rectangularity == SA:
        return np.array([_pick(amb.sets[s][a].vertices, choice[a]) for a in range(model.n_actions)])
    return np.array(_pick(amb.sets[s].vertices, choice))


def robust_evaluate(model: RobustMdp, policy: FiniteMemoryPolicy, mu, tol: float = 1e-9,
                    adversary_class: str = HISTORY, cap: int = DEFAULT_STATE_CAP,
                    enumeration_cap: int = 10**5, belief_cap: int = 20_000, grid_points: int = 2000) -> RobustValue:
    """Worst-case value of ``policy`` against an adversary information class.

    * ``history``: the adversary may use the whole history; its problem is a
      minimization MDP on (controller memory, state), solved exactly by
      policy iteration over vertex choices.
    * ``markov``: the adversary sees only time and the current state. The
      state distribution then evolves deterministically, so the problem is a
      shortest-path problem over reachable joint distributions, solved
      exactly while that set stays below ``belief_cap``.
    * ``stationary``: one kernel for all time. Exact by enumerating vertex
      combinations when the sets are finite; for hulls a grid search with a
      Lipschitz bound brackets the infimum.
    """
    if adversary_class not in INFO_CLASSES:
        raise ValueError(f"unknown adversary class {adversary_class!r}")
    mu = np.asarray(mu, float)
    reach = _Reach(model, policy, mu, cap)
    gamma = model.gamma
    values, choices, residual = _history_worst(reach, gamma, tol)
    history_value = float(reach.start_vec @ values)
    if adversary_class == HISTORY or policy.info_class == STATIONARY:
        # with a memoryless controller the adversary's optimum is already a
        # stationary vertex kernel, hence also Markov
        if policy.info_class == STATIONARY:
            kernel = np.array([vertex_kernel_row(model, s, _node_choice(reach, choices, s, policy.initial))
                               for s in range(model.n_states)])
            adversary = stationary_adversary(kernel, "worst stationary kernel")
        else:
            adversary = _history_adversary(reach, policy, choices)
        return RobustValue(history_value, history_value, True, adversary_class, adversary,
                           {"states": reach.n, "residual": residual})
    if adversary_class == MARKOV:
        return _markov_worst(reach, policy, gamma, values, _history_adversary(reach, policy, choices),
                             belief_cap, enumeration_cap)
    return _stationary_worst(reach, policy, gamma, history_value, enumeration_cap, grid_points)


def _node_choice(reach: _Reach, choices, s: int, memory):
    i = reach.index.get((memory, s))
    if i is None:
        return [0] * reach.model.n_actions if reach.sa else 0
    if reach.sa:
        return [choices[i].get(a, 0) for a in range(reach.model.n_actions)]
    return choices[i]


def _relevant_slots(reach: _Reach) -> list:
    """Adversary decision slots that matter: states (S) or (state, action) pairs (SA)."""
    slots = []
    seen = set()
    for i in range(reach.n):
        s = reach.state_of(i)
        keys = [(s, a) for a in reach.targets[i]] if reach.sa else [(s, None)]
        for key in keys:
            size = len(reach.vertices[s][key[1]]) if reach.sa else len(reach.vertices[s])
            if key not in seen and size > 1:
                seen.add(key)
                slots.append(key)
    return sorted(slots, key=lambda k: (k[0], -1 if k[1] is None else k[1]))


def _slot_sizes(reach: _Reach, slots) -> list:
    return [len(reach.vertices[s][a]) if reach.sa else len(reach.vertices[s]) for s, a in slots]


def _choices_from_assignment(reach: _Reach, slots, assignment):
    picked = dict(zip(slots, assignment))
    out = []
    for i in range(reach.n):
        s = reach.state_of(i)
        if reach.sa:
            out.append({a: picked.get((s, a), 0) for a in reach.targets[i]})
        else:
            out.append(picked.get((s, None), 0))
    return out


def _kernel_from_assignment(reach: _Reach, slots, assignment) -> np.ndarray:
    model = reach.model
    picked = dict(zip(slots, assignment))
    kernel = np.zeros((model.n_states, model.n_actions, model.n_states))
    for s in range(model.n_states):
        if reach.sa:
            kernel[s] = vertex_kernel_row(model, s, [picked.get((s, a), 0) for a in range(model.n_actions)])
        else:
            kernel[s] = vertex_kernel_row(model, s, picked.get((s, None), 0))
    return kernel


class _SlotMatrices:
    """Transition matrix of the reach graph as an affine function of slot weights.

    ``matrix(weights)`` equals the chain under the kernel whose slot ``j``
    uses the convex weights ``weights[j]`` over that slot's vertices.
    """

    def __init__(self, reach: _Reach, slots):
        n = reach.n
        self.dense = n <= DENSE_LIMIT
        slot_index = {slot: j for j, slot in enumerate(slots)}
        base = ([], [], [])
        parts = [[([], [], []) for _ in range(size)] for size in _slot_sizes(reach, slots)]
        for i in range(n):
            s = reach.state_of(i)
            for a, (nexts, idxs) in reach.targets[i].items():
                if reach.sa:
                    verts, key = reach.vertices[s][a][:, nexts], (s, a)
                else:
                    verts, key = reach.vertices[s][:, a, nexts], (s, None)
                j = slot_index.get(key)
                targets = [base] if j is None else parts[j]
                for k, store in enumerate(targets):
                    store[0].append(np.full(len(idxs), i))
                    store[1].append(idxs)
                    store[2].append(reach.phi[i][a] * verts[k])
        self.base = self._build(base, n)
        self.parts = [[self._build(store, n) for store in slot] for slot in parts]

    def _build(self, store, n):
        rows, cols, vals = store
        if rows:
            matrix = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
        else:
            matrix = sp.csr_matrix((n, n))
        return matrix.toarray() if self.dense else matrix

    def matrix(self, weights):
        total = self.base.copy()
        for slot, w in zip(self.parts, weights):
            if np.ndim(w) == 0:
                total = total + slot[int(w)]
            else:
                for k, wk in enumerate(w):
                    if wk:
                        total = total + wk * slot[k]
        return total


def _solve_values(matrix, rewards: np.ndarray, gamma: float) -> np.ndarray:
    if isinstance(matrix, np.ndarray):
        return np.linalg.solve(np.eye(len(rewards)) - gamma * matrix, rewards)
    return _solve_linear(sp.csr_matrix(matrix), rewards, gamma)[0]


def _stationary_worst(reach: _Reach, policy, gamma, history_value, enumeration_cap, grid_points) -> RobustValue:
    slots = _relevant_slots(reach)
    sizes = _slot_sizes(reach, slots)
    hull_slots = [
        idx for idx, (s, a) in enumerate(slots)
        if (reach.model.ambiguity.sets[s][a] if reach.sa else reach.model.ambiguity.sets[s]).kind == HULL
    ]
    total = math.prod(sizes)
    if total > enumeration_cap:
        raise EvaluationError(f"{total} stationary vertex kernels exceed the cap {enumeration_cap}")
    mats = _SlotMatrices(reach, slots)

    def value_of(assignment):
        return float(reach.start_vec @ _solve_values(mats.matrix(assignment), reach.reward, gamma))

    best_value, best_assign = math.inf, None
    for assignment in itertools.product(*(range(n) for n in sizes)):
        v = value_of(assignment)
        if best_assign is None or v < best_value - 1e-14 * max(1.0, abs(best_value)):
            best_value, best_assign = v, assignment
    lower = best_value
    exact = not hull_slots
    meta = {"kernels": total, "states": reach.n}
    if hull_slots and grid_points <= 0:
        # vertex kernels only: an upper value with the history value below it
        lower = history_value
        exact = best_value - lower <= 1e-9
    elif hull_slots:
        lower, grid_value, grid_assign, resolution = _hull_grid_bound(
            reach, slots, sizes, hull_slots, gamma, value_of, grid_points
        )
        meta["grid_resolution"] = resolution
        if grid_value < best_value:
            best_value, best_assign = grid_value, grid_assign
        lower = max(lower, history_value)
        exact = best_value - lower <= 1e-9
    kernel = _kernel_from_assignment(reach, slots, best_assign)
    adversary = stationary_adversary(kernel, "worst stationary kernel")
    return RobustValue(best_value, min(lower, best_value), exact, STATIONARY, adversary, meta)


def _simplex_grid(size: int, resolution: int):
    for combo in itertools.combinations(range(resolution + size - 1), size - 1):
        prev, parts = -1, []
        for c in combo:
            parts.append(c - prev - 1)
            prev = c
        parts.append(resolution + size - 2 - prev)
        yield np.array(parts, float) / resolution


def _hull_grid_bound(reach, slots, sizes, hull_slots, gamma, value_of, grid_points):
    """Grid over convex weights at hull slots with a Lipschitz lower bound.

    For two kernels whose rows differ by at most ``d`` in total variation
    the values differ by at most ``gamma * d / (1 - gamma)**2`` with rewards
    in [0, 1]. Moving weights by ``e`` in l1 moves a row by at most
    ``e * diam / 2`` in l1, where ``diam`` is the largest l1 distance
    between vertex rows, and every weight vector lies within ``size / g`` in
    l1 of the grid of resolution ``g``. Finite slots are enumerated.
    """
    dims = sum(sizes[i] - 1 for i in hull_slots)
    resolution = max(1, int(grid_points ** (1.0 / max(dims, 1))))
    while resolution > 1 and math.prod(math.comb(resolution + sizes[i] - 1, sizes[i] - 1) for i in hull_slots) > grid_points:
        resolution -= 1
    diam = 0.0
    for i in hull_slots:
        s, a = slots[i]
        verts = reach.vertices[s][a] if reach.sa else reach.vertices[s]
        flat = verts.reshape(len(verts), -1, verts.shape[-1])
        for x, y in itertools.combinations(range(len(verts)), 2):
            diam = max(diam, float(np.abs(flat[x] - flat[y]).sum(axis=-1).max()))
    l1_error = max(sizes[i] for i in hull_slots) / resolution
    lipschitz = gamma / (1.0 - gamma) ** 2 * (l1_error * diam / 2.0) / 2.0
    options = [
        list(_simplex_grid(sizes[i], resolution)) if i in hull_slots else list(range(sizes[i]))
        for i in range(len(slots))
    ]
    best, best_assign = math.inf, None
    for assignment in itertools.product(*options):
        v = value_of(assignment)
        if v < best:
            best, best_assign = v, list(assignment)
    return best - lipschitz, best, best_assign, resolution


def _frozen_nodes(reach: _Reach) -> np.ndarray:
    """Nodes whose controller memory can never change again."""
    n = reach.n
    frozen = np.ones(n, dtype=bool)
    memory = [node[0] for node in reach.nodes]
    for i in range(n):
        for _, idxs in reach.targets[i].values():
            if any(memory[j] != memory[i] for j in idxs):
                frozen[i] = False
    return frozen


def _markov_worst(reach: _Reach, policy, gamma, history_values, history_adversary, belief_cap,
                  enumeration_cap) -> RobustValue:
    """Exact infimum over Markov adversaries via the joint-distribution graph.

    A belief is a distribution over (controller memory, state) nodes. Once
    every node in its support shares one frozen memory value the controller
    is stationary from then on, so the history optimum at those nodes is a
    per-state choice that a Markov adversary can play; such beliefs are
    terminal with their history value.
    """
    n = reach.n
    history_value = float(reach.start_vec @ history_values)
    slots_all = _relevant_slots(reach)
    frozen = _frozen_nodes(reach)
    beliefs: dict = {}
    order: list = []
    edges: list = []
    terminal: dict = {}
    queue: deque = deque()

    def add(dist):
        nz = np.flatnonzero(dist > 1e-15)
        key = tuple(zip(nz.tolist(), np.round(dist[nz], 12).tolist()))
        idx = beliefs.get(key)
        if idx is None:
            if len(order) >= belief_cap:
                raise EvaluationError("belief cap")
            idx = len(order)
            beliefs[key] = idx
            order.append(dist)
            queue.append(idx)
        return idx

    try:
        root = add(reach.start_vec.copy())
        while queue:
            b = queue.popleft()
            dist = order[b]
            support = np.flatnonzero(dist > 1e-15)
            memories = {reach.nodes[i][0] for i in support}
            if frozen[support].all() and len(memories) == 1:
                terminal[b] = memories.pop()
                edges.append([])
                continue
            states = {reach.state_of(i) for i in support}
            slots = [slot for slot in slots_all if slot[0] in states]
            if reach.sa:
                active = {(reach.state_of(i), a) for i in support for a in reach.targets[i]}
                slots = [slot for slot in slots if slot in active]
            sizes = _slot_sizes(reach, slots)
            if math.prod(sizes) > enumeration_cap:
                raise EvaluationError("branching cap")
            out = []
            for assignment in itertools.product(*(range(k) for k in sizes)):
                choices = _choices_from_assignment(reach, slots, assignment)
                nxt = np.zeros(n)
                for i in support:
                    c, v = reach.row(int(i), choices[int(i)])
                    np.add.at(nxt, c, dist[i] * v)
                out.append((add(nxt), dict(zip(slots, assignment))))
            edges.append(out)
    except EvaluationError as exc:
        # bracket: history value below, best stationary vertex kernel above
        has_hull = any(
            (reach.model.ambiguity.sets[s][a] if reach.sa else reach.model.ambiguity.sets[s]).kind == HULL
            for s, a in slots_all
        )
        if has_hull:
            raise EvaluationError(f"markov evaluation exceeded its caps ({exc})") from None
        upper = _stationary_worst(reach, policy, gamma, history_value, enumeration_cap, 0)
        return RobustValue(upper.value, history_value, upper.value - history_value <= 1e-9, MARKOV,
                           upper.adversary, {"fallback": str(exc)})

    m = len(order)
    costs = np.array([
        float(order[b] @ history_values) if b in terminal else float(order[b] @ reach.reward) for b in range(m)
    ])
    live = [b for b in range(m) if edges[b]]
    # discounted deterministic shortest path: policy iteration on successor choices
    pick = [0] * m
    for _ in range(10_000):
        matrix = sp.csr_matrix(
            (np.ones(len(live)), (live, [edges[b][pick[b]][0] for b in live])), shape=(m, m)
        )
        values, _ = _solve_linear(matrix, costs, gamma)
        changed = False
        for b in live:
            succ = np.array([values[e[0]] for e in edges[b]])
            k = int(np.argmin(succ))
            if succ[k] < succ[pick[b]] - 1e-12 * max(1.0, abs(succ[pick[b]])):
                pick[b] = k
                changed = True
        if not changed:
            break
    else:
        raise EvaluationError("belief policy iteration did not terminate")
    plan = {b: edges[b][pick[b]] for b in live}
    model = reach.model

    def decide(b, s):
        if b in terminal:
            return history_adversary.decide(terminal[b], s)
        assignment = plan[b][1]
        if reach.sa:
            return vertex_kernel_row(model, s, [assignment.get((s, a), 0) for a in range(model.n_actions)])
        return vertex_kernel_row(model, s, assignment.get((s, None), 0))

    def update(b, s, a, s2):
        return b if b in terminal else plan[b][0]

    adversary = FiniteMemoryAdversary(root, decide, update, MARKOV, "worst open-loop adversary")
    value = float(values[root])
    return RobustValue(value, value, True, MARKOV, adversary, {"beliefs": m, "states": n})


# ---------------------------------------------------------------- greedy extraction


def greedy_from_value(u, model: RobustMdp, eta: float = 0.0) -> FiniteMemoryPolicy:
    """Stationary rule taking each state's sup-inf maximizer at ``u``.

    ``eta`` documents the residual of ``u``; the induced policy is then
    ``eta / (1 - gamma)``-optimal.
    """
    rows = np.array([bellman.cell_supinf(s, u, model).controller_arg for s in range(model.n_states)])
    rows = np.clip(rows, 0.0, None)
    rows /= rows.sum(axis=1, keepdims=True)
    return stationary_policy(rows, f"greedy (eta={eta:.3g})")


def greedy_from_q(q, model: RobustMdp) -> FiniteMemoryPolicy:
    """Deterministic argmax of ``q`` with ties going to the lowest action index."""
    q = np.asarray(q, float)
    actions = []
    for row in q:
        best = row.max()
        actions.append(int(np.flatnonzero(row >= best - 1e-14 * max(1.0, abs(best)))[0]))
    return deterministic_policy(actions, model.n_actions, "greedy q")
