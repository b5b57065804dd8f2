"""Independent reference computations used to check the package.

Nothing here calls the package's solvers: matrix games go through
scipy's HiGHS backend and policy values through dense numpy solves.
Random instances are built from a seed so hypothesis only draws integers.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.optimize import linprog

from robustdp.model import (
    DIRAC,
    FINITE,
    HULL,
    SA,
    SIMPLEX,
    AmbiguitySpec,
    ControllerSet,
    DistributionSet,
    RobustMdp,
)


# ---------------------------------------------------------------- matrix games


def game_value(payoffs) -> float:
    """max over the column simplex of min over rows of ``payoffs @ x``."""
    payoffs = np.asarray(payoffs, float)
    k, v = payoffs.shape
    # variables (x_1..x_v, t); maximize t
    c = np.zeros(v + 1)
    c[-1] = -1.0
    a_ub = np.hstack([-payoffs, np.ones((k, 1))])
    a_eq = np.hstack([np.ones((1, v)), np.zeros((1, 1))])
    bounds = [(0, None)] * v + [(None, None)]
    res = linprog(c, A_ub=a_ub, b_ub=np.zeros(k), A_eq=a_eq, b_eq=[1.0], bounds=bounds, method="highs")
    assert res.status == 0, res.message
    return float(-res.fun)


def adversary_matrices(model: RobustMdp, s: int) -> np.ndarray:
    """Vertex matrices (K, A, S) of the adversary's set at ``s``."""
    amb = model.ambiguity
    if amb.rectangularity == SA:
        rows = [amb.sets[s][a].vertices for a in range(model.n_actions)]
        return np.array([np.array(combo) for combo in itertools.product(*rows)])
    return np.asarray(amb.sets[s].vertices)


def adversary_convex(model: RobustMdp, s: int) -> bool:
    amb = model.ambiguity
    if amb.rectangularity == SA:
        # a product of hulls is the hull of the product of vertices
        return all(d.kind == HULL or len(d) == 1 for d in amb.sets[s])
    d = amb.sets[s]
    return d.kind == HULL or len(d) == 1


def controller_vertices(model: RobustMdp) -> np.ndarray:
    ctrl = model.controller_set
    if ctrl.kind in (SIMPLEX, DIRAC):
        return np.eye(model.n_actions)
    return np.asarray(ctrl.vertices)


def cell_payoffs(model: RobustMdp, s: int, u) -> np.ndarray:
    """``M[k, j]``: controller vertex ``j`` against adversary vertex ``k``."""
    u = np.asarray(u, float)
    mats = adversary_matrices(model, s)
    per_action = model.rewards[s][None, :] + model.gamma * mats @ u
    return per_action @ controller_vertices(model).T


def supinf_cell(model: RobustMdp, s: int, u) -> float:
    m = cell_payoffs(model, s, u)
    if model.controller_set.kind in (SIMPLEX, HULL):
        return game_value(m)
    return float(m.min(axis=0).max())


def infsup_cell(model: RobustMdp, s: int, u) -> float:
    m = cell_payoffs(model, s, u)
    if adversary_convex(model, s):
        return -game_value(-m.T)
    return float(m.max(axis=1).min())


def fixed_point(cell, model: RobustMdp, tol: float = 1e-11) -> np.ndarray:
    u = np.zeros(model.n_states)
    while True:
        nxt = np.array([cell(model, s, u) for s in range(model.n_states)])
        if np.max(np.abs(nxt - u)) <= tol * (1 - model.gamma):
            return nxt
        u = nxt


# ---------------------------------------------------------------- policy values


def chain_value(kernel, rule, rewards, gamma: float) -> np.ndarray:
    """Value of a stationary rule under a fixed (S, A, S) kernel."""
    kernel, rule, rewards = (np.asarray(x, float) for x in (kernel, rule, rewards))
    p = np.einsum("sa,sax->sx", rule, kernel)
    r = np.einsum("sa,sa->s", rule, rewards)
    return np.linalg.solve(np.eye(len(r)) - gamma * p, r)


def vertex_kernels(model: RobustMdp) -> list[np.ndarray]:
    per_state = [adversary_matrices(model, s) for s in range(model.n_states)]
    return [np.array(combo) for combo in itertools.product(*per_state)]


def brute_force_maxmin(model: RobustMdp, mu) -> float:
    """max over deterministic stationary rules of min over vertex kernels."""
    mu = np.asarray(mu, float)
    kernels = vertex_kernels(model)
    eye = np.eye(model.n_actions)
    best = -np.inf
    for actions in itertools.product(range(model.n_actions), repeat=model.n_states):
        rule = eye[list(actions)]
        worst = min(mu @ chain_value(k, rule, model.rewards, model.gamma) for k in kernels)
        best = max(best, worst)
    return float(best)


def classical_optimum(kernel, rewards, gamma: float) -> np.ndarray:
    """Optimal values by enumerating deterministic rules (small instances only)."""
    kernel = np.asarray(kernel, float)
    n_s, n_a = kernel.shape[:2]
    eye = np.eye(n_a)
    best = np.full(n_s, -np.inf)
    for actions in itertools.product(range(n_a), repeat=n_s):
        best = np.maximum(best, chain_value(kernel, eye[list(actions)], rewards, gamma))
    return best


def hitting_times(kernel, rule, target: int) -> np.ndarray:
    """Expected steps to reach ``target`` under a stationary rule."""
    kernel, rule = np.asarray(kernel, float), np.asarray(rule, float)
    p = np.einsum("sa,sax->sx", rule, kernel)
    n = p.shape[0]
    keep = [s for s in range(n) if s != target]
    reached = {target}
    for _ in range(n):
        reached |= {s for s in range(n) if any(p[s, t] > 0 for t in reached)}
    if len(reached) < n:
        return np.full(n, np.inf)
    sub = p[np.ix_(keep, keep)]
    h = np.zeros(n)
    h[keep] = np.linalg.solve(np.eye(len(keep)) - sub, np.ones(len(keep)))
    return h


def brute_force_diameter(kernel) -> float:
    """max over targets of min over deterministic rules of worst hitting time."""
    kernel = np.asarray(kernel, float)
    n_s, n_a = kernel.shape[:2]
    eye = np.eye(n_a)
    worst = 0.0
    for target in range(n_s):
        best = np.full(n_s, np.inf)
        for actions in itertools.product(range(n_a), repeat=n_s):
            try:
                h = hitting_times(kernel, eye[list(actions)], target)
            except np.linalg.LinAlgError:
                continue
            if np.all(h >= -1e-9) and np.all(np.isfinite(h)):
                best = np.minimum(best, h)
        worst = max(worst, float(best.max()))
    return worst


# ---------------------------------------------------------------- random instances


def _stochastic(rng: np.random.Generator, shape, sparse: bool = True) -> np.ndarray:
    x = rng.exponential(size=shape)
    if sparse:
        x = x * (rng.random(shape) < 0.6)
        x[..., 0] += 1e-3
    return x / x.sum(axis=-1, keepdims=True)


def random_model(seed: int, rect: str | None = None, kind: str | None = None, controller: str | None = None,
                 max_states: int = 5, max_actions: int = 3, max_set: int = 4,
                 gamma_range=(0.3, 0.85), min_actions: int = 1) -> RobustMdp:
    rng = np.random.default_rng(seed)
    n_s = int(rng.integers(1, max_states + 1))
    n_a = int(rng.integers(min_actions, max_actions + 1))
    rect = rect or ("sa" if rng.random() < 0.5 else "s")
    kind = kind or (FINITE if rng.random() < 0.5 else HULL)
    controller = controller or str(rng.choice([SIMPLEX, DIRAC, FINITE, HULL]))
    gamma = float(rng.uniform(*gamma_range))
    rewards = rng.random((n_s, n_a))

    def size():
        return int(rng.integers(1, max_set + 1))

    if rect == SA:
        sets = [[DistributionSet(kind, _stochastic(rng, (size(), n_s))) for _ in range(n_a)] for _ in range(n_s)]
    else:
        sets = [DistributionSet(kind, _stochastic(rng, (size(), n_a, n_s))) for _ in range(n_s)]
    if controller in (FINITE, HULL):
        ctrl = ControllerSet(controller, _stochastic(rng, (size(), n_a), sparse=False))
    else:
        ctrl = ControllerSet(controller)
    return RobustMdp([f"s{i}" for i in range(n_s)], [f"a{i}" for i in range(n_a)], rewards, gamma,
                     AmbiguitySpec(rect, sets), ctrl)


def random_kernel(rng: np.random.Generator, n_s: int, n_a: int) -> np.ndarray:
    return _stochastic(rng, (n_s, n_a, n_s))
