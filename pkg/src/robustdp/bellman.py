"""Robust Bellman cells and fixed-point solvers.

For a state ``s`` and a value vector ``u`` the per-action gains under an
adversary matrix ``p_s`` are ``g(a) = r(s, a) + gamma * p_s[a] @ u``. The
sup-inf cell maximizes ``phi @ g`` over controller distributions ``phi`` after
the adversary minimizes over ``p_s``; the inf-sup cell swaps the order.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import linprog
from .model import GENERAL, HULL, SA, RobustMdp

GUARANTEED = "GUARANTEED"
NUMERIC_ONLY = "NUMERIC_ONLY"
INTERCHANGES = "INTERCHANGES"
GAP = "GAP"

ENUMERATION_CAP = 10**6


class SolverError(RuntimeError):
    """Iteration cap exceeded or an unsupported model shape."""


@dataclass(frozen=True)
class CellSolution:
    """Value of one Bellman cell with the optimizing arguments.

    ``adversary_arg`` is a vertex index for S sets, a tuple of per-action
    vertex indices for SA sets, or convex weights over the vertices when the
    minimizer is an interior point of a hull.
    """

    value: float
    controller_arg: np.ndarray
    adversary_arg: object


@dataclass(frozen=True)
class SolveReport:
    fixed_point: np.ndarray
    iterations: int
    residual: float
    tolerance: float


@dataclass(frozen=True)
class InterchangeReport:
    gap: float
    structural: str
    numeric: str
    supinf: SolveReport
    infsup: SolveReport


def lp_maxmin(payoffs, controller_vertices=None) -> tuple[float, np.ndarray]:
    """Maximize the minimum of K linear functions over a polytope.

    ``payoffs[k, j]`` is function ``k`` evaluated at controller vertex ``j``.
    Returns the value and convex weights over the vertices. With
    ``controller_vertices`` given (one action row per vertex) the weights are
    mapped to an action distribution instead.
    """
    payoffs = np.asarray(payoffs, float)
    value, weights = linprog.maxmin(payoffs)
    if controller_vertices is None:
        return value, weights
    rows = np.asarray(controller_vertices, float)
    if rows.shape[0] != payoffs.shape[1]:
        raise ValueError("one controller vertex per payoff column is required")
    return value, weights @ rows


class _Prepared:
    """Per-model arrays reused across iterations."""

    def __init__(self, model: RobustMdp):
        amb = model.ambiguity
        if amb.rectangularity == GENERAL:
            raise SolverError(
                "general rectangularity has no Bellman cell; marginalize to S or SA first"
            )
        self.model = model
        self.rect = amb.rectangularity
        self.rewards = np.asarray(model.rewards)
        self.gamma = model.gamma
        self.ctrl_rows = model.controller_rows()
        self.ctrl_enumerable = model.controller_set.enumerable
        n_s, n_a = model.n_states, model.n_actions
        if self.rect == SA:
            self.rows = [[np.asarray(amb.sets[s][a].vertices) for a in range(n_a)] for s in range(n_s)]
            self.row_hull = [[amb.sets[s][a].kind == HULL and len(amb.sets[s][a]) > 1 for a in range(n_a)] for s in range(n_s)]
            self.matrices = None
        else:
            self.matrices = [np.asarray(amb.sets[s].vertices) for s in range(n_s)]
            self.hull = [amb.sets[s].kind == HULL and len(amb.sets[s]) > 1 for s in range(n_s)]
        # marginal row sets for the q-function
        self.marginals = [[np.asarray(amb.row_vertices(s, a)) for a in range(n_a)] for s in range(n_s)]


def _prepared(model: RobustMdp) -> _Prepared:
    cached = model.__dict__.get("_bellman_cache")
    if cached is None:
        cached = _Prepared(model)
        object.__setattr__(model, "_bellman_cache", cached)
    return cached


def _first_argmax(values: np.ndarray) -> int:
    best = values.max()
    return int(np.flatnonzero(values >= best - 1e-14 * max(1.0, abs(best)))[0])


def _first_argmin(values: np.ndarray) -> int:
    best = values.min()
    return int(np.flatnonzero(values <= best + 1e-14 * max(1.0, abs(best)))[0])


def _check_u(u, model: RobustMdp) -> np.ndarray:
    u = np.asarray(u, float)
    if u.shape != (model.n_states,):
        raise ValueError(f"value vector must have length {model.n_states}")
    if not np.all(np.isfinite(u)):
        raise ValueError("value vector has non-finite entries")
    return u


def cell_supinf(s, u, model: RobustMdp) -> CellSolution:
    """``sup_phi inf_{p_s} sum_a phi(a) [r(s,a) + gamma p_s[a] @ u]``."""
    prep = _prepared(model)
    s = model.state_index(s)
    u = _check_u(u, model)
    return _supinf(prep, s, u)


def _supinf(prep: _Prepared, s: int, u: np.ndarray) -> CellSolution:
    rewards, gamma, phis = prep.rewards[s], prep.gamma, prep.ctrl_rows
    if prep.rect == SA:
        # the adversary minimizes each action's row independently
        gains = np.empty(len(rewards))
        picks = []
        for a, rows in enumerate(prep.rows[s]):
            cont = rows @ u
            k = _first_argmin(cont)
            picks.append(k)
            gains[a] = rewards[a] + gamma * cont[k]
        scores = phis @ gains
        j = _first_argmax(scores)
        return CellSolution(float(scores[j]), phis[j].copy(), tuple(picks))

    gains = rewards[None, :] + gamma * (prep.matrices[s] @ u)  # (K, A)
    payoffs = gains @ phis.T  # (K, V)
    if prep.ctrl_enumerable:
        worst = payoffs.min(axis=0)
        j = _first_argmax(worst)
        k = _first_argmin(payoffs[:, j])
        return CellSolution(float(worst[j]), phis[j].copy(), k)
    value, weights = linprog.maxmin(payoffs)
    phi = weights @ phis
    k = _first_argmin(gains @ phi)
    return CellSolution(value, phi, k)


def cell_infsup(s, u, model: RobustMdp) -> CellSolution:
    """``inf_{p_s} sup_phi`` of the same bilinear form."""
    prep = _prepared(model)
    s = model.state_index(s)
    u = _check_u(u, model)
    return _infsup(prep, s, u)


def _infsup(prep: _Prepared, s: int, u: np.ndarray) -> CellSolution:
    rewards, gamma, phis = prep.rewards[s], prep.gamma, prep.ctrl_rows
    if prep.rect == SA:
        return _infsup_sa(prep, s, u)
    gains = rewards[None, :] + gamma * (prep.matrices[s] @ u)  # (K, A)
    scores = phis @ gains.T  # (V, K): controller vertex j against adversary vertex k
    if not prep.hull[s]:
        best = scores.max(axis=0)
        k = _first_argmin(best)
        j = _first_argmax(scores[:, k])
        return CellSolution(float(best[k]), phis[j].copy(), k)
    neg_value, weights = linprog.maxmin(-scores)
    mixed = scores @ weights
    j = _first_argmax(mixed)
    return CellSolution(float(mixed.max()), phis[j].copy(), weights)


def _infsup_sa(prep: _Prepared, s: int, u: np.ndarray) -> CellSolution:
    rewards, gamma, phis = prep.rewards[s], prep.gamma, prep.ctrl_rows
    conts = [rows @ u for rows in prep.rows[s]]
    hull_actions = [a for a, flag in enumerate(prep.row_hull[s]) if flag]
    finite_actions = [a for a in range(len(conts)) if a not in hull_actions]
    sizes = [len(conts[a]) for a in finite_actions]
    if math.prod(sizes) > ENUMERATION_CAP:
        raise SolverError(f"state {s}: SA product of {math.prod(sizes)} rows exceeds the cap")

    best = None
    for combo in itertools.product(*(range(n) for n in sizes)):
        base = np.array(rewards, float)
        for a, k in zip(finite_actions, combo):
            base[a] += gamma * conts[a][k]
        if not hull_actions:
            scores = phis @ base
            j = _first_argmax(scores)
            cand = (float(scores[j]), phis[j].copy(), tuple(zip(finite_actions, combo)))
        else:
            cand = _infsup_sa_hull(phis, base, gamma, conts, hull_actions, finite_actions, combo)
        if best is None or cand[0] < best[0] - 1e-14 * max(1.0, abs(best[0])):
            best = cand
    picks = dict(best[2])
    arg = tuple(picks[a] for a in range(len(conts)))
    return CellSolution(best[0], best[1], arg)


def _infsup_sa_hull(phis, base, gamma, conts, hull_actions, finite_actions, combo):
    """Minimize the controller's best response over a product of hulls."""
    blocks = [len(conts[a]) for a in hull_actions]
    n_w = sum(blocks)
    # base gains without the hull actions' continuation
    const = phis @ base
    coeff = np.zeros((len(phis), n_w))
    offset = 0
    for a, size in zip(hull_actions, blocks):
        coeff[:, offset : offset + size] = gamma * phis[:, [a]] * conts[a][None, :]
        offset += size
    # every attainable best response lies above this bound
    low = float(const.min() - np.abs(coeff).sum()) - 1.0
    # variables: weights, then s >= 0 with t = s + low; minimize t
    c = np.zeros(n_w + 1)
    c[-1] = -1.0
    A_ub = np.hstack([coeff, -np.ones((len(phis), 1))])
    b_ub = low - const
    A_eq = np.zeros((len(blocks), n_w + 1))
    offset = 0
    for i, size in enumerate(blocks):
        A_eq[i, offset : offset + size] = 1.0
        offset += size
    res = linprog.maximize(c, A_ub, b_ub, A_eq, np.ones(len(blocks)))
    weights = res.x[:n_w]
    scores = const + coeff @ weights
    j = _first_argmax(scores)
    picks = list(zip(finite_actions, combo))
    offset = 0
    for a, size in zip(hull_actions, blocks):
        w = weights[offset : offset + size]
        picks.append((a, tuple(float(x) for x in w / w.sum())))
        offset += size
    return float(scores[j]), phis[j].copy(), tuple(picks)


def apply_supinf(u, model: RobustMdp) -> np.ndarray:
    prep = _prepared(model)
    u = _check_u(u, model)
    return np.array([_supinf(prep, s, u).value for s in range(model.n_states)])


def apply_infsup(u, model: RobustMdp) -> np.ndarray:
    prep = _prepared(model)
    u = _check_u(u, model)
    return np.array([_infsup(prep, s, u).value for s in range(model.n_states)])


def default_iteration_cap(gamma: float, tol: float) -> int:
    return int(math.ceil(math.log(tol * (1.0 - gamma)) / math.log(gamma))) + 16


def _stop_threshold(gamma: float, tol: float) -> float:
    # the a-posteriori contraction bound; capped at tol so residual <= tol too
    return min(tol, tol * (1.0 - gamma) / gamma)


def _iterate(step, start: np.ndarray, gamma: float, tol: float, max_iter: int | None) -> SolveReport:
    if not tol > 0:
        raise ValueError("tolerance must be positive")
    cap = default_iteration_cap(gamma, tol) if max_iter is None else int(max_iter)
    threshold = _stop_threshold(gamma, tol)
    current = start
    for k in range(1, cap + 1):
        nxt = step(current)
        residual = float(np.max(np.abs(nxt - current)))
        current = nxt
        if residual <= threshold:
            current.setflags(write=False)
            return SolveReport(current, k, residual, tol)
    raise SolverError(f"no convergence within {cap} iterations (last residual {residual:.3g})")


def solve_supinf(model: RobustMdp, tol: float = 1e-9, max_iter: int | None = None) -> SolveReport:
    """Value iteration for the sup-inf robust Bellman equation from u = 0."""
    prep = _prepared(model)
    n = model.n_states

    def step(u):
        return np.array([_supinf(prep, s, u).value for s in range(n)])

    return _iterate(step, np.zeros(n), model.gamma, tol, max_iter)


def solve_infsup(model: RobustMdp, tol: float = 1e-9, max_iter: int | None = None) -> SolveReport:
    """Value iteration for the inf-sup equation from u = 0."""
    prep = _prepared(model)
    n = model.n_states

    def step(u):
        return np.array([_infsup(prep, s, u).value for s in range(n)])

    return _iterate(step, np.zeros(n), model.gamma, tol, max_iter)


def apply_q(q, model: RobustMdp) -> np.ndarray:
    """One q-function backup with deterministic-action semantics."""
    prep = _prepared(model)
    q = np.asarray(q, float)
    best = q.max(axis=1)
    out = np.empty_like(q)
    for s in range(model.n_states):
        for a in range(model.n_actions):
            out[s, a] = prep.rewards[s, a] + prep.gamma * float((prep.marginals[s][a] @ best).min())
    return out


def solve_q(model: RobustMdp, tol: float = 1e-9, max_iter: int | None = None) -> SolveReport:
    """Fixed point of ``q(s,a) = r(s,a) + gamma inf_{p in P_{s,a}} p @ max_b q``.

    ``P_{s,a}`` is the SA set itself, or for S-rectangular models the set of
    row-``a`` marginals of ``P_s``.
    """
    _prepared(model)
    start = np.zeros((model.n_states, model.n_actions))
    return _iterate(lambda q: apply_q(q, model), start, model.gamma, tol, max_iter)


def structural_verdict(model: RobustMdp) -> str:
    """Whether a theorem guarantees the sup-inf/inf-sup interchange."""
    amb = model.ambiguity
    ctrl = model.controller_set
    if amb.rectangularity == SA and ctrl.contains_dirac(model.n_actions):
        return GUARANTEED
    if ctrl.is_convex and all(amb.state_is_convex(s) for s in range(model.n_states)):
        return GUARANTEED
    return NUMERIC_ONLY


def check_interchange(model: RobustMdp, tol: float = 1e-9) -> InterchangeReport:
    sup = solve_supinf(model, tol)
    inf = solve_infsup(model, tol)
    gap = float(np.max(np.abs(sup.fixed_point - inf.fixed_point)))
    numeric = INTERCHANGES if gap <= 3 * tol else GAP
    return InterchangeReport(gap, structural_verdict(model), numeric, sup, inf)


def bellman_residual(u, model: RobustMdp) -> float:
    return float(np.max(np.abs(apply_supinf(u, model) - np.asarray(u, float))))
