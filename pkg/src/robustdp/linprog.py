"""Dense two-phase simplex for the tiny linear programs inside Bellman cells.

Problems here have a handful of variables and at most a few hundred
constraints, so a tableau with Bland's anti-cycling rule is fast enough and
gives deterministic, reproducible optima.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PIVOT_TOL = 1e-12


class LinprogError(ArithmeticError):
    """Infeasible or unbounded program, or non-finite input."""


@dataclass(frozen=True)
class LpResult:
    x: np.ndarray
    value: float


def _pivot(tableau: np.ndarray, row: int, col: int) -> None:
    tableau[row] /= tableau[row, col]
    column = tableau[:, col].copy()
    column[row] = 0.0
    tableau -= np.outer(column, tableau[row])


def _run(tableau: np.ndarray, basis: list[int], n_cols: int) -> None:
    """Maximize in place; the last row holds reduced costs c_B B^-1 A - c."""
    m = len(basis)
    scale = max(1.0, float(np.max(np.abs(tableau[:, -1]))))
    for _ in range(50_000):
        costs = tableau[-1, :n_cols]
        entering = np.flatnonzero(costs < -PIVOT_TOL * scale)
        if entering.size == 0:
            return
        col = int(entering[0])
        column = tableau[:m, col]
        eligible = np.flatnonzero(column > PIVOT_TOL)
        if eligible.size == 0:
            raise LinprogError("linear program is unbounded")
        ratios = tableau[eligible, -1] / column[eligible]
        best = ratios.min()
        ties = eligible[ratios <= best + PIVOT_TOL * max(1.0, abs(best))]
        row = int(min(ties, key=lambda i: basis[i]))
        _pivot(tableau, row, col)
        basis[row] = col
    raise LinprogError("simplex iteration limit reached")


def maximize(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None) -> LpResult:
    """Maximize ``c @ x`` subject to ``A_ub x <= b_ub``, ``A_eq x = b_eq``, ``x >= 0``."""
    c = np.asarray(c, float)
    n = c.size
    A_ub = np.zeros((0, n)) if A_ub is None else np.asarray(A_ub, float).reshape(-1, n)
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, float).ravel()
    A_eq = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, float).reshape(-1, n)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, float).ravel()
    for arr in (c, A_ub, b_ub, A_eq, b_eq):
        if not np.all(np.isfinite(arr)):
            raise LinprogError("non-finite coefficients")

    m_ub, m_eq = A_ub.shape[0], A_eq.shape[0]
    m = m_ub + m_eq
    n_struct = n + m_ub  # structural plus slack columns
    A = np.zeros((m, n_struct))
    A[:m_ub, :n] = A_ub
    A[:m_ub, n:] = np.eye(m_ub)
    A[m_ub:, :n] = A_eq
    b = np.concatenate([b_ub, b_eq])
    flip = b < 0
    A[flip] *= -1.0
    b[flip] *= -1.0

    # phase 1: one artificial per row, minimize their sum
    tableau = np.zeros((m + 1, n_struct + m + 1))
    tableau[:m, :n_struct] = A
    tableau[:m, n_struct : n_struct + m] = np.eye(m)
    tableau[:m, -1] = b
    tableau[-1, :n_struct] = -A.sum(axis=0)
    tableau[-1, -1] = -b.sum()
    basis = list(range(n_struct, n_struct + m))
    _run(tableau, basis, n_struct + m)
    if tableau[-1, -1] < -1e-9 * max(1.0, float(b.sum())):
        raise LinprogError("linear program is infeasible")

    # drive remaining artificials out; drop redundant rows
    keep = []
    for i in range(m):
        if basis[i] >= n_struct:
            candidates = np.flatnonzero(np.abs(tableau[i, :n_struct]) > 1e-9)
            if candidates.size == 0:
                continue
            _pivot(tableau, i, int(candidates[0]))
            basis[i] = int(candidates[0])
        keep.append(i)

    body = tableau[keep][:, list(range(n_struct)) + [tableau.shape[1] - 1]]
    basis = [basis[i] for i in keep]
    cost = np.zeros(n_struct)
    cost[:n] = c
    phase2 = np.zeros((len(keep) + 1, n_struct + 1))
    phase2[:-1] = body
    phase2[-1, :n_struct] = -cost
    for i, j in enumerate(basis):
        phase2[-1] += cost[j] * phase2[i]
    _run(phase2, basis, n_struct)

    x = np.zeros(n_struct)
    for i, j in enumerate(basis):
        x[j] = phase2[i, -1]
    x = np.clip(x[:n], 0.0, None)
    return LpResult(x=x, value=float(c @ x))


def maxmin(payoffs) -> tuple[float, np.ndarray]:
    """``max_{w in simplex} min_k (payoffs @ w)_k`` with its maximizing weights.

    ``payoffs`` has shape ``(K, V)``: one row per linear function, one column
    per vertex of the maximizing polytope.
    """
    payoffs = np.asarray(payoffs, float)
    if payoffs.ndim != 2 or payoffs.shape[0] == 0 or payoffs.shape[1] == 0:
        raise LinprogError("payoff matrix must be non-empty and two-dimensional")
    if not np.all(np.isfinite(payoffs)):
        raise LinprogError("payoff matrix has non-finite entries")
    k, v = payoffs.shape
    if v == 1:
        return float(payoffs[:, 0].min()), np.ones(1)
    if k == 1:
        j = int(np.argmax(payoffs[0]))
        w = np.zeros(v)
        w[j] = 1.0
        return float(payoffs[0, j]), w
    if v == 2:
        return _maxmin_segment(payoffs)
    # epigraph variable shifted so it is nonnegative: t = s + low
    low = float(payoffs.min()) - 1.0
    c = np.zeros(v + 1)
    c[-1] = 1.0
    A_ub = np.hstack([-payoffs, np.ones((k, 1))])
    b_ub = np.full(k, -low)
    A_eq = np.zeros((1, v + 1))
    A_eq[0, :v] = 1.0
    res = maximize(c, A_ub, b_ub, A_eq, [1.0])
    w = res.x[:v]
    w = w / w.sum()
    # report the value attained by the returned weights
    return float((payoffs @ w).min()), w


def _maxmin_segment(payoffs: np.ndarray) -> tuple[float, np.ndarray]:
    """Two-vertex case: maximize a concave piecewise-linear function on [0, 1].

    The optimum sits at an endpoint or a crossing of two lines, so checking
    those candidates is exact. Ties prefer more weight on the first vertex.
    """
    first, second = payoffs[:, 0], payoffs[:, 1]
    slope = first - second
    candidates = [0.0, 1.0]
    ds = slope[:, None] - slope[None, :]
    db = second[None, :] - second[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        cross = db / ds
    cross = cross[np.isfinite(cross) & (cross > 0.0) & (cross < 1.0)]
    candidates.extend(cross.tolist())
    grid = np.array(candidates)
    values = (second[None, :] + slope[None, :] * grid[:, None]).min(axis=1)
    best = values.max()
    w0 = grid[values >= best - 1e-14 * max(1.0, abs(best))].max()
    w = np.array([w0, 1.0 - w0])
    return float((payoffs @ w).min()), w


def in_convex_hull(point, vertices, tol: float = 1e-9) -> bool:
    """Whether ``point`` lies within ``tol`` (l1) of the hull of ``vertices``."""
    point = np.asarray(point, float).ravel()
    verts = np.asarray(vertices, float).reshape(len(vertices), -1)
    k, d = verts.shape
    # variables: weights (k), positive and negative residuals (d each)
    c = np.concatenate([np.zeros(k), -np.ones(2 * d)])
    A_eq = np.zeros((d + 1, k + 2 * d))
    A_eq[:d, :k] = verts.T
    A_eq[:d, k : k + d] = np.eye(d)
    A_eq[:d, k + d :] = -np.eye(d)
    A_eq[d, :k] = 1.0
    b_eq = np.concatenate([point, [1.0]])
    res = maximize(c, A_eq=A_eq, b_eq=b_eq)
    return -res.value <= tol
