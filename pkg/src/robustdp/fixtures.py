"""Small S-rectangular instances on which robust dynamic programming breaks.

Each fixture stores rewards rescaled into [0, 1] together with the affine
map back to the original scale, so ``model.reward_map.value(v, gamma)``
reports values in the units of the closed forms in ``expected``. States
with a single meaningful action carry two identical copies of it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import DIRAC, FINITE, HULL, SIMPLEX, ControllerSet, RewardMap, RobustMdp, s_rectangular
from .policy import (
    MARKOV,
    STATIONARY,
    FiniteMemoryAdversary,
    FiniteMemoryPolicy,
    markov_adversary,
    markov_schedule,
    periodic_schedule,
    table_policy,
)

EX_5_1 = "EX_5_1"
EX_5_2 = "EX_5_2"
EX_5_3_CONVEX = "EX_5_3_CONVEX"
EX_5_3_FINITE = "EX_5_3_FINITE"
FIXTURE_IDS = (EX_5_1, EX_5_2, EX_5_3_CONVEX, EX_5_3_FINITE)

ALPHA_GRID = (0.0, 0.25, 0.5, 1.0)
SIGNED_REWARDS = RewardMap(scale=2.0, shift=-1.0)
ACTIONS = ("a1", "a2")


@dataclass(frozen=True, eq=False)
class Fixture:
    """An instance, its witness policies and closed-form values.

    ``adversary_class[name]`` is the adversary information class against
    which witness ``name`` is claimed to beat the Bellman value.
    ``kernels`` holds the named transition kernels the closed forms refer to.
    """

    id: str
    model: RobustMdp
    mu: np.ndarray
    witnesses: dict
    adversary_class: dict
    expected: dict
    kernels: dict = field(default_factory=dict)

    def paper_scale(self, v):
        return self.model.reward_map.value(v, self.model.gamma)


def _to_unit(rewards) -> np.ndarray:
    return (np.asarray(rewards, float) + 1.0) / 2.0


def _point(n: int, j: int) -> list:
    row = [0.0] * n
    row[j] = 1.0
    return row


def _same_for_both(n: int, j: int) -> list:
    return [_point(n, j), _point(n, j)]


def _signed_state_rewards(values) -> np.ndarray:
    return _to_unit(np.repeat(np.asarray(values, float)[:, None], 2, axis=1))


def bandit_pair(n_states: int, i: int, good: int, bad: int) -> tuple[np.ndarray, np.ndarray]:
    """The two matrices at the choice state: under the first, a1 is bad."""
    first = np.array([_point(n_states, bad), _point(n_states, good)])
    second = np.array([_point(n_states, good), _point(n_states, bad)])
    return first, second


def _commit_policy(i_state: int, good: int, bad: int) -> FiniteMemoryPolicy:
    """Randomize once, then keep the action if it paid off and switch otherwise."""
    half = [0.5, 0.5]
    decide = {("start", None): half, ("a1", None): [1.0, 0.0], ("a2", None): [0.0, 1.0]}
    update = {
        ("start", i_state, 0, good): "a1",
        ("start", i_state, 0, bad): "a2",
        ("start", i_state, 1, good): "a2",
        ("start", i_state, 1, bad): "a1",
    }
    return table_policy("start", decide, update, 2, "learn then commit")


def ex_5_1(gamma: float = 0.9) -> Fixture:
    states = ("I", "G", "B")
    first, second = bandit_pair(3, 0, good=1, bad=2)
    back = _same_for_both(3, 0)
    sets = [[first, second], [back], [back]]
    model = s_rectangular(states, ACTIONS, _signed_state_rewards([0.0, 1.0, -1.0]), gamma, sets,
                          FINITE, ControllerSet(SIMPLEX), SIGNED_REWARDS)
    kernels = {"p1": np.array([first, back, back]), "p2": np.array([second, back, back])}
    value = gamma**3 / (1.0 - gamma**2)
    return Fixture(
        EX_5_1,
        model,
        model.point_mass("I"),
        {"learn_then_commit": _commit_policy(0, 1, 2)},
        {"learn_then_commit": STATIONARY},
        {"u_star": {"I": 0.0, "G": 1.0, "B": -1.0}, "witness": {"learn_then_commit": value}},
        kernels,
    )


def ex_5_2(gamma: float = 0.8) -> Fixture:
    if gamma != 0.8:
        raise ValueError("EX_5_2 is defined at gamma = 0.8 only")
    states = ("I", "B", "C")
    first = np.array([[1.0, 0.0, 0.0], [0.5, 0.5, 0.0]])
    second = np.array([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
    stay_b, stay_c = _same_for_both(3, 1), _same_for_both(3, 2)
    rewards = np.repeat(np.array([0.0, 0.6, 0.0])[:, None], 2, axis=1)
    model = s_rectangular(states, ACTIONS, rewards, gamma, [[first, second], [stay_b], [stay_c]],
                          FINITE, ControllerSet(SIMPLEX), RewardMap())
    a1 = np.tile([1.0, 0.0], (3, 1))
    a2 = np.tile([0.0, 1.0], (3, 1))
    tail = np.tile([0.75, 0.25], (3, 1))
    schedule = markov_schedule([a1, a2], tail, "a1, a2, then (3/4, 1/4)")
    kernels = {"p1": np.array([first, stay_b, stay_c]), "p2": np.array([second, stay_b, stay_c])}
    # from time 2 the tail rule is worth 1 at I against p1 and 3 at B
    against_first = gamma**2 * (0.5 * 1.0 + 0.5 * 3.0)
    against_second = gamma * 0.5 * 3.0
    return Fixture(
        EX_5_2,
        model,
        model.point_mass("I"),
        {"schedule": schedule},
        {"schedule": STATIONARY},
        {
            "u_star": {"I": 1.0, "B": 3.0, "C": 0.0},
            "phi_a1": 0.75,
            "witness_vs_kernel": {"schedule": {"p1": against_first, "p2": against_second}},
        },
        kernels,
    )


def _ex_5_3(kind: str, gamma: float) -> Fixture:
    states = ("I0", "I1", "I2", "I", "G", "B")
    n = len(states)
    first, second = bandit_pair(n, 3, good=4, bad=5)
    split = [[0.0, 0.5, 0.5, 0.0, 0.0, 0.0]] * 2
    to_i = _same_for_both(n, 3)
    sets = [[split], [to_i], [to_i], [first, second], [to_i], [to_i]]
    model = s_rectangular(states, ACTIONS, _signed_state_rewards([0, 0, 0, 0, 1, -1]), gamma, sets,
                          kind, ControllerSet(DIRAC), SIGNED_REWARDS)

    def kernel(alpha: float) -> np.ndarray:
        mixed = alpha * first + (1.0 - alpha) * second
        return np.array([split, to_i, to_i, mixed, to_i, to_i], dtype=float)

    a1, a2 = [1.0, 0.0], [0.0, 1.0]
    # the choice state is visited at times 2, 4, 6, ...: a1 at 2 mod 4, a2 at 0 mod 4
    alternating = periodic_schedule(
        [np.array([a2] * n), np.array([a1] * n), np.array([a1] * n), np.array([a1] * n)],
        "alternating a1/a2 at the choice state",
    )
    branching = table_policy(
        "start",
        {("start", None): a1, ("I1", None): a1, ("I2", None): a2},
        {("start", None, None, 1): "I1", ("start", None, None, 2): "I2"},
        2,
        "branch on first intermediate state",
    )
    ratio = gamma**3 / (1.0 + gamma**2)
    fixture_id = EX_5_3_CONVEX if kind == HULL else EX_5_3_FINITE
    return Fixture(
        fixture_id,
        model,
        model.point_mass("I0"),
        {"alternating": alternating, "branching": branching},
        {"alternating": STATIONARY, "branching": MARKOV},
        {
            "u_star": {"I0": -(gamma**3) / (1.0 - gamma**2)},
            "alternating_vs_alpha": {str(a): (1.0 - 2.0 * a) * ratio for a in ALPHA_GRID},
            # the worst time-homogeneous adversary sits at alpha = 1
            "witness": {"alternating": -ratio, "branching": 0.0},
        },
        {f"alpha={a}": kernel(a) for a in ALPHA_GRID},
    )


def ex_5_3_kernel(fixture: Fixture, alpha: float) -> np.ndarray:
    """The mixture kernel ``alpha * p1 + (1 - alpha) * p2`` of an EX_5_3 fixture."""
    sets = fixture.model.ambiguity.sets
    first, second = sets[3].vertices
    kernel = np.array([s.vertices[0] for s in sets])
    kernel[3] = alpha * first + (1.0 - alpha) * second
    return kernel


MARKOV_GRID_CYCLES = ((0.0,), (1.0,), (0.5,), (0.0, 1.0), (1.0, 0.0))


def markov_grid(fx: Fixture) -> list[FiniteMemoryAdversary]:
    """Five time-varying adversaries for an EX_5_3 fixture: cycles of mixture weights."""
    out = []
    for cycle in MARKOV_GRID_CYCLES:
        kernels = [ex_5_3_kernel(fx, a) for a in cycle]
        out.append(markov_adversary(kernels, kernels[-1], f"alpha cycle {list(cycle)}", period=True))
    return out


def fixture(fixture_id: str, gamma: float | None = None) -> Fixture:
    builders = {
        EX_5_1: lambda g: ex_5_1(0.9 if g is None else g),
        EX_5_2: lambda g: ex_5_2(0.8 if g is None else g),
        EX_5_3_CONVEX: lambda g: _ex_5_3(HULL, 0.8 if g is None else g),
        EX_5_3_FINITE: lambda g: _ex_5_3(FINITE, 0.8 if g is None else g),
    }
    if fixture_id not in builders:
        raise KeyError(f"unknown fixture {fixture_id!r}; choose from {', '.join(FIXTURE_IDS)}")
    return builders[fixture_id](gamma)


LEARNER_4STATE = "LEARNER_4STATE"


def learner_fixture(gamma: float = 0.9) -> tuple[RobustMdp, np.ndarray]:
    """Four states, four actions, every vertex a deterministic kernel of diameter one.

    Under the first vertex action ``k`` moves from ``s`` to ``s + k mod 4``;
    under the second it moves to ``s + k + 1 mod 4``. Rewards depend on the
    state only and the start distribution is uniform.
    """
    n = 4
    states = tuple(f"s{i}" for i in range(n))
    actions = tuple(f"a{i}" for i in range(n))

    def shift(offset: int) -> np.ndarray:
        kernel = np.zeros((n, n, n))
        for s in range(n):
            for a in range(n):
                kernel[s, a, (s + a + offset) % n] = 1.0
        return kernel

    first, second = shift(0), shift(1)
    rewards = np.repeat(np.array([0.0, 0.25, 0.5, 1.0])[:, None], n, axis=1)
    model = s_rectangular(states, actions, rewards, gamma, [[first[s], second[s]] for s in range(n)],
                          FINITE, ControllerSet(SIMPLEX))
    return model, np.full(n, 1.0 / n)
