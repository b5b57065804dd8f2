"""Explore-then-exploit learning against a hidden time-homogeneous kernel.

Phase 1 (times ``0..n``) visits every state-action pair in a fixed order,
moving between states with the uniform decision rule and taking the
targeted action on arrival, until ``m`` next-state samples per pair are
stored. From time ``n + 1`` on the policy plays the greedy rule of value
iteration under the empirical kernel. If some pair is still short of ``m``
samples at time ``n`` every row of the empirical kernel becomes a point
mass at its own state, which makes all actions tie and the exploit rule
uniform.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

import scipy.sparse as sp

from .model import GENERAL, ModelError, RobustMdp
from .policy import HISTORY, FiniteMemoryPolicy, _solve_linear, evaluate_exact, stationary_adversary

PAPER = "paper"
PRACTICAL = "practical"
DEFAULT_MEMORY_CAP = 10**6
EXPLOIT = "exploit"


class LearnerError(ValueError):
    """Invalid learner configuration or iteration failure."""


# ---------------------------------------------------------------- sample size


@dataclass(frozen=True)
class SampleSizeMode:
    """``paper`` uses the theoretical constant; ``practical`` divides ``n`` by ``c``."""

    kind: str = PAPER
    c: int = 1

    def __post_init__(self):
        if self.kind not in (PAPER, PRACTICAL):
            raise LearnerError(f"unknown sample size mode {self.kind!r}")
        if self.kind == PRACTICAL and int(self.c) < 1:
            raise LearnerError("practical mode needs c >= 1")

    def label(self) -> str:
        return PAPER if self.kind == PAPER else f"{PRACTICAL}:{self.c}"

    @classmethod
    def parse(cls, text: str) -> "SampleSizeMode":
        if text == PAPER:
            return cls(PAPER)
        head, _, tail = text.partition(":")
        if head != PRACTICAL or not tail:
            raise LearnerError(f"mode must be 'paper' or 'practical:C', got {text!r}")
        try:
            return cls(PRACTICAL, int(tail))
        except ValueError as exc:
            raise LearnerError(f"practical mode needs an integer C, got {tail!r}") from exc


def effective_sample_size(n: int, diameter: int, n_states: int, n_actions: int,
                          mode: SampleSizeMode = SampleSizeMode()) -> int:
    """Samples per state-action pair; exact integer arithmetic in paper mode."""
    n, diameter = int(n), int(diameter)
    if n < 1 or diameter < 1:
        raise LearnerError("need n >= 1 and D >= 1")
    if mode.kind == PRACTICAL:
        return max(1, n // int(mode.c))
    pairs = n_states * n_actions
    return n // (8 * pairs * diameter**3 * n_actions**diameter)


def paper_threshold(diameter: int, n_states: int, n_actions: int, delta: float) -> int:
    """Smallest ``n`` at which exploration completes with probability ``1 - delta``."""
    pairs = n_states * n_actions
    bound = (4 * diameter * pairs + 2.0 * math.log(1.0 / delta)) * diameter * (diameter + 1) * n_actions**diameter
    return int(math.ceil(bound))


def exploration_period(gamma: float) -> int:
    """``ceil(1 / sqrt(1 - gamma))``, the period that makes the learner asymptotically optimal."""
    return int(math.ceil(1.0 / math.sqrt(1.0 - gamma) - 1e-9))


# ---------------------------------------------------------------- exploration


@dataclass(frozen=True)
class LearnerConfig:
    """Everything the learner may know: the skeleton, rewards and budgets, not the kernel."""

    states: tuple
    actions: tuple
    rewards: np.ndarray
    gamma: float
    n: int
    m: int
    tol: float = 1e-9
    diameter: float | None = None
    diameter_source: str = "given"
    mode: str = PAPER

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise LearnerError("gamma must lie in (0, 1)")
        if int(self.n) < 1:
            raise LearnerError("n must be at least 1")
        if int(self.m) < 0:
            raise LearnerError("m must be nonnegative")
        rewards = np.array(self.rewards, dtype=float)
        if rewards.shape != (len(self.states), len(self.actions)):
            raise LearnerError("rewards must have shape (states, actions)")
        rewards.setflags(write=False)
        object.__setattr__(self, "rewards", rewards)

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        """Exploration order: states outer, actions inner."""
        return [(s, a) for s in range(self.n_states) for a in range(self.n_actions)]

    @classmethod
    def for_model(cls, model: RobustMdp, n: int, mode: SampleSizeMode = SampleSizeMode(),
                  diameter: float | None = None, tol: float = 1e-9, gamma: float | None = None) -> "LearnerConfig":
        """Config for ``model`` with the diameter chosen by precedence: given, exact, uniform bound."""
        source = "given"
        if diameter is None:
            kernels = vertex_kernels(model)
            exact = max(exact_diameter(k) for k in kernels)
            if math.isfinite(exact):
                diameter, source = exact, "exact"
            else:
                diameter, source = max(uniform_hitting_bound(k) for k in kernels), "uniform_bound"
        if not math.isfinite(diameter):
            raise LearnerError("some ambiguity vertex is not communicating")
        m = effective_sample_size(n, int(diameter), model.n_states, model.n_actions, mode)
        return cls(model.states, model.actions, model.rewards, model.gamma if gamma is None else gamma,
                   int(n), m, tol, diameter, source, mode.label())


@dataclass(frozen=True)
class ExplorationState:
    """Phase-1 counters at the end of exploration.

    ``J`` is the 1-based index of the pair currently being sampled
    (``|Z| + 1`` once all are done) and ``K`` the samples it already has.
    """

    J: int
    K: int
    samples: dict
    t: int
    m: int

    @property
    def success(self) -> bool:
        return self.m > 0 and self.J == len(self.samples) + 1


@dataclass(frozen=True)
class EmpiricalKernel:
    kernel: np.ndarray
    success: bool


@dataclass(frozen=True)
class TraceStep:
    """One phase-1 step; ``pair`` and ``k`` are 1-based and set only on sampling steps."""

    t: int
    state: int
    action: int
    next_state: int
    pair: int | None = None
    k: int | None = None


def _targets(config: LearnerConfig, pairs, j: int, s: int) -> bool:
    return config.m > 0 and j <= len(pairs) and s == pairs[j - 1][0]


def _phase1_update(config: LearnerConfig, pairs, memory, s: int, a: int, s2: int):
    t, j, k, samples = memory
    if _targets(config, pairs, j, s):
        samples = samples + (s2,)
        k += 1
        if k == config.m:
            j, k = j + 1, 0
    return t + 1, j, k, samples


def empirical_kernel(config: LearnerConfig, j: int, samples: tuple) -> EmpiricalKernel:
    """Frequencies when all pairs are complete, otherwise point masses at the own state."""
    pairs = config.pairs
    n_s = config.n_states
    kernel = np.zeros((n_s, config.n_actions, n_s))
    success = config.m > 0 and j == len(pairs) + 1
    if success:
        for idx, (s, a) in enumerate(pairs):
            for s2 in samples[idx * config.m:(idx + 1) * config.m]:
                kernel[s, a, s2] += 1.0
        kernel /= config.m
    else:
        for s in range(n_s):
            kernel[s, :, s] = 1.0
    return EmpiricalKernel(kernel, success)


def _uniform(n_actions: int) -> np.ndarray:
    return np.full(n_actions, 1.0 / n_actions)


def ete_policy(config: LearnerConfig, memory_cap: int = DEFAULT_MEMORY_CAP) -> FiniteMemoryPolicy:
    """The explore-then-exploit learner as a finite-memory policy.

    Phase-1 memory is ``(t, J, K, samples)`` with ``samples`` the next states
    recorded so far in pair order. After the update at time ``n`` the memory
    becomes ``("exploit", rule)`` with the frozen exploit rule.
    """
    pairs = config.pairs
    if config.m * len(pairs) > memory_cap:
        raise LearnerError(f"m * |Z| = {config.m * len(pairs)} exceeds the memory cap {memory_cap}")
    n_a = config.n_actions
    uniform = _uniform(n_a)
    targeted = [np.eye(n_a)[a] for a in range(n_a)]

    @lru_cache(maxsize=None)
    def freeze(j: int, samples: tuple):
        emp = empirical_kernel(config, j, samples)
        rule = exploit_rule(emp.kernel, config.rewards, config.gamma, config.tol).copy()
        rule.setflags(write=False)
        return EXPLOIT, _RuleKey(rule)

    def decide(memory, s):
        if memory[0] == EXPLOIT:
            return memory[1].rule[s]
        j = memory[1]
        if _targets(config, pairs, j, s):
            return targeted[pairs[j - 1][1]]
        return uniform

    def update(memory, s, a, s2):
        if memory[0] == EXPLOIT:
            return memory
        nxt = _phase1_update(config, pairs, memory, s, a, s2)
        if nxt[0] > config.n:
            return freeze(nxt[1], nxt[3])
        return nxt

    return FiniteMemoryPolicy((0, 1, 0, ()), decide, update, HISTORY, "explore then exploit")


class _RuleKey:
    """Hashable wrapper so a frozen decision rule can sit inside memory."""

    __slots__ = ("rule", "_key")

    def __init__(self, rule: np.ndarray):
        self.rule = rule
        self._key = rule.tobytes()

    def __hash__(self):
        return hash(self._key)

    def __eq__(self, other):
        return isinstance(other, _RuleKey) and self._key == other._key


class HiddenEnv:
    """Transition sampler the learner can only query by acting."""

    def __init__(self, kernel, mu, seed: int):
        self._kernel = np.asarray(kernel, float)
        self._mu = np.asarray(mu, float)
        self._rng = np.random.default_rng([int(seed), 2])
        self._state = None

    def reset(self) -> int:
        self._state = _draw(self._rng, self._mu)
        return self._state

    def step(self, action: int) -> int:
        self._state = _draw(self._rng, self._kernel[self._state, action])
        return self._state


def _draw(rng: np.random.Generator, probs: np.ndarray) -> int:
    cum = np.cumsum(probs)
    return min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), len(probs) - 1)


@dataclass(frozen=True)
class ExplorationRun:
    state: ExplorationState
    kernel: EmpiricalKernel
    trace: tuple
    final_state: int
    phase1_return: float


def explore(env: HiddenEnv, config: LearnerConfig, seed: int) -> ExplorationRun:
    """Run phase 1 (times ``0..n``) against ``env``; deterministic given ``seed`` and the env seed."""
    pairs = config.pairs
    policy = ete_policy(config)
    rng = np.random.default_rng([int(seed), 1])
    memory = policy.initial
    s = env.reset()
    trace = []
    ret, weight = 0.0, 1.0
    for t in range(config.n + 1):
        _, j, k, _ = memory
        probs = policy.decide(memory, s)
        a = _draw(rng, probs)
        s2 = env.step(a)
        ret += weight * float(config.rewards[s, a])
        weight *= config.gamma
        sampled = _targets(config, pairs, j, s)
        trace.append(TraceStep(t, s, a, s2, j if sampled else None, k + 1 if sampled else None))
        memory = _phase1_update(config, pairs, memory, s, a, s2)
        s = s2
    _, j, k, samples = memory
    store = {pair: list(samples[i * config.m:(i + 1) * config.m]) if config.m else [] for i, pair in enumerate(pairs)}
    state = ExplorationState(j, k, store, memory[0], config.m)
    return ExplorationRun(state, empirical_kernel(config, j, samples), tuple(trace), s, ret)


def schedule_violations(trace, config: LearnerConfig) -> list[str]:
    """Order violations in a phase-1 trace; empty when the schedule was followed."""
    pairs = config.pairs
    problems = []
    expected_j, expected_k = 1, 1
    for step in trace:
        if step.pair is None:
            if expected_j <= len(pairs) and step.state == pairs[expected_j - 1][0]:
                problems.append(f"t={step.t}: at target state of pair {expected_j} but no sample taken")
            continue
        if (step.pair, step.k) != (expected_j, expected_k):
            problems.append(f"t={step.t}: sample ({step.pair}, {step.k}) but expected ({expected_j}, {expected_k})")
        s, a = pairs[step.pair - 1]
        if (step.state, step.action) != (s, a):
            problems.append(f"t={step.t}: pair {step.pair} sampled at ({step.state}, {step.action})")
        expected_k += 1
        if expected_k > config.m:
            expected_j, expected_k = expected_j + 1, 1
    return problems


# ---------------------------------------------------------------- exploitation


def evi(kernel, rewards, gamma: float, tol: float = 1e-9, max_iter: int = 10_000) -> tuple[np.ndarray, np.ndarray]:
    """Bellman fixed point under ``kernel`` and the rule uniform over near-maximizing actions.

    Each round evaluates the greedy rule of the current values exactly and
    then checks the Bellman residual; iteration stops once it is at most
    ``tol``. Actions within ``10 * tol`` of the best one-step lookahead
    count as maximizers.
    """
    kernel = np.asarray(kernel, float)
    rewards = np.asarray(rewards, float)
    if np.max(np.abs(kernel.sum(axis=2) - 1.0)) > 1e-9 or np.any(kernel < -1e-12):
        raise LearnerError("empirical kernel rows must be probability distributions")
    n_s, n_a = rewards.shape
    v = np.zeros(n_s)
    for _ in range(max_iter):
        q = rewards + gamma * kernel @ v
        residual = float(np.max(np.abs(q.max(axis=1) - v)))
        if residual <= tol:
            break
        greedy = np.eye(n_a)[np.argmax(q, axis=1)]
        v = np.maximum(policy_value(kernel, rewards, gamma, greedy), q.max(axis=1))
    else:
        raise LearnerError(f"Bellman residual did not reach {tol} in {max_iter} rounds")
    q = rewards + gamma * kernel @ v
    mask = q >= q.max(axis=1, keepdims=True) - 10.0 * tol
    return v, mask / mask.sum(axis=1, keepdims=True)


def optimal_value(kernel, rewards, gamma: float, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Classical optimal value and a deterministic optimal rule under a known kernel."""
    v, rule = evi(kernel, rewards, gamma, tol)
    actions = np.argmax(rule, axis=1)
    return policy_value(kernel, rewards, gamma, np.eye(rule.shape[1])[actions]), actions


def policy_value(kernel, rewards, gamma: float, rule) -> np.ndarray:
    """Value of a stationary rule under a known kernel, by linear solve."""
    kernel = np.asarray(kernel, float)
    rule = np.asarray(rule, float)
    chain = np.einsum("sa,sat->st", rule, kernel)
    r = np.einsum("sa,sa->s", rule, np.asarray(rewards, float))
    values, _ = _solve_linear(sp.csr_matrix(chain), r, gamma)
    return values


# ---------------------------------------------------------------- diameter


def exact_diameter(kernel, tol: float = 1e-9, max_iter: int = 10**6) -> float:
    """Largest minimal expected hitting time over ordered state pairs; ``inf`` if not communicating."""
    kernel = np.asarray(kernel, float)
    n_s = kernel.shape[0]
    if n_s == 1:
        return 1.0
    reach = _reachable(kernel)
    if not reach.all():
        return math.inf
    worst = 0.0
    for target in range(n_s):
        h = np.zeros(n_s)
        for _ in range(max_iter):
            nxt = 1.0 + (kernel @ h).min(axis=1)
            nxt[target] = 0.0
            done = np.max(np.abs(nxt - h)) <= tol
            h = nxt
            if done:
                break
        else:
            raise LearnerError("hitting-time iteration did not converge")
        worst = max(worst, float(np.delete(h, target).max()))
    return float(math.ceil(worst - 1e-6))


def _reachable(kernel: np.ndarray) -> np.ndarray:
    """Boolean matrix: target reachable from source under some actions."""
    step = (kernel.max(axis=1) > 0).astype(int)
    reach = step.copy()
    for _ in range(kernel.shape[0]):
        reach = ((reach + reach @ step) > 0).astype(int)
    np.fill_diagonal(reach, 1)
    return reach.astype(bool)


def uniform_hitting_bound(kernel) -> float:
    """Largest expected hitting time under the uniform rule; an upper bound on the diameter."""
    kernel = np.asarray(kernel, float)
    n_s = kernel.shape[0]
    if n_s == 1:
        return 1.0
    chain = kernel.mean(axis=1)
    reach = _reachable(chain[:, None, :])
    if not reach.all():
        return math.inf
    worst = 0.0
    for target in range(n_s):
        keep = [s for s in range(n_s) if s != target]
        sub = chain[np.ix_(keep, keep)]
        h = np.linalg.solve(np.eye(n_s - 1) - sub, np.ones(n_s - 1))
        worst = max(worst, float(h.max()))
    return worst


# ---------------------------------------------------------------- experiment


def vertex_kernels(model: RobustMdp, cap: int = 4096) -> list[np.ndarray]:
    """Every time-homogeneous kernel built from ambiguity vertices."""
    amb = model.ambiguity
    if amb.rectangularity == GENERAL:
        return [np.array(k) for k in amb.sets.vertices]
    per_state = [amb.matrix_vertices(s) for s in range(model.n_states)]
    total = math.prod(len(v) for v in per_state)
    if total > cap:
        raise ModelError(f"{total} vertex kernels exceed the cap {cap}")
    return [np.array(combo) for combo in itertools.product(*per_state)]


@dataclass(frozen=True)
class GapRow:
    gamma: float
    n: int
    m: int
    mode: str
    seed: int
    vertex_index: int
    achieved: float
    optimum: float
    normalized_gap: float
    phase1_loss: float
    success: bool


@dataclass(frozen=True)
class GapSummary:
    gamma: float
    n: int
    m: int
    mode: str
    mean_worst_gap: float
    mean_worst_phase1_loss: float
    success_rate: float
    seeds: int


@dataclass(frozen=True)
class GapTable:
    rows: list
    summaries: list
    meta: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["gamma", "n", "m", "mode", "seed", "vertex_index", "achieved", "optimum",
                         "normalized_gap", "phase1_loss", "success"])
        for r in self.rows:
            writer.writerow([repr(r.gamma), r.n, r.m, r.mode, r.seed, r.vertex_index, repr(r.achieved),
                             repr(r.optimum), repr(r.normalized_gap), repr(r.phase1_loss), int(r.success)])
        for sm in self.summaries:
            writer.writerow([repr(sm.gamma), sm.n, sm.m, sm.mode, "mean", "worst", "", "",
                             repr(sm.mean_worst_gap), repr(sm.mean_worst_phase1_loss), repr(sm.success_rate)])
        return out.getvalue()

    def to_dict(self) -> dict:
        return {
            "rows": [r.__dict__ for r in self.rows],
            "summary": [sm.__dict__ for sm in self.summaries],
            "meta": self.meta,
        }


def _phase1_optimum(kernel, rewards, gamma: float, mu, n: int, actions) -> float:
    """Expected discounted reward of times ``0..n`` under a deterministic rule."""
    n_s = kernel.shape[0]
    chain = kernel[np.arange(n_s), actions]
    r = rewards[np.arange(n_s), actions]
    dist = np.asarray(mu, float)
    total, weight = 0.0, 1.0
    for _ in range(n + 1):
        total += weight * float(dist @ r)
        dist = dist @ chain
        weight *= gamma
    return total


@lru_cache(maxsize=4096)
def _cached_rule(kernel_bytes: bytes, shape: tuple, rewards_bytes: bytes, gamma: float, tol: float) -> np.ndarray:
    kernel = np.frombuffer(kernel_bytes).reshape(shape)
    rewards = np.frombuffer(rewards_bytes).reshape(shape[:2])
    _, rule = evi(kernel, rewards, gamma, tol)
    return rule


def exploit_rule(kernel: np.ndarray, rewards: np.ndarray, gamma: float, tol: float) -> np.ndarray:
    """``evi`` rule, memoized on the empirical kernel."""
    kernel = np.ascontiguousarray(kernel, float)
    rewards = np.ascontiguousarray(rewards, float)
    return _cached_rule(kernel.tobytes(), kernel.shape, rewards.tobytes(), float(gamma), float(tol))


def run_cell(config: LearnerConfig, kernel, mu, seed: int) -> tuple[float, float, bool]:
    """One seeded run: value conditional on the phase-1 path, its phase-1 part and the success flag.

    The phase-2 part is exact: ``gamma^(n+1)`` times the value of the frozen
    exploit rule from the realized state at time ``n + 1``.
    """
    run = explore(HiddenEnv(kernel, mu, seed), config, seed)
    rule = exploit_rule(run.kernel.kernel, config.rewards, config.gamma, config.tol)
    tail = policy_value(kernel, config.rewards, config.gamma, rule)
    achieved = run.phase1_return + config.gamma ** (config.n + 1) * float(tail[run.final_state])
    return achieved, run.phase1_return, run.kernel.success


def exact_learner_value(config: LearnerConfig, model: RobustMdp, kernel, mu) -> float:
    """Expected value of the learner, averaged over all exploration randomness."""
    return evaluate_exact(model, ete_policy(config), stationary_adversary(kernel), mu).value


def run_experiment(model: RobustMdp, gammas, seeds, mode: SampleSizeMode, mu=None, kernels=None,
                   diameter: float | None = None, tol: float = 1e-9) -> GapTable:
    """Normalized optimality gaps of the learner against every hidden vertex kernel.

    ``n = ceil(1 / sqrt(1 - gamma))`` for each ``gamma``. The optimum is the
    classical value under the true kernel; the gap is ``(1 - gamma)`` times
    the shortfall. Summaries average over seeds the worst gap over kernels.
    """
    kernels = vertex_kernels(model) if kernels is None else [np.asarray(k, float) for k in kernels]
    mu = np.full(model.n_states, 1.0 / model.n_states) if mu is None else np.asarray(mu, float)
    diameters = [exact_diameter(k) for k in kernels]
    if not all(math.isfinite(d) for d in diameters):
        bad = [i for i, d in enumerate(diameters) if not math.isfinite(d)]
        raise LearnerError(f"hidden kernels {bad} are not communicating")
    rows, summaries = [], []
    for gamma in gammas:
        gamma = float(gamma)
        n = exploration_period(gamma)
        config = LearnerConfig.for_model(model, n, mode, diameter if diameter is not None else max(diameters),
                                         tol, gamma)
        optima = []
        for kernel in kernels:
            values, actions = optimal_value(kernel, model.rewards, gamma)
            optima.append((float(mu @ values), _phase1_optimum(kernel, model.rewards, gamma, mu, n, actions)))
        worst_gaps, worst_losses, successes = [], [], []
        for seed in seeds:
            gaps, losses = [], []
            for index, kernel in enumerate(kernels):
                achieved, phase1, success = run_cell(config, kernel, mu, seed)
                optimum, phase1_opt = optima[index]
                gap = (1.0 - gamma) * (optimum - achieved)
                loss = (1.0 - gamma) * (phase1_opt - phase1)
                rows.append(GapRow(gamma, n, config.m, config.mode, int(seed), index, achieved, optimum, gap,
                                   loss, success))
                gaps.append(gap)
                losses.append(loss)
                successes.append(success)
            worst_gaps.append(max(gaps))
            worst_losses.append(max(losses))
        summaries.append(GapSummary(gamma, n, config.m, config.mode, float(np.mean(worst_gaps)),
                                    float(np.mean(worst_losses)), float(np.mean(successes)), len(seeds)))
    meta = {"diameter": max(diameters), "diameter_source": "given" if diameter is not None else "exact",
            "kernels": len(kernels), "mode": mode.label()}
    return GapTable(rows, summaries, meta)


def success_frequency(config: LearnerConfig, kernel, mu, seeds) -> float:
    """Fraction of seeded runs whose exploration collected all samples by time ``n``."""
    hits = 0
    for seed in seeds:
        run = explore(HiddenEnv(kernel, mu, seed), config, seed)
        hits += run.state.success
    return hits / len(seeds)
