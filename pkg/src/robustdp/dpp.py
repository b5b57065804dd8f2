"""When does robust dynamic programming give the max-min value?

``classify`` reads the verdict for an information/convexity profile off a
static 36-cell map. ``verify_numeric`` checks a concrete instance: it
certifies the principle through the sup-inf/inf-sup interchange or a
structural guarantee, and refutes it by exhibiting a finite-memory
controller whose certified worst-case value beats the Bellman value.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import bellman
from .fixtures import Fixture
from .model import DIRAC, GENERAL, SA, S, SIMPLEX, RobustMdp
from .policy import (
    HISTORY,
    INFO_CLASSES,
    MARKOV,
    STATIONARY,
    EvaluationError,
    FiniteMemoryPolicy,
    info_within,
    markov_schedule,
    periodic_schedule,
    robust_evaluate,
    stationary_policy,
)

HOLDS = "HOLDS"
FAILS = "FAILS"
UNKNOWN = "UNKNOWN"

TABLE_CITATION = "table_citation"
NUMERIC_CERTIFICATE = "numeric_certificate"
GAP_WITNESS = "gap_witness"

CITE_SA = "sa-rectangular: Bellman solution also solves the q-function and inf-sup equations"
CITE_MINIMAX = "convex controller and adversary: minimax interchange at every state"
CITE_LOWER = "six-case guarantee: adversary at least as informed as the controller"
CITE_CONVEX_CTRL = "convex controller: history-dependent controller against Markov adversary"
CITE_LEARN = "counterexample: controller learns a time-homogeneous non-convex adversary"
CITE_SCHEDULE = "counterexample: Markov schedule against a time-homogeneous non-convex adversary"
CITE_DETERMINISTIC = "counterexample: deterministic controller exploits a less informed adversary"

INFO_ORDER = (HISTORY, MARKOV, STATIONARY)
INFO_LABEL = {HISTORY: "History", MARKOV: "Markov", STATIONARY: "Stationary"}

TABLES = (
    ("SA-rectangular adversary, any action sets", SA, None, None),
    ("S-rectangular, convex controller and convex adversary", S, True, True),
    ("S-rectangular, convex controller and non-convex adversary", S, True, False),
    ("S-rectangular, non-convex controller", S, False, None),
)


@dataclass(frozen=True)
class AttributeProfile:
    controller_info: str
    adversary_info: str
    rectangularity: str
    controller_convex: bool
    adversary_convex: bool

    def __post_init__(self):
        if self.controller_info not in INFO_CLASSES or self.adversary_info not in INFO_CLASSES:
            raise ValueError(f"information classes must be among {INFO_CLASSES}")
        if self.rectangularity == GENERAL:
            raise ValueError("no dynamic programming verdicts for general rectangularity")
        if self.rectangularity not in (SA, S):
            raise ValueError(f"unknown rectangularity {self.rectangularity!r}")
        for flag in (self.controller_convex, self.adversary_convex):
            if not isinstance(flag, bool):
                raise ValueError("convexity flags must be booleans")

    def to_dict(self) -> dict:
        return {
            "controller_info": self.controller_info,
            "adversary_info": self.adversary_info,
            "rectangularity": self.rectangularity,
            "controller_convex": self.controller_convex,
            "adversary_convex": self.adversary_convex,
        }


def profile_for(model: RobustMdp, controller_info: str, adversary_info: str) -> AttributeProfile:
    """Profile of ``model`` with its set kinds filled in."""
    amb = model.ambiguity
    if amb.rectangularity == GENERAL:
        raise ValueError("no dynamic programming verdicts for general rectangularity")
    convex = all(amb.state_is_convex(s) for s in range(model.n_states))
    return AttributeProfile(controller_info, adversary_info, amb.rectangularity,
                            model.controller_set.is_convex, convex)


@dataclass(frozen=True)
class DppReport:
    verdict: str
    basis: str
    profile: AttributeProfile
    citations: tuple
    gap: float | None = None
    bellman_value: float | None = None
    witness: FiniteMemoryPolicy | None = None
    witness_value: float | None = None
    witness_lower: float | None = None
    margin: float | None = None
    scale: float = 1.0
    shift_per_step: float = 0.0
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """JSON-ready view; values on the model's reporting scale."""
        out = {"verdict": self.verdict, "basis": self.basis, "profile": self.profile.to_dict(),
               "citations": list(self.citations)}
        if self.gap is not None:
            out["interchange_gap"] = self.scale * self.gap
        if self.bellman_value is not None:
            out["bellman_value"] = self._report(self.bellman_value)
        if self.witness is not None:
            out["witness"] = self.witness.name
            out["witness_value"] = self._report(self.witness_value)
            out["witness_lower"] = self._report(self.witness_lower)
        if self.margin is not None:
            out["margin"] = self.scale * self.margin
        out.update(self.meta)
        return out

    def _report(self, v):
        return None if v is None else self.scale * v + self.shift_per_step


# ---------------------------------------------------------------- classification


def _s_cell(controller: str, adversary: str, controller_convex: bool, adversary_convex: bool):
    rank = {HISTORY: 2, MARKOV: 1, STATIONARY: 0}
    if controller_convex and adversary_convex:
        return HOLDS, (CITE_MINIMAX,)
    if controller == adversary == HISTORY or rank[adversary] >= rank[controller]:
        return HOLDS, (CITE_LOWER,)
    if controller_convex:
        if (controller, adversary) == (HISTORY, MARKOV):
            return HOLDS, (CITE_CONVEX_CTRL,)
        if controller == HISTORY:
            return FAILS, (CITE_LEARN,)
        return FAILS, (CITE_SCHEDULE,)
    return FAILS, (CITE_DETERMINISTIC,)


def classify(profile: AttributeProfile) -> DppReport:
    """Verdict from the static map; cells list (controller, adversary) classes."""
    if profile.rectangularity == SA:
        verdict, cites = HOLDS, (CITE_SA,)
    else:
        verdict, cites = _s_cell(profile.controller_info, profile.adversary_info,
                                 profile.controller_convex, profile.adversary_convex)
    return DppReport(verdict, TABLE_CITATION, profile, cites)


def table_profiles():
    """The 36 profiles in rendering order: four tables of 3 x 3 cells."""
    for title, rect, ctrl_convex, adv_convex in TABLES:
        for controller in INFO_ORDER:
            for adversary in INFO_ORDER:
                yield title, AttributeProfile(
                    controller, adversary, rect,
                    True if ctrl_convex is None else ctrl_convex,
                    # the non-convex-controller table covers either adversary kind
                    False if adv_convex is None else adv_convex,
                )


def render_tables() -> str:
    """Plain-text rendering of every verdict with its citation."""
    lines = []
    current = None
    width = max(len(label) for label in INFO_LABEL.values())
    for title, profile in table_profiles():
        if title != current:
            if current is not None:
                lines.append("")
            current = title
            lines.append(title)
            lines.append("  controller \\ adversary: " + ", ".join(INFO_LABEL[a] for a in INFO_ORDER))
        report = classify(profile)
        lines.append(
            f"  {INFO_LABEL[profile.controller_info]:<{width}} vs {INFO_LABEL[profile.adversary_info]:<{width}}"
            f"  {report.verdict:<5}  {report.citations[0]}"
        )
    holds = sum(classify(p).verdict == HOLDS for _, p in table_profiles())
    fails = sum(classify(p).verdict == FAILS for _, p in table_profiles())
    lines.append("")
    lines.append(f"{holds} HOLDS, {fails} FAILS")
    return "\n".join(lines) + "\n"


def tables_dict() -> list:
    out = []
    for title, profile in table_profiles():
        report = classify(profile)
        out.append({"table": title, **profile.to_dict(), "verdict": report.verdict,
                    "citations": list(report.citations)})
    return out


# ---------------------------------------------------------------- witness search


def trivial_states(model: RobustMdp) -> list[bool]:
    """States where every action has the same reward and the same transition options."""
    amb = model.ambiguity
    out = []
    for s in range(model.n_states):
        rewards = model.rewards[s]
        same = bool(np.all(rewards == rewards[0]))
        if same and amb.rectangularity == SA:
            first = amb.sets[s][0]
            same = all(amb.sets[s][a] == first for a in range(model.n_actions))
        elif same:
            verts = amb.sets[s].vertices
            same = bool(np.all(verts == verts[:, :1]))
        out.append(same)
    return out


def _grid_rows(model: RobustMdp, step: int = 4) -> np.ndarray:
    """Action rows on a 1/step grid that lie in the controller set."""
    cset = model.controller_set
    if not cset.is_convex:
        return model.controller_rows()
    n_a = model.n_actions
    rows = []
    for combo in itertools.product(range(step + 1), repeat=n_a):
        if sum(combo) == step:
            row = np.array(combo, float) / step
            if cset.kind == SIMPLEX or cset.contains(row, n_a):
                rows.append(row)
    rows.sort(key=lambda r: tuple(-r))
    return np.array(rows) if rows else model.controller_rows()


def _rules(model: RobustMdp, rows: np.ndarray, choice_states: list[int]):
    """Decision rules assigning a row to each choice state, row 0 elsewhere."""
    base = np.tile(model.controller_rows()[0], (model.n_states, 1))
    for picks in itertools.product(range(len(rows)), repeat=len(choice_states)):
        rule = base.copy()
        for s, k in zip(choice_states, picks):
            rule[s] = rows[k]
        yield rule


def _react_once(model: RobustMdp, start_rule: np.ndarray, commit: dict, name: str) -> FiniteMemoryPolicy:
    """Play ``start_rule`` until the first transition, then a fixed pure row.

    ``commit[(action, next_state)]`` is the index of the pure row kept forever.
    """
    pure = model.controller_rows()

    def decide(mem, s):
        return start_rule[s] if mem is None else pure[mem]

    def update(mem, s, a, s2):
        return commit[(a, s2)] if mem is None else mem

    return FiniteMemoryPolicy(None, decide, update, HISTORY, name)


def default_witnesses(model: RobustMdp, controller_info: str = HISTORY, cap: int = 2000) -> list:
    """Finite witness family used when none is supplied.

    In order: stationary rules on a 1/4 grid, one or two pure rules followed
    by a grid rule, periodic pure schedules of period 2 to 4, and react-once
    automata that randomize until the first transition and then commit to a
    pure action chosen from (action, next state), either relative to the
    action taken (keep or switch) or absolute. Truncated at ``cap``.
    """
    trivial = trivial_states(model)
    choice_states = [s for s in range(model.n_states) if not trivial[s]]
    pure = model.controller_rows()
    grid = _grid_rows(model)
    pure_rules = list(_rules(model, pure, choice_states))
    grid_rules = list(_rules(model, grid, choice_states))
    out: list = []

    def emit(policy):
        if len(out) < cap and info_within(policy.info_class, controller_info):
            out.append(policy)

    for k, rule in enumerate(grid_rules):
        emit(stationary_policy(rule, f"stationary grid rule {k}"))
    if info_within(MARKOV, controller_info):
        for length in (1, 2):
            for prefix in itertools.product(range(len(pure_rules)), repeat=length):
                for k, tail in enumerate(grid_rules):
                    emit(markov_schedule([pure_rules[i] for i in prefix], tail,
                                         f"prefix {list(prefix)} then grid rule {k}"))
        for period in (2, 3, 4):
            for cycle in itertools.product(range(len(pure_rules)), repeat=period):
                if len(set(cycle)) > 1:
                    emit(periodic_schedule([pure_rules[i] for i in cycle], f"periodic {list(cycle)}"))
    if info_within(HISTORY, controller_info) and len(out) < cap:
        n_pure, n_s = len(pure), model.n_states
        if len(pure_rules) * n_pure ** min(n_s, 6) <= cap * 4:
            for k, start in enumerate(grid_rules):
                for shifts in itertools.product(range(n_pure), repeat=n_s):
                    commit = {(a, s2): (a + shifts[s2]) % n_pure for a in range(n_pure) for s2 in range(n_s)}
                    emit(_react_once(model, start, commit, f"react-once relative {list(shifts)} from rule {k}"))
                for targets in itertools.product(range(n_pure), repeat=n_s):
                    commit = {(a, s2): targets[s2] for a in range(n_pure) for s2 in range(n_s)}
                    emit(_react_once(model, start, commit, f"react-once absolute {list(targets)} from rule {k}"))
    return out


def _in_controller_set(model: RobustMdp, policy: FiniteMemoryPolicy, cap: int = 10**4) -> bool:
    cset = model.controller_set
    n_a = model.n_actions
    try:
        memories = policy.memory_states(model, cap)
    except EvaluationError:
        return False
    for mem in memories:
        for s in range(model.n_states):
            row = np.asarray(policy.decide(mem, s), float)
            if cset.kind == SIMPLEX:
                continue
            if cset.kind == DIRAC and np.sum(row > 0) != 1:
                return False
            if cset.kind != DIRAC and not cset.contains(row, n_a):
                return False
    return True


# ---------------------------------------------------------------- numeric verification


@dataclass(frozen=True)
class GapCertificate:
    witness: FiniteMemoryPolicy
    value: float
    lower: float
    bellman_value: float
    margin: float
    exact: bool
    adversary_class: str


def error_budget(model: RobustMdp, tol: float) -> float:
    """Slack covering solver error in ``u*`` and the robust evaluation."""
    return 2.0 * tol + 1e-9 / (1.0 - model.gamma)


def certify_gap(model: RobustMdp, witnesses, mu, tol: float = 1e-9,
                adversary_class: str = STATIONARY) -> GapCertificate:
    """Best certified margin of a witness over ``E_mu[u*]``.

    The margin uses the certified lower end of each witness's worst-case
    value, so a margin above :func:`error_budget` proves that the controller
    class containing the witness beats the Bellman value against
    ``adversary_class``. Witnesses are screened without hull grids first and
    refined in order of their upper values; refinement stops once no
    remaining upper value beats the best certified lower value by more than
    that witness's own grid slack, so the margin is within one slack of the
    best in the family.
    """
    witnesses = list(witnesses)
    if not witnesses:
        raise ValueError("need at least one witness")
    mu = np.asarray(mu, float)
    u_star = bellman.solve_supinf(model, tol).fixed_point
    base = float(mu @ u_star)
    screens = [robust_evaluate(model, w, mu, tol, adversary_class, grid_points=0) for w in witnesses]
    order = sorted(range(len(witnesses)), key=lambda i: (-screens[i].value, i))
    best, slack = None, 0.0
    for i in order:
        result = screens[i]
        if best is not None and result.value <= best[1].lower + slack:
            break
        if not result.exact:
            result = robust_evaluate(model, witnesses[i], mu, tol, adversary_class)
        if best is None or result.lower > best[1].lower:
            best = (witnesses[i], result)
            slack = result.value - result.lower
    witness, result = best
    return GapCertificate(witness, result.value, result.lower, base, result.lower - base, result.exact,
                          adversary_class)


def verify_numeric(model: RobustMdp, profile: AttributeProfile, tol: float = 1e-9, witness_family=None,
                   mu=None) -> DppReport:
    """Certify, refute, or leave open the principle for ``profile`` on ``model``.

    HOLDS when the interchange gap is within ``3 tol``, a structural
    guarantee applies, or the static map guarantees the cell. Otherwise the
    witnesses that fit the controller class and action set are evaluated
    against the profile's adversary class; FAILS needs a certified margin
    above the error budget. Anything else is UNKNOWN.
    """
    expected = profile_for(model, profile.controller_info, profile.adversary_info)
    if expected != profile:
        raise ValueError(f"profile {profile.to_dict()} does not match the model ({expected.to_dict()})")
    mu = np.full(model.n_states, 1.0 / model.n_states) if mu is None else np.asarray(mu, float)
    scale, shift = model.reward_map.scale, model.reward_map.shift / (1.0 - model.gamma)
    interchange = bellman.check_interchange(model, tol)
    base = float(mu @ interchange.supinf.fixed_point)
    common = dict(gap=interchange.gap, bellman_value=base, scale=scale, shift_per_step=shift)
    table = classify(profile)
    if interchange.structural == bellman.GUARANTEED or interchange.numeric == bellman.INTERCHANGES:
        return DppReport(HOLDS, NUMERIC_CERTIFICATE, profile, table.citations, **common)
    if table.verdict == HOLDS:
        return DppReport(HOLDS, TABLE_CITATION, profile, table.citations, **common)
    if witness_family is None:
        witness_family = default_witnesses(model, profile.controller_info)
    candidates = [
        w for w in witness_family
        if info_within(w.info_class, profile.controller_info) and _in_controller_set(model, w)
    ]
    if candidates:
        cert = certify_gap(model, candidates, mu, tol, profile.adversary_info)
        meta = {"witnesses_tried": len(candidates), "witness_exact": cert.exact}
        common.update(witness=cert.witness, witness_value=cert.value, witness_lower=cert.lower,
                      margin=cert.margin, meta=meta)
        if cert.margin > error_budget(model, tol):
            return DppReport(FAILS, GAP_WITNESS, profile, table.citations, **common)
        return DppReport(UNKNOWN, GAP_WITNESS, profile, table.citations, **common)
    return DppReport(UNKNOWN, NUMERIC_CERTIFICATE, profile, table.citations,
                     meta={"witnesses_tried": 0}, **common)


def fixture_reports(fx: Fixture, tol: float = 1e-9) -> dict:
    """DPP reports for each witness of a fixture in the profile it targets."""
    out = {}
    for name, witness in fx.witnesses.items():
        profile = profile_for(fx.model, witness.info_class, fx.adversary_class[name])
        out[name] = verify_numeric(fx.model, profile, tol, [witness], fx.mu)
    return out


__all__ = [
    "FAILS", "HOLDS", "UNKNOWN", "AttributeProfile", "DppReport", "GapCertificate",
    "certify_gap", "classify", "default_witnesses", "fixture_reports", "profile_for",
    "render_tables", "tables_dict", "verify_numeric",
]
