import itertools
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from robustdp import bellman, dpp
from robustdp.fixtures import (
    ALPHA_GRID,
    EX_5_1,
    EX_5_2,
    EX_5_3_CONVEX,
    EX_5_3_FINITE,
    FIXTURE_IDS,
    ex_5_3_kernel,
    fixture,
)
from robustdp.model import FINITE, SA, SIMPLEX, S
from robustdp.policy import (
    HISTORY,
    MARKOV,
    STATIONARY,
    evaluate_exact,
    robust_evaluate,
    stationary_adversary,
    stationary_policy,
)

GOLDEN = Path(__file__).parent / "golden" / "tables.txt"
INFO = (HISTORY, MARKOV, STATIONARY)
RANK = {STATIONARY: 0, MARKOV: 1, HISTORY: 2}


def profile(controller, adversary, rect=S, ctrl_convex=True, adv_convex=False):
    return dpp.AttributeProfile(controller, adversary, rect, ctrl_convex, adv_convex)


# ---------------------------------------------------------------- static map


def test_classify_examples():
    hh = dpp.classify(profile(HISTORY, HISTORY, S, False, False))
    assert hh.verdict == dpp.HOLDS and hh.citations == (dpp.CITE_LOWER,)
    hs = dpp.classify(profile(HISTORY, STATIONARY, S, True, False))
    assert hs.verdict == dpp.FAILS and hs.citations == (dpp.CITE_LEARN,)
    for ctrl_convex, adv_convex in itertools.product([True, False], repeat=2):
        mm = dpp.classify(profile(MARKOV, MARKOV, SA, ctrl_convex, adv_convex))
        assert mm.verdict == dpp.HOLDS and mm.citations == (dpp.CITE_SA,)
        assert mm.basis == dpp.TABLE_CITATION


# the cross cells, typed in by hand from the four published tables
EXPECTED_FAILS = {
    ("S-rectangular, convex controller and non-convex adversary", HISTORY, STATIONARY),
    ("S-rectangular, convex controller and non-convex adversary", MARKOV, STATIONARY),
    ("S-rectangular, non-convex controller", HISTORY, MARKOV),
    ("S-rectangular, non-convex controller", HISTORY, STATIONARY),
    ("S-rectangular, non-convex controller", MARKOV, STATIONARY),
}


def test_full_verdict_map():
    cells = list(dpp.table_profiles())
    assert len(cells) == 36
    fails = {(title, p.controller_info, p.adversary_info) for title, p in cells
             if dpp.classify(p).verdict == dpp.FAILS}
    assert fails == EXPECTED_FAILS
    assert sum(dpp.classify(p).verdict == dpp.HOLDS for _, p in cells) == 31


def test_cross_cells_of_each_table():
    assert dpp.classify(profile(STATIONARY, HISTORY, SA)).verdict == dpp.HOLDS
    assert dpp.classify(profile(HISTORY, STATIONARY, S, True, False)).verdict == dpp.FAILS
    assert dpp.classify(profile(MARKOV, MARKOV, S, False, False)).verdict == dpp.HOLDS
    assert dpp.classify(profile(HISTORY, MARKOV, S, True, False)).citations == (dpp.CITE_CONVEX_CTRL,)


def test_non_convex_controller_verdict_ignores_adversary_convexity():
    for c, a in itertools.product(INFO, INFO):
        assert dpp.classify(profile(c, a, S, False, True)).verdict == dpp.classify(profile(c, a, S, False, False)).verdict


def test_more_informed_adversary_never_breaks_a_hold():
    for rect, ctrl_convex, adv_convex in [(SA, True, True), (S, True, True), (S, True, False), (S, False, False)]:
        for c, a in itertools.product(INFO, INFO):
            if dpp.classify(profile(c, a, rect, ctrl_convex, adv_convex)).verdict != dpp.HOLDS:
                continue
            for stronger in INFO:
                if RANK[stronger] >= RANK[a]:
                    assert dpp.classify(profile(c, stronger, rect, ctrl_convex, adv_convex)).verdict == dpp.HOLDS


def test_profile_validation():
    with pytest.raises(ValueError):
        profile(HISTORY, HISTORY, "general")
    with pytest.raises(ValueError):
        profile("clairvoyant", HISTORY)
    with pytest.raises(ValueError):
        dpp.AttributeProfile(HISTORY, HISTORY, S, 1, False)


def test_golden_tables_file():
    assert dpp.render_tables() == GOLDEN.read_text(encoding="utf-8")


def test_tables_dict_matches_render():
    rows = dpp.tables_dict()
    assert len(rows) == 36
    assert sum(r["verdict"] == dpp.FAILS for r in rows) == 5
    assert all(r["citations"] for r in rows)


# ---------------------------------------------------------------- fixtures


def test_fixture_lookup_errors():
    with pytest.raises(KeyError):
        fixture("EX_9_9")
    with pytest.raises(ValueError):
        fixture(EX_5_2, 0.9)


@pytest.mark.parametrize("gamma", [0.5, 0.8, 0.9, 0.95])
def test_fixture_closed_forms_match_solvers(gamma):
    for fixture_id in (EX_5_1, EX_5_3_CONVEX, EX_5_3_FINITE):
        fx = fixture(fixture_id, gamma)
        u = fx.paper_scale(bellman.solve_supinf(fx.model, 1e-10).fixed_point)
        for name, value in fx.expected["u_star"].items():
            assert u[fx.model.state_index(name)] == pytest.approx(value, abs=1e-8)
    fx = fixture(EX_5_3_FINITE, gamma)
    for alpha in ALPHA_GRID:
        adv = stationary_adversary(ex_5_3_kernel(fx, alpha))
        value = fx.paper_scale(evaluate_exact(fx.model, fx.witnesses["alternating"], adv, fx.mu).value)
        assert value == pytest.approx(fx.expected["alternating_vs_alpha"][str(alpha)], abs=1e-8)


def test_markov_schedule_fixture_expectations():
    fx = fixture(EX_5_2)
    assert fx.expected["u_star"] == {"I": 1.0, "B": 3.0, "C": 0.0}
    assert fx.expected["phi_a1"] == 0.75
    pol = fx.witnesses["schedule"]
    for name, value in fx.expected["witness_vs_kernel"]["schedule"].items():
        got = evaluate_exact(fx.model, pol, stationary_adversary(fx.kernels[name]), fx.mu).value
        assert got == pytest.approx(value, abs=1e-10)


def test_fixture_witness_kinds():
    assert fixture(EX_5_1).witnesses["learn_then_commit"].info_class == HISTORY
    assert fixture(EX_5_2).witnesses["schedule"].info_class == MARKOV
    fx = fixture(EX_5_3_CONVEX)
    assert fx.witnesses["alternating"].info_class == MARKOV
    assert fx.witnesses["branching"].info_class == HISTORY


# ---------------------------------------------------------------- numeric verification


@pytest.mark.parametrize("gamma", [0.5, 0.8, 0.9, 0.95])
def test_learn_then_commit_fails(gamma):
    fx = fixture(EX_5_1, gamma)
    report = dpp.fixture_reports(fx)["learn_then_commit"]
    assert report.verdict == dpp.FAILS
    assert report.basis == dpp.GAP_WITNESS
    out = report.to_dict()
    assert out["witness_value"] == pytest.approx(gamma**3 / (1 - gamma**2), abs=1e-8)
    assert out["bellman_value"] == pytest.approx(0.0, abs=1e-8)
    assert out["margin"] == pytest.approx(gamma**3 / (1 - gamma**2), abs=1e-8)


def test_default_witness_search_refutes_learn_then_commit_cell():
    fx = fixture(EX_5_1)
    report = dpp.verify_numeric(fx.model, dpp.profile_for(fx.model, HISTORY, STATIONARY), mu=fx.mu)
    assert report.verdict == dpp.FAILS
    assert report.meta["witnesses_tried"] > 1


def test_stationary_witnesses_cannot_refute():
    fx = fixture(EX_5_1)
    eye = np.eye(2)
    family = [stationary_policy(eye[list(a)]) for a in itertools.product(range(2), repeat=3)]
    for pol in family:
        assert fx.paper_scale(robust_evaluate(fx.model, pol, fx.mu, adversary_class=STATIONARY).value) <= 1e-9
    # a stationary controller against a stationary adversary is a table HOLD;
    # ask for the failing cell with stationary witnesses only
    report = dpp.verify_numeric(fx.model, dpp.profile_for(fx.model, HISTORY, STATIONARY), witness_family=family,
                                mu=fx.mu)
    assert report.verdict == dpp.UNKNOWN


def test_sa_fixture_holds_structurally():
    model = oracles.random_model(12, rect=SA, kind=FINITE, controller=SIMPLEX)
    for c, a in itertools.product(INFO, INFO):
        report = dpp.verify_numeric(model, dpp.profile_for(model, c, a), witness_family=[])
        assert report.verdict == dpp.HOLDS
        assert report.basis == dpp.NUMERIC_CERTIFICATE


def test_certify_gap_examples():
    fx = fixture(EX_5_1)
    cert = dpp.certify_gap(fx.model, list(fx.witnesses.values()), fx.mu)
    assert fx.model.reward_map.scale * cert.margin == pytest.approx(3.8368421, abs=1e-7)
    fx = fixture(EX_5_2)
    cert = dpp.certify_gap(fx.model, list(fx.witnesses.values()), fx.mu)
    assert cert.margin >= 0.2 - 1e-8
    with pytest.raises(ValueError):
        dpp.certify_gap(fx.model, [], fx.mu)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_no_witness_beats_sa_bellman_value(seed):
    model = oracles.random_model(seed, rect=SA, kind=FINITE, controller=SIMPLEX, max_states=3, max_actions=2,
                                 max_set=2)
    mu = np.full(model.n_states, 1.0 / model.n_states)
    tol = 1e-9
    family = dpp.default_witnesses(model, HISTORY, cap=30)
    if not family:
        return
    for cls in (STATIONARY, MARKOV, HISTORY):
        cert = dpp.certify_gap(model, family, mu, tol, cls)
        assert cert.margin <= tol / (1 - model.gamma) + 1e-9


@pytest.mark.parametrize("fixture_id", FIXTURE_IDS)
def test_classify_agrees_with_numeric_on_fixtures(fixture_id):
    fx = fixture(fixture_id)
    for name, report in dpp.fixture_reports(fx).items():
        table = dpp.classify(report.profile)
        assert table.verdict == dpp.FAILS
        assert report.verdict == dpp.FAILS
        assert report.margin > dpp.error_budget(fx.model, 1e-9)
    # the informed-adversary cells hold on the same model
    for c in INFO:
        report = dpp.verify_numeric(fx.model, dpp.profile_for(fx.model, c, HISTORY), mu=fx.mu)
        assert report.verdict == dpp.HOLDS


def test_profile_must_match_model():
    fx = fixture(EX_5_1)
    wrong = profile(HISTORY, STATIONARY, S, True, True)
    with pytest.raises(ValueError, match="does not match"):
        dpp.verify_numeric(fx.model, wrong)


def test_report_dict_uses_reporting_scale():
    fx = fixture(EX_5_3_FINITE)
    report = dpp.fixture_reports(fx)["alternating"]
    out = report.to_dict()
    g = fx.model.gamma
    assert out["bellman_value"] == pytest.approx(-(g**3) / (1 - g**2), abs=1e-8)
    assert out["witness_value"] == pytest.approx(-(g**3) / (1 + g**2), abs=1e-8)
    # the alternation instance restricts the controller to point masses
    assert out["citations"] == [dpp.CITE_DETERMINISTIC]
