import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import random_model
from robustdp.fixtures import EX_5_1, EX_5_2, FIXTURE_IDS, fixture, learner_fixture
from robustdp.model import (
    FINITE,
    GENERAL,
    HULL,
    SA,
    S,
    AmbiguitySpec,
    ControllerSet,
    DistributionSet,
    ModelError,
    PriorSpec,
    load_model,
    marginalize,
    model_to_dict,
    parse_model,
    reduce_drmdp,
    sa_to_s,
    serialize,
    validate,
)

MODELS = Path(__file__).resolve().parents[1] / "models"


def test_parse_choice_fixture_file():
    model = load_model(MODELS / "ex51.json")
    assert model.states == ("I", "G", "B")
    assert model.n_actions == 2
    assert model.gamma == 0.9
    assert model.ambiguity.rectangularity == S
    assert model.ambiguity.sets[0].kind == FINITE
    assert len(model.ambiguity.sets[0]) == 2
    assert [len(d) for d in model.ambiguity.sets[1:]] == [1, 1]


@pytest.mark.parametrize("name,fixture_id", [("ex51.json", EX_5_1), ("ex52.json", EX_5_2)])
def test_shipped_files_equal_fixtures(name, fixture_id):
    assert load_model(MODELS / name) == fixture(fixture_id).model


def _doc(fixture_id=EX_5_2):
    return json.loads(serialize(fixture(fixture_id).model))


def test_row_sum_violation_rejected():
    doc = _doc()
    doc["ambiguity"]["sets"]["B"][0][0] = [0.0, 0.9, 0.0]
    with pytest.raises(ModelError, match="stochasticity violation"):
        parse_model(json.dumps(doc))


def test_parse_tolerance_renormalizes_small_roundoff():
    doc = _doc()
    doc["ambiguity"]["sets"]["B"][0][0] = [0.0, 1.0 - 5e-10, 0.0]
    model = parse_model(json.dumps(doc))
    assert model.ambiguity.sets[1].vertices[0, 0].sum() == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize(
    "mutate,message",
    [
        (lambda d: d.pop("gamma"), "missing field 'gamma'"),
        (lambda d: d["rewards"].pop("I|a1"), "missing entries"),
        (lambda d: d["rewards"].__setitem__("I|a1", 1.5), "reward above 1"),
        (lambda d: d.__setitem__("gamma", 1.0), "discount out of range"),
        (lambda d: d["ambiguity"].__setitem__("rectangularity", "x"), "unknown value"),
        (lambda d: d["ambiguity"]["sets"]["B"].__setitem__(0, [[0, 1, 0]]), "wrong arity"),
        (lambda d: d["controller_set"].__setitem__("kind", "ball"), "unknown kind"),
    ],
)
def test_schema_errors(mutate, message):
    doc = _doc()
    mutate(doc)
    with pytest.raises(ModelError, match=message):
        parse_model(json.dumps(doc))


def test_invalid_json():
    with pytest.raises(ModelError, match="not valid JSON"):
        parse_model("{")


@pytest.mark.parametrize("fixture_id", FIXTURE_IDS)
def test_round_trip_fixtures(fixture_id):
    model = fixture(fixture_id).model
    text = serialize(model)
    again = parse_model(text)
    assert again == model
    assert serialize(again) == text


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6))
def test_round_trip_is_bit_exact(seed):
    model = random_model(seed)
    again = parse_model(serialize(model))
    assert again == model
    assert np.array_equal(again.rewards, model.rewards)


def test_round_trip_general():
    rng = np.random.default_rng(0)
    kernels = rng.dirichlet(np.ones(2), size=(3, 2, 2))
    model = fixture(EX_5_2).model
    general = model.replace(
        states=("x", "y"), rewards=np.full((2, 2), 0.5),
        ambiguity=AmbiguitySpec(GENERAL, DistributionSet(HULL, kernels)),
    )
    assert parse_model(serialize(general)) == general


def test_validate_examples():
    assert validate(fixture(EX_5_2).model) == []
    model = fixture(EX_5_2).model
    assert any("discount out of range" in d for d in validate(model.replace(gamma=1.0)))
    rewards = np.array(model.rewards)
    rewards[0, 0] = -0.1
    diags = validate(model.replace(rewards=rewards))
    assert any("reward below 0" in d and "I|a1" in d for d in diags)


def test_validate_reports_bad_rows_with_location():
    model = fixture(EX_5_2).model
    sets = list(model.ambiguity.sets)
    sets[1] = DistributionSet(FINITE, np.array([[[0.0, 0.9, 0.0], [0.0, 1.0, 0.0]]]))
    diags = validate(model.replace(ambiguity=AmbiguitySpec(S, sets)))
    assert len(diags) == 1 and diags[0].startswith("ambiguity[B]") and "row sum" in diags[0]


def test_validate_accepts_every_fixture():
    for fixture_id in FIXTURE_IDS:
        assert validate(fixture(fixture_id).model) == []
    assert validate(learner_fixture()[0]) == []


def test_controller_set_needs_vertices():
    with pytest.raises(ModelError):
        ControllerSet(HULL)
    assert ControllerSet(HULL, [[0.5, 0.5]]).enumerable


def test_duplicate_vertices_removed():
    d = DistributionSet(FINITE, [[1.0, 0.0], [1.0 + 1e-14, 0.0], [0.0, 1.0]])
    assert len(d) == 2


# ---------------------------------------------------------------- transforms


def _sa(rows_per_pair):
    return AmbiguitySpec(SA, [[DistributionSet(FINITE, np.array(r)) for r in row] for row in rows_per_pair])


def test_sa_to_s_singleton_product():
    r1, r2 = [1.0, 0.0], [0.0, 1.0]
    out = sa_to_s(_sa([[[r1], [r2]]]))
    assert out.rectangularity == S
    assert out.sets[0].vertices.tolist() == [[r1, r2]]


def test_sa_to_s_two_by_one():
    r1, r2, r3 = [1.0, 0.0], [0.5, 0.5], [0.0, 1.0]
    out = sa_to_s(_sa([[[r1, r2], [r3]]]))
    assert {tuple(map(tuple, m)) for m in out.sets[0].vertices} == {(tuple(r1), tuple(r3)), (tuple(r2), tuple(r3))}


def test_sa_to_s_blowup_guard():
    rng = np.random.default_rng(1)
    rows = [[rng.dirichlet(np.ones(2), size=10) for _ in range(3)]]
    with pytest.raises(ModelError, match="above the cap"):
        sa_to_s(_sa(rows), cap=100)


def test_sa_to_s_refuses_hulls():
    spec = AmbiguitySpec(SA, [[DistributionSet(HULL, np.array([[1.0, 0.0], [0.0, 1.0]]))]])
    with pytest.raises(ModelError, match="convex hulls"):
        sa_to_s(spec)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_sa_to_s_projection_recovers_rows(seed):
    model = random_model(seed, rect=SA, kind=FINITE)
    out = sa_to_s(model.ambiguity)
    for s in range(model.n_states):
        assert len(out.sets[s]) == np.prod([len(d) for d in model.ambiguity.sets[s]])
        for a in range(model.n_actions):
            projected = DistributionSet(FINITE, out.sets[s].vertices[:, a])
            assert projected.vertex_set() == model.ambiguity.sets[s][a].vertex_set()


def _general(kind, kernels):
    return AmbiguitySpec(GENERAL, DistributionSet(kind, np.array(kernels)))


def test_marginalize_singleton():
    kernel = np.random.default_rng(2).dirichlet(np.ones(3), size=(3, 2))
    spec = _general(FINITE, [kernel])
    for to in (S, SA):
        out = marginalize(spec, to)
        assert out.rectangularity == to
    assert all(len(d) == 1 for d in marginalize(spec, S).sets)
    assert all(len(d) == 1 for row in marginalize(spec, SA).sets for d in row)


def test_marginalize_kernels_differing_at_one_state():
    rng = np.random.default_rng(3)
    first = rng.dirichlet(np.ones(3), size=(3, 2))
    second = first.copy()
    second[0] = rng.dirichlet(np.ones(3), size=2)
    out = marginalize(_general(FINITE, [first, second]), S)
    assert [len(d) for d in out.sets] == [2, 1, 1]


def test_marginalize_preserves_hull_kind():
    rng = np.random.default_rng(4)
    kernels = rng.dirichlet(np.ones(2), size=(2, 2, 2))
    out = marginalize(_general(HULL, kernels), S)
    assert all(d.kind == HULL and len(d) == 2 for d in out.sets)
    assert np.array_equal(out.sets[1].vertices, kernels[:, 1])


def test_marginalize_needs_general():
    with pytest.raises(ModelError):
        marginalize(fixture(EX_5_2).model.ambiguity)


def test_reduce_drmdp_examples():
    rng = np.random.default_rng(5)
    p, p1, p2 = (rng.dirichlet(np.ones(2), size=(2,)) for _ in range(3))
    # one index, one candidate prior per entry of the inner tuple
    degenerate = reduce_drmdp(PriorSpec(S, ((((1.0, p),),),)))
    assert np.array_equal(degenerate.sets[0].vertices[0], p)
    mean = reduce_drmdp(PriorSpec(S, ((((0.5, p1), (0.5, p2)),),)))
    assert np.allclose(mean.sets[0].vertices[0], (p1 + p2) / 2, atol=1e-15)
    two = reduce_drmdp(PriorSpec(S, ((((0.25, p1), (0.75, p2)), ((0.75, p1), (0.25, p2))),)))
    assert len(two.sets[0]) == 2
    assert np.allclose(two.sets[0].vertices, [0.25 * p1 + 0.75 * p2, 0.75 * p1 + 0.25 * p2], atol=1e-15)
    assert np.allclose(two.sets[0].vertices.sum(axis=-1), 1.0, atol=1e-12)


def test_reduce_drmdp_weight_error():
    p = np.eye(2)
    with pytest.raises(ModelError, match="weights"):
        reduce_drmdp(PriorSpec(S, ((((0.6, p), (0.6, p)),),)))


def test_reduce_drmdp_sa():
    row = np.array([0.25, 0.75])
    out = reduce_drmdp(PriorSpec(SA, ((((1.0, row),),), (((1.0, row[::-1]),),)), n_actions=2))
    assert out.rectangularity == SA
    assert out.sets[0][1].vertices[0].tolist() == [0.75, 0.25]


def test_model_to_dict_keys():
    doc = model_to_dict(fixture(EX_5_1).model)
    assert set(doc) >= {"states", "actions", "gamma", "rewards", "controller_set", "ambiguity"}
    assert doc["reward_map"] == {"scale": 2.0, "shift": -1.0}
