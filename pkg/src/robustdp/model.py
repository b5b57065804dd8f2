"""Robust MDP instances: ambiguity sets, controller action sets, file I/O.

Every set is stored in V-representation: either a finite list of elements
or the convex hull of a finite vertex list. Arrays are frozen after
construction so models can be shared freely.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

STOCHASTIC_TOL = 1e-12
PARSE_TOL = 1e-9
DEDUP_DECIMALS = 12
DEFAULT_PRODUCT_CAP = 10**6

FINITE = "finite"
HULL = "hull"
SET_KINDS = (FINITE, HULL)

SA = "sa"
S = "s"
GENERAL = "general"
RECTANGULARITIES = (SA, S, GENERAL)

SIMPLEX = "simplex"
DIRAC = "dirac"
CONTROLLER_KINDS = (SIMPLEX, DIRAC, FINITE, HULL)


class ModelError(ValueError):
    """Raised for malformed or invalid model input."""

    def __init__(self, message: str, diagnostics: Sequence[str] = ()):
        super().__init__(message)
        self.diagnostics = list(diagnostics)


def _frozen(array) -> np.ndarray:
    out = np.array(array, dtype=float)
    out.setflags(write=False)
    return out


def _dedup(vertices: np.ndarray) -> np.ndarray:
    """Drop repeated vertices, comparing after rounding to 1e-12."""
    seen = set()
    keep = []
    for idx, vertex in enumerate(vertices):
        key = np.round(vertex, DEDUP_DECIMALS).tobytes()
        if key not in seen:
            seen.add(key)
            keep.append(idx)
    return vertices[keep]


@dataclass(frozen=True, eq=False)
class DistributionSet:
    """A finite list of stochastic rows/matrices, or their convex hull.

    ``vertices`` has shape ``(K, n)`` for sets of rows and ``(K, A, n)`` for
    sets of matrices. The last axis always indexes next states.
    """

    kind: str
    vertices: np.ndarray

    def __post_init__(self):
        if self.kind not in SET_KINDS:
            raise ModelError(f"unknown set kind {self.kind!r}")
        vertices = np.asarray(self.vertices, dtype=float)
        if vertices.ndim < 2 or vertices.shape[0] == 0:
            raise ModelError("distribution set needs at least one vertex")
        object.__setattr__(self, "vertices", _frozen(_dedup(vertices)))

    def __len__(self) -> int:
        return self.vertices.shape[0]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, DistributionSet)
            and self.kind == other.kind
            and self.vertices.shape == other.vertices.shape
            and bool(np.array_equal(self.vertices, other.vertices))
        )

    __hash__ = None

    @property
    def is_convex(self) -> bool:
        return self.kind == HULL or len(self) == 1

    def vertex_set(self) -> frozenset:
        """Canonical set form used for order-free comparison."""
        return frozenset(np.round(v, DEDUP_DECIMALS).tobytes() for v in self.vertices)

    def stochastic_errors(self, tol: float = STOCHASTIC_TOL) -> list[str]:
        errors = []
        if not np.all(np.isfinite(self.vertices)):
            errors.append("non-finite probability")
            return errors
        if np.any(self.vertices < -tol):
            errors.append(f"negative probability {self.vertices.min():.3g}")
        sums = self.vertices.sum(axis=-1)
        worst = float(np.max(np.abs(sums - 1.0)))
        if worst > tol:
            errors.append(f"row sum off by {worst:.3g} (tolerance {tol:g})")
        return errors


@dataclass(frozen=True, eq=False)
class AmbiguitySpec:
    """The adversary's action sets.

    ``sets`` is indexed ``[s][a]`` for SA (sets of rows), ``[s]`` for S
    (sets of |A|x|S| matrices) and is a single set of full kernels with
    shape ``(K, S, A, S)`` for general rectangularity.
    """

    rectangularity: str
    sets: object

    def __post_init__(self):
        if self.rectangularity not in RECTANGULARITIES:
            raise ModelError(f"unknown rectangularity {self.rectangularity!r}")
        if self.rectangularity == SA:
            object.__setattr__(self, "sets", tuple(tuple(row) for row in self.sets))
        elif self.rectangularity == S:
            object.__setattr__(self, "sets", tuple(self.sets))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, AmbiguitySpec)
            and self.rectangularity == other.rectangularity
            and self.sets == other.sets
        )

    __hash__ = None

    def all_sets(self) -> list[DistributionSet]:
        if self.rectangularity == SA:
            return [d for row in self.sets for d in row]
        if self.rectangularity == S:
            return list(self.sets)
        return [self.sets]

    @property
    def kind(self) -> str:
        kinds = {d.kind for d in self.all_sets()}
        return kinds.pop() if len(kinds) == 1 else "mixed"

    def matrix_vertices(self, s: int) -> np.ndarray:
        """Vertices of P_s as matrices, expanding SA sets by Cartesian product."""
        if self.rectangularity == S:
            return self.sets[s].vertices
        if self.rectangularity == SA:
            rows = [d.vertices for d in self.sets[s]]
            return np.array([np.stack(combo) for combo in itertools.product(*rows)])
        raise ModelError("general rectangularity has no per-state sets")

    def row_vertices(self, s: int, a: int) -> np.ndarray:
        """Vertices of the marginal set {p_{s,a}} (deduplicated)."""
        if self.rectangularity == SA:
            return self.sets[s][a].vertices
        if self.rectangularity == S:
            return _dedup(self.sets[s].vertices[:, a, :])
        raise ModelError("general rectangularity has no per-state sets")

    def state_set_kind(self, s: int) -> str:
        if self.rectangularity == S:
            return self.sets[s].kind
        kinds = {d.kind for d in self.sets[s]}
        return HULL if kinds == {HULL} else FINITE

    def state_is_convex(self, s: int) -> bool:
        if self.rectangularity == S:
            return self.sets[s].is_convex
        return all(d.is_convex for d in self.sets[s])


@dataclass(frozen=True, eq=False)
class ControllerSet:
    """The controller's admissible action distributions Q."""

    kind: str
    vertices: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in CONTROLLER_KINDS:
            raise ModelError(f"unknown controller set kind {self.kind!r}")
        if self.kind in (FINITE, HULL):
            if self.vertices is None or len(self.vertices) == 0:
                raise ModelError(f"controller set {self.kind!r} needs vertices")
            object.__setattr__(self, "vertices", _frozen(_dedup(np.asarray(self.vertices, float))))
        else:
            object.__setattr__(self, "vertices", None)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ControllerSet) or self.kind != other.kind:
            return False
        if self.vertices is None:
            return other.vertices is None
        return self.vertices.shape == other.vertices.shape and bool(
            np.array_equal(self.vertices, other.vertices)
        )

    __hash__ = None

    def rows(self, n_actions: int) -> np.ndarray:
        """Vertex rows; the simplex is canonicalized to its Dirac vertices."""
        if self.kind in (SIMPLEX, DIRAC):
            return np.eye(n_actions)
        return np.asarray(self.vertices)

    @property
    def is_convex(self) -> bool:
        return self.kind in (SIMPLEX, HULL)

    @property
    def enumerable(self) -> bool:
        """True when Q is a finite list (the sup is a max over rows)."""
        return self.kind in (DIRAC, FINITE) or (
            self.kind == HULL and len(self.vertices) == 1
        )

    def contains_dirac(self, n_actions: int) -> bool:
        if self.kind in (SIMPLEX, DIRAC):
            return True
        # a point mass is an extreme point of the simplex, so it lies in the
        # hull only if it is one of the listed vertices
        listed = {tuple(np.round(v, DEDUP_DECIMALS)) for v in self.vertices}
        return all(tuple(row) in listed for row in np.eye(n_actions))

    def contains(self, row: np.ndarray, n_actions: int, tol: float = 1e-9) -> bool:
        """Membership test for an action distribution."""
        row = np.asarray(row, float)
        if np.any(row < -tol) or abs(row.sum() - 1.0) > tol:
            return False
        if self.kind == SIMPLEX:
            return True
        verts = self.rows(n_actions)
        if self.kind in (DIRAC, FINITE):
            return bool(np.any(np.max(np.abs(verts - row), axis=1) <= tol))
        from .linprog import in_convex_hull

        return in_convex_hull(row, verts, tol)


@dataclass(frozen=True, eq=False)
class RewardMap:
    """Affine map from the stored [0,1] rewards back to a reporting scale.

    A reporting-scale reward is ``scale * r + shift``; discounted values map
    as ``scale * v + shift / (1 - gamma)``.
    """

    scale: float = 1.0
    shift: float = 0.0

    def __eq__(self, other) -> bool:
        return isinstance(other, RewardMap) and (self.scale, self.shift) == (other.scale, other.shift)

    __hash__ = None

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and self.shift == 0.0

    def value(self, v, gamma: float):
        return self.scale * np.asarray(v, float) + self.shift / (1.0 - gamma)

    def reward(self, r):
        return self.scale * np.asarray(r, float) + self.shift


@dataclass(frozen=True, eq=False)
class RobustMdp:
    """A finite robust MDP. Use :func:`validate` to check the invariants."""

    states: tuple
    actions: tuple
    rewards: np.ndarray
    gamma: float
    ambiguity: AmbiguitySpec
    controller_set: ControllerSet = field(default_factory=lambda: ControllerSet(SIMPLEX))
    reward_map: RewardMap = field(default_factory=RewardMap)

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(str(s) for s in self.states))
        object.__setattr__(self, "actions", tuple(str(a) for a in self.actions))
        object.__setattr__(self, "rewards", _frozen(self.rewards))
        object.__setattr__(self, "gamma", float(self.gamma))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, RobustMdp)
            and self.states == other.states
            and self.actions == other.actions
            and self.rewards.shape == other.rewards.shape
            and bool(np.array_equal(self.rewards, other.rewards))
            and self.gamma == other.gamma
            and self.ambiguity == other.ambiguity
            and self.controller_set == other.controller_set
            and self.reward_map == other.reward_map
        )

    __hash__ = None

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    def state_index(self, name) -> int:
        if isinstance(name, (int, np.integer)):
            return int(name)
        return self.states.index(name)

    def action_index(self, name) -> int:
        if isinstance(name, (int, np.integer)):
            return int(name)
        return self.actions.index(name)

    def controller_rows(self) -> np.ndarray:
        return self.controller_set.rows(self.n_actions)

    def point_mass(self, state) -> np.ndarray:
        mu = np.zeros(self.n_states)
        mu[self.state_index(state)] = 1.0
        return mu

    def replace(self, **changes) -> "RobustMdp":
        fields = dict(
            states=self.states,
            actions=self.actions,
            rewards=self.rewards,
            gamma=self.gamma,
            ambiguity=self.ambiguity,
            controller_set=self.controller_set,
            reward_map=self.reward_map,
        )
        fields.update(changes)
        return RobustMdp(**fields)

    def with_kernel(self, kernel: np.ndarray) -> "RobustMdp":
        """Same model with a single known S x A x S kernel."""
        kernel = np.asarray(kernel, float)
        sets = [DistributionSet(FINITE, kernel[s][None]) for s in range(self.n_states)]
        return self.replace(ambiguity=AmbiguitySpec(S, sets))


# ---------------------------------------------------------------- validation


def validate(model: RobustMdp, tol: float = STOCHASTIC_TOL) -> list[str]:
    """Return diagnostics; an empty list means every invariant holds."""
    diags: list[str] = []
    n_s, n_a = len(model.states), len(model.actions)
    if n_s < 1:
        diags.append("states: need at least one state")
    if n_a < 1:
        diags.append("actions: need at least one action")
    if len(set(model.states)) != n_s:
        diags.append("states: duplicate identifiers")
    if len(set(model.actions)) != n_a:
        diags.append("actions: duplicate identifiers")
    if not (0.0 < model.gamma < 1.0) or not math.isfinite(model.gamma):
        diags.append(f"gamma: discount out of range (0, 1), got {model.gamma!r}")

    rewards = model.rewards
    if rewards.shape != (n_s, n_a):
        diags.append(f"rewards: shape {rewards.shape} does not match ({n_s}, {n_a})")
    else:
        for s, a in zip(*np.nonzero(~np.isfinite(rewards))):
            diags.append(f"rewards[{model.states[s]}|{model.actions[a]}]: not finite")
        for s, a in zip(*np.nonzero(rewards < 0)):
            diags.append(
                f"rewards[{model.states[s]}|{model.actions[a]}]: reward below 0 ({rewards[s, a]!r})"
            )
        for s, a in zip(*np.nonzero(rewards > 1)):
            diags.append(
                f"rewards[{model.states[s]}|{model.actions[a]}]: reward above 1 ({rewards[s, a]!r})"
            )

    ctrl = model.controller_set
    if ctrl.vertices is not None:
        if ctrl.vertices.shape[1:] != (n_a,):
            diags.append(f"controller_set: rows must have length {n_a}")
        else:
            for msg in DistributionSet(FINITE, ctrl.vertices).stochastic_errors(tol):
                diags.append(f"controller_set: {msg}")

    amb = model.ambiguity
    if amb.rectangularity == SA:
        if len(amb.sets) != n_s or any(len(row) != n_a for row in amb.sets):
            diags.append(f"ambiguity: SA sets must be indexed by {n_s} states x {n_a} actions")
        else:
            for s, row in enumerate(amb.sets):
                for a, dset in enumerate(row):
                    where = f"ambiguity[{model.states[s]}|{model.actions[a]}]"
                    if dset.vertices.shape[1:] != (n_s,):
                        diags.append(f"{where}: rows must have length {n_s}")
                        continue
                    diags.extend(f"{where}: {m}" for m in dset.stochastic_errors(tol))
    elif amb.rectangularity == S:
        if len(amb.sets) != n_s:
            diags.append(f"ambiguity: S sets must be indexed by {n_s} states")
        else:
            for s, dset in enumerate(amb.sets):
                where = f"ambiguity[{model.states[s]}]"
                if dset.vertices.shape[1:] != (n_a, n_s):
                    diags.append(f"{where}: matrices must have shape ({n_a}, {n_s})")
                    continue
                diags.extend(f"{where}: {m}" for m in dset.stochastic_errors(tol))
    else:
        dset = amb.sets
        if not isinstance(dset, DistributionSet) or dset.vertices.shape[1:] != (n_s, n_a, n_s):
            diags.append(f"ambiguity: general kernels must have shape ({n_s}, {n_a}, {n_s})")
        else:
            diags.extend(f"ambiguity: {m}" for m in dset.stochastic_errors(tol))
    return diags


def check(model: RobustMdp) -> RobustMdp:
    """Raise :class:`ModelError` unless the model validates."""
    diags = validate(model)
    if diags:
        raise ModelError("invalid model: " + "; ".join(diags), diags)
    return model


# ---------------------------------------------------------------- transforms


def sa_to_s(spec: AmbiguitySpec, cap: int = DEFAULT_PRODUCT_CAP) -> AmbiguitySpec:
    """Expand SA sets into per-state Cartesian products of rows."""
    if spec.rectangularity != SA:
        raise ModelError("sa_to_s needs an SA-rectangular specification")
    out = []
    for s, row in enumerate(spec.sets):
        if any(d.kind == HULL and len(d) > 1 for d in row):
            raise ModelError(
                f"state {s}: product of convex hulls is not the hull of row-wise products; refusing"
            )
        size = math.prod(len(d) for d in row)
        if size > cap:
            raise ModelError(f"state {s}: product has {size} matrices, above the cap {cap}")
        out.append(DistributionSet(FINITE, spec.matrix_vertices(s)))
    return AmbiguitySpec(S, out)


def marginalize(spec: AmbiguitySpec, to: str = S) -> AmbiguitySpec:
    """Project general kernels onto per-state (S) or per-pair (SA) sets."""
    if spec.rectangularity != GENERAL:
        raise ModelError("marginalize needs a general specification")
    kernels = spec.sets.vertices
    if kernels.ndim != 4:
        raise ModelError("general kernels must have shape (K, S, A, S)")
    n_s, n_a = kernels.shape[1], kernels.shape[2]
    kind = spec.sets.kind
    if to == S:
        return AmbiguitySpec(S, [DistributionSet(kind, kernels[:, s]) for s in range(n_s)])
    if to == SA:
        return AmbiguitySpec(
            SA,
            [[DistributionSet(kind, kernels[:, s, a]) for a in range(n_a)] for s in range(n_s)],
        )
    raise ModelError(f"cannot marginalize to {to!r}")


@dataclass(frozen=True)
class PriorSpec:
    """Priors over transition matrices (or rows) for a distributionally robust MDP.

    ``priors[i]`` is the list of candidate priors at index ``i`` (a state for
    S, a ``(state, action)`` pair flattened as ``s * |A| + a`` for SA); each
    prior is a sequence of ``(weight, kernel)`` pairs.
    """

    rectangularity: str
    priors: tuple
    n_actions: int | None = None


def reduce_drmdp(prior: PriorSpec, kind: str = FINITE) -> AmbiguitySpec:
    """Replace every prior by its expected kernel."""
    means = []
    for idx, candidates in enumerate(prior.priors):
        verts = []
        for p_idx, mixture in enumerate(candidates):
            weights = np.array([w for w, _ in mixture], float)
            if np.any(weights < 0) or abs(weights.sum() - 1.0) > STOCHASTIC_TOL:
                raise ModelError(
                    f"prior {p_idx} at index {idx}: weights must be nonnegative and sum to 1"
                )
            kernels = np.array([np.asarray(k, float) for _, k in mixture])
            verts.append(np.tensordot(weights, kernels, axes=1))
        means.append(DistributionSet(kind, np.array(verts)))
    if prior.rectangularity == S:
        return AmbiguitySpec(S, means)
    if prior.rectangularity == SA:
        n_a = prior.n_actions
        if not n_a or len(means) % n_a:
            raise ModelError("SA priors need n_actions dividing the number of indices")
        return AmbiguitySpec(SA, [means[i : i + n_a] for i in range(0, len(means), n_a)])
    raise ModelError(f"unsupported prior rectangularity {prior.rectangularity!r}")


# ---------------------------------------------------------------- file format


def _num(x: float):
    value = float(x)
    if value.is_integer() and abs(value) < 2**53:
        return int(value)
    return _Float(value)


class _Float(float):
    """Float that serializes with 17 significant digits."""

    def __repr__(self) -> str:
        return format(float(self), ".17g")


def _encode(obj) -> str:
    if isinstance(obj, _Float):
        return repr(obj)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return repr(_Float(obj))
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k), ensure_ascii=False)}: {_encode(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_encode(v) for v in obj) + "]"
    raise TypeError(f"cannot encode {type(obj).__name__}")


def _rows(array: np.ndarray):
    if array.ndim == 1:
        return [_num(x) for x in array]
    return [_rows(sub) for sub in array]


def model_to_dict(model: RobustMdp) -> dict:
    rewards = {
        f"{s}|{a}": _num(model.rewards[i, j])
        for i, s in enumerate(model.states)
        for j, a in enumerate(model.actions)
    }
    ctrl = {"kind": model.controller_set.kind}
    if model.controller_set.vertices is not None:
        ctrl["vertices"] = _rows(model.controller_set.vertices)
    amb = model.ambiguity
    doc_amb = {"rectangularity": amb.rectangularity, "kind": amb.kind}
    if amb.rectangularity == SA:
        doc_amb["sets"] = {
            f"{s}|{a}": _rows(amb.sets[i][j].vertices)
            for i, s in enumerate(model.states)
            for j, a in enumerate(model.actions)
        }
    elif amb.rectangularity == S:
        doc_amb["sets"] = {s: _rows(amb.sets[i].vertices) for i, s in enumerate(model.states)}
    else:
        doc_amb["sets"] = [
            {s: _rows(kernel[i]) for i, s in enumerate(model.states)}
            for kernel in amb.sets.vertices
        ]
    doc = {
        "states": list(model.states),
        "actions": list(model.actions),
        "gamma": _num(model.gamma),
        "rewards": rewards,
        "controller_set": ctrl,
        "ambiguity": doc_amb,
    }
    if not model.reward_map.is_identity:
        doc["reward_map"] = {"scale": _num(model.reward_map.scale), "shift": _num(model.reward_map.shift)}
    return doc


def serialize(model: RobustMdp) -> str:
    """Model file text (JSON, numbers at 17 significant digits)."""
    return _encode(model_to_dict(model)) + "\n"


def _require(doc: dict, key: str, kind, where: str = "model"):
    if key not in doc:
        raise ModelError(f"{where}: missing field {key!r}")
    value = doc[key]
    if not isinstance(value, kind):
        raise ModelError(f"{where}.{key}: expected {getattr(kind, '__name__', kind)}")
    return value


def _array(value, shape: tuple, where: str) -> np.ndarray:
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ModelError(f"{where}: not a numeric array ({exc})") from None
    if arr.shape[1:] != shape or arr.shape[0] == 0:
        raise ModelError(f"{where}: wrong arity, expected (K, {', '.join(map(str, shape))}) got {arr.shape}")
    return arr


def _normalize_rows(arr: np.ndarray, where: str) -> np.ndarray:
    """Check rows at parse tolerance and renormalize those off by more than 1e-12."""
    sums = arr.sum(axis=-1)
    bad = np.abs(sums - 1.0)
    if np.any(arr < -PARSE_TOL):
        raise ModelError(f"{where}: negative probability {arr.min():.3g}")
    if np.any(bad > PARSE_TOL):
        raise ModelError(f"{where}: row sum off by {bad.max():.3g} (stochasticity violation)")
    if np.any(bad > STOCHASTIC_TOL) or np.any(arr < 0):
        arr = np.clip(arr, 0.0, None)
        arr = arr / arr.sum(axis=-1, keepdims=True)
    return arr


def model_from_dict(doc: dict) -> RobustMdp:
    if not isinstance(doc, dict):
        raise ModelError("model: top level must be an object")
    states = _require(doc, "states", list)
    actions = _require(doc, "actions", list)
    if not states or not actions:
        raise ModelError("model: states and actions must be non-empty")
    if not all(isinstance(x, str) for x in states + actions):
        raise ModelError("model: state and action identifiers must be strings")
    gamma = _require(doc, "gamma", (int, float))
    n_s, n_a = len(states), len(actions)

    reward_doc = _require(doc, "rewards", dict)
    rewards = np.zeros((n_s, n_a))
    expected = {f"{s}|{a}" for s in states for a in actions}
    missing = sorted(expected - set(reward_doc))
    extra = sorted(set(reward_doc) - expected)
    if missing:
        raise ModelError(f"rewards: missing entries {missing[:5]}")
    if extra:
        raise ModelError(f"rewards: unknown keys {extra[:5]}")
    for i, s in enumerate(states):
        for j, a in enumerate(actions):
            value = reward_doc[f"{s}|{a}"]
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ModelError(f"rewards[{s}|{a}]: not a number")
            rewards[i, j] = float(value)

    ctrl_doc = _require(doc, "controller_set", dict)
    kind = _require(ctrl_doc, "kind", str, "controller_set")
    if kind not in CONTROLLER_KINDS:
        raise ModelError(f"controller_set.kind: unknown kind {kind!r}")
    vertices = None
    if kind in (FINITE, HULL):
        vertices = _normalize_rows(
            _array(_require(ctrl_doc, "vertices", list, "controller_set"), (n_a,), "controller_set.vertices"),
            "controller_set.vertices",
        )
    controller = ControllerSet(kind, vertices)

    amb_doc = _require(doc, "ambiguity", dict)
    rect = _require(amb_doc, "rectangularity", str, "ambiguity")
    set_kind = _require(amb_doc, "kind", str, "ambiguity")
    if set_kind not in SET_KINDS:
        raise ModelError(f"ambiguity.kind: unknown kind {set_kind!r}")
    if rect == SA:
        sets_doc = _require(amb_doc, "sets", dict, "ambiguity")
        sets = []
        for s in states:
            row = []
            for a in actions:
                key = f"{s}|{a}"
                if key not in sets_doc:
                    raise ModelError(f"ambiguity.sets: missing {key!r}")
                where = f"ambiguity.sets[{key}]"
                row.append(DistributionSet(set_kind, _normalize_rows(_array(sets_doc[key], (n_s,), where), where)))
            sets.append(row)
        extra = set(sets_doc) - {f"{s}|{a}" for s in states for a in actions}
        if extra:
            raise ModelError(f"ambiguity.sets: unknown keys {sorted(extra)[:5]}")
        ambiguity = AmbiguitySpec(SA, sets)
    elif rect == S:
        sets_doc = _require(amb_doc, "sets", dict, "ambiguity")
        sets = []
        for s in states:
            if s not in sets_doc:
                raise ModelError(f"ambiguity.sets: missing {s!r}")
            where = f"ambiguity.sets[{s}]"
            sets.append(DistributionSet(set_kind, _normalize_rows(_array(sets_doc[s], (n_a, n_s), where), where)))
        extra = set(sets_doc) - set(states)
        if extra:
            raise ModelError(f"ambiguity.sets: unknown keys {sorted(extra)[:5]}")
        ambiguity = AmbiguitySpec(S, sets)
    elif rect == GENERAL:
        kernels_doc = _require(amb_doc, "sets", list, "ambiguity")
        if not kernels_doc:
            raise ModelError("ambiguity.sets: need at least one kernel")
        kernels = []
        for k, kernel in enumerate(kernels_doc):
            if not isinstance(kernel, dict) or set(kernel) != set(states):
                raise ModelError(f"ambiguity.sets[{k}]: kernel must map every state to a matrix")
            where = f"ambiguity.sets[{k}]"
            kernels.append(_array([kernel[s] for s in states], (n_a, n_s), where))
        kernels = _normalize_rows(np.array(kernels), "ambiguity.sets")
        ambiguity = AmbiguitySpec(GENERAL, DistributionSet(set_kind, kernels))
    else:
        raise ModelError(f"ambiguity.rectangularity: unknown value {rect!r}")

    reward_map = RewardMap()
    if "reward_map" in doc:
        rm = _require(doc, "reward_map", dict)
        reward_map = RewardMap(float(rm.get("scale", 1.0)), float(rm.get("shift", 0.0)))

    model = RobustMdp(states, actions, rewards, float(gamma), ambiguity, controller, reward_map)
    return check(model)


def parse_model(text: str) -> RobustMdp:
    """Parse and validate a model file."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"model: not valid JSON ({exc})") from None
    return model_from_dict(doc)


def load_model(path) -> RobustMdp:
    with open(path, encoding="utf-8") as handle:
        return parse_model(handle.read())


def s_rectangular(
    states: Sequence[str],
    actions: Sequence[str],
    rewards,
    gamma: float,
    sets: Iterable,
    kind: str = FINITE,
    controller: ControllerSet | None = None,
    reward_map: RewardMap | None = None,
) -> RobustMdp:
    """Convenience constructor for S-rectangular models from raw arrays."""
    ambiguity = AmbiguitySpec(S, [DistributionSet(kind, np.asarray(m, float)) for m in sets])
    return RobustMdp(
        states,
        actions,
        np.asarray(rewards, float),
        gamma,
        ambiguity,
        controller or ControllerSet(SIMPLEX),
        reward_map or RewardMap(),
    )
