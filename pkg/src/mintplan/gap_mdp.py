"""MDP family with symbolic knowledge gaps, plus the gridworld that realizes it.

An environment contains a fixed set of "uncertain" cells. Each one hides an
object described by a ground-truth triple (kind, subtype, magnitude):

* kind "transition": entering the cell fails with probability `magnitude`
  (the agent stays in place). Subtype "deterministic" restricts the
  probability to {0, 1}; "stochastic" allows any value in [0, 1].
* kind "reward": the first entry into the cell adds `magnitude` with the
  sign given by subtype "positive"/"negative", once per episode.

A `Descriptor` fixes every object and therefore one concrete MDP.
A `KnowledgeGap` constrains, per object, what the agent knows: a type symbol
(or "any"), a subtype symbol (or "any"), and a magnitude interval. Intervals
are kept dyadic ([k/2^m, (k+1)/2^m], or [0,1], or a single point) so gaps
have finite exact encodings.

Grid maps load from plain text: one character per cell (`#` wall, `.` floor,
`S` start, `G` goal, digits 1-9 uncertain objects in index order), followed by
`key=value` lines for step_penalty, goal_reward and episode_limit.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np

from .errors import (
    CapacityError,
    ContradictionError,
    DimensionMismatchError,
    InvalidStateError,
    UnresolvedGapError,
)

ANY = "any"
TRANSITION = "transition"
REWARD = "reward"
KINDS = (TRANSITION, REWARD)

SUBTYPES = {
    TRANSITION: ("deterministic", "stochastic"),
    REWARD: ("positive", "negative"),
}

MAX_DYADIC_DEPTH = 40  # dyadic intervals finer than 2^-40 are rejected


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def dyadic_depth_index(w_min: float, w_max: float) -> tuple[int, int]:
    """Return (m, k) with [w_min, w_max] == [k/2^m, (k+1)/2^m].

    Raises ValueError if the interval is not dyadic. Singletons are not
    dyadic intervals and are rejected here; callers handle them separately.
    """
    if not 0.0 <= w_min < w_max <= 1.0:
        raise ValueError(f"not a dyadic interval: [{w_min}, {w_max}]")
    for m in range(MAX_DYADIC_DEPTH + 1):
        scale = float(2**m)
        k = w_min * scale
        if k == int(k) and w_max * scale == int(k) + 1:
            return m, int(k)
    raise ValueError(f"not a dyadic interval: [{w_min}, {w_max}]")


# ---------------------------------------------------------------------------
# Descriptors and gaps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObjectDescriptor:
    """Ground truth for one uncertain object."""

    kind: str
    subtype: str
    magnitude: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.subtype not in SUBTYPES[self.kind]:
            raise ValueError(f"subtype {self.subtype!r} invalid for kind {self.kind!r}")
        if not 0.0 <= self.magnitude <= 1.0:
            raise ValueError(f"magnitude {self.magnitude} outside [0, 1]")
        if self.kind == TRANSITION and self.subtype == "deterministic":
            if self.magnitude not in (0.0, 1.0):
                raise ValueError("deterministic transition magnitude must be 0 or 1")

    @property
    def signed_magnitude(self) -> float:
        if self.kind != REWARD:
            return self.magnitude
        return self.magnitude if self.subtype == "positive" else -self.magnitude


@dataclass(frozen=True)
class Descriptor:
    """One concrete parameterization of the whole environment."""

    objects: tuple[ObjectDescriptor, ...]

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))

    def __len__(self) -> int:
        return len(self.objects)

    @property
    def dimension(self) -> int:
        return 3 * len(self.objects)


@dataclass(frozen=True)
class ObjectGap:
    """Symbolic constraint on one object: type, subtype, magnitude interval."""

    type_: str = ANY
    subtype: str = ANY
    w_min: float = 0.0
    w_max: float = 1.0

    def __post_init__(self):
        if self.type_ not in (ANY,) + KINDS:
            raise ValueError(f"unknown type symbol {self.type_!r}")
        if self.type_ == ANY:
            if self.subtype != ANY:
                raise ValueError("type 'any' requires subtype 'any'")
        elif self.subtype not in (ANY,) + SUBTYPES[self.type_]:
            raise ValueError(f"subtype {self.subtype!r} invalid for type {self.type_!r}")
        if not 0.0 <= self.w_min <= self.w_max <= 1.0:
            raise ValueError(f"bad interval [{self.w_min}, {self.w_max}]")
        if self.w_min != self.w_max:
            dyadic_depth_index(self.w_min, self.w_max)  # raises if non-dyadic

    @property
    def is_singleton(self) -> bool:
        return self.w_min == self.w_max

    @property
    def symbols_resolved(self) -> bool:
        return self.type_ != ANY and self.subtype != ANY

    @property
    def is_deterministic_transition(self) -> bool:
        return self.type_ == TRANSITION and self.subtype == "deterministic"

    def value_depth(self) -> int:
        """Dyadic depth of the interval (singletons count as fully deep)."""
        if self.is_singleton:
            return MAX_DYADIC_DEPTH
        return dyadic_depth_index(self.w_min, self.w_max)[0]

    def det_candidates(self) -> tuple[float, ...]:
        """Feasible magnitudes for a deterministic transition object."""
        return tuple(v for v in (0.0, 1.0) if self.w_min <= v <= self.w_max)

    def contains(self, obj: ObjectDescriptor) -> bool:
        if self.type_ != ANY and obj.kind != self.type_:
            return False
        if self.subtype != ANY and obj.subtype != self.subtype:
            return False
        return self.w_min <= obj.magnitude <= self.w_max

    def measure(self) -> float:
        """Uniform-prior mass: symbol-choice fractions times interval length."""
        frac = 1.0
        if self.type_ != ANY:
            frac *= 0.5
        if self.subtype != ANY:
            frac *= 0.5
        return frac * (self.w_max - self.w_min)


@dataclass(frozen=True)
class KnowledgeGap:
    """Per-object symbolic constraints; the joint gap over all objects."""

    objects: tuple[ObjectGap, ...]

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))

    def __len__(self) -> int:
        return len(self.objects)

    @classmethod
    def maximal(cls, n_objects: int) -> "KnowledgeGap":
        return cls(tuple(ObjectGap() for _ in range(n_objects)))

    def with_object(self, index: int, obj_gap: ObjectGap) -> "KnowledgeGap":
        objs = list(self.objects)
        objs[index] = obj_gap
        return KnowledgeGap(tuple(objs))

    def measure(self) -> float:
        out = 1.0
        for og in self.objects:
            out *= og.measure()
        return out


def descriptor_to_gap(desc: Descriptor) -> KnowledgeGap:
    """The singleton gap whose only consistent descriptor is `desc`."""
    return KnowledgeGap(
        tuple(ObjectGap(o.kind, o.subtype, o.magnitude, o.magnitude) for o in desc.objects)
    )


# ---------------------------------------------------------------------------
# Predicates
# ---------------------------------------------------------------------------

DIM_TYPE = "type"
DIM_SUBTYPE = "subtype"
DIM_VALUE = "value"
DIM_ORDER = {DIM_TYPE: 0, DIM_SUBTYPE: 1, DIM_VALUE: 2}


@dataclass(frozen=True)
class Condition:
    """Single test on one object: type==test, subtype==test, or magnitude>=test."""

    obj: int
    dim: str
    test: object
    negated: bool = False

    def evaluate(self, desc: Descriptor) -> bool:
        o = desc.objects[self.obj]
        if self.dim == DIM_TYPE:
            result = o.kind == self.test
        elif self.dim == DIM_SUBTYPE:
            result = o.subtype == self.test
        elif self.dim == DIM_VALUE:
            result = o.magnitude >= float(self.test)
        else:
            raise ValueError(f"unknown dimension {self.dim!r}")
        return (not result) if self.negated else result

    def decide_on_gap(self, gap: KnowledgeGap):
        """True/False if every descriptor in `gap` answers the same way, else None."""
        og = gap.objects[self.obj]
        if self.dim == DIM_TYPE:
            base = None if og.type_ == ANY else og.type_ == self.test
        elif self.dim == DIM_SUBTYPE:
            if og.type_ != ANY and self.test not in SUBTYPES[og.type_]:
                base = False
            elif og.subtype == ANY:
                base = None
            else:
                base = og.subtype == self.test
        elif self.dim == DIM_VALUE:
            t = float(self.test)
            if og.w_min >= t:
                base = True
            elif og.w_max <= t and not og.is_singleton:
                base = False
            elif og.is_singleton:
                base = og.w_min >= t
            else:
                base = None
        else:
            raise ValueError(f"unknown dimension {self.dim!r}")
        if base is None:
            return None
        return (not base) if self.negated else base

    def describe(self) -> str:
        op = "!=" if self.negated else "="
        if self.dim == DIM_VALUE:
            op = "<" if self.negated else ">="
            return f"obj{self.obj}.value{op}{float(self.test):g}"
        return f"obj{self.obj}.{self.dim}{op}{self.test}"


@dataclass(frozen=True)
class QueryPredicate:
    """A yes/no question: one positive condition, or a disjunction of
    conjunctions (from merged tree branches)."""

    obj: int
    dim: str
    test: object = None
    clauses: tuple[tuple[Condition, ...], ...] | None = None

    @property
    def is_disjunctive(self) -> bool:
        return self.clauses is not None

    def atomic_condition(self) -> Condition:
        if self.is_disjunctive:
            raise ValueError("disjunctive predicate has no single condition")
        return Condition(self.obj, self.dim, self.test)

    def evaluate(self, desc: Descriptor) -> bool:
        if self.clauses is not None:
            return any(all(c.evaluate(desc) for c in clause) for clause in self.clauses)
        return self.atomic_condition().evaluate(desc)

    def decide_on_gap(self, gap: KnowledgeGap):
        if self.clauses is None:
            return self.atomic_condition().decide_on_gap(gap)
        saw_none = False
        for clause in self.clauses:
            votes = [c.decide_on_gap(gap) for c in clause]
            if all(v is True for v in votes):
                return True
            if any(v is False for v in votes):
                continue
            saw_none = True
        return None if saw_none else False

    def describe(self) -> str:
        if self.clauses is not None:
            parts = [" & ".join(c.describe() for c in clause) for clause in self.clauses]
            return " | ".join(f"({p})" for p in parts)
        return self.atomic_condition().describe()


# ---------------------------------------------------------------------------
# Gap operations
# ---------------------------------------------------------------------------


def descriptor_consistent(gap: KnowledgeGap, desc: Descriptor) -> bool:
    """Membership test: is `desc` inside the gap's descriptor set?"""
    if len(gap) != len(desc):
        raise DimensionMismatchError(f"gap has {len(gap)} objects, descriptor {len(desc)}")
    return all(og.contains(o) for og, o in zip(gap.objects, desc.objects))


def _other_kind(kind: str) -> str:
    return REWARD if kind == TRANSITION else TRANSITION


def _other_subtype(type_: str, subtype: str) -> str:
    a, b = SUBTYPES[type_]
    return b if subtype == a else a


def _refine_object(og: ObjectGap, dim: str, test, answer: bool) -> ObjectGap:
    if dim == DIM_TYPE:
        if test not in KINDS:
            raise ValueError(f"unknown kind {test!r}")
        target = test if answer else _other_kind(test)
        if og.type_ == ANY:
            return replace(og, type_=target)
        if og.type_ == target:
            return og
        raise ContradictionError(f"type already {og.type_}, answer excludes it")
    if dim == DIM_SUBTYPE:
        if og.type_ == ANY:
            raise ValueError("subtype predicate on unresolved type")
        if test not in SUBTYPES[og.type_]:
            if answer:
                raise ContradictionError(f"subtype {test!r} impossible for type {og.type_}")
            return og
        target = test if answer else _other_subtype(og.type_, test)
        if og.subtype == ANY:
            return replace(og, subtype=target)
        if og.subtype == target:
            return og
        raise ContradictionError(f"subtype already {og.subtype}, answer excludes it")
    if dim == DIM_VALUE:
        t = float(test)
        if answer:
            if t > og.w_max:
                raise ContradictionError(f"value >= {t} impossible in [{og.w_min}, {og.w_max}]")
            lo, hi = max(og.w_min, t), og.w_max
        else:
            if t < og.w_min or (og.is_singleton and t <= og.w_min):
                raise ContradictionError(f"value < {t} impossible in [{og.w_min}, {og.w_max}]")
            lo, hi = og.w_min, min(og.w_max, t)
        new = replace(og, w_min=lo, w_max=hi)
        if new.is_deterministic_transition and not new.det_candidates():
            raise ContradictionError("deterministic transition has no feasible magnitude left")
        return new
    raise ValueError(f"unknown dimension {dim!r}")


def refine_gap(gap: KnowledgeGap, predicate: QueryPredicate, answer: bool) -> KnowledgeGap:
    """Intersect the gap with the predicate (answer yes) or its complement.

    Only atomic single-dimension predicates are accepted; merged disjunctive
    questions update trees via pruning, and the resulting gap is the dyadic
    hull of the surviving leaves (see mint_tree.prune_tree).
    """
    if predicate.is_disjunctive:
        raise ValueError("refine_gap requires an atomic single-dimension predicate")
    if not 0 <= predicate.obj < len(gap):
        raise DimensionMismatchError(f"object index {predicate.obj} out of range")
    refined = _refine_object(gap.objects[predicate.obj], predicate.dim, predicate.test, answer)
    return gap.with_object(predicate.obj, refined)


def sample_descriptor(gap: KnowledgeGap, seed) -> Descriptor:
    """Uniform draw from the gap's descriptor set."""
    rng = _as_rng(seed)
    objs = []
    for og in gap.objects:
        kind = og.type_ if og.type_ != ANY else KINDS[rng.integers(0, 2)]
        subtype = og.subtype if og.subtype != ANY else SUBTYPES[kind][rng.integers(0, 2)]
        if kind == TRANSITION and subtype == "deterministic":
            candidates = og.det_candidates()
            if not candidates:
                raise ContradictionError(
                    f"no deterministic magnitude in [{og.w_min}, {og.w_max}]"
                )
            magnitude = candidates[rng.integers(0, len(candidates))]
        elif og.is_singleton:
            magnitude = og.w_min
        else:
            magnitude = float(rng.uniform(og.w_min, og.w_max))
        objs.append(ObjectDescriptor(kind, subtype, magnitude))
    return Descriptor(tuple(objs))


def boundary_descriptors(gap: KnowledgeGap) -> tuple[Descriptor, Descriptor]:
    """The two extreme descriptors (per-object w_min and w_max).

    Requires type and subtype resolved everywhere; deterministic transition
    magnitudes snap to the feasible subset of {0, 1}.
    """
    lows, highs = [], []
    for og in gap.objects:
        if not og.symbols_resolved:
            raise UnresolvedGapError("boundary undefined while type/subtype unresolved")
        if og.is_deterministic_transition:
            candidates = og.det_candidates()
            if not candidates:
                raise ContradictionError(
                    f"no deterministic magnitude in [{og.w_min}, {og.w_max}]"
                )
            lo, hi = candidates[0], candidates[-1]
        else:
            lo, hi = og.w_min, og.w_max
        lows.append(ObjectDescriptor(og.type_, og.subtype, lo))
        highs.append(ObjectDescriptor(og.type_, og.subtype, hi))
    return Descriptor(tuple(lows)), Descriptor(tuple(highs))


def random_mask(desc: Descriptor, seed, t_d: int = 5) -> KnowledgeGap:
    """Random partial gap hiding parts of `desc`.

    Masking level per object, uniform over four choices: everything hidden,
    type revealed, type+subtype revealed, or type+subtype plus the dyadic
    interval of depth m in {1..t_d} containing the magnitude.
    """
    rng = _as_rng(seed)
    objs = []
    for o in desc.objects:
        level = int(rng.integers(0, 4))
        if level == 0:
            objs.append(ObjectGap())
        elif level == 1:
            objs.append(ObjectGap(o.kind, ANY, 0.0, 1.0))
        elif level == 2:
            objs.append(ObjectGap(o.kind, o.subtype, 0.0, 1.0))
        else:
            m = int(rng.integers(1, t_d + 1))
            scale = 2**m
            k = min(int(o.magnitude * scale), scale - 1)
            objs.append(ObjectGap(o.kind, o.subtype, k / scale, (k + 1) / scale))
    return KnowledgeGap(tuple(objs))


def dyadic_hull(low: float, high: float) -> tuple[float, float]:
    """Smallest dyadic interval (or [0,1]) containing [low, high]."""
    if low == high:
        return low, high
    for m in range(MAX_DYADIC_DEPTH, -1, -1):
        scale = 2**m
        k_lo = int(np.floor(low * scale))
        k_hi = int(np.ceil(high * scale))
        if k_hi - k_lo == 1:
            return k_lo / scale, k_hi / scale
    return 0.0, 1.0


def _expandable_dim(og: ObjectGap, t_d: int) -> str | None:
    if og.type_ == ANY:
        return DIM_TYPE
    if og.subtype == ANY:
        return DIM_SUBTYPE
    if og.is_singleton:
        return None
    depth = og.value_depth()
    if depth >= t_d:
        return None
    if og.is_deterministic_transition and depth >= 1:
        return None
    return DIM_VALUE


def next_expansion(gap: KnowledgeGap, t_d: int) -> tuple[int, str] | None:
    """Lowest-index object and dimension still worth splitting, or None.

    Order per object: type, then subtype, then value halving. Value halving
    stops at dyadic depth t_d; deterministic transitions stop after one split
    (the halves pin the magnitude to 0 or 1).
    """
    for i, og in enumerate(gap.objects):
        dim = _expandable_dim(og, t_d)
        if dim is not None:
            return i, dim
    return None


def unresolved_objects(gap: KnowledgeGap, t_d: int) -> list[int]:
    """Indices of objects that further queries could still narrow."""
    return [i for i, og in enumerate(gap.objects) if _expandable_dim(og, t_d) is not None]


def split_gap(gap: KnowledgeGap, obj: int, dim: str) -> list[tuple[KnowledgeGap, Condition]]:
    """Children partitioning `gap` along one dimension of one object,
    each with the condition (relative to the parent) that selects it."""
    og = gap.objects[obj]
    out = []
    if dim == DIM_TYPE:
        for kind in KINDS:
            child = gap.with_object(obj, replace(og, type_=kind))
            out.append((child, Condition(obj, DIM_TYPE, kind)))
    elif dim == DIM_SUBTYPE:
        for sub in SUBTYPES[og.type_]:
            child = gap.with_object(obj, replace(og, subtype=sub))
            out.append((child, Condition(obj, DIM_SUBTYPE, sub)))
    elif dim == DIM_VALUE:
        mid = (og.w_min + og.w_max) / 2.0
        low = gap.with_object(obj, replace(og, w_max=mid))
        high = gap.with_object(obj, replace(og, w_min=mid))
        out.append((low, Condition(obj, DIM_VALUE, mid, negated=True)))
        out.append((high, Condition(obj, DIM_VALUE, mid)))
    else:
        raise ValueError(f"unknown dimension {dim!r}")
    return out


# ---------------------------------------------------------------------------
# Gridworld
# ---------------------------------------------------------------------------


class Action(IntEnum):
    N = 0
    S = 1
    E = 2
    W = 3


DELTAS = {Action.N: (-1, 0), Action.S: (1, 0), Action.E: (0, 1), Action.W: (0, -1)}
N_ACTIONS = 4

Cell = tuple[int, int]


@dataclass(frozen=True)
class GridSpec:
    """Static description of one gridworld instance."""

    width: int
    height: int
    walls: frozenset[Cell]
    start: Cell
    goal: Cell
    uncertain_cells: tuple[Cell, ...]
    step_penalty: float = -0.1
    goal_reward: float = 10.0
    episode_limit: int = 400

    def __post_init__(self):
        object.__setattr__(self, "walls", frozenset(self.walls))
        object.__setattr__(self, "uncertain_cells", tuple(self.uncertain_cells))
        if self.episode_limit <= 0:
            raise ValueError("episode_limit must be positive")
        special = [self.start, self.goal, *self.uncertain_cells]
        if len(set(special)) != len(special):
            raise ValueError("start, goal and uncertain cells must be distinct")
        for cell in special:
            if cell in self.walls or not self.in_bounds(cell):
                raise ValueError(f"special cell {cell} is a wall or out of bounds")

    def in_bounds(self, cell: Cell) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and cell not in self.walls

    def object_at(self, cell: Cell) -> int | None:
        try:
            return self.uncertain_cells.index(cell)
        except ValueError:
            return None

    @property
    def n_objects(self) -> int:
        return len(self.uncertain_cells)

    def cell_index(self, cell: Cell) -> int:
        return cell[0] * self.width + cell[1]

    def with_objects(self, n: int) -> "GridSpec":
        """Keep only the first n uncertain cells (the rest become plain floor)."""
        if not 0 <= n <= self.n_objects:
            raise ValueError(f"cannot keep {n} of {self.n_objects} objects")
        return replace(self, uncertain_cells=self.uncertain_cells[:n])

    @classmethod
    def from_text(cls, text: str) -> "GridSpec":
        grid_rows: list[str] = []
        options: dict[str, str] = {}
        for raw in text.splitlines():
            line = raw.rstrip()
            if not line:
                continue
            if "=" in line:
                key, _, value = line.partition("=")
                options[key.strip()] = value.strip()
            else:
                grid_rows.append(line)
        if not grid_rows:
            raise ValueError("map has no grid rows")
        width = len(grid_rows[0])
        if any(len(row) != width for row in grid_rows):
            raise ValueError("map rows must all have equal width")
        walls, start, goal = set(), None, None
        numbered: dict[int, Cell] = {}
        for r, row in enumerate(grid_rows):
            for c, ch in enumerate(row):
                if ch == "#":
                    walls.add((r, c))
                elif ch == "S":
                    start = (r, c)
                elif ch == "G":
                    goal = (r, c)
                elif ch.isdigit() and ch != "0":
                    numbered[int(ch)] = (r, c)
                elif ch != ".":
                    raise ValueError(f"unknown map character {ch!r} at {(r, c)}")
        if start is None or goal is None:
            raise ValueError("map must contain exactly one S and one G")
        if numbered and sorted(numbered) != list(range(1, len(numbered) + 1)):
            raise ValueError("object digits must be contiguous starting at 1")
        cells = tuple(numbered[i] for i in sorted(numbered))
        return cls(
            width=width,
            height=len(grid_rows),
            walls=frozenset(walls),
            start=start,
            goal=goal,
            uncertain_cells=cells,
            step_penalty=float(options.get("step_penalty", -0.1)),
            goal_reward=float(options.get("goal_reward", 10.0)),
            episode_limit=int(options.get("episode_limit", 400)),
        )

    @classmethod
    def from_file(cls, path) -> "GridSpec":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())


@dataclass(frozen=True)
class EnvState:
    agent_cell: Cell
    steps_taken: int
    consumed: tuple[bool, ...]
    done: bool


def env_reset(spec: GridSpec) -> EnvState:
    return EnvState(spec.start, 0, (False,) * spec.n_objects, False)


def env_step(
    state: EnvState, action: Action, spec: GridSpec, desc: Descriptor, seed
) -> tuple[EnvState, float, bool]:
    """One environment step under ground truth `desc`.

    Walls and grid edges block movement (the step penalty still applies).
    Entering the goal ends the episode with the goal reward. A reward object
    pays its signed magnitude on first entry only; a transition object makes
    the entering move fail with probability equal to its magnitude.
    """
    if state.done:
        raise InvalidStateError("episode already finished")
    if len(desc) != spec.n_objects:
        raise DimensionMismatchError("descriptor does not match the grid's object count")
    rng = _as_rng(seed)
    action = Action(action)
    dr, dc = DELTAS[action]
    target = (state.agent_cell[0] + dr, state.agent_cell[1] + dc)
    if not spec.is_free(target):
        target = state.agent_cell

    reward = spec.step_penalty
    consumed = state.consumed
    next_cell = target
    if target != state.agent_cell:
        idx = spec.object_at(target)
        if idx is not None:
            obj = desc.objects[idx]
            if obj.kind == TRANSITION:
                if rng.random() < obj.magnitude:
                    next_cell = state.agent_cell
            elif not consumed[idx]:
                reward += obj.signed_magnitude
                consumed = tuple(
                    True if i == idx else c for i, c in enumerate(consumed)
                )
    steps = state.steps_taken + 1
    done = next_cell == spec.goal
    if done:
        reward += spec.goal_reward
    done = done or steps >= spec.episode_limit
    return EnvState(next_cell, steps, consumed, done), reward, done


def obs_key(state: EnvState, spec: GridSpec) -> tuple[int, int]:
    """Markov observation for the tabular learner: cell index + consumed mask."""
    mask = 0
    for i, c in enumerate(state.consumed):
        if c:
            mask |= 1 << i
    return spec.cell_index(state.agent_cell), mask


# ---------------------------------------------------------------------------
# Explicit tabular form
# ---------------------------------------------------------------------------


def _reward_object_indices(desc: Descriptor) -> list[int]:
    return [i for i, o in enumerate(desc.objects) if o.kind == REWARD]


def _floor_cells(spec: GridSpec) -> list[Cell]:
    return [
        (r, c)
        for r in range(spec.height)
        for c in range(spec.width)
        if spec.is_free((r, c)) and (r, c) != spec.goal
    ]


def tabular_state_index(spec: GridSpec, desc: Descriptor, state: EnvState) -> int:
    """Index of an environment state in the to_tabular enumeration."""
    floors = _floor_cells(spec)
    reward_objs = _reward_object_indices(desc)
    n_masks = 2 ** len(reward_objs)
    if state.agent_cell == spec.goal:
        return len(floors) * n_masks  # absorbing
    mask = 0
    for j, i in enumerate(reward_objs):
        if state.consumed[i]:
            mask |= 1 << j
    return floors.index(state.agent_cell) * n_masks + mask


def to_tabular(spec: GridSpec, desc: Descriptor, gamma: float = 0.99, max_states: int = 200_000):
    """Explicit (T, R, gamma) for the MDP fixed by `desc`.

    States enumerate floor cells crossed with consumed-flag masks over the
    reward objects, plus one absorbing state entered from the goal.
    """
    from .theory import TabularMdp

    if len(desc) != spec.n_objects:
        raise DimensionMismatchError("descriptor does not match the grid's object count")
    floors = _floor_cells(spec)
    reward_objs = _reward_object_indices(desc)
    n_masks = 2 ** len(reward_objs)
    n_states = len(floors) * n_masks + 1
    if n_states > max_states:
        raise CapacityError(f"{n_states} states exceeds cap {max_states}")
    reward_bit = {obj_i: j for j, obj_i in enumerate(reward_objs)}
    absorbing = n_states - 1

    T = np.zeros((n_states, N_ACTIONS, n_states))
    R = np.zeros((n_states, N_ACTIONS))
    for ci, cell in enumerate(floors):
        for mask in range(n_masks):
            s = ci * n_masks + mask
            for a in Action:
                dr, dc = DELTAS[a]
                target = (cell[0] + dr, cell[1] + dc)
                if not spec.is_free(target):
                    target = cell
                reward = spec.step_penalty
                if target == spec.goal:
                    T[s, a, absorbing] = 1.0
                    reward += spec.goal_reward
                elif target == cell:
                    T[s, a, s] = 1.0
                else:
                    idx = spec.object_at(target)
                    tgt_ci = floors.index(target)
                    if idx is not None and desc.objects[idx].kind == TRANSITION:
                        p = desc.objects[idx].magnitude
                        T[s, a, s] += p
                        T[s, a, tgt_ci * n_masks + mask] += 1.0 - p
                    elif idx is not None and not mask & (1 << reward_bit[idx]):
                        T[s, a, tgt_ci * n_masks + (mask | (1 << reward_bit[idx]))] = 1.0
                        reward += desc.objects[idx].signed_magnitude
                    else:
                        T[s, a, tgt_ci * n_masks + mask] = 1.0
                R[s, a] = reward
    T[absorbing, :, absorbing] = 1.0
    return TabularMdp(T=T, R=R, gamma=gamma)
