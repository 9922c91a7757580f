"""Symbolic tree over hypothesized knowledge gaps.

Nodes carry gap-conditioned action statistics read from a quantile model.
A node expands (breadth-first, one unresolved object dimension at a time)
while its best-action advantage stays below lambda_g times the estimated
deviation, i.e. while the remaining gap still matters for action choice.
Equivalent structure is merged, binary queries are curated by information
gain over the leaf action distribution, and answers prune the tree.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContradictionError, EncodingError, NoQueryNeeded
from .gap_mdp import (
    ANY,
    DIM_ORDER,
    DIM_SUBTYPE,
    DIM_TYPE,
    DIM_VALUE,
    KINDS,
    SUBTYPES,
    Condition,
    KnowledgeGap,
    ObjectGap,
    QueryPredicate,
    dyadic_hull,
    next_expansion,
    refine_gap,
    split_gap,
)
from .quantile_policy import QuantileModel, encode_gap, q_stats

DIM_DISJUNCTION = "disjunction"


@dataclass(frozen=True)
class MintNode:
    gap: KnowledgeGap
    depth: int
    mu: np.ndarray
    sigma: np.ndarray
    best_action: int
    advantage: float
    path: tuple[Condition, ...]
    measure: float
    children: tuple["MintNode", ...] = ()
    leaf: bool = True
    clauses: tuple[tuple[Condition, ...], ...] | None = None
    members: tuple["MintNode", ...] | None = None

    def walk(self):
        queue = [self]
        while queue:
            node = queue.pop(0)
            yield node
            queue.extend(node.children)


@dataclass(frozen=True)
class MintTree:
    root: MintNode
    root_gap: KnowledgeGap
    dialogue: tuple[tuple[QueryPredicate, bool], ...] = ()
    merged: bool = False

    def leaves(self) -> list[MintNode]:
        return [n for n in self.root.walk() if n.leaf]

    def leaf_units(self) -> list[MintNode]:
        """Leaves with merged groups flattened back to their member nodes."""
        units: list[MintNode] = []
        for leaf in self.leaves():
            units.extend(leaf.members if leaf.members is not None else [leaf])
        return units

    @property
    def candidate_actions(self) -> tuple[int, ...]:
        return tuple(sorted({n.best_action for n in self.leaves()}))

    def mixture_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Measure-weighted mean and deviation over the surviving leaf units.

        The variance combines within-leaf variance and the spread of leaf
        means (law of total variance over the remaining descriptor set).
        """
        units = self.leaf_units()
        weights = np.array([max(u.measure, 0.0) for u in units])
        total = weights.sum()
        weights = weights / total if total > 0 else np.full(len(units), 1.0 / len(units))
        mus = np.stack([u.mu for u in units])
        sigmas = np.stack([u.sigma for u in units])
        mu = weights @ mus
        second = weights @ (sigmas**2 + mus**2)
        var = np.maximum(second - mu**2, 0.0)
        return mu, np.sqrt(var)


def _node_stats(model: QuantileModel, obs, gap: KnowledgeGap, mc_samples: int = 0, seed=None):
    stats = q_stats(model, obs, gap, mc_samples=mc_samples, seed=seed)
    best = stats.best_action
    if stats.mu.size < 2:
        advantage = math.inf
    else:
        others = np.delete(stats.mu, best)
        advantage = float(stats.mu[best] - others.max())
    return stats, best, advantage


def build_tree(
    model: QuantileModel,
    obs,
    root_gap: KnowledgeGap,
    lam_g: float = 1.0,
    t_d: int = 5,
    min_support: int = 8,
    mc_samples: int = 0,
    mc_seed: int = 0,
) -> MintTree:
    """Breadth-first expansion from the root gap.

    A visited node becomes internal iff its advantage is strictly below
    lambda_g times the deviation of its best action, the depth limit is not
    reached, and some object dimension is still splittable. Zero deviation
    therefore never expands, even on exact mean ties.

    With mc_samples > 0 node statistics come from the Monte-Carlo route of
    q_stats (seeded per node, so trees are deterministic). Otherwise nodes
    read their gap key directly, and keys with fewer than min_support
    training updates inherit the parent's statistics: a hypothesis the
    tables hold no evidence about must not fabricate action candidates.
    """
    if lam_g <= 0:
        raise ValueError("lam_g must be positive")
    if t_d < 1:
        raise ValueError("t_d must be at least 1")
    counter = [0]

    def make(gap: KnowledgeGap, depth: int, path: tuple[Condition, ...],
             parent: MintNode | None) -> MintNode:
        counter[0] += 1
        seed = np.random.default_rng([mc_seed, counter[0]]) if mc_samples > 0 else None
        stats, best, advantage = _node_stats(model, obs, gap, mc_samples, seed)
        if mc_samples == 0 and parent is not None:
            try:
                key = encode_gap(gap, model.hyper.value_bits)
            except EncodingError:
                key = None
            if key is not None and model.support(obs, key) < min_support:
                return MintNode(
                    gap=gap,
                    depth=depth,
                    mu=parent.mu,
                    sigma=parent.sigma,
                    best_action=parent.best_action,
                    advantage=parent.advantage,
                    path=path,
                    measure=gap.measure(),
                )
        return MintNode(
            gap=gap,
            depth=depth,
            mu=stats.mu,
            sigma=stats.sigma,
            best_action=best,
            advantage=advantage,
            path=path,
            measure=gap.measure(),
        )

    def grow(node: MintNode) -> MintNode:
        split = next_expansion(node.gap, t_d)
        expandable = (
            node.depth < t_d
            and split is not None
            and node.advantage < lam_g * float(node.sigma[node.best_action])
        )
        if not expandable:
            return node
        children = tuple(
            grow(make(child_gap, node.depth + 1, node.path + (cond,), node))
            for child_gap, cond in split_gap(node.gap, *split)
        )
        return replace(node, children=children, leaf=False)

    root = grow(make(root_gap, 0, (), None))
    return MintTree(root=root, root_gap=root_gap)


# ---------------------------------------------------------------------------
# Merging
# ---------------------------------------------------------------------------


def _leaf_actions(node: MintNode) -> set[int]:
    if node.leaf:
        return {node.best_action}
    out: set[int] = set()
    for child in node.children:
        out |= _leaf_actions(child)
    return out


def _fold(node: MintNode) -> MintNode:
    if node.leaf:
        return node
    children = tuple(_fold(c) for c in node.children)
    actions = set()
    for c in children:
        actions |= _leaf_actions(c)
    if len(actions) == 1:
        return replace(node, children=(), leaf=True, best_action=actions.pop())
    return replace(node, children=children)


def gap_hull(gaps: list[KnowledgeGap]) -> KnowledgeGap:
    """Componentwise smallest representable gap containing every input gap.

    Value intervals narrower than [0,1] are only kept when type and subtype
    came out resolved: gaps follow the type -> subtype -> value refinement
    order, so a narrowed interval under unresolved symbols is not a state
    the encoding (or the training mask distribution) ever produces."""
    if not gaps:
        raise ValueError("hull of no gaps")
    out = []
    for i in range(len(gaps[0])):
        objs = [g.objects[i] for g in gaps]
        types = {o.type_ for o in objs}
        type_ = types.pop() if len(types) == 1 else ANY
        if type_ == ANY:
            subtype = ANY
        else:
            subs = {o.subtype for o in objs}
            subtype = subs.pop() if len(subs) == 1 else ANY
        if type_ == ANY or subtype == ANY:
            lo, hi = 0.0, 1.0
        else:
            lo = min(o.w_min for o in objs)
            hi = max(o.w_max for o in objs)
            if lo != hi:
                lo, hi = dyadic_hull(lo, hi)
        out.append(ObjectGap(type_, subtype, lo, hi))
    return KnowledgeGap(tuple(out))


def merge_tree(tree: MintTree) -> MintTree:
    """Fold uniform-action subtrees, then group same-action leaves under the
    root as single disjunctive nodes. Answer-to-action behavior is unchanged."""
    folded = _fold(tree.root)
    if folded.leaf:
        return MintTree(folded, tree.root_gap, tree.dialogue, merged=True)
    leaves = [n for n in folded.walk() if n.leaf]
    by_action: dict[int, list[MintNode]] = {}
    for leaf in leaves:
        by_action.setdefault(leaf.best_action, []).append(leaf)
    children = []
    for action in sorted(by_action):
        group = by_action[action]
        if len(group) == 1:
            children.append(group[0])
            continue
        total = sum(n.measure for n in group)
        weights = (
            np.array([n.measure for n in group]) / total
            if total > 0
            else np.full(len(group), 1.0 / len(group))
        )
        mu = np.sum([w * n.mu for w, n in zip(weights, group)], axis=0)
        sigma = np.sum([w * n.sigma for w, n in zip(weights, group)], axis=0)
        children.append(
            MintNode(
                gap=gap_hull([n.gap for n in group]),
                depth=1,
                mu=mu,
                sigma=sigma,
                best_action=action,
                advantage=math.inf,
                path=(),
                measure=total,
                leaf=True,
                clauses=tuple(n.path for n in group),
                members=tuple(group),
            )
        )
    root = replace(folded, children=tuple(children), leaf=False)
    return MintTree(root, tree.root_gap, tree.dialogue, merged=True)


# ---------------------------------------------------------------------------
# Information gain and curation
# ---------------------------------------------------------------------------


def _entropy(weights: dict[int, float]) -> float:
    total = sum(weights.values())
    if total <= 0:
        return 0.0
    h = 0.0
    for w in weights.values():
        if w > 0:
            p = w / total
            h -= p * math.log2(p)
    return h


def _decide_leaf(leaf: MintNode, predicate: QueryPredicate):
    if leaf.members is not None:
        votes = [predicate.decide_on_gap(m.gap) for m in leaf.members]
        if any(v is None for v in votes) or len(set(votes)) != 1:
            return None
        return votes[0]
    return predicate.decide_on_gap(leaf.gap)


def _split_measures(leaves, predicate):
    yes: dict[int, float] = {}
    no: dict[int, float] = {}
    n_yes = n_no = 0
    for leaf in leaves:
        side = _decide_leaf(leaf, predicate)
        if side is None:
            return None
        bucket = yes if side else no
        bucket[leaf.best_action] = bucket.get(leaf.best_action, 0.0) + leaf.measure
        if side:
            n_yes += 1
        else:
            n_no += 1
    if n_yes == 0 or n_no == 0:
        return None
    return yes, no


def information_gain(tree: MintTree, predicate: QueryPredicate) -> float:
    """Expected entropy drop of the leaf best-action distribution, in bits.

    Leaves are weighted by descriptor-set measure. Predicates that fail to
    place every leaf wholly on one side, or leave a side empty, score 0.
    """
    leaves = tree.leaves()
    split = _split_measures(leaves, predicate)
    if split is None:
        return 0.0
    yes, no = split
    prior: dict[int, float] = {}
    for bucket in (yes, no):
        for a, w in bucket.items():
            prior[a] = prior.get(a, 0.0) + w
    total = sum(prior.values())
    if total <= 0:
        return 0.0
    p_yes = sum(yes.values()) / total
    return _entropy(prior) - p_yes * _entropy(yes) - (1.0 - p_yes) * _entropy(no)


def _symbol_rank(dim: str, test) -> float:
    if dim == DIM_VALUE:
        return float(test)
    if dim == DIM_TYPE:
        return float(KINDS.index(test))
    for subs in SUBTYPES.values():
        if test in subs:
            return float(subs.index(test))
    return 0.0


def enumerate_predicates(tree: MintTree, include_disjunctive: bool = True) -> list[QueryPredicate]:
    """Candidate family: single-dimension tests drawn from the leaf structure
    plus disjunctive group questions, in deterministic tie-break order."""
    leaves = tree.leaves()
    n_objects = len(tree.root_gap)
    candidates: list[tuple[tuple, QueryPredicate]] = []
    for obj in range(n_objects):
        for kind in KINDS:
            candidates.append(
                ((obj, DIM_ORDER[DIM_TYPE], _symbol_rank(DIM_TYPE, kind)),
                 QueryPredicate(obj, DIM_TYPE, kind))
            )
        for kind in KINDS:
            for sub in SUBTYPES[kind]:
                candidates.append(
                    ((obj, DIM_ORDER[DIM_SUBTYPE], _symbol_rank(DIM_SUBTYPE, sub)),
                     QueryPredicate(obj, DIM_SUBTYPE, sub))
                )
        thresholds = set()
        for leaf in leaves:
            for node_gap in ([leaf.gap] if leaf.members is None else [m.gap for m in leaf.members]):
                og = node_gap.objects[obj]
                for t in (og.w_min, og.w_max):
                    if 0.0 < t < 1.0:
                        thresholds.add(t)
        for t in sorted(thresholds):
            candidates.append(
                ((obj, DIM_ORDER[DIM_VALUE], t), QueryPredicate(obj, DIM_VALUE, t))
            )
    if include_disjunctive:
        by_action: dict[int, list[MintNode]] = {}
        for leaf in leaves:
            if leaf.clauses is not None:
                obj = min(c.obj for clause in leaf.clauses for c in clause)
                candidates.append(
                    ((obj, 3, float(leaf.best_action)),
                     QueryPredicate(obj, DIM_DISJUNCTION, clauses=leaf.clauses))
                )
            elif leaf.path:
                by_action.setdefault(leaf.best_action, []).append(leaf)
        for action in sorted(by_action):
            group = by_action[action]
            if len(group) >= 2:
                clauses = tuple(n.path for n in group)
                obj = min(c.obj for clause in clauses for c in clause)
                candidates.append(
                    ((obj, 3, float(action)), QueryPredicate(obj, DIM_DISJUNCTION, clauses=clauses))
                )
    candidates.sort(key=lambda item: item[0])
    return [pred for _, pred in candidates]


def curate_query(tree: MintTree, include_disjunctive: bool = True) -> QueryPredicate:
    """Argmax-gain predicate over the enumerable family.

    Ties break toward lower object index, then dimension order type, subtype,
    value (disjunctive questions last), then lower test value.
    """
    if len(tree.candidate_actions) < 2:
        raise NoQueryNeeded("single candidate action; no query required")
    best_pred = None
    best_gain = -1.0
    for pred in enumerate_predicates(tree, include_disjunctive):
        gain = information_gain(tree, pred)
        if gain > best_gain + 1e-12:
            best_gain = gain
            best_pred = pred
    if best_pred is None:
        raise NoQueryNeeded("no predicate splits the remaining leaves")
    return best_pred


# ---------------------------------------------------------------------------
# Pruning
# ---------------------------------------------------------------------------


def _prune_node(node: MintNode, predicate: QueryPredicate, answer: bool) -> MintNode | None:
    if node.members is not None:
        kept = [
            m for m in node.members
            if predicate.decide_on_gap(m.gap) in (answer, None)
        ]
        if not kept:
            return None
        if len(kept) == 1:
            return kept[0]
        return replace(
            node,
            members=tuple(kept),
            clauses=tuple(m.path for m in kept),
            gap=gap_hull([m.gap for m in kept]),
            measure=sum(m.measure for m in kept),
        )
    side = predicate.decide_on_gap(node.gap)
    if side is not None and side != answer:
        return None
    if node.leaf:
        return node
    children = [c for c in (_prune_node(c, predicate, answer) for c in node.children) if c]
    if not children:
        return None
    if len(children) == 1 and side is None:
        # the split this node introduced is now decided; hoist the survivor
        return children[0]
    return replace(node, children=tuple(children))


def prune_tree(tree: MintTree, predicate: QueryPredicate, answer: bool) -> MintTree:
    """Drop every branch inconsistent with the answer and refine the root gap.

    Atomic predicates refine the root gap exactly; disjunctive answers leave a
    non-box descriptor set, so the root gap becomes the dyadic hull of the
    surviving leaves.
    """
    root = _prune_node(tree.root, predicate, answer)
    if root is None or not any(n.leaf for n in root.walk()):
        raise ContradictionError("answer eliminates every leaf of the tree")
    if predicate.is_disjunctive:
        survivors = [n for n in root.walk() if n.leaf]
        gaps = []
        for leaf in survivors:
            gaps.extend([m.gap for m in leaf.members] if leaf.members else [leaf.gap])
        new_gap = gap_hull(gaps)
    else:
        new_gap = refine_gap(tree.root_gap, predicate, answer)
    return MintTree(
        root=root,
        root_gap=new_gap,
        dialogue=tree.dialogue + ((predicate, answer),),
        merged=tree.merged,
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_TYPE_LABEL = {ANY: "Unknown", "transition": "Transition", "reward": "Reward"}
_SUB_LABEL = {
    ANY: "Unknown",
    "deterministic": "Deterministic",
    "stochastic": "Stochastic",
    "positive": "Positive",
    "negative": "Negative",
}


def _format_interval(og: ObjectGap) -> str:
    return f"[{og.w_min:g},{og.w_max:g}]"


def _gap_fields(gap: KnowledgeGap) -> str:
    if len(gap) == 1:
        og = gap.objects[0]
        return (
            f"Type={_TYPE_LABEL[og.type_]}, Subtype={_SUB_LABEL[og.subtype]}, "
            f"Value range:{_format_interval(og)}"
        )
    parts = [
        f"{_TYPE_LABEL[og.type_]}/{_SUB_LABEL[og.subtype]}/{_format_interval(og)}"
        for og in gap.objects
    ]
    return "Objects=" + "; ".join(parts)


def serialize_tree(tree: MintTree) -> str:
    """Structured-text dump: one line per node with id, gap fields, action,
    children ids, and merge conditions where present."""
    order = list(tree.root.walk())
    ids = {id(n): i for i, n in enumerate(order)}
    lines = []
    for i, node in enumerate(order):
        label = f"Node {i} (root)" if i == 0 else f"Node {i}"
        if node.children:
            kids = ", ".join(f"Node {ids[id(c)]}" for c in node.children)
        else:
            kids = "None"
        line = (
            f"{label}: {{{_gap_fields(node.gap)}, "
            f"Optimal Action:{node.best_action}, Child:{kids}}}"
        )
        if node.clauses is not None:
            cond = " | ".join(
                "(" + " & ".join(c.describe() for c in clause) + ")" for clause in node.clauses
            )
            line += f" Condition: {cond}"
        lines.append(line)
    return "\n".join(lines)
