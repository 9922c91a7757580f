"""Deployment loop: trigger detection, query rounds, gap updates, acting.

`EpisodeEngine` advances one episode step by step so the same logic serves
batch evaluation (`run_episode` with an oracle), the console, and the HTTP
service. Questions are curated symbolically; a phraser only renders them as
English. Answers prune the trees and refine the per-episode knowledge gap,
which persists across steps and resets between episodes.
"""
from __future__ import annotations

import json
import time
import urllib.request
from dataclasses import dataclass, field

import numpy as np

from .errors import UnresolvedGapError
from .gap_mdp import (
    DIM_SUBTYPE,
    DIM_TYPE,
    DIM_VALUE,
    SUBTYPES,
    TRANSITION,
    Condition,
    Descriptor,
    GridSpec,
    KnowledgeGap,
    ObjectGap,
    QueryPredicate,
    _as_rng,
    _expandable_dim as gap_mdp_expandable,
    boundary_descriptors,
    env_reset,
    env_step,
    next_expansion,
    obs_key,
    unresolved_objects,
)
from .mint_tree import MintTree, build_tree, information_gain, merge_tree, prune_tree, serialize_tree
from .quantile_policy import QuantileModel, encode_descriptor, encode_gap, q_stats


# ---------------------------------------------------------------------------
# Oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Oracle:
    """Answer provider with full knowledge of the ground truth."""

    ground_truth: Descriptor

    def answer(self, predicate: QueryPredicate) -> bool:
        return predicate.evaluate(self.ground_truth)


def oracle_answer(oracle: Oracle, predicate: QueryPredicate) -> bool:
    """Exact evaluation of the predicate on the oracle's ground truth."""
    return oracle.answer(predicate)


# ---------------------------------------------------------------------------
# Question phrasing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuestionContext:
    object_index: int
    grid_position: tuple[int, int]
    gap: KnowledgeGap
    tree_text: str = ""


class TemplatePhraser:
    """Deterministic English templates per (dimension, test)."""

    def phrase(self, predicate: QueryPredicate, ctx: QuestionContext) -> str:
        pos = f"({ctx.grid_position[0]},{ctx.grid_position[1]})"
        if predicate.is_disjunctive:
            return (
                f"Considering the unknown object at {pos}: "
                f"is it true that {predicate.describe()}?"
            )
        if predicate.dim == DIM_TYPE:
            if predicate.test == TRANSITION:
                return f"Does the unknown object at {pos} affect movement rather than reward?"
            return f"Does the unknown object at {pos} affect reward rather than movement?"
        if predicate.dim == DIM_SUBTYPE:
            if predicate.test == "deterministic":
                return f"Is the movement effect at {pos} all-or-nothing rather than random?"
            if predicate.test == "stochastic":
                return f"Is the movement effect at {pos} random rather than all-or-nothing?"
            if predicate.test == "positive":
                return f"Is the reward effect at {pos} a bonus rather than a penalty?"
            return f"Is the reward effect at {pos} a penalty rather than a bonus?"
        if predicate.dim == DIM_VALUE:
            threshold = float(predicate.test)
            obj_gap = ctx.gap.objects[predicate.obj]
            if obj_gap.type_ == TRANSITION:
                return f"Is the chance of being blocked at {pos} at least {threshold * 100:g}%?"
            if obj_gap.type_ == "reward":
                return f"Is the reward magnitude at {pos} at least {threshold:g}?"
            return f"Is the unknown magnitude at {pos} at least {threshold:g}?"
        raise ValueError(f"unknown dimension {predicate.dim!r}")


@dataclass
class LlmClient:
    """Minimal text-in/text-out HTTP client for optional question phrasing.

    POSTs {model, prompt, temperature} as JSON and expects {"text": ...}.
    Request/response pairs are appended to the transcript file when set.
    """

    endpoint: str
    model: str = "default"
    temperature: float = 0.5
    timeout: float = 10.0
    transcript_path: str | None = None

    @classmethod
    def from_env(cls, environ) -> "LlmClient | None":
        endpoint = environ.get("MINTPLAN_LLM_ENDPOINT")
        if not endpoint:
            return None
        return cls(
            endpoint=endpoint,
            model=environ.get("MINTPLAN_LLM_MODEL", "default"),
            temperature=float(environ.get("MINTPLAN_LLM_TEMPERATURE", "0.5")),
            transcript_path=environ.get("MINTPLAN_LLM_TRANSCRIPT"),
        )

    def complete(self, prompt: str) -> str:
        body = json.dumps(
            {"model": self.model, "prompt": prompt, "temperature": self.temperature}
        ).encode("utf-8")
        request = urllib.request.Request(
            self.endpoint, data=body, headers={"Content-Type": "application/json"}
        )
        with urllib.request.urlopen(request, timeout=self.timeout) as response:
            payload = json.loads(response.read().decode("utf-8"))
        text = payload["text"]
        if self.transcript_path:
            with open(self.transcript_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"t": time.time(), "prompt": prompt, "text": text}) + "\n")
        return text


class LlmPhraser:
    """Phrase via an external client; falls back to templates on any failure.

    The client only words the question. The predicate itself is what drives
    pruning, so a bad completion can cost clarity but never correctness.
    """

    def __init__(self, client, template: TemplatePhraser | None = None):
        self.client = client
        self.template = template or TemplatePhraser()
        self.fallbacks = 0

    def phrase(self, predicate: QueryPredicate, ctx: QuestionContext) -> str:
        prompt = (
            "Given the current symbolic tree structure:\n\n"
            f"{ctx.tree_text}\n\n"
            "Formulate a single yes/no question for the condition "
            f"{predicate.describe()} about the object at {ctx.grid_position}. "
            "Your question should have the maximal information gain and divide "
            "the tree into two sub-trees with nearly consistent optimal actions."
        )
        try:
            text = self.client.complete(prompt).strip()
            if not text:
                raise ValueError("empty completion")
            return text
        except Exception:
            self.fallbacks += 1
            return self.template.phrase(predicate, ctx)


def render_question(predicate: QueryPredicate, ctx: QuestionContext, phraser=None) -> str:
    """Single yes/no English sentence for the predicate."""
    return (phraser or TemplatePhraser()).phrase(predicate, ctx)


# ---------------------------------------------------------------------------
# Episode configuration and result
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeConfig:
    delta: float = 0.5
    lam_g: float = 1.0
    t_d: int = 5
    k: int = 5
    query: bool = True
    detection_radius: int = 3  # objects enter consideration within this view
    mc_samples: int = 0  # >0: estimate node stats over sampled descriptors


def predicate_to_json(predicate: QueryPredicate) -> dict:
    out = {"obj": predicate.obj, "dim": predicate.dim}
    if predicate.test is not None:
        out["test"] = predicate.test
    if predicate.clauses is not None:
        out["clauses"] = [
            [
                {"obj": c.obj, "dim": c.dim, "test": c.test, "negated": c.negated}
                for c in clause
            ]
            for clause in predicate.clauses
        ]
    return out


def predicate_from_json(data: dict) -> QueryPredicate:
    clauses = None
    if "clauses" in data:
        clauses = tuple(
            tuple(
                Condition(c["obj"], c["dim"], c["test"], c.get("negated", False))
                for c in clause
            )
            for clause in data["clauses"]
        )
    return QueryPredicate(data["obj"], data["dim"], data.get("test"), clauses)


@dataclass(frozen=True)
class EpisodeResult:
    total_reward: float
    success: bool
    steps: int
    queries_per_object: tuple[int, ...]
    dialogue: tuple[tuple[str, QueryPredicate, bool], ...]
    sigma_trace: tuple[float, ...]

    def to_record(self) -> dict:
        return {
            "total_reward": self.total_reward,
            "success": self.success,
            "steps": self.steps,
            "queries_per_object": list(self.queries_per_object),
            "dialogue": [
                {"text": text, "predicate": predicate_to_json(pred), "answer": ans}
                for text, pred, ans in self.dialogue
            ],
            "sigma_trace": list(self.sigma_trace),
        }

    @classmethod
    def from_record(cls, record: dict) -> "EpisodeResult":
        return cls(
            total_reward=record["total_reward"],
            success=record["success"],
            steps=record["steps"],
            queries_per_object=tuple(record["queries_per_object"]),
            dialogue=tuple(
                (d["text"], predicate_from_json(d["predicate"]), d["answer"])
                for d in record["dialogue"]
            ),
            sigma_trace=tuple(record["sigma_trace"]),
        )


# ---------------------------------------------------------------------------
# Trigger test
# ---------------------------------------------------------------------------


def should_trigger(
    model: QuantileModel, obs, gap: KnowledgeGap, delta: float, mc_samples: int = 0, seed=None
) -> bool:
    """True iff some object is still unresolved and the deviation of the best
    action exceeds delta at this observation."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    if next_expansion(gap, model.hyper.t_d) is None:
        return False
    stats = q_stats(model, obs, gap, mc_samples=mc_samples, seed=seed)
    return float(stats.sigma[stats.best_action]) > delta


# ---------------------------------------------------------------------------
# Episode engine
# ---------------------------------------------------------------------------


def _gap_to_json(gap: KnowledgeGap) -> list[dict]:
    return [
        {"type": og.type_, "subtype": og.subtype, "w_min": og.w_min, "w_max": og.w_max}
        for og in gap.objects
    ]


class EpisodeEngine:
    """Steps one episode, pausing whenever a curated question awaits an answer."""

    def __init__(
        self,
        spec: GridSpec,
        model: QuantileModel,
        truth: Descriptor,
        config: EpisodeConfig,
        seed,
        phraser=None,
        family: KnowledgeGap | None = None,
    ):
        self.spec = spec
        self.model = model
        self.truth = truth
        self.config = config
        self.rng = _as_rng(seed)
        self.phraser = phraser or TemplatePhraser()
        self.state = env_reset(spec)
        self.gap = family if family is not None else KnowledgeGap.maximal(spec.n_objects)
        self.total_reward = 0.0
        self.queries_per_object = [0] * spec.n_objects
        self.dialogue: list[tuple[str, QueryPredicate, bool]] = []
        self.sigma_trace: list[float] = []
        self.trees: tuple[MintTree, MintTree] | None = None  # (raw, merged)
        self.trigger_obs = None
        self.pending: tuple[QueryPredicate, str, int] | None = None  # + event seq
        self.done = False
        self.seq = 0
        self._triggered_once = False
        self._forced_action: int | None = None
        self._mc_counter = 0
        self._sigma_obs = None  # first trigger state; anchors the sigma trace
        self._sigma_action: int | None = None

    # -- events ------------------------------------------------------------

    def _event(self, kind: str, payload: dict) -> dict:
        self.seq += 1
        return {"seq": self.seq, "kind": kind, "payload": payload}

    def _state_event(self) -> dict:
        return self._event(
            "state",
            {
                "cell": list(self.state.agent_cell),
                "steps": self.state.steps_taken,
                "consumed": list(self.state.consumed),
                "total_reward": self.total_reward,
                "gap": _gap_to_json(self.gap),
                "done": self.done,
            },
        )

    @property
    def phase(self) -> str:
        if self.done:
            return "done"
        return "awaiting_answer" if self.pending else "acting"

    # -- statistics plumbing --------------------------------------------------

    def _q(self, obs) -> "QStats":
        """Gap-conditioned stats honoring the configured estimation route.

        Monte-Carlo seeds come from a per-engine counter, so a fixed engine
        seed and interaction sequence reproduce bit-identical episodes."""
        if self.config.mc_samples > 0:
            self._mc_counter += 1
            return q_stats(
                self.model, obs, self.gap, self.config.mc_samples,
                np.random.default_rng([self._mc_counter, 11]),
            )
        return q_stats(self.model, obs, self.gap)

    def _coarsened_gaps(self):
        """The current gap and progressively wider ancestors, ending maximal.

        With several objects, the joint narrowed key is usually starved, so
        single-object marginals (nearest object first, others unknown) come
        before the fully widened forms."""
        from dataclasses import replace as _replace

        out = [self.gap]
        n = len(self.gap)
        if n >= 2:
            # fixed object order: per-cell "nearest" ordering would switch
            # value tables between adjacent cells and can walk in circles
            maximal_obj = ObjectGap()
            for i in range(n):
                if self.gap.objects[i] == maximal_obj:
                    continue
                marginal = KnowledgeGap(
                    tuple(
                        self.gap.objects[j] if j == i else maximal_obj
                        for j in range(n)
                    )
                )
                if marginal not in out:
                    out.append(marginal)
        widened = KnowledgeGap(
            tuple(_replace(og, w_min=0.0, w_max=1.0) for og in self.gap.objects)
        )
        if widened not in out:
            out.append(widened)
        no_sub = KnowledgeGap(
            tuple(
                _replace(og, subtype="any", w_min=0.0, w_max=1.0)
                for og in widened.objects
            )
        )
        if no_sub not in out:
            out.append(no_sub)
        maximal = KnowledgeGap.maximal(n)
        if maximal not in out:
            out.append(maximal)
        return out

    def _act_action(self, obs) -> int:
        """Greedy action for stepping, read from the gap-keyed tables.

        Acting follows one consistent value table (per-step Monte-Carlo
        mixtures can cycle between adjacent cells). Keys without enough
        training support fall back to coarser ancestors of the gap."""
        for gap in self._coarsened_gaps():
            try:
                key = encode_gap(gap, self.model.hyper.value_bits)
            except Exception:
                continue
            if self.model.support(obs, key) >= 8:
                return self.model.stats_for_key(obs, key).best_action
        return q_stats(self.model, obs, self.gap).best_action

    def _trigger_sigma(self) -> float:
        """Remaining deviation of the first trigger's intended action,
        measured at the first trigger state.

        Pinning both the state and the action keeps every round a true
        conditioning of the same quantity, so the per-round means decline."""
        if self.config.mc_samples > 0:
            # common random numbers across rounds: each answer then shows as
            # a conditioning of the same draw, not a fresh-noise comparison
            stats = q_stats(
                self.model, self._sigma_obs, self.gap, 4 * self.config.mc_samples,
                np.random.default_rng([888]),
            )
        else:
            stats = q_stats(self.model, self._sigma_obs, self.gap)
        if self._sigma_action is None:
            self._sigma_action = stats.best_action
        return float(stats.sigma[self._sigma_action])

    # -- query-loop control --------------------------------------------------

    def _boundary_argmax(self) -> int | None:
        """The shared argmax action at both boundary descriptors, if any."""
        try:
            lo, hi = boundary_descriptors(self.gap)
        except UnresolvedGapError:
            return None
        bits = self.model.hyper.value_bits
        obs = self.trigger_obs
        a_lo = self.model.stats_for_key(obs, encode_descriptor(lo, bits)).best_action
        a_hi = self.model.stats_for_key(obs, encode_descriptor(hi, bits)).best_action
        return a_lo if a_lo == a_hi else None

    def _askable_predicates(self) -> list[QueryPredicate]:
        """Atomic questions in refinement order: per object, the next
        unresolved dimension (type, then subtype, then the interval midpoint).

        Only objects inside the detection view are asked about (their
        decision point is where the agent stands); the rest wait for their
        own trigger. Answers keep the gap inside the family of boxes the
        model was trained on; merged disjunctive questions stay display and
        curation structure (see the decisions log)."""
        r, c = self.state.agent_cell
        out = []
        for i, og in enumerate(self.gap.objects):
            if self.queries_per_object[i] >= self.config.k:
                continue
            orow, ocol = self.spec.uncertain_cells[i]
            if max(abs(orow - r), abs(ocol - c)) > self.config.detection_radius:
                continue
            dim = gap_mdp_expandable(og, self.config.t_d)
            if dim == DIM_TYPE:
                out.append(QueryPredicate(i, DIM_TYPE, TRANSITION))
            elif dim == DIM_SUBTYPE:
                out.append(QueryPredicate(i, DIM_SUBTYPE, SUBTYPES[og.type_][0]))
            elif dim == DIM_VALUE:
                out.append(QueryPredicate(i, DIM_VALUE, (og.w_min + og.w_max) / 2.0))
        return out

    def _next_question(self, events: list[dict]) -> bool:
        """Select the next query if the loop should continue. Returns whether
        a question is now pending; otherwise records how to act.

        Exits require the remaining deviation to have dropped to delta as
        well: while sigma stays above the trigger threshold the object still
        counts as unresolved, even if the tree momentarily shows one
        candidate action or agreeing boundary optima."""
        raw, merged = self.trees
        candidates = merged.candidate_actions
        agreed = self._boundary_argmax() if len(candidates) >= 2 else None
        stats = self._q(self.trigger_obs)
        resolved_enough = float(stats.sigma[stats.best_action]) <= self.config.delta
        askable = self._askable_predicates()
        decided = len(candidates) < 2 or agreed is not None
        if (decided and resolved_enough) or not askable:
            if len(candidates) < 2:
                self._forced_action = candidates[0] if candidates else None
            else:
                self._forced_action = agreed  # None when budgets ran out undecided
            return False
        predicate = max(askable, key=lambda p: information_gain(merged, p))
        ctx = QuestionContext(
            object_index=predicate.obj,
            grid_position=self.spec.uncertain_cells[predicate.obj],
            gap=self.gap,
            tree_text=serialize_tree(merged),
        )
        text = render_question(predicate, ctx, self.phraser)
        event = self._event(
            "question",
            {
                "text": text,
                "predicate": predicate_to_json(predicate),
                "object": predicate.obj,
                "round": len(self.dialogue) + 1,
            },
        )
        events.append(event)
        self.pending = (predicate, text, event["seq"])
        return True

    def _open_trigger(self, events: list[dict]) -> bool:
        obs = obs_key(self.state, self.spec)
        self.trigger_obs = obs
        self._mc_counter += 1
        raw = build_tree(
            self.model, obs, self.gap, self.config.lam_g, self.config.t_d,
            mc_samples=self.config.mc_samples, mc_seed=self._mc_counter,
        )
        merged = merge_tree(raw)
        # earlier answers constrain descriptor sets beyond what the box gap
        # can express; replay them so a rebuilt tree regains that knowledge
        for _text, predicate, answer in self.dialogue:
            raw = prune_tree(raw, predicate, answer)
            merged = prune_tree(merged, predicate, answer)
        self.trees = (raw, merged)
        self.gap = merged.root_gap
        events.append(
            self._event(
                "tree",
                {"text": serialize_tree(merged), "raw_text": serialize_tree(raw)},
            )
        )
        if not self._triggered_once:
            self._triggered_once = True
            self._sigma_obs = obs
            self.sigma_trace.append(self._trigger_sigma())
        return self._next_question(events)

    # -- public stepping -----------------------------------------------------

    def _object_detected(self) -> bool:
        """Some still-unresolved object lies within the detection view."""
        r, c = self.state.agent_cell
        for i in unresolved_objects(self.gap, self.config.t_d):
            orow, ocol = self.spec.uncertain_cells[i]
            if max(abs(orow - r), abs(ocol - c)) <= self.config.detection_radius:
                return True
        return False

    def advance(self) -> list[dict]:
        """Run until a question is pending or the episode ends."""
        events: list[dict] = []
        if self.done or self.pending:
            return events
        while not self.done:
            obs = obs_key(self.state, self.spec)
            if (
                self.config.query
                and self.trees is None
                and self._object_detected()
                and next_expansion(self.gap, self.config.t_d) is not None
            ):
                stats = self._q(obs)
                if float(stats.sigma[stats.best_action]) > self.config.delta:
                    if self._open_trigger(events):
                        return events
            if self._forced_action is not None:
                action = self._forced_action
            else:
                action = self._act_action(obs)
            self.state, reward, self.done = env_step(
                self.state, action, self.spec, self.truth, self.rng
            )
            self.total_reward += reward
            self.trees = None  # a fresh trigger may fire at the next state
            self._forced_action = None
            events.append(self._state_event())
        events.append(self._event("episode_end", {"result": self.result().to_record()}))
        return events

    def submit_answer(self, answer: bool) -> list[dict]:
        """Apply an answer to the pending question; may emit the next question."""
        if self.pending is None:
            raise InvalidAnswer("no question is pending")
        predicate, text, _seq = self.pending
        self.pending = None
        raw, merged = self.trees
        raw = prune_tree(raw, predicate, answer)
        merged = prune_tree(merged, predicate, answer)
        self.trees = (raw, merged)
        self.gap = merged.root_gap
        self.queries_per_object[predicate.obj] += 1
        self.dialogue.append((text, predicate, answer))
        events = [self._event("answer_ack", {"answer": answer})]
        self.sigma_trace.append(self._trigger_sigma())
        events.append(
            self._event(
                "tree",
                {"text": serialize_tree(merged), "raw_text": serialize_tree(raw)},
            )
        )
        self._next_question(events)
        return events

    def result(self) -> EpisodeResult:
        return EpisodeResult(
            total_reward=self.total_reward,
            success=self.state.agent_cell == self.spec.goal,
            steps=self.state.steps_taken,
            queries_per_object=tuple(self.queries_per_object),
            dialogue=tuple(self.dialogue),
            sigma_trace=tuple(self.sigma_trace),
        )


class InvalidAnswer(Exception):
    """Answer submitted while no question is pending."""


def run_episode(
    spec: GridSpec,
    model: QuantileModel,
    oracle: Oracle,
    config: EpisodeConfig,
    seed,
    phraser=None,
    family: KnowledgeGap | None = None,
) -> EpisodeResult:
    """Play one full episode with the oracle answering every curated query."""
    engine = EpisodeEngine(spec, model, oracle.ground_truth, config, seed, phraser, family)
    while not engine.done:
        engine.advance()
        if engine.pending is not None:
            predicate = engine.pending[0]
            engine.submit_answer(oracle_answer(oracle, predicate))
    return engine.result()
