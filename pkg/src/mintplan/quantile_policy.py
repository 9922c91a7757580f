"""Two-head tabular quantile Q-learner conditioned on knowledge gaps.

Each head maps (observation, gap key, action) to N return quantiles. During
training every transition is stored twice: once under the episode's true
descriptor (a fully-known key) and once under a randomly masked gap, so the
same tables learn both descriptor-conditioned values and gap-conditioned
value mixtures. The cross-head covariance of the quantile vectors estimates
the aleatoric variance caused by the remaining gap.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError, EncodingError
from .gap_mdp import (
    ANY,
    KINDS,
    N_ACTIONS,
    SUBTYPES,
    Descriptor,
    GridSpec,
    KnowledgeGap,
    _as_rng,
    dyadic_depth_index,
    env_reset,
    env_step,
    obs_key,
    random_mask,
    sample_descriptor,
)

_TABLE_DTYPE = np.float32


# ---------------------------------------------------------------------------
# Key encoding
# ---------------------------------------------------------------------------


def _kind_index(kind: str) -> int:
    return 0 if kind == ANY else KINDS.index(kind) + 1


def _sub_index(kind: str, subtype: str) -> int:
    return 0 if subtype == ANY else SUBTYPES[kind].index(subtype) + 1


def _bucket(value: float, value_bits: int) -> int:
    scale = 2**value_bits
    return min(int(value * scale), scale - 1)


def encode_descriptor(desc: Descriptor, value_bits: int) -> tuple:
    """Fully-known model key: per object (kind, subtype, magnitude bucket)."""
    return tuple(
        ("k", _kind_index(o.kind), _sub_index(o.kind, o.subtype), _bucket(o.magnitude, value_bits))
        for o in desc.objects
    )


def encode_gap(gap: KnowledgeGap, value_bits: int) -> tuple:
    """Finite model key for a gap; fully-resolved objects route to known buckets.

    Deterministic-transition intervals that pin the magnitude keep their
    dyadic component (the training masks produce those keys; per-object
    known components only arise when every object is known)."""
    parts = []
    for og in gap.objects:
        if og.symbols_resolved and og.is_singleton:
            parts.append(
                ("k", _kind_index(og.type_), _sub_index(og.type_, og.subtype), _bucket(og.w_min, value_bits))
            )
            continue
        if og.is_singleton:
            raise EncodingError("singleton interval with unresolved symbols has no key")
        m, k = dyadic_depth_index(og.w_min, og.w_max)
        t_idx = _kind_index(og.type_)
        s_idx = 0 if og.type_ == ANY else _sub_index(og.type_, og.subtype)
        parts.append(("g", t_idx, s_idx, m, k))
    return tuple(parts)


# ---------------------------------------------------------------------------
# Core quantile operations
# ---------------------------------------------------------------------------


def tau_hat(n: int) -> np.ndarray:
    """Quantile midpoints (2i-1)/(2N), i = 1..N."""
    return (2.0 * np.arange(1, n + 1) - 1.0) / (2.0 * n)


def quantile_update(quantiles, target: float, alpha: float) -> np.ndarray:
    """Quantile-regression step: q_i += alpha * (tau_i - 1[target < q_i])."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    q = np.asarray(quantiles, dtype=float)
    return q + alpha * (tau_hat(q.size) - (target < q))


def aleatoric_variance(qa, qb) -> float:
    """Cross-head covariance over the uniform quantile index."""
    a = np.asarray(qa, dtype=float)
    b = np.asarray(qb, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionMismatchError(f"quantile shapes differ: {a.shape} vs {b.shape}")
    return float((a * b).mean() - a.mean() * b.mean())


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Hyper:
    """Training hyperparameters (tabular desk-scale defaults)."""

    alpha: float = 0.05
    alpha_mean: float = 0.1
    gamma: float = 0.99
    epsilon: float = 0.05
    explore_bonus: float = 20.0  # behavior-only optimism for barely-tried actions
    explore_visits: int = 5  # bonus applies until an action has this many updates
    n_quantiles: int = 50
    episodes: int = 500
    replay_capacity: int = 200_000
    batch_size: int = 256
    train_every: int = 4
    value_bits: int = 3
    t_d: int = 5


@dataclass(frozen=True)
class QStats:
    """Per-action mean and aleatoric variance of the return estimate."""

    mu: np.ndarray
    sigma_sq: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.sigma_sq, 0.0))

    @property
    def best_action(self) -> int:
        return int(np.argmax(self.mu))


# store slots per key: [rows_A, rows_B, means_A, means_B, counts_A, counts_B]
_ROWS_A, _ROWS_B, _MEAN_A, _MEAN_B, _COUNT_A, _COUNT_B = range(6)


class QuantileModel:
    """Two lookup tables (heads A and B) of N quantiles per (obs, gap, action).

    Unseen keys read as all-zero quantiles. Serving statistics are always
    recomputed from the stored rows, so a persisted and reloaded model serves
    identically to the in-memory one; the incremental mean caches exist only
    for the training hot path.
    """

    def __init__(self, hyper: Hyper, n_actions: int = N_ACTIONS):
        self.hyper = hyper
        self.n_actions = n_actions
        self.n_quantiles = hyper.n_quantiles
        self._store: dict = {}
        self.updates = 0

    # -- storage -------------------------------------------------------------

    def _slot(self, key) -> list:
        slot = self._store.get(key)
        if slot is None:
            slot = [
                np.zeros((self.n_actions, self.n_quantiles), dtype=_TABLE_DTYPE),
                np.zeros((self.n_actions, self.n_quantiles), dtype=_TABLE_DTYPE),
                np.zeros(self.n_actions),
                np.zeros(self.n_actions),
                np.zeros(self.n_actions, dtype=np.int64),
                np.zeros(self.n_actions, dtype=np.int64),
            ]
            self._store[key] = slot
        return slot

    def keys(self):
        return self._store.keys()

    def get_rows(self, head: int, key) -> np.ndarray | None:
        slot = self._store.get(key)
        return None if slot is None else slot[_ROWS_A + head]

    def set_rows(self, head: int, key, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=_TABLE_DTYPE)
        if rows.shape != (self.n_actions, self.n_quantiles):
            raise DimensionMismatchError(f"rows shape {rows.shape} does not fit the model")
        slot = self._slot(key)
        slot[_ROWS_A + head] = rows.copy()
        slot[_MEAN_A + head] = rows.astype(float).mean(axis=1)

    def quantiles(self, head: int, obs, gap_key) -> np.ndarray:
        """Stored quantile rows for one head; zeros if the key is unseen."""
        rows = self.get_rows(head, (obs, gap_key))
        if rows is None:
            return np.zeros((self.n_actions, self.n_quantiles), dtype=_TABLE_DTYPE)
        return rows

    def table_sizes(self) -> tuple[int, int]:
        return len(self._store), len(self._store)

    # -- serving -------------------------------------------------------------

    def stats_for_key(self, obs, gap_key) -> QStats:
        slot = self._store.get((obs, gap_key))
        if slot is None:
            return QStats(mu=np.zeros(self.n_actions), sigma_sq=np.zeros(self.n_actions))
        a = slot[_ROWS_A].astype(float)
        b = slot[_ROWS_B].astype(float)
        mean_a = a.mean(axis=1)
        mean_b = b.mean(axis=1)
        return QStats(
            mu=(mean_a + mean_b) / 2.0,
            sigma_sq=(a * b).mean(axis=1) - mean_a * mean_b,
        )

    def support(self, obs, gap_key) -> int:
        """Total number of training updates behind a key, across heads."""
        slot = self._store.get((obs, gap_key))
        if slot is None:
            return 0
        return int(slot[_COUNT_A].sum() + slot[_COUNT_B].sum())

    def action_support(self, obs, gap_key) -> np.ndarray:
        """Per-action training-update counts behind a key, across heads."""
        slot = self._store.get((obs, gap_key))
        if slot is None:
            return np.zeros(self.n_actions, dtype=np.int64)
        return slot[_COUNT_A] + slot[_COUNT_B]


def _mc_sample_key(model: QuantileModel, phi: Descriptor, focus: int) -> tuple:
    """Key for one Monte-Carlo draw: the focused object at its deepest dyadic
    component, every other object marginalized to the any component.

    Joint keys with several specific components are starved at desk-scale
    data volumes; one-deep-component keys are exactly the shapes the training
    masks produce densely, so draws stay on supported table entries. Focus
    rotates across objects over the draws, pooling their variances."""
    t_d = model.hyper.t_d
    scale = 2**t_d
    parts = []
    for i, o in enumerate(phi.objects):
        if i != focus:
            parts.append(("g", 0, 0, 0, 0))
        else:
            k = min(int(o.magnitude * scale), scale - 1)
            parts.append(
                ("g", _kind_index(o.kind), _sub_index(o.kind, o.subtype), t_d, k)
            )
    return tuple(parts)


def q_stats(model: QuantileModel, obs, gap: KnowledgeGap, mc_samples: int = 0, seed=None) -> QStats:
    """Mean and aleatoric variance per action for a gap-conditioned query.

    With mc_samples > 0, falls back to Monte-Carlo over sampled descriptors:
    mu averages the sampled entries' means and sigma_sq is their spread over
    the draws. Samples whose table rows were never updated carry no estimate
    and are excluded per action rather than read as zero.
    """
    if mc_samples > 0:
        rng = _as_rng(seed)
        mus = np.zeros((mc_samples, model.n_actions))
        fit = np.zeros((mc_samples, model.n_actions))
        single = len(gap) == 1
        for i in range(mc_samples):
            phi = sample_descriptor(gap, rng)
            if single:
                # the fully-known key is densely trained when there is only
                # one object; with several, only one-deep-component keys are
                key = encode_descriptor(phi, model.hyper.value_bits)
            else:
                key = _mc_sample_key(model, phi, i % len(gap))
            mus[i] = model.stats_for_key(obs, key).mu
            fit[i] = model.action_support(obs, key) > 0
        counts = fit.sum(axis=0)
        safe = np.maximum(counts, 1.0)
        mu = (mus * fit).sum(axis=0) / safe
        second = (mus**2 * fit).sum(axis=0) / safe
        sigma_sq = np.where(counts >= 2, second - mu**2, 0.0)
        return QStats(mu=mu, sigma_sq=np.maximum(sigma_sq, 0.0))
    gap_key = encode_gap(gap, model.hyper.value_bits)
    return model.stats_for_key(obs, gap_key)


def best_action(model: QuantileModel, obs, gap: KnowledgeGap) -> int:
    """Argmax of the gap-conditioned mean; ties break to the lowest index."""
    return q_stats(model, obs, gap).best_action


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    episodes: int
    steps: int
    episode_returns: list[float] = field(default_factory=list)

    def mean_return_curve(self, blocks: int = 20) -> list[float]:
        if not self.episode_returns:
            return []
        size = max(1, len(self.episode_returns) // blocks)
        return [
            float(np.mean(self.episode_returns[i : i + size]))
            for i in range(0, len(self.episode_returns), size)
        ]


def _mask_key(desc: Descriptor, rng: np.random.Generator, t_d: int, value_bits: int) -> tuple:
    """encode_gap(random_mask(desc)) fused for the training hot path."""
    parts = []
    for o in desc.objects:
        level = int(rng.integers(0, 4))
        kind_idx = KINDS.index(o.kind) + 1
        if level == 0:
            parts.append(("g", 0, 0, 0, 0))
        elif level == 1:
            parts.append(("g", kind_idx, 0, 0, 0))
        else:
            sub_idx = SUBTYPES[o.kind].index(o.subtype) + 1
            if level == 2:
                parts.append(("g", kind_idx, sub_idx, 0, 0))
            else:
                m = int(rng.integers(1, t_d + 1))
                scale = 2**m
                k = min(int(o.magnitude * scale), scale - 1)
                parts.append(("g", kind_idx, sub_idx, m, k))
    return tuple(parts)


def _focus_key(desc: Descriptor, focus: int, t_d: int) -> tuple:
    """Single-focus key: one object at its deepest dyadic component, the rest
    marginalized. Matches _mc_sample_key for the same focus and magnitudes."""
    scale = 2**t_d
    parts = []
    for i, o in enumerate(desc.objects):
        if i != focus:
            parts.append(("g", 0, 0, 0, 0))
        else:
            kind_idx = KINDS.index(o.kind) + 1
            sub_idx = SUBTYPES[o.kind].index(o.subtype) + 1
            k = min(int(o.magnitude * scale), scale - 1)
            parts.append(("g", kind_idx, sub_idx, t_d, k))
    return tuple(parts)


def _replay_batch(
    model: QuantileModel,
    replay: list,
    rng: np.random.Generator,
    taus: np.ndarray,
    scratch: np.ndarray,
) -> None:
    # Per update: anchor a fresh row at its first target, then combine the
    # pinball step (shapes the spread) with a common-mode shift toward the
    # target (tracks the moving mean at a rate independent of tau, which the
    # extreme quantiles' own O(alpha*tau) steps cannot).
    hyper = model.hyper
    store = model._store
    gamma = hyper.gamma
    alpha = hyper.alpha
    alpha_mean = hyper.alpha_mean
    inv_n = 1.0 / model.n_quantiles
    updates = 0
    for i in rng.integers(0, len(replay), size=hyper.batch_size):
        obs, key, a, r, obs2, done, m_a, m_b = replay[i]
        if not (m_a or m_b):
            continue
        nxt = None if done else store.get((obs2, key))
        skey = (obs, key)
        slot = store.get(skey)
        if slot is None:
            slot = model._slot(skey)
        for head in (0, 1) if (m_a and m_b) else ((0,) if m_a else (1,)):
            if nxt is None:
                z = r
            else:
                mu2 = nxt[_MEAN_A + head]
                z = r + gamma * mu2[mu2.argmax()]
            counts = slot[_COUNT_A + head]
            q = slot[_ROWS_A + head][a]
            if counts[a] == 0:
                q[:] = z
                slot[_MEAN_A + head][a] = z
            else:
                common = alpha_mean * (z - slot[_MEAN_A + head][a])
                np.less(z, q, out=scratch)
                np.subtract(taus, scratch, out=scratch)
                scratch *= alpha
                scratch += common
                q += scratch
                slot[_MEAN_A + head][a] += float(scratch.sum()) * inv_n
            counts[a] += 1
            updates += 1
    model.updates += updates


def train(
    spec: GridSpec, family: KnowledgeGap, hyper: Hyper, seed
) -> tuple[QuantileModel, TrainReport]:
    """Train the two-head model on the MDP family described by `family`.

    Every reset draws a fresh descriptor uniformly from the family. Behavior
    is epsilon-greedy on the known-descriptor key. Each transition is stored
    under both the known key and a random mask of the descriptor, each copy
    with independent Bernoulli(0.5) inclusion masks per head.
    """
    if hyper.episodes <= 0:
        raise ValueError("episode budget must be positive (empty model otherwise)")
    if len(family) != spec.n_objects:
        raise DimensionMismatchError("family does not match the grid's object count")
    rng = _as_rng(seed)
    model = QuantileModel(hyper)
    taus = tau_hat(hyper.n_quantiles).astype(_TABLE_DTYPE)
    scratch = np.empty(hyper.n_quantiles, dtype=_TABLE_DTYPE)
    replay: list = []
    write_pos = 0
    total_steps = 0
    report = TrainReport(episodes=hyper.episodes, steps=0)
    store = model._store
    capacity = hyper.replay_capacity
    n_objects = spec.n_objects
    any_key = tuple(("g", 0, 0, 0, 0) for _ in range(n_objects))

    def store_sample(sample) -> None:
        nonlocal write_pos
        if len(replay) < capacity:
            replay.append(sample)
        else:
            replay[write_pos] = sample
            write_pos = (write_pos + 1) % capacity

    def nearest_object(cell) -> int:
        best, best_d = 0, 10**9
        for i, oc in enumerate(spec.uncertain_cells):
            d = max(abs(oc[0] - cell[0]), abs(oc[1] - cell[1]))
            if d < best_d:
                best, best_d = i, d
        return best

    for _ in range(hyper.episodes):
        desc = sample_descriptor(family, rng)
        known_key = encode_descriptor(desc, hyper.value_bits)
        focus_keys = [_focus_key(desc, i, hyper.t_d) for i in range(n_objects)]
        state = env_reset(spec)
        ep_return = 0.0
        done = False
        while not done:
            obs = obs_key(state, spec)
            if rng.random() < hyper.epsilon:
                a = int(rng.integers(0, model.n_actions))
            else:
                # base policy on the densest descriptor-conditioned table
                # (optimism until each action has a few updates keeps
                # coverage): with one object that is the all-unknown key;
                # with several, the joint keys are starved and the nearest
                # object's single-focus key carries the local knowledge.
                # The episode's fully-known key overrides where matured.
                if n_objects >= 2:
                    base = store.get((obs, focus_keys[nearest_object(state.agent_cell)]))
                else:
                    base = store.get((obs, any_key))
                if base is None:
                    mu = np.zeros(model.n_actions)
                else:
                    mu = base[_MEAN_A] + base[_MEAN_B]
                    fresh = (base[_COUNT_A] + base[_COUNT_B]) < hyper.explore_visits
                    if fresh.any():
                        mu = mu + hyper.explore_bonus * fresh
                known = store.get((obs, known_key))
                if known is not None:
                    mature = (known[_COUNT_A] + known[_COUNT_B]) >= hyper.explore_visits
                    if mature.any():
                        mu = np.where(mature, known[_MEAN_A] + known[_MEAN_B], mu)
                a = int(mu.argmax())
            prev_cell = state.agent_cell
            state, r, done = env_step(state, a, spec, desc, rng)
            obs2 = obs_key(state, spec)
            ep_return += r
            mask_key = _mask_key(desc, rng, hyper.t_d, hyper.value_bits)
            bern = rng.random(4)
            store_sample((obs, known_key, a, r, obs2, done, bern[0] < 0.5, bern[1] < 0.5))
            store_sample((obs, mask_key, a, r, obs2, done, bern[2] < 0.5, bern[3] < 0.5))
            if n_objects >= 2:
                # single-focus coverage for every object: these are the key
                # shapes the Monte-Carlo estimator, the local behavior, and
                # the deployment acting fallback read. Conditioned values
                # must exist along whole routes (a blocked-gate detour), not
                # just near the object itself.
                bern2 = rng.random(2 * n_objects)
                for i in range(n_objects):
                    store_sample(
                        (obs, focus_keys[i], a, r, obs2, done,
                         bern2[2 * i] < 0.5, bern2[2 * i + 1] < 0.5)
                    )
            total_steps += 1
            if total_steps % hyper.train_every == 0 and len(replay) >= hyper.batch_size:
                _replay_batch(model, replay, rng, taus, scratch)
        report.episode_returns.append(ep_return)
    report.steps = total_steps
    return model, report
