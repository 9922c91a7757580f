"""Numerical certification of the MDP pseudo-metric theory.

Between two MDPs M = (S, A, T, R, gamma) and M' = (S, A, T', R', gamma) the
directed dissimilarity d is the unique fixed point of

    d[s,a] = |R - R'|[s,a] + gamma * sum_s' V*_{M'}(s') |T - T'|[s,a,s']
             + gamma * sum_s' T[s,a,s'] * max_a' d[s',a']

and the symmetric pseudo-metric is Delta = min(d(M||M'), d(M'||M)) taken
elementwise. Delta bounds |Q*_M - Q*_M'| pointwise; the certifiers check that
bound, the contraction rate of the solver, and the interpolated-return bound
on grid instances, all at explicit tolerances.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import IncompatibleMdpError, InterpolationError

_ROW_SUM_TOL = 1e-12


@dataclass(frozen=True)
class TabularMdp:
    """Explicit finite MDP: T[s,a,s'], R[s,a], discount gamma in [0,1)."""

    T: np.ndarray
    R: np.ndarray
    gamma: float

    def __post_init__(self):
        T = np.asarray(self.T, dtype=float)
        R = np.asarray(self.R, dtype=float)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "R", R)
        if T.ndim != 3 or T.shape[0] != T.shape[2] or R.shape != T.shape[:2]:
            raise ValueError(f"bad shapes T{T.shape} R{R.shape}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma {self.gamma} outside [0, 1)")
        if (T < 0).any():
            raise ValueError("negative transition probability")
        if np.abs(T.sum(axis=2) - 1.0).max() > _ROW_SUM_TOL:
            raise ValueError("transition rows must sum to 1")

    @property
    def n_states(self) -> int:
        return self.T.shape[0]

    @property
    def n_actions(self) -> int:
        return self.T.shape[1]


def _check_compatible(m: TabularMdp, mbar: TabularMdp) -> None:
    if m.T.shape != mbar.T.shape or m.gamma != mbar.gamma:
        raise IncompatibleMdpError(
            f"shapes {m.T.shape} vs {mbar.T.shape} or gammas {m.gamma} vs {mbar.gamma} differ"
        )


def bellman_backup(m: TabularMdp, q: np.ndarray) -> np.ndarray:
    """One application of the optimality Bellman operator to a Q table."""
    return m.R + m.gamma * m.T @ q.max(axis=1)


def value_iteration(m: TabularMdp, tol: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Optimal Q table and V* = max_a Q*.

    Iterates until the sup-norm change is at most tol*(1-gamma)/gamma, which
    bounds both the Bellman residual and the true error of the returned table
    by tol.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    q = np.zeros_like(m.R)
    stop = tol if m.gamma == 0.0 else tol * (1.0 - m.gamma) / m.gamma
    while True:
        nxt = bellman_backup(m, q)
        change = np.abs(nxt - q).max()
        q = nxt
        if change <= stop:
            return q, q.max(axis=1)


def _directed_cost(m: TabularMdp, mbar: TabularMdp, tol: float) -> np.ndarray:
    _, v_bar = value_iteration(mbar, tol=min(tol, 1e-10))
    return np.abs(m.R - mbar.R) + m.gamma * np.abs(m.T - mbar.T) @ v_bar


def dissimilarity_sweep_gaps(
    m: TabularMdp, mbar: TabularMdp, tol: float = 1e-8
) -> tuple[np.ndarray, list[float]]:
    """Directed dissimilarity plus the sup-norm change of every sweep."""
    _check_compatible(m, mbar)
    if tol <= 0:
        raise ValueError("tol must be positive")
    cost = _directed_cost(m, mbar, tol)
    d = np.zeros_like(cost)
    stop = tol if m.gamma == 0.0 else tol * (1.0 - m.gamma) / m.gamma
    gaps: list[float] = []
    while True:
        nxt = cost + m.gamma * m.T @ d.max(axis=1)
        change = float(np.abs(nxt - d).max())
        gaps.append(change)
        d = nxt
        if change <= stop:
            return d, gaps


def dissimilarity(m: TabularMdp, mbar: TabularMdp, tol: float = 1e-8) -> np.ndarray:
    """Directed dissimilarity d(m || mbar), solved to residual <= tol."""
    d, _ = dissimilarity_sweep_gaps(m, mbar, tol)
    return d


def pseudo_metric(m: TabularMdp, mbar: TabularMdp, tol: float = 1e-8) -> np.ndarray:
    """Elementwise min of the two directed dissimilarities (symmetric)."""
    return np.minimum(dissimilarity(m, mbar, tol), dissimilarity(mbar, m, tol))


@dataclass(frozen=True)
class CertReport:
    name: str
    passed: bool
    max_violation: float
    tolerance: float
    witness: tuple[int, int] | None = None
    iterations: int = 0
    residual: float = 0.0
    details: dict = field(default_factory=dict)

    def to_text(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        line = (
            f"[{status}] {self.name}: max_violation={self.max_violation:.3e}"
            f" tol={self.tolerance:.1e} iterations={self.iterations}"
            f" residual={self.residual:.3e}"
        )
        if self.witness is not None:
            line += f" witness=(s={self.witness[0]}, a={self.witness[1]})"
        return line


def certify_lipschitz(m: TabularMdp, mbar: TabularMdp, tol: float = 1e-6) -> CertReport:
    """Check |Q*_m - Q*_mbar| <= Delta elementwise, within tol."""
    _check_compatible(m, mbar)
    inner = min(tol * 1e-2, 1e-9)
    q_m, _ = value_iteration(m, tol=inner)
    q_bar, _ = value_iteration(mbar, tol=inner)
    d_fwd, gaps = dissimilarity_sweep_gaps(m, mbar, tol=inner)
    d_bwd, _ = dissimilarity_sweep_gaps(mbar, m, tol=inner)
    delta = np.minimum(d_fwd, d_bwd)
    gap = np.abs(q_m - q_bar) - delta
    worst = int(np.argmax(gap))
    witness = np.unravel_index(worst, gap.shape)
    violation = float(gap.flat[worst])
    return CertReport(
        name="lipschitz",
        passed=violation <= tol,
        max_violation=violation,
        tolerance=tol,
        witness=(int(witness[0]), int(witness[1])),
        iterations=len(gaps),
        residual=gaps[-1],
    )


def interpolate_descriptors(phi1, phi2, lam: float):
    """Magnitude interpolation lam*phi1 + (1-lam)*phi2; symbols must agree."""
    from .gap_mdp import Descriptor, ObjectDescriptor

    if len(phi1) != len(phi2):
        raise InterpolationError("descriptors differ in object count")
    objs = []
    for o1, o2 in zip(phi1.objects, phi2.objects):
        if o1.kind != o2.kind or o1.subtype != o2.subtype:
            raise InterpolationError(
                f"symbol mismatch: ({o1.kind},{o1.subtype}) vs ({o2.kind},{o2.subtype})"
            )
        mag = lam * o1.magnitude + (1.0 - lam) * o2.magnitude
        if o1.kind == "transition" and o1.subtype == "deterministic" and o1.magnitude != o2.magnitude:
            raise InterpolationError("deterministic transitions cannot interpolate magnitudes")
        objs.append(ObjectDescriptor(o1.kind, o1.subtype, mag))
    return Descriptor(tuple(objs))


def certify_return_bound(
    spec, phi1, phi2, lam: float, tol: float = 1e-6, gamma: float = 0.99
) -> CertReport:
    """Check V*_{phi*}(s0) <= min(V*_{phi1}, V*_{phi2})(s0) + Delta[s0, a0].

    phi* interpolates the magnitudes of phi1 and phi2 with weight lam, and
    a0 maximizes Delta[s0, .] over actions.
    """
    from .gap_mdp import env_reset, tabular_state_index, to_tabular

    if not 0.0 < lam < 1.0:
        raise ValueError("lam must lie strictly between 0 and 1")
    phi_star = interpolate_descriptors(phi1, phi2, lam)
    m1 = to_tabular(spec, phi1, gamma=gamma)
    m2 = to_tabular(spec, phi2, gamma=gamma)
    m_star = to_tabular(spec, phi_star, gamma=gamma)
    inner = min(tol * 1e-2, 1e-9)
    _, v1 = value_iteration(m1, tol=inner)
    _, v2 = value_iteration(m2, tol=inner)
    _, v_star = value_iteration(m_star, tol=inner)
    d_fwd, gaps = dissimilarity_sweep_gaps(m1, m2, tol=inner)
    d_bwd, _ = dissimilarity_sweep_gaps(m2, m1, tol=inner)
    delta = np.minimum(d_fwd, d_bwd)

    s0 = tabular_state_index(spec, phi1, env_reset(spec))
    a0 = int(np.argmax(delta[s0]))
    bound = min(v1[s0], v2[s0]) + delta[s0, a0]
    violation = float(v_star[s0] - bound)
    return CertReport(
        name="return_bound",
        passed=violation <= tol,
        max_violation=violation,
        tolerance=tol,
        witness=(s0, a0),
        iterations=len(gaps),
        residual=gaps[-1],
        details={
            "v_star": float(v_star[s0]),
            "v_phi1": float(v1[s0]),
            "v_phi2": float(v2[s0]),
            "delta_s0_a0": float(delta[s0, a0]),
            "lam": lam,
        },
    )


def random_mdp(n_states: int, n_actions: int, gamma: float, seed) -> TabularMdp:
    """Random instance: uniform-simplex transition rows, rewards in [0, 1]."""
    if n_states < 1 or n_actions < 1:
        raise ValueError("need at least one state and one action")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    raw = rng.exponential(1.0, size=(n_states, n_actions, n_states))
    T = raw / raw.sum(axis=2, keepdims=True)
    R = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    return TabularMdp(T=T, R=R, gamma=gamma)


def perturbed_mdp(m: TabularMdp, seed, reward_jitter: float = 0.1, kernel_jitter: float = 0.0) -> TabularMdp:
    """Copy of `m` with rewards (and optionally kernels) jittered."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    R = np.clip(m.R + rng.uniform(-reward_jitter, reward_jitter, size=m.R.shape), 0.0, 1.0)
    T = m.T
    if kernel_jitter > 0.0:
        raw = m.T + rng.uniform(0.0, kernel_jitter, size=m.T.shape)
        T = raw / raw.sum(axis=2, keepdims=True)
    return TabularMdp(T=T, R=R, gamma=m.gamma)


def contraction_ratios(gaps: list[float], floor: float = 1e-12) -> list[float]:
    """Successive sweep-gap ratios, skipping levels below numerical noise."""
    out = []
    for prev, cur in zip(gaps, gaps[1:]):
        if prev > floor and cur > floor:
            out.append(cur / prev)
    return out


def certification_suite(
    seed: int = 0,
    n_lipschitz: int = 60,
    n_return: int = 20,
    n_contraction: int = 20,
    gamma: float = 0.9,
    tol: float = 1e-6,
) -> list[CertReport]:
    """Fuzz battery behind the verify-theory command.

    Covers the Lipschitz bound on random MDP pairs, the solver contraction
    rate, the 1-state closed form |dR|/(1-gamma), the one-step Bellman bound
    on value-iteration sequences, and the interpolated-return bound on small
    random grid instances.
    """
    from .gap_mdp import Descriptor, GridSpec, ObjectDescriptor

    rng = np.random.default_rng(seed)
    reports: list[CertReport] = []

    worst = None
    for _ in range(n_lipschitz):
        m = random_mdp(6, 3, gamma, rng)
        mbar = perturbed_mdp(m, rng, reward_jitter=0.2, kernel_jitter=0.3)
        rep = certify_lipschitz(m, mbar, tol=tol)
        if worst is None or rep.max_violation > worst.max_violation:
            worst = rep
    reports.append(
        CertReport(
            name=f"lipschitz_fuzz[{n_lipschitz}]",
            passed=worst.passed,
            max_violation=worst.max_violation,
            tolerance=tol,
            witness=worst.witness,
            iterations=worst.iterations,
            residual=worst.residual,
        )
    )

    worst_ratio = 0.0
    for _ in range(n_contraction):
        m = random_mdp(5, 2, gamma, rng)
        mbar = perturbed_mdp(m, rng, reward_jitter=0.3)
        _, gaps = dissimilarity_sweep_gaps(m, mbar, tol=1e-9)
        ratios = contraction_ratios(gaps)
        if ratios:
            worst_ratio = max(worst_ratio, max(ratios))
    reports.append(
        CertReport(
            name=f"contraction_rate[{n_contraction}]",
            passed=worst_ratio <= gamma + 1e-9,
            max_violation=worst_ratio - gamma,
            tolerance=1e-9,
        )
    )

    one = TabularMdp(T=np.ones((1, 1, 1)), R=np.array([[1.0]]), gamma=0.9)
    zero = TabularMdp(T=np.ones((1, 1, 1)), R=np.array([[0.0]]), gamma=0.9)
    d = dissimilarity(one, zero, tol=1e-10)
    closed_err = abs(float(d[0, 0]) - 1.0 / (1.0 - 0.9))
    reports.append(
        CertReport(
            name="closed_form_1state",
            passed=closed_err <= 1e-10,
            max_violation=closed_err,
            tolerance=1e-10,
        )
    )

    worst_bellman = 0.0
    for _ in range(n_contraction):
        m = random_mdp(5, 3, gamma, rng)
        mbar = perturbed_mdp(m, rng, reward_jitter=0.2, kernel_jitter=0.2)
        delta = pseudo_metric(m, mbar, tol=1e-9)
        q_m = np.zeros_like(m.R)
        q_bar = np.zeros_like(m.R)
        for _ in range(30):
            q_m = bellman_backup(m, q_m)
            q_bar = bellman_backup(mbar, q_bar)
            worst_bellman = max(worst_bellman, float((np.abs(q_m - q_bar) - delta).max()))
    reports.append(
        CertReport(
            name=f"bellman_bound_vi[{n_contraction}]",
            passed=worst_bellman <= tol,
            max_violation=worst_bellman,
            tolerance=tol,
        )
    )

    if n_return > 0:
        grid = GridSpec.from_text(
            "\n".join(
                [
                    ".S...",
                    ".##.1",
                    ".....",
                    "2#.#.",
                    "...G.",
                    "step_penalty=-0.1",
                    "goal_reward=10",
                    "episode_limit=200",
                ]
            )
        )
        worst_return = None
        for _ in range(n_return):
            objs1, objs2 = [], []
            for _ in range(2):
                if rng.random() < 0.5:
                    kind, sub = "transition", "stochastic"
                else:
                    kind, sub = "reward", ("positive" if rng.random() < 0.5 else "negative")
                objs1.append(ObjectDescriptor(kind, sub, float(rng.uniform(0, 1))))
                objs2.append(ObjectDescriptor(kind, sub, float(rng.uniform(0, 1))))
            lam = float(rng.choice([0.25, 0.5, 0.75]))
            rep = certify_return_bound(
                grid, Descriptor(tuple(objs1)), Descriptor(tuple(objs2)), lam, tol=tol
            )
            if worst_return is None or rep.max_violation > worst_return.max_violation:
                worst_return = rep
        reports.append(
            CertReport(
                name=f"return_bound_fuzz[{n_return}]",
                passed=worst_return.passed,
                max_violation=worst_return.max_violation,
                tolerance=tol,
                details=worst_return.details,
            )
        )
    return reports

