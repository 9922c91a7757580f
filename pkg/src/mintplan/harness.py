"""Benchmarks, model persistence, reports, and flat-file configuration.

A benchmark sweeps object counts over one grid file (count n keeps the first
n uncertain cells), trains one model per seed, runs the configured methods on
paired episodes (same ground truth and environment randomness per method),
and aggregates success rate, reward, query counts, and the per-round mean
deviation trace.

Methods: mint_standard (full query budget), mint_limited (capped budget),
baseline_ignore (acts on the maximal-gap means, never queries), and
baseline_conservative (plans by value iteration as if every unknown object
were a certain obstacle with no bonus).
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ModelLoadError
from .elicitation import EpisodeConfig, EpisodeResult, Oracle, run_episode
from .gap_mdp import (
    Descriptor,
    GridSpec,
    KnowledgeGap,
    ObjectDescriptor,
    env_reset,
    env_step,
    sample_descriptor,
    tabular_state_index,
    to_tabular,
)
from .quantile_policy import Hyper, QuantileModel, train
from .theory import value_iteration

METHODS = ("mint_standard", "mint_limited", "baseline_ignore", "baseline_conservative")

_MODEL_MAGIC = b"MINTQM01\n"


# ---------------------------------------------------------------------------
# Model persistence
# ---------------------------------------------------------------------------


def _key_to_json(key) -> str:
    return json.dumps(key, separators=(",", ":"))


def _key_from_json(data):
    def tupled(x):
        return tuple(tupled(v) for v in x) if isinstance(x, list) else x

    return tupled(json.loads(data))


def save_model(model: QuantileModel, path) -> None:
    """Versioned binary dump; keys sorted so identical models give identical bytes."""
    buf = io.BytesIO()
    buf.write(_MODEL_MAGIC)
    header = {
        "version": 1,
        "n_actions": model.n_actions,
        "n_quantiles": model.n_quantiles,
        "hyper": {k: getattr(model.hyper, k) for k in model.hyper.__dataclass_fields__},
        "entries": len(list(model.keys())),
    }
    buf.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
    for key in sorted(model.keys()):
        buf.write(_key_to_json(key).encode("utf-8") + b"\n")
        for head in (0, 1):
            arr = np.ascontiguousarray(model.get_rows(head, key), dtype=np.float32)
            buf.write(struct.pack("<I", arr.nbytes))
            buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> QuantileModel:
    """Bit-exact inverse of save_model; raises ModelLoadError on any damage."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ModelLoadError(f"cannot read model file: {exc}") from exc
    buf = io.BytesIO(raw)
    if buf.read(len(_MODEL_MAGIC)) != _MODEL_MAGIC:
        raise ModelLoadError("not a mintplan model file (bad magic)")
    try:
        header = json.loads(buf.readline().decode("utf-8"))
        if header.get("version") != 1:
            raise ModelLoadError(f"unsupported model version {header.get('version')}")
        hyper = Hyper(**header["hyper"])
        model = QuantileModel(hyper, n_actions=header["n_actions"])
        row_shape = (header["n_actions"], header["n_quantiles"])
        expected = row_shape[0] * row_shape[1] * 4
        for _ in range(header["entries"]):
            key_line = buf.readline()
            if not key_line.endswith(b"\n"):
                raise ModelLoadError("truncated model file (key line)")
            key = _key_from_json(key_line.decode("utf-8"))
            for head in (0, 1):
                size_field = buf.read(4)
                if len(size_field) != 4:
                    raise ModelLoadError("truncated model file (entry header)")
                (nbytes,) = struct.unpack("<I", size_field)
                if nbytes != expected:
                    raise ModelLoadError("corrupt model file (entry size mismatch)")
                blob = buf.read(nbytes)
                if len(blob) != nbytes:
                    raise ModelLoadError("truncated model file (entry payload)")
                model.set_rows(
                    head, key, np.frombuffer(blob, dtype=np.float32).reshape(row_shape)
                )
    except ModelLoadError:
        raise
    except Exception as exc:
        raise ModelLoadError(f"corrupt model file: {exc}") from exc
    return model


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkConfig:
    grid: GridSpec
    objects: tuple[int, ...] = (0, 1, 3, 5)
    episodes: int = 100
    seeds: int = 5
    seed_base: int = 1000
    method: tuple[str, ...] = ("mint_standard",)
    k: int = 5
    limited_k: int = 2
    delta: float = 0.5
    lambda_g: float = 1.0
    t_d: int = 5
    hyper: Hyper = field(default_factory=Hyper)
    out_dir: str = "bench_out"
    save_models: bool = False

    def __post_init__(self):
        if self.episodes < 1 or self.seeds < 1:
            raise ConfigError("episodes and seeds must both be at least 1")
        for m in self.method:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {METHODS}")
        for n in self.objects:
            if not 0 <= n <= self.grid.n_objects:
                raise ConfigError(f"grid provides {self.grid.n_objects} objects, asked for {n}")


_CONFIG_KEYS = (
    "grid objects episodes seeds seed_base method k limited_k delta lambda_g t_d "
    "out_dir save_models train_episodes alpha alpha_mean epsilon n_quantiles "
    "batch_size train_every replay_capacity value_bits"
).split()


def parse_config(text: str, base_dir=".") -> BenchmarkConfig:
    """Flat key=value configuration; see _CONFIG_KEYS for the vocabulary."""
    values: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"bad config line (want key=value): {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = value.strip()
    if "grid" not in values:
        raise ConfigError("config requires grid=<map file>")
    grid = GridSpec.from_file(Path(base_dir) / values.pop("grid"))

    hyper_kwargs = {}
    for cfg_key, hyper_key, cast in (
        ("train_episodes", "episodes", int),
        ("alpha", "alpha", float),
        ("alpha_mean", "alpha_mean", float),
        ("epsilon", "epsilon", float),
        ("n_quantiles", "n_quantiles", int),
        ("batch_size", "batch_size", int),
        ("train_every", "train_every", int),
        ("replay_capacity", "replay_capacity", int),
        ("value_bits", "value_bits", int),
    ):
        if cfg_key in values:
            hyper_kwargs[hyper_key] = cast(values.pop(cfg_key))

    kwargs: dict = {"grid": grid}
    if "objects" in values:
        kwargs["objects"] = tuple(int(x) for x in values.pop("objects").split(",") if x != "")
    if "method" in values:
        kwargs["method"] = tuple(m.strip() for m in values.pop("method").split(","))
    for key, cast in (
        ("episodes", int),
        ("seeds", int),
        ("seed_base", int),
        ("k", int),
        ("limited_k", int),
        ("delta", float),
        ("lambda_g", float),
        ("t_d", int),
        ("out_dir", str),
    ):
        if key in values:
            kwargs[key] = cast(values.pop(key))
    if "save_models" in values:
        kwargs["save_models"] = values.pop("save_models").lower() in ("1", "true", "yes")
    if "t_d" in kwargs:
        hyper_kwargs.setdefault("t_d", kwargs["t_d"])
    kwargs["hyper"] = Hyper(**hyper_kwargs)
    return BenchmarkConfig(**kwargs)


def load_config(path) -> BenchmarkConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), base_dir=path.parent)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellStats:
    success_pct: float
    reward_mean: float
    reward_std: float
    queries_mean: float
    sigma_rounds: tuple[float, ...]
    episodes: int


@dataclass
class MetricsReport:
    cells: dict[tuple[str, int], CellStats] = field(default_factory=dict)

    def to_records(self) -> list[dict]:
        out = []
        for (method, objects) in sorted(self.cells):
            cell = self.cells[(method, objects)]
            out.append(
                {
                    "method": method,
                    "objects": objects,
                    "success_pct": cell.success_pct,
                    "reward_mean": cell.reward_mean,
                    "reward_std": cell.reward_std,
                    "queries_mean": cell.queries_mean,
                    "sigma_rounds": list(cell.sigma_rounds),
                    "episodes": cell.episodes,
                }
            )
        return out

    def to_table_text(self) -> str:
        objects = sorted({objects for _, objects in self.cells})
        methods = sorted({method for method, _ in self.cells})
        header = ["Method"]
        for n in objects:
            header += [f"{n} obj Success%", f"{n} obj Avg.Reward"]
        rows = [header]
        for method in methods:
            row = [method]
            for n in objects:
                cell = self.cells.get((method, n))
                if cell is None:
                    row += ["-", "-"]
                else:
                    row += [
                        f"{cell.success_pct:.1f}",
                        f"{cell.reward_mean:.2f}+-{cell.reward_std:.2f}",
                    ]
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = []
        for i, row in enumerate(rows):
            lines.append("  ".join(cell.ljust(widths[j]) for j, cell in enumerate(row)).rstrip())
            if i == 0:
                lines.append("-" * len(lines[0]))
        return "\n".join(lines) + "\n"


def aggregate_results(results: list[EpisodeResult], n_objects: int) -> CellStats:
    rewards = np.array([r.total_reward for r in results], dtype=float)
    success = np.array([r.success for r in results], dtype=float)
    if n_objects > 0:
        queries = np.array(
            [sum(r.queries_per_object) / n_objects for r in results], dtype=float
        )
    else:
        queries = np.zeros(len(results))
    max_rounds = max((len(r.sigma_trace) for r in results), default=0)
    sigma_rounds = []
    for i in range(max_rounds):
        vals = [r.sigma_trace[i] for r in results if len(r.sigma_trace) > i]
        sigma_rounds.append(float(np.mean(vals)))
    return CellStats(
        success_pct=float(success.mean() * 100.0) if len(results) else 0.0,
        reward_mean=float(rewards.mean()) if len(results) else 0.0,
        reward_std=float(rewards.std()) if len(results) else 0.0,
        queries_mean=float(queries.mean()) if len(results) else 0.0,
        sigma_rounds=tuple(sigma_rounds),
        episodes=len(results),
    )


def emit_report(report: MetricsReport, fmt: str, path) -> Path:
    """Write the report as a text table or one machine-readable record per cell."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "table-text":
        path.write_text(report.to_table_text(), encoding="utf-8")
    elif fmt == "machine-readable":
        lines = [json.dumps(rec, sort_keys=True) for rec in report.to_records()]
        path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    return path


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def conservative_descriptor(n_objects: int) -> Descriptor:
    """Every unknown treated as a certain obstacle with no bonus."""
    return Descriptor(
        tuple(ObjectDescriptor("transition", "deterministic", 1.0) for _ in range(n_objects))
    )


def run_conservative_episode(
    spec: GridSpec, truth: Descriptor, seed, gamma: float = 0.99
) -> EpisodeResult:
    """Greedy rollout of the value-iteration plan on the obstacle-assumption MDP."""
    cons = conservative_descriptor(spec.n_objects)
    mdp = to_tabular(spec, cons, gamma=gamma)
    q, _ = value_iteration(mdp, tol=1e-8)
    rng = np.random.default_rng(seed)
    state = env_reset(spec)
    total = 0.0
    done = False
    while not done:
        s = tabular_state_index(spec, cons, state)
        action = int(np.argmax(q[s]))
        state, reward, done = env_step(state, action, spec, truth, rng)
        total += reward
    return EpisodeResult(
        total_reward=total,
        success=state.agent_cell == spec.goal,
        steps=state.steps_taken,
        queries_per_object=(0,) * spec.n_objects,
        dialogue=(),
        sigma_trace=(),
    )


# ---------------------------------------------------------------------------
# Benchmark driver
# ---------------------------------------------------------------------------


def _episode_config(config: BenchmarkConfig, method: str) -> EpisodeConfig:
    if method == "mint_standard":
        return EpisodeConfig(config.delta, config.lambda_g, config.t_d, config.k)
    if method == "mint_limited":
        return EpisodeConfig(config.delta, config.lambda_g, config.t_d, config.limited_k)
    if method == "baseline_ignore":
        return EpisodeConfig(config.delta, config.lambda_g, config.t_d, config.k, query=False)
    raise ConfigError(f"unknown method {method!r}")


def run_benchmark(config: BenchmarkConfig, log=None) -> MetricsReport:
    """Train per (object count, seed), run paired episodes per method, and write
    raw logs plus both report formats under out_dir."""
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results: dict[tuple[str, int], list[EpisodeResult]] = {
        (m, n): [] for m in config.method for n in config.objects
    }
    raw_files = {}

    for n in sorted(config.objects):
        spec_n = config.grid.with_objects(n)
        family = KnowledgeGap.maximal(n)
        needs_model = any(m != "baseline_conservative" for m in config.method)
        for seed_i in range(config.seeds):
            seed = config.seed_base + seed_i
            model = None
            if needs_model:
                model_path = out_dir / f"model_obj{n}_seed{seed}.qm"
                if config.save_models and model_path.exists():
                    model = load_model(model_path)
                else:
                    model, _ = train(spec_n, family, config.hyper, seed)
                    if config.save_models:
                        save_model(model, model_path)
                if log:
                    log(f"trained objects={n} seed={seed} entries={model.table_sizes()}")
            for ep in range(config.episodes):
                truth = sample_descriptor(family, np.random.default_rng([seed, ep, 17]))
                for method in config.method:
                    ep_seed = np.random.default_rng([seed, ep, 29])
                    if method == "baseline_conservative":
                        result = run_conservative_episode(
                            spec_n, truth, ep_seed, gamma=config.hyper.gamma
                        )
                    else:
                        result = run_episode(
                            spec_n,
                            model,
                            Oracle(truth),
                            _episode_config(config, method),
                            ep_seed,
                        )
                    results[(method, n)].append(result)
                    key = (method, n)
                    if key not in raw_files:
                        raw_files[key] = open(
                            out_dir / f"raw_{method}_obj{n}.jsonl", "w", encoding="utf-8"
                        )
                    record = {"seed": seed, "episode": ep, **result.to_record()}
                    raw_files[key].write(json.dumps(record, sort_keys=True) + "\n")

    for fh in raw_files.values():
        fh.close()
    report = MetricsReport()
    for (method, n), cell_results in results.items():
        report.cells[(method, n)] = aggregate_results(cell_results, n)
    emit_report(report, "table-text", out_dir / "report.txt")
    emit_report(report, "machine-readable", out_dir / "report.jsonl")
    return report


def recompute_from_raw(out_dir, method: str, objects: int) -> CellStats:
    """Re-aggregate a cell from its raw episode log (report consistency check)."""
    path = Path(out_dir) / f"raw_{method}_obj{objects}.jsonl"
    results = [
        EpisodeResult.from_record(json.loads(line))
        for line in path.read_text(encoding="utf-8").splitlines()
        if line
    ]
    return aggregate_results(results, objects)
