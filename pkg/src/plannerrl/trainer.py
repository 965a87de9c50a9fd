"""GRPO training loop: sample a batch, roll out G trajectories per query, score,
shape the advantages, take a clipped-surrogate gradient step, log everything.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .agent import AgentLimits, greedy_rollout, rollout_rng, sample_rollout
from .grammar import FeatureSpace, GrammarConfig, instruction_prior
from .metrics import StepMetrics, compute_step_metrics, metrics_csv
from .policy import (
    Adam,
    DecodeTable,
    NumericalError,
    PolicyParams,
    apply_update,
    collect_tokens,
    init_params,
    save_checkpoint,
    surrogate_from_tokens,
)
from .reward import get_judge, score
from .shaping import ShapedAdvantages, ShapingConfig, shape
from .trajectory import Rollout, RolloutGroup, serialize_rollout, tool_call_count
from .world import KnowledgeWorld, Query, load_queries, load_world, sample_queries, save_queries, save_world

CONFIG_VERSION = 1
MANIFEST_VERSION = 1
_SHAPING_KEYS = tuple(f.name for f in fields(ShapingConfig))


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    """Raised when an update would leave the parameters non-finite.

    ``params`` holds the last parameters that passed the finiteness check.
    """

    def __init__(self, message: str, step: int, params: PolicyParams, metrics: list[StepMetrics]):
        super().__init__(f"step {step}: {message}")
        self.step = step
        self.params = params
        self.metrics = metrics


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    batch_queries: int = 64
    rollouts_per_query: int = 8
    steps: int = 48
    learning_rate: float = 18.0
    clip_eps: float = 0.2
    kl_beta: float = 0.0
    epochs: int = 1
    optimizer: str = "sgd"
    max_grad_norm: float | None = None
    init_scale: float = 0.0
    prior_strength: float = 3.0
    think_end_bias: float = 1.0
    sample_with_replacement: bool = False
    max_steps: int = 8
    max_segment_tokens: int = 16
    search_k: int = 10
    max_hops: int = 3
    judge: str = "normalized_exact_match"
    checkpoint_every: int = 0
    dump_shaping: bool = False
    n_train_queries: int = 512
    n_heldout_queries: int = 256
    query_seed: int = 1
    multi_hop_ratio: float = 0.75
    shaping: ShapingConfig = field(default_factory=ShapingConfig)

    def __post_init__(self) -> None:
        if self.batch_queries < 1:
            raise ConfigError("batch_queries must be >= 1")
        if self.rollouts_per_query < 2:
            raise ConfigError("rollouts_per_query must be >= 2")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0 < self.clip_eps < 1:
            raise ConfigError("clip_eps must be in (0, 1)")
        if self.kl_beta < 0:
            raise ConfigError("kl_beta must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    @property
    def limits(self) -> AgentLimits:
        return AgentLimits(self.max_steps, self.max_segment_tokens, self.search_k)

    @property
    def grammar(self) -> GrammarConfig:
        return GrammarConfig(max_hops=self.max_hops, max_segment_tokens=self.max_segment_tokens)

    def with_mode(self, mode: str) -> "TrainConfig":
        kw = {k: getattr(self.shaping, k) for k in _SHAPING_KEYS if not k.startswith("enable_")}
        return replace(self, shaping=ShapingConfig.for_mode(mode, **kw))

    # Flat key/value form: shaping fields sit next to the trainer fields.
    def to_flat(self) -> dict:
        out = {"version": CONFIG_VERSION}
        for f in fields(self):
            if f.name != "shaping":
                out[f.name] = getattr(self, f.name)
        out.update(asdict(self.shaping))
        return out

    @classmethod
    def from_flat(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        version = data.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r}")
        names = {f.name for f in fields(cls)} - {"shaping"}
        unknown = set(data) - names - set(_SHAPING_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        shaping = ShapingConfig(**{k: data.pop(k) for k in _SHAPING_KEYS if k in data})
        return cls(shaping=shaping, **data)

    def dumps(self) -> str:
        return json.dumps(self.to_flat(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except ValueError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_flat(data)


def initial_params(config: TrainConfig, space: FeatureSpace | None = None) -> PolicyParams:
    space = space or FeatureSpace(config.grammar)
    bias = instruction_prior(space, config.prior_strength, config.think_end_bias)
    return init_params(config.seed, config.init_scale, space, bias)


# -- batching ---------------------------------------------------------------


class BatchSampler:
    """Queries without replacement within an epoch, reshuffled each epoch from the seed."""

    def __init__(self, n: int, batch: int, seed: int, with_replacement: bool = False):
        if n == 0:
            raise ConfigError("no training queries")
        if n < batch and not with_replacement:
            raise ConfigError(f"{n} queries is fewer than batch size {batch}; enable sample_with_replacement")
        self.n, self.batch, self.seed = n, batch, seed
        self.with_replacement = with_replacement
        self.epoch = 0
        self.order: list[int] = []
        self.pos = 0

    def next(self, step: int) -> list[int]:
        if self.with_replacement:
            rng = np.random.default_rng([self.seed, 0x5A, step])
            return rng.integers(0, self.n, size=self.batch).tolist()
        out: list[int] = []
        while len(out) < self.batch:
            if self.pos >= len(self.order):
                rng = np.random.default_rng([self.seed, 0xE0, self.epoch])
                self.order = rng.permutation(self.n).tolist()
                self.epoch += 1
                self.pos = 0
            take = min(self.batch - len(out), len(self.order) - self.pos)
            out.extend(self.order[self.pos : self.pos + take])
            self.pos += take
        return out


# -- run output -------------------------------------------------------------


class RunWriter:
    """Single owner of a run directory: metrics CSV, per-step logs, checkpoints."""

    def __init__(self, out_dir, checkpoint_every: int = 0):
        self.root = Path(out_dir)
        self.traj_dir = self.root / "trajectories"
        self.ckpt_dir = self.root / "checkpoints"
        self.traj_dir.mkdir(parents=True, exist_ok=True)
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        self.checkpoint_every = checkpoint_every
        self.rows: list[StepMetrics] = []

    @property
    def metrics_path(self) -> Path:
        return self.root / "metrics.csv"

    def step(self, step: int, groups: Sequence[RolloutGroup], row: StepMetrics) -> None:
        with open(self.traj_dir / f"step_{step:04d}.jsonl", "w", encoding="utf-8") as fh:
            for g in groups:
                for r in g:
                    fh.write(serialize_rollout(r) + "\n")
        self.rows.append(row)
        self.metrics_path.write_text(metrics_csv(self.rows), encoding="utf-8")

    def shaping(self, step: int, groups: Sequence[RolloutGroup], shaped: Sequence[ShapedAdvantages]) -> None:
        """Per-rollout diagnostics: base advantage, SAU flag and mean psi."""
        out = self.root / "shaping"
        out.mkdir(exist_ok=True)
        with open(out / f"step_{step:04d}.jsonl", "w", encoding="utf-8") as fh:
            for g, sh in zip(groups, shaped):
                for i, (base, psi) in enumerate(zip(sh.base, sh.psi)):
                    rec = {
                        "query_id": g.query_id,
                        "rollout": i,
                        "base_advantage": float(base[0]) if len(base) else 0.0,
                        "sau_selected": sh.sau_selected[i],
                        "mean_psi": float(psi.mean()) if len(psi) else 0.0,
                    }
                    fh.write(json.dumps(rec) + "\n")

    def checkpoint(self, step: int, params: PolicyParams, name: str | None = None) -> Path:
        path = self.ckpt_dir / (name or f"step_{step:04d}.npz")
        save_checkpoint(path, params, step)
        return path

    def maybe_checkpoint(self, step: int, params: PolicyParams) -> None:
        if self.checkpoint_every and step % self.checkpoint_every == 0:
            self.checkpoint(step, params)


# -- training ---------------------------------------------------------------


def _score_rollout(rollout: Rollout, query: Query, judge) -> Rollout:
    verdict = score(rollout, query, judge)
    last = replace(rollout.steps[-1], verdict=verdict.as_dict())
    return replace(rollout, steps=rollout.steps[:-1] + (last,), reward=verdict.total)


def collect_group(
    table: DecodeTable,
    world: KnowledgeWorld,
    query: Query,
    config: TrainConfig,
    space: FeatureSpace,
    step: int,
    slot: int,
    judge,
) -> RolloutGroup:
    G = config.rollouts_per_query
    rollouts = []
    for i in range(G):
        rng = rollout_rng(config.seed, step, query.query_id, slot * G + i)
        r = sample_rollout(table, world, query, rng, config.limits, space)
        rollouts.append(_score_rollout(r, query, judge))
    return RolloutGroup(query.query_id, tuple(rollouts))


StepCallback = Callable[[StepMetrics, PolicyParams], None]


def train(
    config: TrainConfig,
    world: KnowledgeWorld,
    queries: Sequence[Query],
    out_dir=None,
    callback: StepCallback | None = None,
    params: PolicyParams | None = None,
) -> tuple[PolicyParams, list[StepMetrics]]:
    """Run ``config.steps`` optimization steps; step indices in the metrics start at 1."""
    space = FeatureSpace(config.grammar)
    params = params if params is not None else initial_params(config, space)
    ref_params = params
    metrics: list[StepMetrics] = []
    if config.steps == 0:
        return params, metrics
    sampler = BatchSampler(len(queries), config.batch_queries, config.seed, config.sample_with_replacement)
    writer = RunWriter(out_dir, config.checkpoint_every) if out_dir is not None else None
    judge = get_judge(config.judge)
    adam = Adam(config.learning_rate) if config.optimizer == "adam" else None

    for step in range(1, config.steps + 1):
        table = DecodeTable(params)
        batch = [queries[i] for i in sampler.next(step)]
        groups = [collect_group(table, world, q, config, space, step, slot, judge) for slot, q in enumerate(batch)]
        shaped = [
            shape(g, [r.reward for r in g], [r.per_token.entropy for r in g], config.shaping) for g in groups
        ]
        row = compute_step_metrics(step, groups, shaped)
        metrics.append(row)
        if writer:
            writer.step(step, groups, row)
            if config.dump_shaping:
                writer.shaping(step, groups, shaped)

        tokens = collect_tokens(space, groups, shaped)
        new = params
        for _ in range(config.epochs):
            sg = surrogate_from_tokens(new, tokens, config.clip_eps, config.kl_beta, ref_params)
            try:
                if not np.isfinite(sg.objective_value):
                    raise NumericalError(f"non-finite objective {sg.objective_value}")
                if adam is not None:
                    new = adam.step(new, sg.grads)
                else:
                    new = apply_update(new, sg.grads, config.learning_rate, config.max_grad_norm)
                if not np.all(np.isfinite(new.logits)):
                    raise NumericalError("update produced non-finite logits")
            except NumericalError as exc:
                if writer:
                    writer.checkpoint(step - 1, params, "last_good.npz")
                raise TrainingAborted(str(exc), step, params, metrics) from None
        params = new
        if writer:
            writer.maybe_checkpoint(step, params)
        if callback:
            callback(row, params)

    if writer:
        writer.checkpoint(config.steps, params, "final.npz")
    return params, metrics


# -- evaluation -------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    n_queries: int
    accuracy: float
    mean_tool_calls: float
    mean_reward: float
    format_error_rate: float
    accuracy_by_hops: dict[int, float]

    def as_dict(self) -> dict:
        d = asdict(self)
        d["accuracy_by_hops"] = {str(k): v for k, v in self.accuracy_by_hops.items()}
        return d


def evaluate(
    params: PolicyParams,
    world: KnowledgeWorld,
    queries: Sequence[Query],
    greedy: bool = True,
    limits: AgentLimits = AgentLimits(),
    seed: int = 0,
    judge_name: str = "normalized_exact_match",
    space: FeatureSpace | None = None,
) -> EvalReport:
    """Accuracy is the share of rollouts with total reward 1.0."""
    if not queries:
        raise ValueError("evaluation needs at least one query")
    space = space or FeatureSpace(GrammarConfig(max_hops=_max_hops_for(params, space)))
    table = DecodeTable(params)
    judge = get_judge(judge_name)
    rewards, calls = [], []
    by_hops: dict[int, list[float]] = {}
    for i, q in enumerate(queries):
        if greedy:
            r = greedy_rollout(table, world, q, limits, space)
        else:
            r = sample_rollout(table, world, q, rollout_rng(seed, 0, q.query_id, i), limits, space)
        total = score(r, q, judge).total
        rewards.append(total)
        calls.append(tool_call_count(r))
        by_hops.setdefault(q.hops, []).append(total)
    n = len(queries)
    return EvalReport(
        n_queries=n,
        accuracy=sum(1 for x in rewards if x == 1.0) / n,
        mean_tool_calls=sum(calls) / n,
        mean_reward=sum(rewards) / n,
        format_error_rate=sum(1 for x in rewards if x == 0.0) / n,
        accuracy_by_hops={h: sum(1 for x in v if x == 1.0) / len(v) for h, v in sorted(by_hops.items())},
    )


def _max_hops_for(params: PolicyParams, space: FeatureSpace | None) -> int:
    if space is not None:
        return space.cfg.max_hops
    for h in range(1, 6):
        if FeatureSpace(GrammarConfig(max_hops=h)).signature == params.signature:
            return h
    return GrammarConfig().max_hops


# -- ablations --------------------------------------------------------------

MODES = ("vanilla", "eas", "sau", "both")


@dataclass
class AblationResult:
    mode: str
    params: PolicyParams
    metrics: list[StepMetrics]
    heldout: EvalReport | None = None


def compare_ablations(
    config: TrainConfig,
    world: KnowledgeWorld,
    queries: Sequence[Query],
    heldout: Sequence[Query] | None = None,
    modes: Sequence[str] = MODES,
    out_dir=None,
) -> dict[str, AblationResult]:
    """Train one run per shaping mode from the same seed, world and queries."""
    results = {}
    for mode in modes:
        cfg = config.with_mode(mode)
        run_dir = Path(out_dir) / mode if out_dir is not None else None
        params, rows = train(cfg, world, queries, run_dir)
        report = evaluate(params, world, heldout, True, cfg.limits, cfg.seed, cfg.judge) if heldout else None
        results[mode] = AblationResult(mode, params, rows, report)
    return results


# -- experiments with manifests ----------------------------------------------


def split_queries(world: KnowledgeWorld, config: TrainConfig) -> tuple[list[Query], list[Query]]:
    total = config.n_train_queries + config.n_heldout_queries
    qs = sample_queries(world, total, config.query_seed, config.multi_hop_ratio)
    return qs[: config.n_train_queries], qs[config.n_train_queries :]


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


@dataclass
class RunManifest:
    config: dict
    world_hash: str
    code_version: str
    started: str
    finished: str | None
    paths: dict[str, str]
    status: str = "running"
    version: int = MANIFEST_VERSION

    def dumps(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if data.get("version") != MANIFEST_VERSION:
            raise ConfigError(f"unsupported manifest version {data.get('version')!r}")
        return cls(**data)


def run_experiment(
    config: TrainConfig,
    world: KnowledgeWorld,
    out_dir,
    train_queries: Sequence[Query] | None = None,
    heldout_queries: Sequence[Query] | None = None,
) -> tuple[PolicyParams, list[StepMetrics], RunManifest]:
    """Write world, queries, config and manifest into ``out_dir``, then train there."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    if train_queries is None:
        train_queries, heldout_queries = split_queries(world, config)
    paths = {
        "world": "world.json",
        "config": "config.json",
        "train_queries": "train_queries.jsonl",
        "heldout_queries": "heldout_queries.jsonl",
        "metrics": "metrics.csv",
        "trajectories": "trajectories",
        "checkpoints": "checkpoints",
    }
    save_world(world, root / paths["world"])
    (root / paths["config"]).write_text(config.dumps(), encoding="utf-8")
    save_queries(train_queries, root / paths["train_queries"])
    save_queries(heldout_queries or [], root / paths["heldout_queries"])
    manifest = RunManifest(config.to_flat(), world.digest(), __version__, _now(), None, paths)
    mpath = root / "manifest.json"
    mpath.write_text(manifest.dumps(), encoding="utf-8")
    try:
        params, rows = train(config, world, train_queries, root)
    except TrainingAborted:
        manifest.status, manifest.finished = "aborted", _now()
        mpath.write_text(manifest.dumps(), encoding="utf-8")
        raise
    manifest.status, manifest.finished = "finished", _now()
    mpath.write_text(manifest.dumps(), encoding="utf-8")
    return params, rows, manifest


def replay(manifest_path, out_dir) -> tuple[PolicyParams, list[StepMetrics], RunManifest]:
    """Re-run the experiment a manifest describes into a fresh directory."""
    mpath = Path(manifest_path)
    manifest = RunManifest.load(mpath)
    base = mpath.parent
    world = load_world(base / manifest.paths["world"])
    if world.digest() != manifest.world_hash:
        raise ConfigError("world file does not match the manifest hash")
    config = TrainConfig.from_flat(manifest.config)
    train_q = load_queries(base / manifest.paths["train_queries"])
    held_q = load_queries(base / manifest.paths["heldout_queries"])
    return run_experiment(config, world, out_dir, train_q, held_q)


def default_output_root() -> Path:
    return Path(os.environ.get("PLANNERRL_OUTPUT_ROOT", "runs"))
