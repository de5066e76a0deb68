"""Group-relative policy optimisation with an experience buffer for failed queries.

Each step samples `n` episodes per query, scores them with the verifier,
drops groups whose reward spread is at most `eta`, and takes one gradient
step on a clipped-ratio surrogate with an exact KL penalty to a reference
snapshot. Queries whose whole group failed go into a FIFO buffer that feeds
part of the batch every `gamma` steps.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import random
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .domain import Query
from .policy import (
    Bucket, PolicyParams, SoftmaxAgent, add_into, kl_divergence, policy_entropy, trajectory_log_prob,
    trajectory_log_prob_grad,
)
from .protocol import Agent, EpisodeLimits, Environment, SegmentKind, Trajectory, run_episode
from .sandbox import LiveModeConfig, Sandbox
from .verifier import RewardRecord, Verifier
from .world import ConfigError

logger = logging.getLogger(__name__)


@dataclass
class TrainerConfig:
    n: int = 8
    epsilon: float = 0.2
    beta: float = 0.01
    eta: float = 0.1
    gamma: int | None = 10
    replay_fraction: float = 0.5
    learning_rate: float = 1.0
    batch_size: int = 8
    total_steps: int = 300
    ref_refresh: int = 50
    strict_ratio: bool = False
    seed: int = 0
    max_turns: int = 8
    max_total_segments: int = 64
    buffer_capacity: int | None = None
    eval_every: int = 0
    workers: int = 1
    live_failure_rate: float = 0.0
    live_drift_rate: float = 0.0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.n < 2:
            raise ConfigError("group size n must be at least 2")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError("epsilon must lie in (0, 1)")
        if self.eta < 0 or self.beta < 0:
            raise ConfigError("eta and beta must be non-negative")
        if self.gamma is not None and self.gamma < 1:
            raise ConfigError("gamma must be >= 1 (or None to disable replay)")
        if not 0.0 <= self.replay_fraction <= 1.0:
            raise ConfigError("replay_fraction must lie in [0, 1]")
        if self.batch_size < 1 or self.total_steps < 0 or self.ref_refresh < 0:
            raise ConfigError("batch_size must be positive, total_steps and ref_refresh non-negative")
        if self.buffer_capacity is not None and self.buffer_capacity < 1:
            raise ConfigError("buffer_capacity must be positive")

    @property
    def limits(self) -> EpisodeLimits:
        return EpisodeLimits(self.max_turns, self.max_total_segments)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown trainer settings: {', '.join(sorted(unknown))}")
        return cls(**data)


# ---------------------------------------------------------------------------
# Group statistics
# ---------------------------------------------------------------------------


def keep_filter(rewards: Sequence[float], eta: float) -> bool:
    """True if the group is kept: population std of rewards exceeds eta."""
    return float(np.std(np.asarray(rewards, dtype=np.float64))) > eta


def compute_advantages(rewards: Sequence[float]) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    std = float(np.std(r))
    if std == 0.0:
        raise ValueError("advantages are undefined for a zero-variance group; filter it first")
    return (r - r.mean()) / std


@dataclass
class GroupRollout:
    query_id: str
    trajectories: list[Trajectory]
    rewards: list[int]
    advantages: np.ndarray | None
    source: str = "dataset"
    records: list[RewardRecord] = field(default_factory=list)

    @property
    def kept(self) -> bool:
        return self.advantages is not None


def rollout_group(agent: Agent, sandbox: Sandbox, query: Query, n: int, limits: EpisodeLimits,
                  verifier: Verifier, seed: object = 0, source: str = "dataset", eta: float = 0.1,
                  live: LiveModeConfig | None = None, pool: ThreadPoolExecutor | None = None) -> GroupRollout:
    """n independent episodes, each with its own rng stream, scored by the verifier."""
    if n < 2:
        raise ConfigError("a group needs at least two rollouts")

    def one(i: int) -> tuple[Trajectory, RewardRecord]:
        rng = random.Random(f"rollout:{seed}:{i}")
        stream = live.stream(f"{seed}:{i}") if live is not None and live.enabled else None
        trajectory = run_episode(agent, Environment(sandbox, stream), query, limits, rng)
        return trajectory, verifier.joint_reward(query, trajectory)

    results = list(pool.map(one, range(n))) if pool is not None else [one(i) for i in range(n)]
    trajectories = [t for t, _ in results]
    records = [rec for _, rec in results]
    rewards = [rec.r for rec in records]
    advantages = compute_advantages(rewards) if keep_filter(rewards, eta) else None
    return GroupRollout(query.id, trajectories, rewards, advantages, source, records)


# ---------------------------------------------------------------------------
# Surrogate objective
# ---------------------------------------------------------------------------


@dataclass
class SurrogateResult:
    loss: float
    grad: dict[Bucket, np.ndarray]
    objective: float
    kl: float
    clipped: int


def visited_buckets(trajectories: Iterable[Trajectory]) -> list[tuple[Bucket, tuple[bool, ...]]]:
    seen: dict[Bucket, tuple[bool, ...]] = {}
    for t in trajectories:
        for r in t.decisions:
            if not r.masked and any(r.valid):
                seen.setdefault((r.head, r.features), r.valid)
    return sorted(seen.items())


def surrogate_loss(params: PolicyParams, old: PolicyParams, ref: PolicyParams,
                   groups: Sequence[tuple[Sequence[Trajectory], Sequence[float]]],
                   epsilon: float, beta: float) -> SurrogateResult:
    """Negative clipped-ratio objective minus KL penalty, with its exact gradient.

    For each group the per-trajectory term min(rho*A, clip(rho, 1-eps, 1+eps)*A)
    is averaged; group means are averaged; beta * KL(params || ref) summed over
    the buckets visited by unmasked decisions is subtracted. The ratio rho is
    exp(log pi_params - log pi_old) over unmasked decisions.
    """
    objective = 0.0
    grad_obj: dict[Bucket, np.ndarray] = {}
    clipped = 0
    all_trajectories: list[Trajectory] = []
    if groups:
        for trajectories, advantages in groups:
            n = len(trajectories)
            for t, a in zip(trajectories, advantages):
                all_trajectories.append(t)
                try:
                    ratio = math.exp(trajectory_log_prob(params, t) - trajectory_log_prob(old, t))
                except OverflowError as exc:
                    raise FloatingPointError("importance ratio overflowed") from exc
                lo, hi = 1.0 - epsilon, 1.0 + epsilon
                unclipped = ratio * a
                bounded = min(max(ratio, lo), hi) * a
                scale = 1.0 / (n * len(groups))
                if unclipped <= bounded:
                    objective += unclipped * scale
                    trajectory_log_prob_grad(params, t, a * ratio * scale, grad_obj)
                else:
                    objective += bounded * scale
                    clipped += 1
    kl, kl_grad = kl_divergence(params, ref, visited_buckets(all_trajectories))
    objective -= beta * kl
    grad = {k: -v for k, v in grad_obj.items()}
    for key, g in kl_grad.items():
        add_into(grad, key, g, beta)
    loss = -objective
    if not math.isfinite(loss) or any(not np.all(np.isfinite(g)) for g in grad.values()):
        raise FloatingPointError("non-finite surrogate loss or gradient")
    return SurrogateResult(loss, grad, objective, kl, clipped)


def grad_norm(grad: dict[Bucket, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(g @ g) for g in grad.values())))


# ---------------------------------------------------------------------------
# Experience buffer
# ---------------------------------------------------------------------------


class ExperienceBuffer:
    """Ordered set of failed query ids, oldest first."""

    def __init__(self, capacity: int | None = None) -> None:
        self.capacity = capacity
        self.entries: OrderedDict[str, int] = OrderedDict()

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, query_id: str) -> bool:
        return query_id in self.entries

    def ids(self) -> list[str]:
        return list(self.entries)

    def enqueue(self, query_id: str, step: int) -> bool:
        if query_id in self.entries:
            return False
        self.entries[query_id] = step
        if self.capacity is not None and len(self.entries) > self.capacity:
            self.entries.popitem(last=False)
        return True

    def remove(self, query_id: str) -> bool:
        return self.entries.pop(query_id, None) is not None

    def rotate(self, query_id: str) -> None:
        """Send a still-unsolved replayed query to the back of the queue."""
        if query_id in self.entries:
            self.entries.move_to_end(query_id)

    def head(self, k: int) -> list[str]:
        return list(self.entries)[:max(k, 0)]

    def to_dict(self) -> dict:
        return {"capacity": self.capacity, "entries": [[q, s] for q, s in self.entries.items()]}

    @classmethod
    def from_dict(cls, data: dict) -> "ExperienceBuffer":
        buf = cls(data.get("capacity"))
        for q, s in data["entries"]:
            buf.entries[q] = int(s)
        return buf


def buffer_update(buffer: ExperienceBuffer, group: GroupRollout, step: int) -> ExperienceBuffer:
    solved = any(r == 1 for r in group.rewards)
    if group.source == "buffer":
        if solved:
            buffer.remove(group.query_id)
        else:
            buffer.rotate(group.query_id)
    elif not solved:
        buffer.enqueue(group.query_id, step)
    return buffer


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


METRIC_FIELDS = (
    "step", "mean_reward", "entropy", "grad_norm", "mean_response_length", "mean_turns", "tool_call_accuracy",
    "verifier_success_rate", "keep_rate", "loss_mask_ratio", "buffer_size", "replayed", "kl", "loss",
    "clip_fraction", "val_pass_rate",
)
FRACTION_FIELDS = ("tool_call_accuracy", "verifier_success_rate", "keep_rate", "loss_mask_ratio", "clip_fraction")


@dataclass
class StepMetrics:
    step: int
    mean_reward: float
    entropy: float
    grad_norm: float
    mean_response_length: float
    mean_turns: float
    tool_call_accuracy: float
    verifier_success_rate: float
    keep_rate: float
    loss_mask_ratio: float
    buffer_size: int
    replayed: int
    kl: float
    loss: float
    clip_fraction: float
    val_pass_rate: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _tool_success(trajectory: Trajectory) -> tuple[int, int]:
    ok = total = 0
    for seg in trajectory.segments:
        if seg.kind is SegmentKind.TOOL_RESPONSE:
            total += 1
            ok += '"status":"ok"' in seg.body[:80]
    return ok, total


def step_metrics(step: int, groups: Sequence[GroupRollout], params: PolicyParams, surrogate: SurrogateResult | None,
                 grad: dict[Bucket, np.ndarray], buffer: ExperienceBuffer, replayed: int) -> StepMetrics:
    trajectories = [t for g in groups for t in g.trajectories]
    records = [rec for g in groups for rec in g.records]
    decisions = [d for t in trajectories for d in t.decisions]
    ok = total = 0
    for t in trajectories:
        a, b = _tool_success(t)
        ok += a
        total += b
    n_traj = max(len(trajectories), 1)
    kept = [g for g in groups if g.kept]
    n_kept_traj = sum(len(g.trajectories) for g in kept)
    return StepMetrics(
        step=step,
        mean_reward=float(np.mean([r for g in groups for r in g.rewards])) if groups else 0.0,
        entropy=policy_entropy(params, [d for d in decisions if not d.masked]),
        grad_norm=grad_norm(grad),
        mean_response_length=sum(len(t.segments) for t in trajectories) / n_traj,
        mean_turns=sum(t.tool_calls for t in trajectories) / n_traj,
        tool_call_accuracy=ok / total if total else 1.0,
        verifier_success_rate=1.0 - sum(rec.verifier_failed for rec in records) / max(len(records), 1),
        keep_rate=len(kept) / len(groups) if groups else 0.0,
        loss_mask_ratio=sum(d.masked for d in decisions) / len(decisions) if decisions else 0.0,
        buffer_size=len(buffer),
        replayed=replayed,
        kl=surrogate.kl if surrogate else 0.0,
        loss=surrogate.loss if surrogate else 0.0,
        clip_fraction=surrogate.clipped / n_kept_traj if surrogate and n_kept_traj else 0.0,
    )


@dataclass
class TrainState:
    step: int
    params: PolicyParams
    ref: PolicyParams
    buffer: ExperienceBuffer
    cursor: int = 0

    def to_dict(self, config: TrainerConfig) -> dict:
        return {"format": "deeptravel-checkpoint", "format_version": 1, "step": self.step,
                "params": self.params.to_dict(), "ref": self.ref.to_dict(), "buffer": self.buffer.to_dict(),
                "cursor": self.cursor, "config": config.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainState":
        if data.get("format") != "deeptravel-checkpoint":
            raise ValueError("not a checkpoint file")
        return cls(int(data["step"]), PolicyParams.from_dict(data["params"]),
                   PolicyParams.from_dict(data["ref"]).snapshot(), ExperienceBuffer.from_dict(data["buffer"]),
                   int(data["cursor"]))


def save_checkpoint(state: TrainState, config: TrainerConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(state.to_dict(config)))


def load_checkpoint(path: str | Path) -> TrainState:
    return TrainState.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainResult:
    params: PolicyParams
    metrics: list[StepMetrics]
    state: TrainState
    groups_log: list[list[tuple[str, str, list[int]]]] = field(default_factory=list)


def _dataset_order(dataset: Sequence[Query], seed: int, cursor: int, k: int) -> list[Query]:
    """k queries from an endless stream of seeded per-pass shuffles, starting at `cursor`."""
    out = []
    size = len(dataset)
    for pos in range(cursor, cursor + k):
        epoch, offset = divmod(pos, size)
        order = list(range(size))
        random.Random(f"data:{seed}:{epoch}").shuffle(order)
        out.append(dataset[order[offset]])
    return out


def train(config: TrainerConfig, dataset: Sequence[Query], sandbox: Sandbox, params: PolicyParams | None = None,
          verifier: Verifier | None = None, val_queries: Sequence[Query] = (), resume: TrainState | None = None,
          checkpoint_path: str | Path | None = None, checkpoint_every: int = 0,
          on_step: Callable[[StepMetrics], None] | None = None) -> TrainResult:
    """Run `config.total_steps` update steps (continuing from `resume` if given)."""
    if not dataset:
        raise ConfigError("training needs a non-empty dataset")
    verifier = verifier or Verifier()
    by_id = {q.id: q for q in dataset}
    if resume is not None:
        state = TrainState(resume.step, resume.params.copy(), resume.ref,
                           ExperienceBuffer.from_dict(resume.buffer.to_dict()), resume.cursor)
    else:
        start = params.copy() if params is not None else PolicyParams()
        state = TrainState(0, start, start.snapshot(), ExperienceBuffer(config.buffer_capacity))
    live = LiveModeConfig(config.live_failure_rate, config.live_drift_rate, config.seed)
    limits = config.limits
    metrics: list[StepMetrics] = []
    groups_log: list[list[tuple[str, str, list[int]]]] = []
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        while state.step < config.total_steps:
            step = state.step + 1
            replay_ids: list[str] = []
            if config.gamma is not None and step % config.gamma == 0 and len(state.buffer):
                replay_ids = state.buffer.head(int(round(config.replay_fraction * config.batch_size)))
            fresh = _dataset_order(dataset, config.seed, state.cursor, config.batch_size - len(replay_ids))
            batch = [(by_id[q], "buffer") for q in replay_ids] + [(q, "dataset") for q in fresh]
            old = state.params.snapshot()
            agent = SoftmaxAgent(old)
            groups = [rollout_group(agent, sandbox, q, config.n, limits, verifier,
                                    seed=f"{config.seed}:{step}:{slot}", source=source, eta=config.eta,
                                    live=live, pool=pool)
                      for slot, (q, source) in enumerate(batch)]
            kept = [(g.trajectories, g.advantages) for g in groups if g.kept]
            surrogate = None
            grad: dict[Bucket, np.ndarray] = {}
            new_params = state.params
            if kept:
                denominator = state.ref if config.strict_ratio else old
                try:
                    surrogate = surrogate_loss(state.params, denominator, state.ref, kept, config.epsilon,
                                               config.beta)
                    grad = surrogate.grad
                    new_params = state.params.apply(grad, -config.learning_rate)
                except FloatingPointError as exc:
                    logger.error("step %d aborted: %s", step, exc)
                    surrogate, grad = None, {}
            else:
                logger.info("step %d: every group filtered, no update", step)
            for g in groups:
                buffer_update(state.buffer, g, step)
            record = step_metrics(step, groups, old, surrogate, grad, state.buffer, len(replay_ids))
            state.params = new_params
            state.cursor += len(fresh)
            state.step = step
            if config.ref_refresh and step % config.ref_refresh == 0:
                state.ref = state.params.snapshot()
            if config.eval_every and val_queries and step % config.eval_every == 0:
                record.val_pass_rate = evaluate(state.params, sandbox, val_queries, limits, Verifier(
                    verifier.transfer_buffer))
            metrics.append(record)
            groups_log.append([(g.query_id, g.source, list(g.rewards)) for g in groups])
            if on_step is not None:
                on_step(record)
            if checkpoint_path and checkpoint_every and step % checkpoint_every == 0:
                save_checkpoint(state, config, checkpoint_path)
            logger.debug("step %d reward %.3f keep %.2f buffer %d", step, record.mean_reward, record.keep_rate,
                         record.buffer_size)
    finally:
        if pool is not None:
            pool.shutdown()
    if checkpoint_path:
        save_checkpoint(state, config, checkpoint_path)
    return TrainResult(state.params, metrics, state, groups_log)


# ---------------------------------------------------------------------------
# Evaluation and export
# ---------------------------------------------------------------------------


def evaluate_rewards(policy: PolicyParams | Agent, sandbox: Sandbox, queries: Sequence[Query],
                     limits: EpisodeLimits | None = None, verifier: Verifier | None = None,
                     seed: int = 0) -> list[int]:
    """Reward of one greedy episode per query (agents are used as given)."""
    agent = SoftmaxAgent(policy, greedy=True) if isinstance(policy, PolicyParams) else policy
    limits = limits or EpisodeLimits()
    verifier = verifier or Verifier()
    out = []
    for i, q in enumerate(queries):
        t = run_episode(agent, Environment(sandbox), q, limits, random.Random(f"eval:{seed}:{i}"))
        out.append(verifier.joint_reward(q, t).r)
    return out


def pass_rate(rewards: Sequence[int]) -> float:
    return 100.0 * sum(rewards) / len(rewards) if rewards else 0.0


def evaluate(policy: PolicyParams | Agent, sandbox: Sandbox, queries: Sequence[Query],
             limits: EpisodeLimits | None = None, verifier: Verifier | None = None) -> float:
    """Final pass rate (percent) of greedy episodes."""
    return pass_rate(evaluate_rewards(policy, sandbox, queries, limits, verifier))


def write_metrics(metrics: Sequence[StepMetrics], jsonl_path: str | Path, csv_path: str | Path | None = None) -> None:
    with open(jsonl_path, "w", encoding="utf-8") as fh:
        for m in metrics:
            fh.write(json.dumps(m.to_dict()) + "\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            writer.writeheader()
            for m in metrics:
                writer.writerow(m.to_dict())
