"""Group-relative policy optimisation with leave-one-out counterfactual baselines."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from collabrl.env.config import CODING_TEAM, WRITING_TEAM, EnvConfig
from collabrl.env.core import DEFAULT_CONFIG, EpisodeState, legal_actions, new_episode, observe
from collabrl.env.tasks import make_task
from collabrl.env.types import KIND_INDEX, ConfigurationError, TaskFamily, Verb
from collabrl.policy import (
    N_KINDS,
    CriticParams,
    PolicyParams,
    action_distribution,
    critic_value,
    featurize_local,
    init_critic,
    init_policy,
    sample_action,
)
from collabrl.reward import (
    CurriculumSchedule,
    PenaltyConfig,
    RawRewardComponents,
    RewardBreakdown,
    RewardWeights,
    absolute_score,
    batch_stats,
    combine_reward,
    curriculum_weights,
    score_components,
)
from collabrl.rng import RoleStreams, keyed_uniform, mix
from collabrl.trajectory import Trajectory, meta_for, play, summarize

log = logging.getLogger(__name__)

BASELINE_MODES = ("leave_one_out", "constant", "critic")
REWARD_MODES = ("joint", "local_only")
DIFFICULTIES = ("easy", "medium", "hard")

CURVE_COLUMNS = (
    "iteration",
    "mean_reward",
    "mean_combined",
    "mean_quality",
    "mean_turns",
    "mean_ticks",
    "mean_tokens",
    "clip_fraction",
    "kl",
    "entropy",
)


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class GrpoConfig:
    clip_epsilon: float = 0.2
    entropy_coef: float = 0.01
    kl_coef: float = 0.02
    counterfactual_K: int = 4
    baseline_mode: str = "leave_one_out"
    learning_rate: float = 0.5
    critic_learning_rate: float = 0.05
    batch_episodes: int = 8
    iterations: int = 120
    epochs: int = 4
    reward_mode: str = "joint"
    coordination_term: bool = True
    short_long_mix: float = 0.5
    turns_start: int = 30
    turns_max: int = 40
    adapter_rank: int = 2
    max_grad_norm: float = 5.0
    counterfactual_action: str = "policy"  # or "noop"

    def __post_init__(self):
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ConfigurationError("clip_epsilon must lie in (0, 1)")
        if self.counterfactual_K < 0:
            raise ConfigurationError("counterfactual_K must be >= 0")
        for name in ("entropy_coef", "kl_coef", "learning_rate", "critic_learning_rate", "max_grad_norm"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.baseline_mode not in BASELINE_MODES:
            raise ConfigurationError(f"baseline_mode must be one of {BASELINE_MODES}")
        if self.reward_mode not in REWARD_MODES:
            raise ConfigurationError(f"reward_mode must be one of {REWARD_MODES}")
        if self.counterfactual_action not in ("policy", "noop"):
            raise ConfigurationError("counterfactual_action must be 'policy' or 'noop'")
        if self.batch_episodes < 1 or self.iterations < 0 or self.epochs < 1:
            raise ConfigurationError("batch_episodes and epochs must be >= 1, iterations >= 0")
        if not 0.0 <= self.short_long_mix <= 1.0:
            raise ConfigurationError("short_long_mix must lie in [0, 1]")
        if not 1 <= self.turns_start <= self.turns_max:
            raise ConfigurationError("need 1 <= turns_start <= turns_max")
        if self.adapter_rank < 1:
            raise ConfigurationError("adapter_rank must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AdvantageEstimate:
    advantage: float
    baseline_value: float
    mode_used: str

    def __post_init__(self):
        if not (math.isfinite(self.advantage) and math.isfinite(self.baseline_value)):
            raise NumericalError("non-finite advantage")


@dataclass(frozen=True)
class UpdateReport:
    loss: float
    critic_loss: float
    mean_kl: float
    mean_entropy: float
    clip_fraction: float
    grad_norm: float
    aborted: bool = False
    diagnostic: str = ""


@dataclass
class Gradients:
    policy: np.ndarray
    critic_weights: np.ndarray
    critic_bias: float


# ---------------------------------------------------------------- rollouts


def episode_plan(config: GrpoConfig, seed: int, iteration: int) -> list:
    """Task specs, teams and role orders for one batch.

    Families alternate episode by episode; the first ``round(mix * B)``
    episodes are short-class, the rest long-class.
    """
    b = config.batch_episodes
    n_short = int(round(config.short_long_mix * b))
    frac = iteration / max(1, config.iterations - 1)
    ref = int(round(config.turns_start + (config.turns_max - config.turns_start) * frac))
    out = []
    for k in range(b):
        family = TaskFamily.WRITING if k % 2 == 0 else TaskFamily.CODING
        length = "short" if k < n_short else "long"
        ep_seed = mix(seed, "episode", iteration, k) & 0x7FFFFFFF
        diff = DIFFICULTIES[int(keyed_uniform(ep_seed, "difficulty") * 3)]
        task = make_task(family, diff, length, ep_seed, reference_turns=ref)
        team = WRITING_TEAM if family is TaskFamily.WRITING else CODING_TEAM
        out.append((task, team, ep_seed, role_permutation(team, ep_seed)))
    return out


def role_permutation(team: Sequence[str], seed: int) -> tuple:
    keys = [keyed_uniform(seed, "role_order", r) for r in team]
    return tuple(r for _, r in sorted(zip(keys, team)))


def collect_rollouts(
    plan: list,
    params: PolicyParams,
    snapshots: bool = False,
    env_config: EnvConfig = DEFAULT_CONFIG,
) -> list:
    """Play one episode per planned task with a fixed parameter snapshot."""
    batch = []
    for task, team, ep_seed, order in plan:
        state = new_episode(task, team, ep_seed, env_config, role_order=order)
        meta = meta_for(state)
        streams = RoleStreams(mix(ep_seed, "streams"))
        transitions, logs = play(state, params, streams, snapshots=snapshots)
        batch.append(Trajectory(transitions, logs, meta, summarize(state, logs)))
    return batch


# ---------------------------------------------------------------- rewards


@dataclass
class RewardContext:
    """Everything needed to score any trajectory against the current batch."""

    stats: object
    weights: RewardWeights
    penalties: PenaltyConfig
    reward_mode: str
    coordination_term: bool

    def raw(self, traj) -> RawRewardComponents:
        raw = score_components(traj, self.penalties)
        if not self.coordination_term:
            raw = replace(raw, coordination_penalty=0.0)
        return raw

    def joint(self, traj) -> float:
        z = self.stats.transform(self.raw(traj), traj.meta.task_family)
        return combine_reward(z, self.weights)

    def for_role(self, traj, role: str) -> float:
        if self.reward_mode == "joint":
            return self.joint(traj)
        return math.fsum(d for _, r, d, _ in traj.outcome.quality_fragments if r == role)


def build_reward_context(batch: list, weights: RewardWeights, config: GrpoConfig, penalties=PenaltyConfig()):
    ctx = RewardContext(None, weights, penalties, config.reward_mode, config.coordination_term)
    raws = [ctx.raw(t) for t in batch]
    ctx.stats = batch_stats(raws, [t.meta.task_family for t in batch])
    return ctx, raws


def score_batch(batch: list, ctx: RewardContext, raws: list, batch_id: int) -> None:
    for t, raw in zip(batch, raws):
        z = ctx.stats.transform(raw, t.meta.task_family)
        t.reward_breakdown = RewardBreakdown(raw, z, combine_reward(z, ctx.weights), ctx.weights, batch_id)


# ---------------------------------------------------------------- baselines


def _replacement(state: EpisodeState, role: str, params: PolicyParams):
    legal = legal_actions(state, role)
    dist = action_distribution(params, role, featurize_local(observe(state, role)), legal)
    return legal, dist


def _branch_reward(traj: Trajectory, t: int, action, params, reward_fn) -> float:
    tr = traj.transitions[t]
    state = tr.snapshot.clone()
    streams = RoleStreams(mix(traj.meta.seed, "streams"), tr.counters)
    _, suffix = play(state, params, streams, record=False, first_action=action)
    branch = Trajectory([], traj.logs[:t] + suffix, traj.meta, summarize(state, traj.logs[:t] + suffix))
    return reward_fn(branch, tr.role)


def counterfactual_baseline(
    traj: Trajectory,
    t: int,
    params: PolicyParams,
    config: GrpoConfig,
    reward_fn: Callable,
    exhaustive: bool = False,
) -> float:
    """Expected reward with turn ``t`` redrawn from the snapshot policy.

    The suffix reuses each role's own sampling stream, so branches differ
    only through the replaced action. ``exhaustive`` weights every legal
    alternative by its probability instead of drawing K samples.
    """
    if config.counterfactual_K == 0 and not exhaustive:
        raise ConfigurationError("leave_one_out needs counterfactual_K >= 1")
    tr = traj.transitions[t]
    if tr.snapshot is None:
        raise ValueError("trajectory was collected without replay snapshots")
    legal, dist = _replacement(tr.snapshot, tr.role, params)
    cache: dict = {}

    def value(a) -> float:
        # Branches are deterministic given (state, streams, action): redrawing
        # the taken action replays the actual episode, and repeats share work.
        if a not in cache:
            cache[a] = reward_fn(traj, tr.role) if a == tr.action else _branch_reward(traj, t, a, params, reward_fn)
        return cache[a]

    if config.counterfactual_action == "noop":
        return value(next((a for a in legal if a.kind == "HandoffRole"), legal[0]))
    if exhaustive:
        return math.fsum(p * value(a) for a, p in zip(dist.support, dist.probabilities) if p > 0)
    stream = _CfStream(traj.meta.seed, t)
    draws = [value(sample_action(dist, stream)[0]) for _ in range(config.counterfactual_K)]
    return math.fsum(draws) / len(draws)


class _CfStream:
    """Fresh draws for replaced actions, independent of the role streams."""

    def __init__(self, seed: int, t: int):
        self.seed, self.t, self.n = seed, t, 0

    def random(self) -> float:
        u = keyed_uniform(self.seed, "counterfactual", self.t, self.n)
        self.n += 1
        return u


def compute_baselines(batch: list, params, critic, config: GrpoConfig, ctx: RewardContext) -> list:
    """One baseline per transition, batch-major order."""
    out = []
    if config.baseline_mode == "constant":
        rewards = [ctx.for_role(traj, tr.role) for traj in batch for tr in traj.transitions]
        b = math.fsum(rewards) / len(rewards) if rewards else 0.0
        return [[b] * len(traj.transitions) for traj in batch]
    for traj in batch:
        if config.baseline_mode == "critic":
            out.append([critic_value(critic, tr.global_features) for tr in traj.transitions])
        else:
            out.append([counterfactual_baseline(traj, t, params, config, ctx.for_role) for t in range(len(traj.transitions))])
    return out


def compute_advantages(batch: list, baselines: list, config: GrpoConfig, reward_fn: Callable) -> list:
    """Episode reward minus per-turn baseline, standardised over the batch."""
    if len(baselines) != len(batch) or any(len(b) != len(t.transitions) for b, t in zip(baselines, batch)):
        raise ValueError("missing baselines for some transitions")
    raw = []
    for traj, bl in zip(batch, baselines):
        for tr, b in zip(traj.transitions, bl):
            raw.append((reward_fn(traj, tr.role) - b, b))
    if not raw:
        return []
    a = np.array([x for x, _ in raw])
    mean = a.mean()
    std = a.std()
    if std <= 1e-12 * max(1.0, abs(mean)):
        z = np.zeros_like(a)
    else:
        z = (a - mean) / std
    return [AdvantageEstimate(float(v), b, config.baseline_mode) for v, (_, b) in zip(z, raw)]


# ---------------------------------------------------------------- objective


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max()
    return z - m - math.log(np.exp(z - m).sum())


def surrogate_loss_and_grad(
    transitions: Sequence,
    params: PolicyParams,
    critic: CriticParams,
    advantages: Sequence[float],
    config: GrpoConfig,
    returns: Optional[Sequence[float]] = None,
) -> tuple:
    """Clipped surrogate, entropy bonus and KL anchor with analytic gradients.

    Returns ``(loss, Gradients, stats)``. When the clip binds (ratio outside
    the band on the side that limits the objective) the transition
    contributes no policy-gradient term: the gradient of the clipped branch
    is used. The critic loss is the mean squared error to ``returns``.
    """
    n = len(transitions)
    if n == 0:
        raise ValueError("empty batch")
    eps = config.clip_epsilon
    d_m = {r: np.zeros_like(params.shared) for r in params.adapters}
    loss = 0.0
    kl_total = ent_total = 0.0
    clipped = 0
    ref = params.reference
    for tr, adv in zip(transitions, advantages):
        idx = [KIND_INDEX[k] for k in tr.legal_kinds]
        f = tr.features
        z = f @ params.effective(tr.role)[:, idx]
        lp = _log_softmax(z)
        p = np.exp(lp)
        lq = _log_softmax(f @ ref.effective(tr.role)[:, idx])
        a = tr.action_index
        ratio = math.exp(lp[a] - tr.log_prob_old)
        unclipped = ratio * adv
        clipped_val = min(max(ratio, 1 - eps), 1 + eps) * adv
        g = np.zeros(len(idx))
        if unclipped <= clipped_val:
            loss -= unclipped
            onehot = np.zeros(len(idx))
            onehot[a] = 1.0
            g -= adv * ratio * (onehot - p)
        else:
            loss -= clipped_val
            clipped += 1
        h = -float(p @ lp)
        kl = float(p @ (lp - lq))
        loss += -config.entropy_coef * h + config.kl_coef * kl
        g += config.entropy_coef * p * (lp + h)
        g += config.kl_coef * p * (lp - lq - kl)
        kl_total += kl
        ent_total += h
        full = np.zeros(N_KINDS)
        full[idx] = g / n
        d_m[tr.role] += np.outer(f, full)
    loss /= n
    parts = [sum(d_m.values())]
    for r in sorted(params.adapters):
        u, b = params.adapters[r]
        parts += [(d_m[r] @ b.T).ravel(), (u.T @ d_m[r]).ravel()]
    policy_grad = np.concatenate([parts[0].ravel(), *parts[1:]])

    cw = np.zeros_like(critic.weights)
    cb = 0.0
    critic_loss = 0.0
    if returns is not None:
        for tr, target in zip(transitions, returns):
            err = critic_value(critic, tr.global_features) - target
            critic_loss += err * err / n
            cw += 2.0 * err * tr.global_features / n
            cb += 2.0 * err / n
    stats = {
        "critic_loss": critic_loss,
        "mean_kl": kl_total / n,
        "mean_entropy": ent_total / n,
        "clip_fraction": clipped / n,
    }
    return loss, Gradients(policy_grad, cw, cb), stats


def apply_update(params: PolicyParams, critic: CriticParams, grads: Gradients, config: GrpoConfig, stats=None, loss=0.0):
    stats = stats or {}
    common = (
        loss,
        stats.get("critic_loss", 0.0),
        stats.get("mean_kl", 0.0),
        stats.get("mean_entropy", 0.0),
        stats.get("clip_fraction", 0.0),
    )
    flat = grads.policy
    finite = np.all(np.isfinite(flat)) and np.all(np.isfinite(grads.critic_weights)) and math.isfinite(grads.critic_bias)
    if not finite:
        report = UpdateReport(*common, float("nan"), aborted=True, diagnostic="non-finite gradient; update skipped")
        log.warning(report.diagnostic)
        return params, critic, report
    norm = float(np.linalg.norm(flat))
    scale = 1.0
    if config.max_grad_norm > 0 and norm > config.max_grad_norm:
        scale = config.max_grad_norm / norm
    new_params = params.with_flat(params.flat() - config.learning_rate * scale * flat)
    new_critic = CriticParams(
        critic.weights - config.critic_learning_rate * grads.critic_weights,
        critic.bias - config.critic_learning_rate * grads.critic_bias,
    )
    return new_params, new_critic, UpdateReport(*common, norm)


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    params: PolicyParams
    critic: CriticParams
    curve: list = field(default_factory=list)
    last_batch: list = field(default_factory=list)


def train_loop(
    config: GrpoConfig,
    seed: int,
    env_config: EnvConfig = DEFAULT_CONFIG,
    penalties: PenaltyConfig = PenaltyConfig(),
    schedule: Optional[CurriculumSchedule] = None,
    on_iteration: Optional[Callable] = None,
) -> TrainResult:
    params = init_policy(mix(seed, "init") & 0x7FFFFFFF, rank=config.adapter_rank)
    critic = init_critic()
    schedule = schedule or CurriculumSchedule(total_steps=config.iterations)
    result = TrainResult(params, critic)
    loo = config.baseline_mode == "leave_one_out"
    for it in range(config.iterations):
        weights = curriculum_weights(it, schedule)
        plan = episode_plan(config, seed, it)
        batch = collect_rollouts(plan, params, snapshots=loo, env_config=env_config)
        ctx, raws = build_reward_context(batch, weights, config, penalties)
        score_batch(batch, ctx, raws, it)
        baselines = compute_baselines(batch, params, critic, config, ctx)
        adv = compute_advantages(batch, baselines, config, ctx.for_role)
        transitions = [tr for traj in batch for tr in traj.transitions]
        returns = [ctx.for_role(traj, tr.role) for traj in batch for tr in traj.transitions]
        advantages = [a.advantage for a in adv]
        report = None
        for _ in range(config.epochs):
            loss, grads, stats = surrogate_loss_and_grad(transitions, params, critic, advantages, config, returns)
            params, critic, report = apply_update(params, critic, grads, config, stats, loss)
            if report.aborted:
                break
        row = curve_row(it, batch, raws, report)
        result.curve.append(row)
        if on_iteration is not None:
            on_iteration(row)
        log.debug("iteration %d reward %.4f turns %.2f", it, row["mean_reward"], row["mean_turns"])
        for traj in batch:
            for tr in traj.transitions:
                tr.snapshot = None
        result.last_batch = batch
    result.params, result.critic = params, critic
    return result


def curve_row(it: int, batch: list, raws: list, report: Optional[UpdateReport]) -> dict:
    n = len(batch)
    return {
        "iteration": it,
        "mean_reward": math.fsum(absolute_score(r, t.meta.tick_budget) for r, t in zip(raws, batch)) / n,
        "mean_combined": math.fsum(t.reward_breakdown.combined for t in batch) / n,
        "mean_quality": math.fsum(r.quality for r in raws) / n,
        "mean_turns": math.fsum(t.outcome.turns for t in batch) / n,
        "mean_ticks": math.fsum(t.outcome.ticks_elapsed for t in batch) / n,
        "mean_tokens": math.fsum(t.outcome.tokens for t in batch) / n,
        "clip_fraction": report.clip_fraction if report else 0.0,
        "kl": report.mean_kl if report else 0.0,
        "entropy": report.mean_entropy if report else 0.0,
    }
