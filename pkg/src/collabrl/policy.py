"""Role-conditioned linear-softmax policies and an affine centralized critic."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from collabrl.env.config import ROLES
from collabrl.env.core import DIFFICULTY_LEVEL, EpisodeState, quality_score
from collabrl.env.types import KIND_INDEX, KINDS, STATUS_ORDER, ActionPrimitive, Observation

SCHEMA_VERSION = 1
MAX_SLOTS = 8

LOCAL_FEATURES = (
    "bias",
    *(f"hist_{s.value.lower()}" for s in STATUS_ORDER),
    "scope_frozen",
    "term_frozen",
    "failing_receipts",
    "retest_pending",
    "unlinted",
    "lint_defects",
    "own_empty",
    "finalize_ready",
    "turns_left",
    "ticks_left",
    "tokens_left",
    "turn_fraction",
    "nudge",
    "coding",
    "difficulty",
    "blockers",
    "owns_slots",
    "own_off_style",
    *(f"role_{r}" for r in ROLES),
)
LOCAL_DIM = len(LOCAL_FEATURES)

GLOBAL_FEATURES = (
    "bias",
    *(f"slot{i}_{s.value.lower()}" for i in range(MAX_SLOTS) for s in STATUS_ORDER),
    "scope_frozen",
    "term_frozen",
    "receipts",
    "redundant",
    "conflicts",
    "violations",
    "over_budget",
    "interventions",
    "tokens",
    "ticks_fraction",
    "turn_fraction",
    "quality",
    "coding",
)
GLOBAL_DIM = len(GLOBAL_FEATURES)
N_KINDS = len(KINDS)


class DimensionError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def featurize_local(obs: Observation) -> np.ndarray:
    n = max(1, obs.brief_digest[2])
    max_turns = max(1, obs.brief_digest[3])
    turns_left, ticks_left, tokens_left, tokens0 = obs.remaining_budget
    f = [1.0]
    f.extend(h / n for h in obs.histogram)
    f.extend(
        [
            float(obs.scope_frozen),
            float(obs.term_frozen),
            min(obs.failing_receipts, 4) / 4.0,
            obs.retest_pending / n,
            obs.unlinted / n,
            obs.lint_defects / n,
            obs.own_empty / n,
            float(obs.finalize_ready),
            turns_left / max_turns,
            ticks_left / max(1, obs.brief_digest[4]),
            tokens_left / max(1, tokens0),
            obs.turn / max_turns,
            float(obs.nudge),
            obs.brief_digest[0],
            obs.brief_digest[1],
            sum(1 for d in obs.rail_digest if d.kind.value == "BlockerRaised") / max(1, len(obs.rail_digest)),
            float(obs.owns_slots),
            obs.own_off_style / n,
        ]
    )
    f.extend(1.0 if obs.role == r else 0.0 for r in ROLES)
    return np.asarray(f, dtype=np.float64)


def featurize_global(state: EpisodeState) -> np.ndarray:
    g = np.zeros(GLOBAL_DIM)
    g[0] = 1.0
    ns = len(STATUS_ORDER)
    for i, s in enumerate(state.slots[:MAX_SLOTS]):
        g[1 + i * ns + STATUS_ORDER.index(s.status)] = 1.0
    k = 1 + MAX_SLOTS * ns
    task = state.task
    c = state.counters
    g[k : k + 14] = [
        float(state.scope is not None),
        float(state.frozen_tag is not None),
        len(state.receipts) / 10.0,
        c["redundant"] / 5.0,
        c["conflicts"] / 5.0,
        c["violations"] / 5.0,
        c["over_budget"] / 100.0,
        c["interventions"] / 5.0,
        state.token_count / 1000.0,
        state.ticks_elapsed / task.tick_budget,
        state.turn / task.max_turns,
        quality_score(state).overall(task.task_family),
        float(task.is_coding),
    ][:14]
    return g


@dataclass(frozen=True)
class ActionDistribution:
    support: tuple
    probabilities: np.ndarray
    kinds: tuple

    def __post_init__(self):
        if not self.support:
            raise ValueError("empty support")
        p = self.probabilities
        if p.min() < 0 or abs(float(p.sum()) - 1.0) > 1e-12:
            raise ValueError("probabilities must be non-negative and sum to 1")

    def prob_of_kind(self, kind: str) -> float:
        try:
            return float(self.probabilities[self.kinds.index(kind)])
        except ValueError:
            return 0.0


class PolicyParams:
    """Shared weight matrix plus a low-rank additive adapter per role.

    Arrays are frozen after construction; updates build a new instance. The
    reference snapshot (the prior for the KL anchor) is carried along
    unchanged.
    """

    def __init__(self, shared: np.ndarray, adapters: dict, reference: "PolicyParams | None" = None):
        self.shared = np.array(shared, dtype=np.float64)
        self.adapters = {r: (np.array(u, dtype=np.float64), np.array(b, dtype=np.float64)) for r, (u, b) in sorted(adapters.items())}
        self.shared.setflags(write=False)
        for u, b in self.adapters.values():
            u.setflags(write=False)
            b.setflags(write=False)
        if self.shared.shape != (LOCAL_DIM, N_KINDS):
            raise DimensionError(f"shared weights must be {LOCAL_DIM}x{N_KINDS}")
        self.reference = reference if reference is not None else self
        self._effective: dict = {}

    @property
    def rank(self) -> int:
        return next(iter(self.adapters.values()))[0].shape[1] if self.adapters else 0

    def effective(self, role: str) -> np.ndarray:
        m = self._effective.get(role)
        if m is None:
            m = self.shared.copy()
            if role in self.adapters:
                u, b = self.adapters[role]
                m += u @ b
            self._effective[role] = m
        return m

    def flat(self) -> np.ndarray:
        parts = [self.shared.ravel()]
        for r in sorted(self.adapters):
            u, b = self.adapters[r]
            parts += [u.ravel(), b.ravel()]
        return np.concatenate(parts)

    def with_flat(self, flat: np.ndarray) -> "PolicyParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.flat().size,):
            raise DimensionError("flat parameter vector has the wrong length")
        k = self.shared.size
        shared = flat[:k].reshape(self.shared.shape)
        adapters = {}
        for r in sorted(self.adapters):
            u, b = self.adapters[r]
            adapters[r] = (flat[k : k + u.size].reshape(u.shape), flat[k + u.size : k + u.size + b.size].reshape(b.shape))
            k += u.size + b.size
        return PolicyParams(shared, adapters, reference=self.reference)

    def checksum(self) -> str:
        return hashlib.sha256(self.flat().tobytes()).hexdigest()


def init_policy(seed: int, rank: int = 2, handoff_prior: float = -4.0, adapter_scale: float = 0.1) -> PolicyParams:
    """Near-uniform prior: every legal kind equally likely except abandoning
    the task to a human, which starts strongly discouraged."""
    rng = np.random.default_rng(seed)
    shared = np.zeros((LOCAL_DIM, N_KINDS))
    shared[0, KIND_INDEX["HandoffHuman"]] = handoff_prior
    adapters = {r: (rng.normal(0.0, adapter_scale, size=(LOCAL_DIM, rank)), np.zeros((rank, N_KINDS))) for r in ROLES}
    return PolicyParams(shared, adapters)


def action_distribution(params: PolicyParams, role: str, features: np.ndarray, legal) -> ActionDistribution:
    legal = tuple(legal)
    if not legal:
        raise ValueError("legal action set is empty")
    kinds = tuple(a.kind for a in legal)
    logits = (features @ params.effective(role)).tolist()
    z = [logits[KIND_INDEX[k]] for k in kinds]
    top = max(z)
    e = [math.exp(v - top) for v in z]
    total = math.fsum(e)
    return ActionDistribution(legal, np.array([x / total for x in e]), kinds)


def sample_action(dist: ActionDistribution, rng) -> tuple[ActionPrimitive, float]:
    """Inverse-CDF draw from one uniform of ``rng``; zero-mass entries are never returned."""
    u = rng.random()
    probs = dist.probabilities.tolist()
    acc = 0.0
    chosen = None
    for i, p in enumerate(probs):
        if p <= 0.0:
            continue
        chosen = i
        acc += p
        if u < acc:
            break
    return dist.support[chosen], math.log(probs[chosen])


def greedy_action(dist: ActionDistribution) -> tuple[ActionPrimitive, float]:
    i = int(np.argmax(dist.probabilities))
    return dist.support[i], math.log(dist.probabilities[i])


@dataclass(frozen=True)
class CriticParams:
    weights: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.weights)) or not math.isfinite(self.bias):
            raise ValueError("critic parameters must be finite")


def init_critic(dim: int = GLOBAL_DIM) -> CriticParams:
    return CriticParams(np.zeros(dim), 0.0)


def critic_value(critic: CriticParams, global_features: np.ndarray) -> float:
    if global_features.shape != critic.weights.shape:
        raise DimensionError(f"critic expects {critic.weights.shape[0]} features, got {global_features.shape}")
    return float(critic.weights @ global_features + critic.bias)


def kl_divergence(dist_p: ActionDistribution, dist_q: ActionDistribution) -> float:
    if dist_p.kinds != dist_q.kinds:
        raise ValueError("KL needs identical supports")
    total = 0.0
    for p, q in zip(dist_p.probabilities, dist_q.probabilities):
        if p == 0.0:
            continue
        if q == 0.0:
            raise ValueError("q assigns zero probability where p does not")
        total += p * math.log(p / q)
    return max(0.0, total)


def entropy(dist: ActionDistribution) -> float:
    return float(-sum(p * math.log(p) for p in dist.probabilities if p > 0))


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: PolicyParams, critic: CriticParams, meta: dict | None = None) -> None:
    header = {
        "schema_version": SCHEMA_VERSION,
        "local_features": list(LOCAL_FEATURES),
        "global_features": list(GLOBAL_FEATURES),
        "kinds": list(KINDS),
        "roles": sorted(params.adapters),
        "rank": params.rank,
        "meta": meta or {},
    }
    body = {
        "header": header,
        "params": params.flat().tolist(),
        "reference": params.reference.flat().tolist(),
        "critic_weights": critic.weights.tolist(),
        "critic_bias": critic.bias,
    }
    Path(path).write_text(json.dumps(body, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[PolicyParams, CriticParams, dict]:
    try:
        body = json.loads(Path(path).read_text())
        header = body["header"]
    except (OSError, ValueError, KeyError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"checkpoint schema {header.get('schema_version')} != {SCHEMA_VERSION}")
    if header.get("local_features") != list(LOCAL_FEATURES) or header.get("kinds") != list(KINDS):
        raise CheckpointError("checkpoint feature/kind layout does not match this build")
    if header.get("global_features") != list(GLOBAL_FEATURES):
        raise CheckpointError("checkpoint critic layout does not match this build")
    rank = int(header["rank"])
    template = PolicyParams(
        np.zeros((LOCAL_DIM, N_KINDS)),
        {r: (np.zeros((LOCAL_DIM, rank)), np.zeros((rank, N_KINDS))) for r in header["roles"]},
    )
    try:
        ref = template.with_flat(np.asarray(body["reference"]))
        ref = PolicyParams(ref.shared, ref.adapters)
        cur = template.with_flat(np.asarray(body["params"]))
        params = PolicyParams(cur.shared, cur.adapters, reference=ref)
        critic = CriticParams(np.asarray(body["critic_weights"], dtype=np.float64), float(body["critic_bias"]))
    except (DimensionError, ValueError) as e:
        raise CheckpointError(f"checkpoint arrays malformed: {e}") from None
    return params, critic, header.get("meta", {})
