"""Four-signal joint reward: scoring, per-batch normalisation, curriculum, audit."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

COMPONENTS = ("quality", "speed", "coordination", "compliance")
REASON_CODES = (
    "redundant_turn",
    "overlong_message",
    "conflict_reopen",
    "schema_violation",
    "unsafe_tool",
    "style_drift",
    "progress",
    "test_evidence",
)
CLAMP = 3.0


@dataclass(frozen=True)
class PenaltyConfig:
    redundant: float = 0.5  # per redundant turn
    overlong_token: float = 0.01  # per over-budget message token
    conflict: float = 1.0  # per conflicting reopen
    schema_violation: float = 1.0
    unsafe_tool: float = 1.0
    style_drift: float = 1.0

    def __post_init__(self):
        if any(v < 0 for v in self.__dict__.values()):
            raise ValueError("penalty coefficients must be non-negative")


@dataclass(frozen=True)
class RawRewardComponents:
    quality: float
    speed_raw: float
    coordination_penalty: float
    compliance_penalty: float

    def __post_init__(self):
        if not 0.0 <= self.quality <= 1.0 + 1e-12:
            raise ValueError(f"quality {self.quality} outside [0, 1]")
        if self.coordination_penalty < 0 or self.compliance_penalty < 0:
            raise ValueError("penalties must be non-negative")

    def as_tuple(self) -> tuple:
        return (self.quality, self.speed_raw, self.coordination_penalty, self.compliance_penalty)


@dataclass(frozen=True)
class RewardWeights:
    """Non-negative weights, rescaled to sum to one on construction."""

    w_quality: float
    w_speed: float
    w_coordination: float
    w_compliance: float

    def __post_init__(self):
        vals = (self.w_quality, self.w_speed, self.w_coordination, self.w_compliance)
        if any(v < 0 or not math.isfinite(v) for v in vals):
            raise ValueError("weights must be finite and non-negative")
        total = sum(vals)
        if total <= 0:
            raise ValueError("weights must not all be zero")
        for name, v in zip(("w_quality", "w_speed", "w_coordination", "w_compliance"), vals):
            object.__setattr__(self, name, v / total)

    def as_tuple(self) -> tuple:
        return (self.w_quality, self.w_speed, self.w_coordination, self.w_compliance)


EARLY_WEIGHTS = RewardWeights(0.35, 0.15, 0.40, 0.10)
LATE_WEIGHTS = RewardWeights(0.60, 0.15, 0.15, 0.10)


@dataclass(frozen=True)
class CurriculumSchedule:
    total_steps: int
    early: RewardWeights = EARLY_WEIGHTS
    late: RewardWeights = LATE_WEIGHTS
    ramp_fraction: float = 0.5

    def __post_init__(self):
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if not 0.0 < self.ramp_fraction <= 1.0:
            raise ValueError("ramp_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class RewardBreakdown:
    raw: RawRewardComponents
    normalized: tuple
    combined: float
    weights_used: RewardWeights
    batch_id: int

    def to_dict(self) -> dict:
        return {
            "raw": dict(zip(COMPONENTS, self.raw.as_tuple())),
            "normalized": list(self.normalized),
            "combined": self.combined,
            "weights": list(self.weights_used.as_tuple()),
            "batch_id": self.batch_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RewardBreakdown":
        raw = RawRewardComponents(*(float(d["raw"][c]) for c in COMPONENTS))
        return cls(raw, tuple(float(x) for x in d["normalized"]), float(d["combined"]), RewardWeights(*d["weights"]), int(d["batch_id"]))


@dataclass(frozen=True)
class AuditFragment:
    turn: int
    role: str
    component: str
    delta: float
    reason_code: str

    def __post_init__(self):
        if self.component not in COMPONENTS:
            raise ValueError(f"unknown component {self.component!r}")
        if self.reason_code not in REASON_CODES:
            raise ValueError(f"unknown reason code {self.reason_code!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class IncompleteTraceError(ValueError):
    pass


def _speed_reason(log) -> str:
    # ticks spent on a turn are blamed on whatever made it unproductive
    for code in ("schema_violation", "unsafe_tool"):
        if code in log.violations:
            return code
    if log.redundant:
        return "redundant_turn"
    if log.conflict:
        return "conflict_reopen"
    return "progress"


def fragments(trace, penalties: PenaltyConfig = PenaltyConfig()) -> list:
    """Every credit and penalty unit of a finished trace, in turn order."""
    if trace.outcome.terminal == "Running":
        raise IncompleteTraceError("trace has not terminated")
    out = []
    for turn, role, delta, reason in trace.outcome.quality_fragments:
        out.append(AuditFragment(turn, role, "quality", delta, reason))
    for log in trace.logs:
        if log.ticks:
            out.append(AuditFragment(log.turn, log.role, "speed", float(log.ticks), _speed_reason(log)))
        if log.redundant:
            out.append(AuditFragment(log.turn, log.role, "coordination", penalties.redundant, "redundant_turn"))
        if log.over_budget_tokens:
            out.append(
                AuditFragment(log.turn, log.role, "coordination", penalties.overlong_token * log.over_budget_tokens, "overlong_message")
            )
        if log.conflict:
            out.append(AuditFragment(log.turn, log.role, "coordination", penalties.conflict, "conflict_reopen"))
        for v in log.violations:
            if v == "schema_violation":
                out.append(AuditFragment(log.turn, log.role, "compliance", penalties.schema_violation, "schema_violation"))
            elif v == "unsafe_tool":
                out.append(AuditFragment(log.turn, log.role, "compliance", penalties.unsafe_tool, "unsafe_tool"))
    if trace.outcome.style_units:
        turn, role = trace.outcome.style_drift
        out.append(AuditFragment(turn, role, "compliance", penalties.style_drift * trace.outcome.style_units, "style_drift"))
    return out


def _sum(frags, component: str) -> float:
    return math.fsum(f.delta for f in frags if f.component == component)


def score_components(trace, penalties: PenaltyConfig = PenaltyConfig()) -> RawRewardComponents:
    """Raw quality, ticks, coordination and compliance penalties of a trace.

    Penalties are the exact sums of their audit fragments.
    """
    frags = fragments(trace, penalties)
    return RawRewardComponents(
        quality=trace.outcome.quality_overall,
        speed_raw=float(trace.outcome.ticks_elapsed),
        coordination_penalty=_sum(frags, "coordination"),
        compliance_penalty=_sum(frags, "compliance"),
    )


@dataclass(frozen=True)
class BatchStats:
    """Per-group means and population stds of the signed dimensions."""

    groups: dict = field(default_factory=dict)

    def transform(self, comp: RawRewardComponents, group="all", clamp: bool = True) -> tuple:
        mean, std = self.groups[group]
        x = _signed(comp)
        z = [0.0 if s == 0.0 else (v - m) / s for v, m, s in zip(x, mean, std)]
        if clamp:
            z = [min(CLAMP, max(-CLAMP, v)) for v in z]
        return tuple(z)


def _signed(comp: RawRewardComponents) -> tuple:
    # speed enters negated so fewer ticks score higher
    return (comp.quality, -comp.speed_raw, comp.coordination_penalty, comp.compliance_penalty)


def batch_stats(components: Sequence[RawRewardComponents], groups: Optional[Sequence] = None) -> BatchStats:
    if not components:
        raise ValueError("cannot normalise an empty batch")
    groups = list(groups) if groups is not None else ["all"] * len(components)
    if len(groups) != len(components):
        raise ValueError("groups must align with components")
    out = {}
    for g in sorted(set(groups), key=str):
        rows = np.array([_signed(c) for c, h in zip(components, groups) if h == g], dtype=np.float64)
        mean = rows.mean(axis=0)
        centered = rows - mean
        std = np.sqrt((centered**2).mean(axis=0))
        # relative floor: spread at rounding level is treated as zero variance
        scale = np.maximum(np.abs(mean), 1.0)
        std = np.where(std <= 1e-12 * scale, 0.0, std)
        out[g] = (tuple(mean.tolist()), tuple(std.tolist()))
    return BatchStats(out)


def normalize_batch(
    components: Sequence[RawRewardComponents], groups: Optional[Sequence] = None, clamp: bool = True
) -> list:
    """Z-score each dimension within its group (population std), clamp to +-3.

    Speed is negated first so faster episodes score higher; penalty
    dimensions are z-scored on the raw penalties. A zero-variance dimension
    (including any singleton group) maps to zero.
    """
    stats = batch_stats(components, groups)
    groups = list(groups) if groups is not None else ["all"] * len(components)
    return [stats.transform(c, g, clamp) for c, g in zip(components, groups)]


def curriculum_weights(training_step: int, schedule: CurriculumSchedule) -> RewardWeights:
    if training_step < 0:
        raise ValueError("training step must be >= 0")
    ramp = schedule.ramp_fraction * schedule.total_steps
    a = 1.0 if ramp <= 0 else min(1.0, training_step / ramp)
    if a >= 1.0:
        return schedule.late
    if a <= 0.0:
        return schedule.early
    e, l = schedule.early.as_tuple(), schedule.late.as_tuple()
    return RewardWeights(*((1 - a) * x + a * y for x, y in zip(e, l)))


def combine_reward(normalized: Sequence[float], weights: RewardWeights) -> float:
    nq, ns, nc, ncomp = normalized
    return weights.w_quality * nq + weights.w_speed * ns - weights.w_coordination * nc - weights.w_compliance * ncomp


def explain_credit(trace, breakdown: RewardBreakdown, penalties: PenaltyConfig = PenaltyConfig()) -> list:
    frags = fragments(trace, penalties)
    raw = breakdown.raw
    checks = (
        (raw.quality, trace.outcome.quality_overall),
        (raw.speed_raw, float(trace.outcome.ticks_elapsed)),
        (raw.coordination_penalty, _sum(frags, "coordination")),
        (raw.compliance_penalty, _sum(frags, "compliance")),
    )
    if any(abs(a - b) > 1e-9 for a, b in checks):
        raise ValueError("breakdown was not produced from this trace")
    return frags


def absolute_score(raw: RawRewardComponents, tick_budget: int, weights: RewardWeights = LATE_WEIGHTS) -> float:
    """Batch-independent joint score in [0, 1] used for learning curves.

    The normalised combined reward has zero batch mean by construction, so
    progress across iterations is tracked on this fixed-scale analogue.
    """
    speed = max(0.0, 1.0 - raw.speed_raw / tick_budget)
    return (
        weights.w_quality * raw.quality
        + weights.w_speed * speed
        + weights.w_coordination / (1.0 + raw.coordination_penalty)
        + weights.w_compliance / (1.0 + raw.compliance_penalty)
    )
