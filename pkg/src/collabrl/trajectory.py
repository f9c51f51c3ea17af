"""Episode records shared by the reward engine, trainer, buffer and harness."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from collabrl.env.core import (
    EpisodeState,
    _style_ok,
    legal_actions,
    observe,
    quality_attribution,
    quality_score,
    step,
)
from collabrl.env.types import ActionPrimitive, QualityBreakdown, StepLog, TaskFamily, Verb
from collabrl.policy import (
    PolicyParams,
    action_distribution,
    featurize_global,
    featurize_local,
    sample_action,
)
from collabrl.reward import RewardBreakdown
from collabrl.rng import RoleStreams


@dataclass(frozen=True)
class EpisodeMeta:
    seed: int
    task_family: str
    difficulty: str
    length_class: str
    role_order: tuple
    max_turns: int
    tick_budget: int
    slot_count: int

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["role_order"] = list(self.role_order)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeMeta":
        return cls(**{**d, "role_order": tuple(d["role_order"])})


@dataclass
class Transition:
    turn: int
    role: str
    features: np.ndarray
    action: ActionPrimitive
    action_index: int
    legal_kinds: tuple
    log_prob_old: float
    global_features: np.ndarray
    # replay handle: state and stream counters just before this turn
    snapshot: Optional[EpisodeState] = field(default=None, repr=False, compare=False)
    counters: Optional[dict] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.log_prob_old > 0:
            raise ValueError("log_prob_old must be <= 0")
        if not self.legal_kinds:
            raise ValueError("legal set must be non-empty")

    @property
    def legal_set_size(self) -> int:
        return len(self.legal_kinds)

    def to_dict(self) -> dict:
        return {
            "turn": self.turn,
            "role": self.role,
            "features": self.features.tolist(),
            "action": self.action.to_dict(),
            "action_index": self.action_index,
            "legal_kinds": list(self.legal_kinds),
            "log_prob_old": self.log_prob_old,
            "global_features": self.global_features.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Transition":
        return cls(
            turn=int(d["turn"]),
            role=d["role"],
            features=np.asarray(d["features"], dtype=np.float64),
            action=ActionPrimitive.from_dict(d["action"]),
            action_index=int(d["action_index"]),
            legal_kinds=tuple(d["legal_kinds"]),
            log_prob_old=float(d["log_prob_old"]),
            global_features=np.asarray(d["global_features"], dtype=np.float64),
        )


@dataclass(frozen=True)
class EpisodeOutcome:
    """Terminal facts needed to score an episode without its state."""

    quality: QualityBreakdown
    quality_overall: float
    quality_fragments: tuple
    ticks_elapsed: int
    tokens: int
    turns: int
    terminal: str
    # (turn, role) blamed for the style shortfall, writing only
    style_drift: Optional[tuple]
    style_units: int

    def to_dict(self) -> dict:
        return {
            "quality": self.quality.to_dict(),
            "quality_overall": self.quality_overall,
            "quality_fragments": [list(f) for f in self.quality_fragments],
            "ticks_elapsed": self.ticks_elapsed,
            "tokens": self.tokens,
            "turns": self.turns,
            "terminal": self.terminal,
            "style_drift": list(self.style_drift) if self.style_drift is not None else None,
            "style_units": self.style_units,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeOutcome":
        return cls(
            quality=QualityBreakdown(**d["quality"]),
            quality_overall=float(d["quality_overall"]),
            quality_fragments=tuple(tuple(f) for f in d["quality_fragments"]),
            ticks_elapsed=int(d["ticks_elapsed"]),
            tokens=int(d["tokens"]),
            turns=int(d["turns"]),
            terminal=d["terminal"],
            style_drift=tuple(d["style_drift"]) if d["style_drift"] is not None else None,
            style_units=int(d["style_units"]),
        )


@dataclass
class Trajectory:
    transitions: list
    logs: list
    meta: EpisodeMeta
    outcome: EpisodeOutcome
    reward_breakdown: object = None

    def __post_init__(self):
        if not self.logs:
            raise ValueError("trajectory must contain at least one turn")

    @property
    def family(self) -> TaskFamily:
        return TaskFamily(self.meta.task_family)

    @property
    def receipts(self) -> list:
        return [log.receipt for log in self.logs if log.receipt is not None]

    def to_dict(self) -> dict:
        return {
            "meta": self.meta.to_dict(),
            "outcome": self.outcome.to_dict(),
            "transitions": [t.to_dict() for t in self.transitions],
            "logs": [log.to_dict() for log in self.logs],
            "reward_breakdown": self.reward_breakdown.to_dict() if self.reward_breakdown is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        rb = d.get("reward_breakdown")
        return cls(
            transitions=[Transition.from_dict(t) for t in d["transitions"]],
            logs=[StepLog.from_dict(x) for x in d["logs"]],
            meta=EpisodeMeta.from_dict(d["meta"]),
            outcome=EpisodeOutcome.from_dict(d["outcome"]),
            reward_breakdown=RewardBreakdown.from_dict(rb) if rb is not None else None,
        )


def summarize(state: EpisodeState, logs: list) -> EpisodeOutcome:
    q = quality_score(state)
    fam = state.task.task_family
    drift = None
    units = 0
    if fam is TaskFamily.WRITING and q.style < state.config.style_threshold:
        units = 1
        off = [s for s in state.slots if s.drafted and not _style_ok(state, s)]
        off.sort(key=lambda s: s.order_drafted)
        if off and off[0].tag_setter is not None:
            drift = off[0].tag_setter
        else:
            drift = (logs[-1].turn, logs[-1].role) if logs else (0, state.role_order[0])
    return EpisodeOutcome(
        quality=q,
        quality_overall=q.overall(fam),
        quality_fragments=tuple(quality_attribution(state)),
        ticks_elapsed=state.ticks_elapsed,
        tokens=state.token_count,
        turns=state.turn,
        terminal=state.terminal.kind.value if state.terminal else "Running",
        style_drift=drift,
        style_units=units,
    )


def meta_for(state: EpisodeState) -> EpisodeMeta:
    t = state.task
    return EpisodeMeta(
        seed=state.seed,
        task_family=t.task_family.value,
        difficulty=t.difficulty.value,
        length_class=t.length_class,
        role_order=state.role_order,
        max_turns=t.max_turns,
        tick_budget=t.tick_budget,
        slot_count=t.slot_count,
    )


Chooser = Callable[[EpisodeState, str, list], tuple]


def policy_chooser(params: PolicyParams, streams: RoleStreams, greedy: bool = False) -> Chooser:
    """Chooser that samples from ``params`` with per-role keyed draws."""

    def choose(state: EpisodeState, role: str, legal: list):
        f = featurize_local(observe(state, role))
        dist = action_distribution(params, role, f, legal)
        if greedy:
            i = int(np.argmax(dist.probabilities))
            return i, float(np.log(dist.probabilities[i])), f
        u = streams.draw(role)
        action, logp = sample_action(dist, _Fixed(u))
        return dist.support.index(action), logp, f

    return choose


class _Fixed:
    __slots__ = ("u",)

    def __init__(self, u: float):
        self.u = u

    def random(self) -> float:
        return self.u


def play(
    state: EpisodeState,
    params: PolicyParams,
    streams: RoleStreams,
    record: bool = True,
    snapshots: bool = False,
    first_action: Optional[ActionPrimitive] = None,
) -> tuple[list, list]:
    """Run the policy on ``state`` in place until it terminates.

    With ``first_action`` the first turn plays that action instead of
    sampling, but still consumes the acting role's stream draw so later turns
    see the same draws as the original branch.
    """
    transitions = []
    logs = []
    choose = policy_chooser(params, streams)
    while state.terminal is None:
        role = state.floor
        legal = legal_actions(state, role)
        snap = state.clone() if snapshots else None
        counters = dict(streams.counters) if snapshots else None
        if first_action is not None:
            streams.draw(role)
            action, idx, logp, f = first_action, -1, 0.0, None
            first_action = None
        else:
            idx, logp, f = choose(state, role, legal)
            action = legal[idx]
        if record:
            transitions.append(
                Transition(
                    turn=state.turn,
                    role=role,
                    features=f,
                    action=action,
                    action_index=idx,
                    legal_kinds=tuple(a.kind for a in legal),
                    log_prob_old=logp,
                    global_features=featurize_global(state),
                    snapshot=snap,
                    counters=counters,
                )
            )
        _, log = step(state, role, action, legal)
        logs.append(log)
    return transitions, logs


def run_scripted(state: EpisodeState, choose: Callable) -> list:
    """Run a hand-written chooser (baselines) to termination; returns logs.

    ``choose(state, role, legal)`` returns the action to play.
    """
    logs = []
    while state.terminal is None:
        role = state.floor
        legal = legal_actions(state, role)
        _, log = step(state, role, choose(state, role, legal), legal)
        logs.append(log)
    return logs


def is_review(log: StepLog) -> bool:
    return log.verb in (Verb.LINT.value, Verb.TEST.value, Verb.PROPOSE_CHANGE.value)
