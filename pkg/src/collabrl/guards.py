"""Runtime safeguards: handoff clock, message budgets, safety filter, coach."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional

from collabrl.env.types import ActionPrimitive, StepLog, Tool, Verb


@dataclass(frozen=True)
class GuardConfig:
    nudge_after: int = 3
    force_after: int = 5
    coach_window: int = 6
    coach_repeats: int = 3
    coach_cooldown: int = 3

    def __post_init__(self):
        from collabrl.env.types import ConfigurationError

        if not 0 < self.nudge_after < self.force_after:
            raise ConfigurationError("need 0 < nudge_after < force_after")
        if self.coach_repeats < 2 or self.coach_window < self.coach_repeats:
            raise ConfigurationError("need 2 <= coach_repeats <= coach_window")
        if self.coach_cooldown < 1:
            raise ConfigurationError("coach_cooldown must be >= 1")


class ClockSignal(str, enum.Enum):
    NONE = "none"
    NUDGE = "nudge"
    FORCED = "forced_handoff"


class BudgetDecision(str, enum.Enum):
    ALLOW = "allow"
    TRUNCATE = "truncate"
    DENY = "deny"


@dataclass
class BudgetState:
    ticks_remaining: int
    message_tokens_remaining: dict
    turns_remaining: int

    def clone(self) -> "BudgetState":
        return BudgetState(self.ticks_remaining, dict(self.message_tokens_remaining), self.turns_remaining)

    def to_dict(self) -> dict:
        return {
            "ticks_remaining": self.ticks_remaining,
            "message_tokens_remaining": dict(sorted(self.message_tokens_remaining.items())),
            "turns_remaining": self.turns_remaining,
        }


@dataclass(frozen=True)
class SafetyVerdict:
    allowed: bool
    reason: str = "ok"

    def __post_init__(self):
        if self.allowed != (self.reason == "ok"):
            raise ValueError("reason must be 'ok' exactly when the action is allowed")


@dataclass(frozen=True)
class Intervention:
    role: str
    verb: str
    target: Optional[int]
    until_turn: int


@dataclass
class CoachState:
    """Sliding window of recent turns plus active suppressions.

    Window entries are ``(role, verb, target, artifact_delta)`` tuples.
    ``suppressed`` maps a (role, verb, target) triple to the first turn at
    which it becomes legal again.
    """

    window_size: int = 6
    window: deque = field(default_factory=deque)
    interventions_issued: int = 0
    suppressed: dict = field(default_factory=dict)

    def clone(self) -> "CoachState":
        return CoachState(self.window_size, deque(self.window), self.interventions_issued, dict(self.suppressed))

    def record(self, log: StepLog) -> None:
        self.window.append((log.role, log.verb, log.target_slot, log.artifact_delta))
        while len(self.window) > self.window_size:
            self.window.popleft()

    def is_suppressed(self, role: str, verb: str, target: Optional[int], turn: int) -> bool:
        until = self.suppressed.get((role, verb, target))
        return until is not None and turn < until


def consecutive_turns(state, role: str) -> int:
    """How many consecutive turns ``role`` would hold after taking the next one."""
    if state.last_actor == role:
        return state.consecutive + 1
    return 1


def tick_handoff_clock(state, role: str, config: GuardConfig) -> ClockSignal:
    """Classify the role's upcoming turn against the handoff thresholds.

    Single-role teams have nobody to pass work to, so the clock never fires.
    """
    if len(state.team) < 2:
        return ClockSignal.NONE
    n = consecutive_turns(state, role)
    if n >= config.force_after:
        return ClockSignal.FORCED
    if n >= config.nudge_after:
        return ClockSignal.NUDGE
    return ClockSignal.NONE


def check_message_budget(budget: BudgetState, role: str, action: ActionPrimitive) -> tuple[BudgetDecision, int]:
    """Return the decision and the number of tokens that may be spent."""
    remaining = budget.message_tokens_remaining.get(role, 0)
    payload = action.tokens
    if payload <= remaining:
        return BudgetDecision.ALLOW, payload
    if remaining > 0:
        return BudgetDecision.TRUNCATE, remaining
    return BudgetDecision.DENY, 0


def spend_tokens(budget: BudgetState, role: str, tokens: int) -> None:
    left = budget.message_tokens_remaining.get(role, 0)
    if tokens > left:
        raise ValueError("token spend exceeds remaining budget")
    budget.message_tokens_remaining[role] = left - tokens


def safety_screen(action: ActionPrimitive, state) -> SafetyVerdict:
    if action.red_flag:
        return SafetyVerdict(False, "red_flag_prompt")
    if action.verb in (Verb.LINT, Verb.TEST) and action.target_slot is not None:
        slot = action.target_slot
        if 0 <= slot < state.task.slot_count and state.task.hidden_target[slot].unsafe:
            return SafetyVerdict(False, "unsafe_tool_arg")
    return SafetyVerdict(True, "ok")


def coach_intervene(
    coach: CoachState, recent: Iterable[tuple], config: GuardConfig, turn: int
) -> Optional[Intervention]:
    """Detect a no-progress loop in the window of recent turns.

    ``recent`` holds ``(role, verb, target, artifact_delta)`` tuples; only the
    last ``coach_window`` are considered. Pure: it does not touch ``coach``.
    """
    window = list(recent)[-config.coach_window :]
    counts: dict = {}
    for role, verb, target, delta in window:
        if delta or verb == Verb.HANDOFF.value:
            continue
        key = (role, verb, target)
        counts[key] = counts.get(key, 0) + 1
    for key in sorted(counts, key=lambda k: (-counts[k], str(k))):
        if counts[key] >= config.coach_repeats:
            role, verb, target = key
            return Intervention(role, verb, target, turn + config.coach_cooldown)
    return None


def apply_intervention(coach: CoachState, intervention: Intervention) -> None:
    coach.suppressed[(intervention.role, intervention.verb, intervention.target)] = intervention.until_turn
    coach.interventions_issued += 1
    coach.window.clear()


def is_tool(verb: Verb) -> bool:
    return verb in (Verb.LINT, Verb.TEST)


TOOL_OF = {Verb.LINT: Tool.LINT, Verb.TEST: Tool.TEST}
