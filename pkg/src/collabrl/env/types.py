"""Domain types for the collaborative workflow environment."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional


class ConfigurationError(ValueError):
    """Raised for invalid task specs, teams, or configuration values."""


class TerminalStateError(RuntimeError):
    """Raised when an operation requires a non-terminal episode."""


class UnknownRoleError(KeyError):
    pass


class TaskFamily(str, enum.Enum):
    WRITING = "writing"
    CODING = "coding"


class Difficulty(str, enum.Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"


class Verb(str, enum.Enum):
    PLAN = "Plan"
    DRAFT_SECTION = "DraftSection"
    IMPLEMENT = "Implement"
    PROPOSE_CHANGE = "ProposeChange"
    INTEGRATE = "Integrate"
    LINT = "Lint"
    TEST = "Test"
    REPAIR = "Repair"
    FINALIZE = "Finalize"
    HANDOFF = "Handoff"


# Policy heads score action kinds. Handoff splits in two: passing the floor to
# a teammate and handing the episode to a human (terminal).
KINDS: tuple[str, ...] = (
    "Plan",
    "DraftSection",
    "Implement",
    "ProposeChange",
    "Integrate",
    "Lint",
    "Test",
    "Repair",
    "Finalize",
    "HandoffRole",
    "HandoffHuman",
)
KIND_INDEX = {k: i for i, k in enumerate(KINDS)}


class SlotStatus(str, enum.Enum):
    EMPTY = "Empty"
    DRAFTED = "Drafted"
    INTEGRATED = "Integrated"
    PASSING = "Passing"
    FAILING = "Failing"


STATUS_ORDER = tuple(SlotStatus)


class DecisionKind(str, enum.Enum):
    SCOPE_FROZEN = "ScopeFrozen"
    TERM_FROZEN = "TermFrozen"
    CHANGE_ACCEPTED = "ChangeAccepted"
    BLOCKER_RAISED = "BlockerRaised"


class TerminationKind(str, enum.Enum):
    FINALIZED = "Finalized"
    HANDOFF = "Handoff"
    TIMEOUT = "Timeout"


class Tool(str, enum.Enum):
    LINT = "Lint"
    TEST = "Test"


@dataclass(frozen=True)
class TerminationReason:
    kind: TerminationKind


@dataclass(frozen=True)
class SlotTarget:
    """Hidden per-slot requirements.

    ``assertion_difficulties`` is empty for writing slots. ``unsafe`` is the
    synthetic marker the safety filter screens tool calls against.
    """

    order_index: int
    term_tag: int
    assertion_difficulties: tuple[float, ...] = ()
    unsafe: bool = False


@dataclass(frozen=True)
class TaskSpec:
    task_family: TaskFamily
    difficulty: Difficulty
    slot_count: int
    hidden_target: tuple[SlotTarget, ...]
    retrieval_pool: frozenset = frozenset()
    brief_text_id: str = ""
    max_turns: int = 30
    tick_budget: int = 90
    length_class: str = "short"

    def __post_init__(self):
        if self.slot_count < 1:
            raise ConfigurationError("slot_count must be >= 1")
        if len(self.hidden_target) != self.slot_count:
            raise ConfigurationError("hidden_target must have one entry per slot")
        orders = sorted(t.order_index for t in self.hidden_target)
        if orders != list(range(self.slot_count)):
            raise ConfigurationError("hidden order indices must be a permutation of 0..slot_count-1")
        if self.tick_budget <= 0:
            raise ConfigurationError("tick_budget must be positive")
        if self.max_turns <= 0:
            raise ConfigurationError("max_turns must be positive")
        for t in self.hidden_target:
            for d in t.assertion_difficulties:
                if not 0.0 <= d <= 1.0:
                    raise ConfigurationError("assertion difficulties must lie in [0, 1]")
        if self.length_class not in ("short", "long"):
            raise ConfigurationError(f"unknown length class {self.length_class!r}")

    @property
    def planned_order(self) -> tuple[int, ...]:
        """Slot indices sorted by their required position."""
        return tuple(sorted(range(self.slot_count), key=lambda i: self.hidden_target[i].order_index))

    @property
    def term_tag(self) -> int:
        return self.hidden_target[0].term_tag

    @property
    def is_coding(self) -> bool:
        return self.task_family is TaskFamily.CODING


@dataclass(frozen=True)
class ActionPrimitive:
    """One structured action.

    Payload fields are flat: ``ordering``/``term_tag`` for Plan, ``assertion``
    for Repair, ``tokens`` for every message-bearing verb, ``to_role`` for a
    floor-passing Handoff (``None`` hands the episode to a human).
    """

    verb: Verb
    target_slot: Optional[int] = None
    ordering: Optional[tuple[int, ...]] = None
    term_tag: Optional[int] = None
    assertion: Optional[str] = None
    tokens: int = 0
    to_role: Optional[str] = None
    red_flag: bool = False

    def __post_init__(self):
        if not isinstance(self.verb, Verb):
            raise ConfigurationError(f"unknown verb {self.verb!r}")
        if self.verb is Verb.REPAIR and not self.assertion:
            raise ConfigurationError("Repair must name a failing assertion")
        if self.verb is Verb.PLAN and self.ordering is None:
            raise ConfigurationError("Plan must carry a full slot ordering")
        if self.tokens < 0:
            raise ConfigurationError("tokens must be non-negative")

    @cached_property
    def kind(self) -> str:
        if self.verb is Verb.HANDOFF:
            return "HandoffRole" if self.to_role else "HandoffHuman"
        return self.verb.value

    def to_dict(self) -> dict:
        return {
            "verb": self.verb.value,
            "target_slot": self.target_slot,
            "ordering": list(self.ordering) if self.ordering is not None else None,
            "term_tag": self.term_tag,
            "assertion": self.assertion,
            "tokens": self.tokens,
            "to_role": self.to_role,
            "red_flag": self.red_flag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActionPrimitive":
        return cls(
            verb=Verb(d["verb"]),
            target_slot=d.get("target_slot"),
            ordering=tuple(d["ordering"]) if d.get("ordering") is not None else None,
            term_tag=d.get("term_tag"),
            assertion=d.get("assertion"),
            tokens=int(d.get("tokens", 0)),
            to_role=d.get("to_role"),
            red_flag=bool(d.get("red_flag", False)),
        )


@dataclass
class SlotState:
    """Ground-truth state of one artifact slot.

    ``assertion_margins`` holds one entry per hidden assertion: ``0.0`` is a
    pass, anything positive is a failure with that margin. The attribution
    fields record which (turn, role) last set each quality-relevant fact so
    credit can be audited later.
    """

    status: SlotStatus = SlotStatus.EMPTY
    terminology_tag: Optional[int] = None
    order_drafted: Optional[int] = None
    assertion_margins: list = field(default_factory=list)
    owner: str = ""
    after_scope: bool = False
    after_term: bool = False
    attempts: int = 0
    tested: bool = False
    stale: bool = False
    integrated_before_test: bool = False
    lint_fresh: bool = False
    lint_violations: tuple = ()
    open_failures: list = field(default_factory=list)
    drafter: Optional[tuple] = None
    tag_setter: Optional[tuple] = None
    assertion_setters: list = field(default_factory=list)

    def clone(self) -> "SlotState":
        s = SlotState.__new__(SlotState)
        s.__dict__.update(self.__dict__)
        s.assertion_margins = list(self.assertion_margins)
        s.open_failures = list(self.open_failures)
        s.assertion_setters = list(self.assertion_setters)
        return s

    @property
    def drafted(self) -> bool:
        return self.status is not SlotStatus.EMPTY

    def view(self) -> dict:
        return {
            "status": self.status.value,
            "terminology_tag": self.terminology_tag,
            "order_drafted": self.order_drafted,
            "tested": self.tested,
            "open_failures": len(self.open_failures),
            "lint_violations": list(self.lint_violations),
        }


@dataclass(frozen=True)
class DecisionRecord:
    kind: DecisionKind
    turn: int
    payload: tuple = ()


class SummaryRail:
    """Append-only record of decisions and blockers."""

    __slots__ = ("_decisions",)

    def __init__(self, decisions: tuple = ()):
        self._decisions = list(decisions)

    def append(self, record: DecisionRecord) -> None:
        if not isinstance(record, DecisionRecord):
            raise TypeError("rail accepts DecisionRecord entries only")
        self._decisions.append(record)

    @property
    def decisions(self) -> tuple:
        return tuple(self._decisions)

    def last(self, n: int) -> tuple:
        return tuple(self._decisions[-n:]) if n > 0 else ()

    def has(self, kind: DecisionKind) -> bool:
        return any(d.kind is kind for d in self._decisions)

    def find(self, kind: DecisionKind) -> Optional[DecisionRecord]:
        for d in self._decisions:
            if d.kind is kind:
                return d
        return None

    def __len__(self):
        return len(self._decisions)

    def clone(self) -> "SummaryRail":
        return SummaryRail(tuple(self._decisions))


@dataclass
class RoleMemory:
    """Private scratch space. Never exposed to other roles."""

    role: str
    checklist: set = field(default_factory=set)
    notes: list = field(default_factory=list)
    notes_size: int = 0

    def clone(self) -> "RoleMemory":
        return RoleMemory(self.role, set(self.checklist), list(self.notes), self.notes_size)


@dataclass(frozen=True)
class ToolReceipt:
    """Immutable tool outcome.

    ``outcome`` is a tuple of violation codes for Lint and a tuple of
    per-assertion margins (``0.0`` = pass) for Test.
    """

    tool: Tool
    slot: int
    outcome: tuple
    tick_cost: int
    turn_issued: int

    @property
    def violation_count(self) -> int:
        return len(self.outcome) if self.tool is Tool.LINT else 0

    @property
    def failing(self) -> tuple:
        if self.tool is Tool.LINT:
            return tuple(self.outcome)
        return tuple(f"a{j}" for j, m in enumerate(self.outcome) if m > 0.0)

    def to_dict(self) -> dict:
        return {
            "tool": self.tool.value,
            "slot": self.slot,
            "outcome": list(self.outcome),
            "tick_cost": self.tick_cost,
            "turn_issued": self.turn_issued,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToolReceipt":
        return cls(Tool(d["tool"]), int(d["slot"]), tuple(d["outcome"]), int(d["tick_cost"]), int(d["turn_issued"]))


@dataclass(frozen=True)
class QualityBreakdown:
    structure: float = 0.0
    style: float = 0.0
    pass_fraction: float = 0.0

    def to_dict(self) -> dict:
        return {"structure": self.structure, "style": self.style, "pass_fraction": self.pass_fraction}

    def overall(self, family: TaskFamily) -> float:
        if family is TaskFamily.CODING:
            return self.pass_fraction
        return 0.5 * (self.structure + self.style)


@dataclass(frozen=True)
class Observation:
    """Bounded local view for one role.

    ``artifact_slice`` holds ``(slot, status, tag, order_drafted, tested,
    open_failures, lint_violations)`` tuples for the role's own slots only.
    ``histogram`` counts slots per status in ``STATUS_ORDER``; the remaining
    counters summarise public tool evidence. ``own_off_style`` counts the
    role's own drafts whose terminology differs from the frozen tag, which
    the author can see by comparing its text against the rail.
    """

    role: str
    brief_digest: tuple
    artifact_slice: tuple
    histogram: tuple
    rail_digest: tuple
    own_memory: RoleMemory
    remaining_budget: tuple
    nudge: bool
    scope_frozen: bool
    term_frozen: bool
    failing_receipts: int
    retest_pending: int
    unlinted: int
    lint_defects: int
    own_empty: int
    finalize_ready: bool
    turn: int
    owns_slots: bool
    own_off_style: int = 0


@dataclass(frozen=True)
class StepLog:
    """Raw facts about one turn, enough to recompute every reward component.

    ``violations`` lists compliance/coordination event codes raised on this
    turn. ``artifact_delta`` is false when the turn left slots and rail
    unchanged and produced no new tool evidence.
    """

    turn: int
    role: str
    verb: str
    kind: str
    target_slot: Optional[int]
    ticks: int
    tokens: int
    receipt: Optional[ToolReceipt] = None
    rail_appends: tuple = ()
    violations: tuple = ()
    over_budget_tokens: int = 0
    redundant: bool = False
    conflict: bool = False
    artifact_delta: bool = True
    budget_decision: str = "allow"
    verdict: str = "ok"
    clock: str = "none"
    intervention: Optional[dict] = None
    terminal: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "turn": self.turn,
            "role": self.role,
            "verb": self.verb,
            "kind": self.kind,
            "target_slot": self.target_slot,
            "receipt": self.receipt.to_dict() if self.receipt else None,
            "ticks": self.ticks,
            "tokens": self.tokens,
            "rail_appends": list(self.rail_appends),
            "violations": list(self.violations),
            "over_budget_tokens": self.over_budget_tokens,
            "redundant": self.redundant,
            "conflict": self.conflict,
            "artifact_delta": self.artifact_delta,
            "budget_decision": self.budget_decision,
            "verdict": self.verdict,
            "clock": self.clock,
            "intervention": self.intervention,
            "terminal": self.terminal,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StepLog":
        return cls(
            turn=int(d["turn"]),
            role=d["role"],
            verb=d["verb"],
            kind=d["kind"],
            target_slot=d["target_slot"],
            ticks=int(d["ticks"]),
            tokens=int(d["tokens"]),
            receipt=ToolReceipt.from_dict(d["receipt"]) if d.get("receipt") else None,
            rail_appends=tuple(d.get("rail_appends", ())),
            violations=tuple(d.get("violations", ())),
            over_budget_tokens=int(d.get("over_budget_tokens", 0)),
            redundant=bool(d.get("redundant", False)),
            conflict=bool(d.get("conflict", False)),
            artifact_delta=bool(d.get("artifact_delta", True)),
            budget_decision=d.get("budget_decision", "allow"),
            verdict=d.get("verdict", "ok"),
            clock=d.get("clock", "none"),
            intervention=d.get("intervention"),
            terminal=d.get("terminal"),
        )
