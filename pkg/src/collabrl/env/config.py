"""Environment configuration: tick costs, role skill profiles, budgets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from collabrl.env.types import ConfigurationError, Verb
from collabrl.guards import GuardConfig

ROLES = ("planner", "writer", "reviewer", "coder", "tester", "solo")
WRITING_TEAM = ("planner", "writer", "reviewer")
CODING_TEAM = ("planner", "coder", "tester")
SOLO_TEAM = ("solo",)
DRAFTING_ROLES = frozenset({"writer", "coder", "solo"})


@dataclass(frozen=True)
class RoleProfile:
    """Synthetic skill model for one role.

    ``draft_skill`` is the base success probability of a draft/implement
    attempt, ``adherence`` the chance a draft follows a frozen terminology
    tag, ``impl_skill`` the implementation quality behind hidden assertions,
    ``repair_skill`` the chance a repair fixes its target. ``tick_scale``
    multiplies wall-clock cost; ``budget_weight`` is the role's share of the
    episode message pool.
    """

    draft_skill: float = 0.75
    adherence: float = 0.9
    impl_skill: float = 0.7
    repair_skill: float = 0.85
    tick_scale: float = 1.0
    budget_weight: float = 1.0

    def __post_init__(self):
        for name in ("draft_skill", "adherence", "impl_skill", "repair_skill"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
        if self.tick_scale <= 0 or self.budget_weight <= 0:
            raise ConfigurationError("tick_scale and budget_weight must be positive")


def default_roles() -> dict:
    return {
        "planner": RoleProfile(),
        "writer": RoleProfile(budget_weight=3.0),
        "reviewer": RoleProfile(),
        "coder": RoleProfile(budget_weight=3.0),
        "tester": RoleProfile(),
        # One generalist carrying the whole workflow in a single context.
        "solo": RoleProfile(draft_skill=0.6, adherence=0.8, impl_skill=0.6, repair_skill=0.6, tick_scale=1.5),
    }


def default_tick_costs() -> dict:
    return {
        Verb.PLAN: 1,
        Verb.DRAFT_SECTION: 2,
        Verb.IMPLEMENT: 2,
        Verb.PROPOSE_CHANGE: 1,
        Verb.INTEGRATE: 1,
        Verb.LINT: 3,
        Verb.TEST: 3,
        Verb.REPAIR: 2,
        Verb.FINALIZE: 1,
        Verb.HANDOFF: 1,
    }


def default_message_tokens() -> dict:
    return {
        Verb.PLAN: 30,
        Verb.DRAFT_SECTION: 40,
        Verb.IMPLEMENT: 40,
        Verb.PROPOSE_CHANGE: 30,
        Verb.INTEGRATE: 10,
        Verb.LINT: 5,
        Verb.TEST: 5,
        Verb.REPAIR: 20,
        Verb.FINALIZE: 10,
        Verb.HANDOFF: 0,
    }


@dataclass(frozen=True)
class EnvConfig:
    tick_costs: dict = field(default_factory=default_tick_costs)
    message_tokens: dict = field(default_factory=default_message_tokens)
    roles: dict = field(default_factory=default_roles)
    guards: GuardConfig = field(default_factory=GuardConfig)
    # repairing a slot that was integrated before its first test
    big_repair_cost: int = 4
    plan_bonus: float = 0.2
    tag_count: int = 4
    rail_window: int = 4
    partial_credit: float = 0.5
    repair_margin_decay: float = 0.5
    budget_per_slot: int = 100
    budget_base: int = 120
    slice_cap: int = 8
    style_threshold: float = 0.75
    drift_easy: float = 0.0
    drift_medium: float = 0.05
    drift_hard: float = 0.1

    def __post_init__(self):
        if self.tag_count < 2:
            raise ConfigurationError("tag_count must be >= 2")
        if self.rail_window < 1:
            raise ConfigurationError("rail_window must be >= 1")
        if not 0.0 <= self.partial_credit <= 1.0:
            raise ConfigurationError("partial_credit must lie in [0, 1]")
        missing = [v for v in Verb if v not in self.tick_costs]
        if missing:
            raise ConfigurationError(f"tick_costs missing {missing}")
        if any(c < 0 for c in self.tick_costs.values()):
            raise ConfigurationError("tick costs must be non-negative")

    def profile(self, role: str) -> RoleProfile:
        try:
            return self.roles[role]
        except KeyError:
            raise ConfigurationError(f"no profile for role {role!r}") from None

    def drift(self, difficulty) -> float:
        return {"easy": self.drift_easy, "medium": self.drift_medium, "hard": self.drift_hard}[difficulty.value]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tick_costs"] = {k.value: v for k, v in self.tick_costs.items()}
        d["message_tokens"] = {k.value: v for k, v in self.message_tokens.items()}
        return d
