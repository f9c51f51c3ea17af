"""Dec-POMDP workflow environment: episodes, observations, legal actions, steps.

Only the role holding the floor may act. A turn consumes one action; the
floor moves when the actor hands off to a teammate or when the handoff clock
forces it. All stochastic outcomes are keyed draws on the episode seed, so an
identical (task, team, seed, action sequence) reproduces the same state.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Optional

from collabrl import guards
from collabrl.env.config import DRAFTING_ROLES, EnvConfig
from collabrl.env.types import (
    STATUS_ORDER,
    ActionPrimitive,
    ConfigurationError,
    DecisionKind,
    DecisionRecord,
    Observation,
    QualityBreakdown,
    RoleMemory,
    SlotState,
    SlotStatus,
    StepLog,
    SummaryRail,
    TaskSpec,
    TerminalStateError,
    TerminationKind,
    TerminationReason,
    Tool,
    ToolReceipt,
    UnknownRoleError,
    Verb,
)
from collabrl.rng import keyed_uniform, mix

DEFAULT_CONFIG = EnvConfig()

DIFFICULTY_LEVEL = {"easy": 0.0, "medium": 0.5, "hard": 1.0}
_STATUS_POS = {st: k for k, st in enumerate(STATUS_ORDER)}


class PreconditionError(ValueError):
    """A tool was invoked on a slot that cannot take it."""


class EpisodeState:
    """Full ground truth of one episode. Mutated only through ``step``."""

    __slots__ = (
        "task",
        "team",
        "role_order",
        "seed",
        "config",
        "slots",
        "rail",
        "memories",
        "receipts",
        "turn",
        "ticks_elapsed",
        "token_count",
        "budgets",
        "initial_tokens",
        "terminal",
        "floor",
        "last_actor",
        "consecutive",
        "coach",
        "draft_counter",
        "counters",
        # mirrors of the ScopeFrozen / TermFrozen rail payloads
        "scope",
        "frozen_tag",
    )

    def clone(self) -> "EpisodeState":
        s = EpisodeState.__new__(EpisodeState)
        s.task = self.task
        s.team = self.team
        s.role_order = self.role_order
        s.seed = self.seed
        s.config = self.config
        s.slots = [x.clone() for x in self.slots]
        s.rail = self.rail.clone()
        s.memories = {r: m.clone() for r, m in self.memories.items()}
        s.receipts = list(self.receipts)
        s.turn = self.turn
        s.ticks_elapsed = self.ticks_elapsed
        s.token_count = self.token_count
        s.budgets = self.budgets.clone()
        s.initial_tokens = self.initial_tokens
        s.terminal = self.terminal
        s.floor = self.floor
        s.last_actor = self.last_actor
        s.consecutive = self.consecutive
        s.coach = self.coach.clone()
        s.draft_counter = self.draft_counter
        s.counters = dict(self.counters)
        s.scope = self.scope
        s.frozen_tag = self.frozen_tag
        return s

    def fingerprint(self) -> tuple:
        """Hashable structural summary used for determinism checks."""
        return (
            self.turn,
            self.ticks_elapsed,
            self.token_count,
            self.floor,
            self.last_actor,
            self.consecutive,
            self.terminal.kind.value if self.terminal else None,
            tuple(
                (
                    s.status.value,
                    s.terminology_tag,
                    s.order_drafted,
                    tuple(s.assertion_margins),
                    tuple(s.open_failures),
                    s.tested,
                    s.stale,
                    s.lint_violations,
                )
                for s in self.slots
            ),
            self.rail.decisions,
            tuple(self.receipts),
            tuple(sorted(self.budgets.message_tokens_remaining.items())),
            tuple(sorted((r, m.notes_size, tuple(sorted(m.checklist))) for r, m in self.memories.items())),
            tuple(sorted(self.coach.suppressed.items(), key=str)),
            tuple(sorted(self.counters.items())),
        )


def _assign_owners(team: tuple, slot_count: int) -> list:
    drafters = [r for r in team if r in DRAFTING_ROLES] or list(team)
    return [drafters[i % len(drafters)] for i in range(slot_count)]


def new_episode(
    task: TaskSpec,
    team,
    seed: int,
    config: EnvConfig = DEFAULT_CONFIG,
    role_order=None,
) -> EpisodeState:
    """Fresh episode. ``role_order`` fixes who holds the floor first."""
    team = tuple(team)
    if not team:
        raise ConfigurationError("team must contain at least one role")
    if len(set(team)) != len(team):
        raise ConfigurationError("team roles must be distinct")
    for r in team:
        config.profile(r)
    role_order = tuple(role_order) if role_order is not None else team
    if sorted(role_order) != sorted(team):
        raise ConfigurationError("role_order must be a permutation of the team")

    s = EpisodeState.__new__(EpisodeState)
    s.task = task
    s.team = team
    s.role_order = role_order
    s.seed = int(seed)
    s.config = config
    owners = _assign_owners(team, task.slot_count)
    s.slots = [SlotState(owner=o) for o in owners]
    s.rail = SummaryRail()
    s.memories = {r: RoleMemory(r) for r in team}
    s.receipts = []
    s.turn = 0
    s.ticks_elapsed = 0
    s.token_count = 0
    pool = config.budget_per_slot * task.slot_count + config.budget_base
    weights = {r: config.profile(r).budget_weight for r in team}
    total_w = sum(weights.values())
    tokens = {r: int(pool * weights[r] / total_w) for r in team}
    s.initial_tokens = dict(tokens)
    s.budgets = guards.BudgetState(task.tick_budget, tokens, task.max_turns)
    s.terminal = None
    s.floor = role_order[0]
    s.last_actor = None
    s.consecutive = 0
    s.coach = guards.CoachState(window_size=config.guards.coach_window)
    s.draft_counter = 0
    s.scope = None
    s.frozen_tag = None
    s.counters = {
        "redundant": 0,
        "conflicts": 0,
        "violations": 0,
        "over_budget": 0,
        "interventions": 0,
        "plans": 0,
    }
    _refresh_checklists(s)
    return s


# ---------------------------------------------------------------- queries


def _require_role(state: EpisodeState, role: str) -> None:
    if role not in state.memories:
        raise UnknownRoleError(role)


def _require_live(state: EpisodeState) -> None:
    if state.terminal is not None:
        raise TerminalStateError(f"episode already terminated ({state.terminal.kind.value})")


def slot_in_order(state: EpisodeState, i: int) -> bool:
    """Drafted after scope was frozen, and after every slot planned before it."""
    s = state.slots[i]
    if not s.drafted or not s.after_scope:
        return False
    scope = state.scope
    if scope is None:
        return False
    for j in scope:
        if j == i:
            return True
        p = state.slots[j]
        if not p.drafted or p.order_drafted is None or p.order_drafted > s.order_drafted:
            return False
    return True


def _style_ok(state: EpisodeState, s: SlotState) -> bool:
    tag = state.frozen_tag
    return tag is not None and s.after_term and s.terminology_tag == tag


def _plan_order(state: EpisodeState) -> tuple:
    return state.scope or tuple(range(state.task.slot_count))


def _finalize_ready(state: EpisodeState) -> bool:
    if state.task.is_coding:
        targets = state.task.hidden_target
        return all(s.tested for i, s in enumerate(state.slots) if not targets[i].unsafe)
    return all(s.status is SlotStatus.INTEGRATED for s in state.slots)


def _needs_test(state: EpisodeState, i: int) -> bool:
    s = state.slots[i]
    return s.drafted and not state.task.hidden_target[i].unsafe and (not s.tested or s.stale)


def _has_productive(state: EpisodeState, role: str) -> bool:
    if state.scope is None:
        return True
    for i, s in enumerate(state.slots):
        if s.owner == role and (s.status is SlotStatus.EMPTY or s.open_failures):
            return True
        if s.status is SlotStatus.DRAFTED and not state.task.is_coding:
            return True
        if s.drafted and not s.lint_fresh and not state.task.is_coding:
            return True
        if state.task.is_coding and _needs_test(state, i):
            return True
    return _finalize_ready(state)


def handoff_target(state: EpisodeState, role: str) -> Optional[str]:
    """Next teammate in turn order with productive work, else simply the next one."""
    order = state.role_order
    if len(order) < 2:
        return None
    k = order.index(role) if role in order else -1
    candidates = [order[(k + d) % len(order)] for d in range(1, len(order))]
    for r in candidates:
        if _has_productive(state, r):
            return r
    return candidates[0]


@lru_cache(maxsize=4096)
def _template(verb, target_slot=None, ordering=None, term_tag=None, assertion=None, tokens=0, to_role=None):
    # templates are immutable, so identical ones are shared across states
    return ActionPrimitive(verb, target_slot, ordering, term_tag, assertion, tokens, to_role)


def legal_actions(state: EpisodeState, role: str) -> list:
    """Action templates the role may take now, one per action kind.

    Targets are resolved deterministically (next slot in the planned order,
    first open failure, ...), so a policy only has to pick a kind.
    """
    _require_live(state)
    _require_role(state, role)
    cfg = state.config
    tok = cfg.message_tokens
    task = state.task
    order = _plan_order(state)
    slots = state.slots
    out = []

    out.append(_template(Verb.PLAN, ordering=task.planned_order, term_tag=task.term_tag, tokens=tok[Verb.PLAN]))

    draft_verb = Verb.IMPLEMENT if task.is_coding else Verb.DRAFT_SECTION
    own_empty = [i for i in order if slots[i].owner == role and slots[i].status is SlotStatus.EMPTY]
    if own_empty:
        out.append(_template(draft_verb, target_slot=own_empty[0], tokens=tok[draft_verb]))

    drafted = [i for i in order if slots[i].drafted]
    if drafted:
        defects = [i for i in drafted if "order" in slots[i].lint_violations and slots[i].lint_fresh]
        tgt = defects[0] if defects else drafted[0]
        out.append(_template(Verb.PROPOSE_CHANGE, target_slot=tgt, tokens=tok[Verb.PROPOSE_CHANGE]))

    integrable = [i for i in order if slots[i].status is SlotStatus.DRAFTED]
    if integrable:
        out.append(_template(Verb.INTEGRATE, target_slot=integrable[0], tokens=tok[Verb.INTEGRATE]))

    if drafted:
        unlinted = [i for i in drafted if not slots[i].lint_fresh]
        tag = state.frozen_tag
        # an author checks its own off-style drafts first
        mine = [i for i in unlinted if slots[i].owner == role and tag is not None and slots[i].terminology_tag != tag]
        out.append(_template(Verb.LINT, target_slot=(mine or unlinted or drafted)[0], tokens=tok[Verb.LINT]))
        if task.is_coding:
            pending = [i for i in drafted if _needs_test(state, i)]
            safe = [i for i in drafted if not task.hidden_target[i].unsafe]
            tgt = (pending or safe or drafted)[0]
            out.append(_template(Verb.TEST, target_slot=tgt, tokens=tok[Verb.TEST]))

    for i in order:
        s = slots[i]
        if s.owner == role and s.open_failures:
            out.append(_template(Verb.REPAIR, target_slot=i, assertion=s.open_failures[0], tokens=tok[Verb.REPAIR]))
            break

    if _finalize_ready(state):
        out.append(_template(Verb.FINALIZE, tokens=tok[Verb.FINALIZE]))

    target = handoff_target(state, role)
    if target is not None:
        out.append(_template(Verb.HANDOFF, to_role=target, tokens=tok[Verb.HANDOFF]))
    out.append(_template(Verb.HANDOFF, tokens=tok[Verb.HANDOFF]))

    signal = guards.tick_handoff_clock(state, role, cfg.guards)
    if signal is guards.ClockSignal.FORCED:
        out = [a for a in out if a.kind in ("HandoffRole", "Integrate")]
    if state.coach.suppressed:
        out = [
            a
            for a in out
            if a.verb is Verb.HANDOFF
            or not state.coach.is_suppressed(role, a.verb.value, a.target_slot, state.turn)
        ]
    return out


def observe(state: EpisodeState, role: str) -> Observation:
    _require_live(state)
    _require_role(state, role)
    cfg = state.config
    task = state.task
    slots = state.slots
    coding = task.is_coding
    own = []
    hist = [0] * len(STATUS_ORDER)
    failing = retest = unlinted = defects = own_empty = off_style = 0
    tag = state.frozen_tag
    for i, s in enumerate(slots):
        hist[_STATUS_POS[s.status]] += 1
        drafted = s.status is not SlotStatus.EMPTY
        if s.owner == role:
            if len(own) < cfg.slice_cap:
                own.append((i, s.status.value, s.terminology_tag, s.order_drafted, s.tested, len(s.open_failures), s.lint_violations))
            failing += len(s.open_failures)
            own_empty += not drafted
            off_style += drafted and tag is not None and s.terminology_tag != tag
        if drafted:
            unlinted += not s.lint_fresh
            if coding and _needs_test(state, i):
                retest += 1
        if s.lint_fresh and "order" in s.lint_violations:
            defects += 1
    clock = guards.tick_handoff_clock(state, role, cfg.guards)
    return Observation(
        role=role,
        brief_digest=(
            1.0 if task.is_coding else 0.0,
            DIFFICULTY_LEVEL[task.difficulty.value],
            task.slot_count,
            task.max_turns,
            task.tick_budget,
        ),
        artifact_slice=tuple(own),
        histogram=tuple(hist),
        rail_digest=state.rail.last(cfg.rail_window),
        own_memory=state.memories[role].clone(),
        remaining_budget=(
            state.budgets.turns_remaining,
            state.budgets.ticks_remaining,
            state.budgets.message_tokens_remaining[role],
            state.initial_tokens[role],
        ),
        nudge=clock is not guards.ClockSignal.NONE,
        scope_frozen=state.scope is not None,
        term_frozen=state.frozen_tag is not None,
        failing_receipts=failing,
        retest_pending=retest,
        unlinted=unlinted,
        lint_defects=defects,
        own_empty=own_empty,
        finalize_ready=_finalize_ready(state),
        turn=state.turn,
        owns_slots=bool(own),
        own_off_style=off_style,
    )


def check_termination(state: EpisodeState) -> Optional[TerminationReason]:
    if state.terminal is not None:
        return state.terminal
    if state.turn >= state.task.max_turns or state.ticks_elapsed >= state.task.tick_budget:
        return TerminationReason(TerminationKind.TIMEOUT)
    return None


def quality_score(state: EpisodeState) -> QualityBreakdown:
    task = state.task
    n = task.slot_count
    if task.is_coding:
        total = 0
        credit = 0.0
        pc = state.config.partial_credit
        for i, s in enumerate(state.slots):
            k = len(task.hidden_target[i].assertion_difficulties)
            total += k
            if not s.drafted:
                continue
            for m in s.assertion_margins:
                credit += 1.0 if m == 0.0 else (1.0 - m) * pc
        return QualityBreakdown(pass_fraction=credit / total if total else 0.0)
    structure = sum(1 for i in range(n) if slot_in_order(state, i)) / n
    style = sum(1 for s in state.slots if s.drafted and _style_ok(state, s)) / n
    return QualityBreakdown(structure=structure, style=style)


def quality_attribution(state: EpisodeState) -> list:
    """Split the overall quality into ``(turn, role, delta, reason)`` pieces.

    Writing: each in-order slot credits its drafter and each on-style slot
    credits whoever last set its tag. Coding: each assertion credits whoever
    last changed it (implementation is progress, repairs are test evidence).
    The pieces sum to ``quality_score(...).overall``.
    """
    task = state.task
    n = task.slot_count
    out = []
    if task.is_coding:
        total = sum(len(t.assertion_difficulties) for t in task.hidden_target)
        if not total:
            return out
        pc = state.config.partial_credit
        for i, s in enumerate(state.slots):
            if not s.drafted:
                continue
            for j, m in enumerate(s.assertion_margins):
                c = 1.0 if m == 0.0 else (1.0 - m) * pc
                if c == 0.0:
                    continue
                turn, role = s.assertion_setters[j]
                reason = "progress" if s.drafter and turn == s.drafter[0] else "test_evidence"
                out.append((turn, role, c / total, reason))
        return out
    for i, s in enumerate(state.slots):
        if slot_in_order(state, i):
            out.append((s.drafter[0], s.drafter[1], 0.5 / n, "progress"))
        if s.drafted and _style_ok(state, s):
            out.append((s.tag_setter[0], s.tag_setter[1], 0.5 / n, "progress"))
    return out


# ---------------------------------------------------------------- effects


def run_tool(state: EpisodeState, tool: Tool, slot: int) -> ToolReceipt:
    """Invoke a deterministic tool on ``slot`` and append its receipt to ``state``."""
    task = state.task
    if not 0 <= slot < task.slot_count:
        raise PreconditionError(f"slot {slot} does not exist")
    s = state.slots[slot]
    base = state.config.tick_costs[Verb(tool.value)]
    cost = _scaled(state, state.floor, base)
    if tool is Tool.TEST:
        if not s.drafted:
            raise PreconditionError("Test requires a drafted slot")
        outcome = tuple(s.assertion_margins)
    else:
        codes = []
        if not _style_ok(state, s):
            codes.append("style")
        if s.drafted and not slot_in_order(state, slot):
            codes.append("order")
        outcome = tuple(codes)
    receipt = ToolReceipt(tool, slot, outcome, cost, state.turn)
    state.receipts.append(receipt)
    return receipt


def _scaled(state: EpisodeState, role: str, base: int) -> int:
    scale = state.config.profile(role).tick_scale
    if scale == 1.0:
        return base
    return int(-(-base * scale // 1))


def _drift_tag(state: EpisodeState, frozen: int, u: float) -> int:
    k = state.config.tag_count
    return (frozen + 1 + int(u * (k - 1))) % k


def _do_draft(state: EpisodeState, role: str, i: int) -> bool:
    cfg = state.config
    prof = cfg.profile(role)
    s = state.slots[i]
    s.attempts += 1
    scoped = state.scope is not None
    p = min(1.0, prof.draft_skill + (cfg.plan_bonus if scoped else 0.0))
    if keyed_uniform(state.seed, "draft", i, s.attempts) >= p:
        return False
    s.status = SlotStatus.DRAFTED
    s.order_drafted = state.draft_counter
    state.draft_counter += 1
    s.after_scope = scoped
    frozen = state.frozen_tag
    s.after_term = frozen is not None
    if frozen is not None:
        a = prof.adherence - cfg.drift(state.task.difficulty)
        if keyed_uniform(state.seed, "adhere", i, s.attempts) < a:
            s.terminology_tag = frozen
        else:
            s.terminology_tag = _drift_tag(state, frozen, keyed_uniform(state.seed, "drift", i, s.attempts))
    else:
        s.terminology_tag = int(keyed_uniform(state.seed, "tag", i, s.attempts) * cfg.tag_count)
    s.drafter = (state.turn, role)
    s.tag_setter = (state.turn, role)
    s.lint_fresh = False
    s.lint_violations = ()
    s.open_failures = []
    s.tested = False
    s.stale = False
    s.integrated_before_test = False
    if state.task.is_coding:
        q = min(1.0, prof.impl_skill + (cfg.plan_bonus if scoped else 0.0))
        margins = []
        for j, d in enumerate(state.task.hidden_target[i].assertion_difficulties):
            u = keyed_uniform(state.seed, "assert", i, j)
            if u < q ** (1.0 + d):
                margins.append(0.0)
            else:
                margins.append(max(0.05, 1.0 - q * (1.0 - d)))
        s.assertion_margins = margins
        s.assertion_setters = [(state.turn, role)] * len(margins)
    return True


def _do_repair(state: EpisodeState, role: str, i: int, assertion: str) -> None:
    cfg = state.config
    s = state.slots[i]
    s.attempts += 1
    s.open_failures.remove(assertion)
    ok = keyed_uniform(state.seed, "repair", i, assertion, s.attempts) < cfg.profile(role).repair_skill
    if assertion == "style":
        frozen = state.frozen_tag
        if ok and frozen is not None:
            s.terminology_tag = frozen
            s.after_term = True
            s.tag_setter = (state.turn, role)
        s.lint_fresh = False
        return
    j = int(assertion[1:])
    if ok:
        s.assertion_margins[j] = 0.0
    else:
        s.assertion_margins[j] = max(0.05, s.assertion_margins[j] * cfg.repair_margin_decay)
    s.assertion_setters[j] = (state.turn, role)
    s.stale = True


def _reset_slot(s: SlotState) -> None:
    s.status = SlotStatus.EMPTY
    s.terminology_tag = None
    s.order_drafted = None
    s.assertion_margins = []
    s.assertion_setters = []
    s.after_scope = False
    s.after_term = False
    s.tested = False
    s.stale = False
    s.integrated_before_test = False
    s.lint_fresh = False
    s.lint_violations = ()
    s.open_failures = []
    s.drafter = None
    s.tag_setter = None


def _note(state: EpisodeState, role: str, tokens: int) -> None:
    mem = state.memories[role]
    mem.notes.append(f"scratch-{role}-{mix(state.seed, 'note', role, state.turn):016x}")
    mem.notes_size += tokens


def _refresh_checklists(state: EpisodeState) -> None:
    for role, mem in state.memories.items():
        items = set()
        for i, s in enumerate(state.slots):
            if s.owner != role:
                continue
            if s.status is SlotStatus.EMPTY:
                items.add(f"draft:{i}")
            for a in s.open_failures:
                items.add(f"fix:{i}:{a}")
        mem.checklist = items


def _is_legal(state: EpisodeState, role: str, action: ActionPrimitive, legal: Optional[list] = None) -> bool:
    """Kind must be offered by ``legal_actions``; arguments must satisfy the verb."""
    if role != state.floor:
        return False
    if legal is None:
        legal = legal_actions(state, role)
    kind = action.kind
    if not any(a.kind == kind for a in legal):
        return False
    verb = action.verb
    if verb is Verb.HANDOFF:
        return action.to_role is None or (action.to_role in state.memories and action.to_role != role)
    i = action.target_slot
    if state.coach.is_suppressed(role, verb.value, i, state.turn):
        return False
    n = state.task.slot_count
    if verb is Verb.PLAN:
        return sorted(action.ordering) == list(range(n)) and action.term_tag is not None
    if verb is Verb.FINALIZE:
        return True
    if i is None or not 0 <= i < n:
        return False
    s = state.slots[i]
    if verb in (Verb.DRAFT_SECTION, Verb.IMPLEMENT):
        return s.owner == role and s.status is SlotStatus.EMPTY
    if verb is Verb.INTEGRATE:
        return s.status is SlotStatus.DRAFTED
    if verb in (Verb.LINT, Verb.TEST, Verb.PROPOSE_CHANGE):
        return s.drafted
    if verb is Verb.REPAIR:
        return s.owner == role and action.assertion in s.open_failures
    return False


def apply_action(state: EpisodeState, role: str, action: ActionPrimitive):
    """Functional step: returns ``(new_state, receipt_or_None, StepLog)``."""
    nxt = state.clone()
    receipt, log = step(nxt, role, action)
    return nxt, receipt, log


def step(state: EpisodeState, role: str, action: ActionPrimitive, legal: Optional[list] = None):
    """In-place step on ``state``. Illegal actions are absorbed as violations.

    ``legal`` may pass in ``legal_actions(state, role)`` when the caller has
    just computed it for this exact state.
    """
    _require_live(state)
    _require_role(state, role)
    cfg = state.config
    turn = state.turn
    clock = guards.tick_handoff_clock(state, role, cfg.guards)
    violations = []
    rail_appends = []
    receipt = None
    redundant = conflict = False
    delta = True
    over_budget = 0
    terminal = None
    verdict = "ok"
    base_cost = cfg.tick_costs[action.verb]

    legal = _is_legal(state, role, action, legal)
    decision, spend = guards.check_message_budget(state.budgets, role, action)
    if not legal:
        violations.append("schema_violation")
        decision, spend = guards.BudgetDecision.ALLOW, 0
        delta = False
    elif decision is guards.BudgetDecision.DENY:
        violations.append("schema_violation")
        delta = False
    else:
        if decision is guards.BudgetDecision.TRUNCATE:
            over_budget = action.tokens - spend
            violations.append("overlong_message")
        v = guards.safety_screen(action, state)
        verdict = v.reason
        if not v.allowed:
            violations.append("unsafe_tool")
            delta = False
        else:
            receipt, delta, redundant, conflict, terminal, base_cost = _effect(state, role, action, rail_appends, base_cost)

    if spend:
        guards.spend_tokens(state.budgets, role, spend)
        state.token_count += spend
        if action.verb in (Verb.PLAN, Verb.DRAFT_SECTION, Verb.IMPLEMENT, Verb.REPAIR, Verb.PROPOSE_CHANGE):
            _note(state, role, spend)

    cost = min(_scaled(state, role, base_cost), state.task.tick_budget - state.ticks_elapsed)
    state.ticks_elapsed += cost
    state.turn += 1
    state.budgets.ticks_remaining = state.task.tick_budget - state.ticks_elapsed
    state.budgets.turns_remaining = max(0, state.task.max_turns - state.turn)

    if state.last_actor == role:
        state.consecutive += 1
    else:
        state.last_actor = role
        state.consecutive = 1
    if terminal is None and state.floor == role and clock is guards.ClockSignal.FORCED:
        nxt = handoff_target(state, role)
        if nxt is not None:
            state.floor = nxt

    c = state.counters
    c["redundant"] += int(redundant)
    c["conflicts"] += int(conflict)
    c["violations"] += sum(1 for v in violations if v in ("schema_violation", "unsafe_tool"))
    c["over_budget"] += over_budget
    if action.verb is Verb.PLAN and legal:
        c["plans"] += 1

    if terminal is not None:
        state.terminal = TerminationReason(terminal)
    log = StepLog(
        turn=turn,
        role=role,
        verb=action.verb.value,
        kind=action.kind,
        target_slot=action.target_slot,
        ticks=cost,
        tokens=spend,
        receipt=receipt,
        rail_appends=tuple(rail_appends),
        violations=tuple(violations),
        over_budget_tokens=over_budget,
        redundant=redundant,
        conflict=conflict,
        artifact_delta=delta,
        budget_decision=decision.value,
        verdict=verdict,
        clock=clock.value,
    )

    intervention = None
    if state.terminal is None:
        state.coach.record(log)
        iv = guards.coach_intervene(state.coach, state.coach.window, cfg.guards, state.turn)
        if iv is not None:
            guards.apply_intervention(state.coach, iv)
            rec = DecisionRecord(DecisionKind.BLOCKER_RAISED, turn, (iv.role, iv.verb, iv.target))
            state.rail.append(rec)
            c["interventions"] += 1
            intervention = {"role": iv.role, "verb": iv.verb, "target": iv.target, "until_turn": iv.until_turn}
        reason = check_termination(state)
        if reason is not None:
            state.terminal = reason
    if intervention is not None or state.terminal is not None:
        log = StepLog(
            **{
                **log.__dict__,
                "intervention": intervention,
                "terminal": state.terminal.kind.value if state.terminal else None,
            }
        )
    _refresh_checklists(state)
    return receipt, log


def _effect(state: EpisodeState, role: str, action: ActionPrimitive, rail_appends: list, cost: int):
    """Apply a legal, budget-cleared, safety-cleared action.

    Returns ``(receipt, artifact_delta, redundant, conflict, terminal, tick_cost)``.
    """
    verb = action.verb
    slots = state.slots
    turn = state.turn
    i = action.target_slot

    if verb is Verb.PLAN:
        if state.scope is None:
            state.rail.append(DecisionRecord(DecisionKind.SCOPE_FROZEN, turn, tuple(action.ordering)))
            state.rail.append(DecisionRecord(DecisionKind.TERM_FROZEN, turn, (action.term_tag,)))
            rail_appends.extend(["ScopeFrozen", "TermFrozen"])
            state.scope = tuple(action.ordering)
            state.frozen_tag = action.term_tag
            return None, True, False, False, None, cost
        if any(s.drafted for s in slots):
            return None, False, False, True, None, cost
        return None, False, True, False, None, cost

    if verb in (Verb.DRAFT_SECTION, Verb.IMPLEMENT):
        ok = _do_draft(state, role, i)
        return None, ok, False, False, None, cost

    if verb is Verb.INTEGRATE:
        slots[i].status = SlotStatus.INTEGRATED
        return None, True, False, False, None, cost

    if verb is Verb.PROPOSE_CHANGE:
        s = slots[i]
        if s.lint_fresh and "order" in s.lint_violations:
            _reset_slot(s)
            state.rail.append(DecisionRecord(DecisionKind.CHANGE_ACCEPTED, turn, (i,)))
            rail_appends.append("ChangeAccepted")
            return None, True, False, False, None, cost
        return None, False, False, True, None, cost

    if verb is Verb.LINT:
        s = slots[i]
        before = (s.lint_fresh, s.lint_violations)
        r = run_tool(state, Tool.LINT, i)
        s.lint_violations = r.outcome
        s.lint_fresh = True
        if "style" in r.outcome:
            if "style" not in s.open_failures:
                s.open_failures.append("style")
        elif "style" in s.open_failures:
            s.open_failures.remove("style")
        new = before != (True, r.outcome)
        return r, new, not new, False, None, cost

    if verb is Verb.TEST:
        s = slots[i]
        fresh = not s.tested or s.stale
        if s.status is SlotStatus.INTEGRATED and not s.tested:
            s.integrated_before_test = True
        r = run_tool(state, Tool.TEST, i)
        failing = [a for a in r.failing]
        s.status = SlotStatus.FAILING if failing else SlotStatus.PASSING
        s.tested = True
        s.stale = False
        keep = [a for a in s.open_failures if a == "style"]
        s.open_failures = keep + failing
        return r, fresh, not fresh, False, None, cost

    if verb is Verb.REPAIR:
        s = slots[i]
        if s.integrated_before_test:
            cost = state.config.big_repair_cost
        _do_repair(state, role, i, action.assertion)
        return None, True, False, False, None, cost

    if verb is Verb.FINALIZE:
        return None, True, False, False, TerminationKind.FINALIZED, cost

    if verb is Verb.HANDOFF:
        if action.to_role is None:
            return None, True, False, False, TerminationKind.HANDOFF, cost
        state.floor = action.to_role
        return None, True, False, False, None, cost

    raise ConfigurationError(f"unhandled verb {verb}")  # pragma: no cover
