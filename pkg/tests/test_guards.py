from __future__ import annotations

import pytest
from conftest import coding_task, pick

from collabrl.env import CODING_TEAM, ActionPrimitive, ConfigurationError, SlotStatus, Verb, legal_actions, new_episode, step
from collabrl.guards import (
    BudgetDecision,
    BudgetState,
    ClockSignal,
    CoachState,
    GuardConfig,
    Intervention,
    SafetyVerdict,
    apply_intervention,
    check_message_budget,
    coach_intervene,
    safety_screen,
    spend_tokens,
    tick_handoff_clock,
)


def _budget(remaining: int) -> BudgetState:
    return BudgetState(ticks_remaining=10, message_tokens_remaining={"writer": remaining}, turns_remaining=10)


def test_guard_config_validation():
    with pytest.raises(ConfigurationError):
        GuardConfig(nudge_after=5, force_after=5)
    with pytest.raises(ConfigurationError):
        GuardConfig(coach_repeats=7, coach_window=6)


@pytest.mark.parametrize("consecutive,expect", [(0, ClockSignal.NONE), (2, ClockSignal.NUDGE), (4, ClockSignal.FORCED)])
def test_handoff_clock_thresholds(writing_state, consecutive, expect):
    writing_state.last_actor = "planner"
    writing_state.consecutive = consecutive
    assert tick_handoff_clock(writing_state, "planner", GuardConfig()) is expect


def test_handoff_clock_first_turn_for_new_role(writing_state):
    writing_state.last_actor = "writer"
    writing_state.consecutive = 4
    assert tick_handoff_clock(writing_state, "planner", GuardConfig()) is ClockSignal.NONE


def test_forced_handoff_collapses_legal_set(writing_state):
    writing_state.last_actor = "planner"
    writing_state.consecutive = 4
    kinds = {a.kind for a in legal_actions(writing_state, "planner")}
    assert kinds <= {"HandoffRole", "Integrate"} and "HandoffRole" in kinds


def test_nudge_flag_in_observation(writing_state):
    from collabrl.env import observe

    writing_state.last_actor = "planner"
    writing_state.consecutive = 2
    assert observe(writing_state, "planner").nudge
    assert not observe(writing_state, "writer").nudge


def test_no_role_holds_more_than_force_after_turns():
    s = new_episode(coding_task(max_turns=40), CODING_TEAM, seed=2)
    run = best = 0
    last = None
    while s.terminal is None:
        role = s.floor
        legal = legal_actions(s, role)
        # always prefer keeping the floor
        keep = [a for a in legal if a.kind not in ("HandoffRole", "HandoffHuman")]
        _, log = step(s, role, (keep or legal)[0])
        run = run + 1 if log.role == last else 1
        last = log.role
        best = max(best, run)
    assert best <= GuardConfig().force_after


def test_budget_allow():
    b = _budget(50)
    decision, spend = check_message_budget(b, "writer", ActionPrimitive(Verb.PLAN, ordering=(0,), tokens=10))
    assert decision is BudgetDecision.ALLOW and spend == 10
    spend_tokens(b, "writer", spend)
    assert b.message_tokens_remaining["writer"] == 40


def test_budget_truncate_and_deny():
    assert check_message_budget(_budget(4), "writer", ActionPrimitive(Verb.PLAN, ordering=(0,), tokens=10)) == (BudgetDecision.TRUNCATE, 4)
    assert check_message_budget(_budget(0), "writer", ActionPrimitive(Verb.PLAN, ordering=(0,), tokens=1)) == (BudgetDecision.DENY, 0)
    assert check_message_budget(_budget(0), "writer", ActionPrimitive(Verb.HANDOFF, tokens=0)) == (BudgetDecision.ALLOW, 0)


def test_spend_never_goes_negative():
    with pytest.raises(ValueError):
        spend_tokens(_budget(3), "writer", 4)


def test_truncation_emits_overlong_fragment(writing_state):
    writing_state.budgets.message_tokens_remaining["planner"] = 4
    plan = pick(legal_actions(writing_state, "planner"), "Plan")
    _, log = step(writing_state, "planner", plan)
    assert "overlong_message" in log.violations
    assert log.tokens == 4 and log.over_budget_tokens == plan.tokens - 4
    assert writing_state.budgets.message_tokens_remaining["planner"] == 0


def test_denied_action_is_schema_violation(writing_state):
    writing_state.budgets.message_tokens_remaining["planner"] = 0
    _, log = step(writing_state, "planner", pick(legal_actions(writing_state, "planner"), "Plan"))
    assert log.violations == ("schema_violation",) and not log.artifact_delta
    assert writing_state.scope is None


def test_safety_screen(coding_state):
    assert safety_screen(ActionPrimitive(Verb.TEST, target_slot=0, tokens=5), coding_state) == SafetyVerdict(True, "ok")
    assert safety_screen(ActionPrimitive(Verb.PLAN, ordering=(0,), red_flag=True), coding_state).reason == "red_flag_prompt"
    with pytest.raises(ValueError):
        SafetyVerdict(False, "ok")


def test_unsafe_test_is_absorbed():
    s = new_episode(coding_task(unsafe=(0,)), CODING_TEAM, seed=7)
    s.slots[0].status = SlotStatus.DRAFTED
    s.slots[0].assertion_margins = [0.0, 0.0, 0.0]
    s.floor = "tester"
    assert safety_screen(ActionPrimitive(Verb.TEST, target_slot=0, tokens=5), s).reason == "unsafe_tool_arg"
    receipt, log = step(s, "tester", ActionPrimitive(Verb.TEST, target_slot=0, tokens=5))
    assert receipt is None and "unsafe_tool" in log.violations and log.verdict == "unsafe_tool_arg"
    assert s.turn == 1 and not log.artifact_delta


def test_coach_intervenes_on_repeated_review():
    window = [("reviewer", "Lint", 0, False)] * 3 + [("writer", "DraftSection", 1, True)]
    iv = coach_intervene(CoachState(), window, GuardConfig(), turn=10)
    assert iv == Intervention("reviewer", "Lint", 0, 13)


def test_coach_ignores_productive_turns():
    window = [("writer", "DraftSection", i, True) for i in range(6)]
    assert coach_intervene(CoachState(), window, GuardConfig(), turn=6) is None
    handoffs = [("writer", "Handoff", None, False)] * 6
    assert coach_intervene(CoachState(), handoffs, GuardConfig(), turn=6) is None


def test_coach_only_looks_at_window():
    old = [("reviewer", "Lint", 0, False)] * 2
    fresh = [("writer", "DraftSection", i, True) for i in range(5)] + [("reviewer", "Lint", 0, False)]
    assert coach_intervene(CoachState(), old + fresh, GuardConfig(), turn=8) is None


def test_suppression_cooldown(writing_state):
    apply_intervention(writing_state.coach, Intervention("planner", "Plan", None, 3))
    assert writing_state.coach.interventions_issued == 1
    assert "Plan" not in {a.kind for a in legal_actions(writing_state, "planner")}
    writing_state.turn = 3
    assert "Plan" in {a.kind for a in legal_actions(writing_state, "planner")}


def test_env_issues_intervention_on_loop():
    s = new_episode(coding_task(), CODING_TEAM, seed=7)
    s.floor = "tester"
    s.last_actor, s.consecutive = "planner", 1
    logs = []
    for _ in range(4):
        s.last_actor = "planner"  # keep the handoff clock out of the way
        s.floor = "tester"
        _, log = step(s, "tester", ActionPrimitive(Verb.TEST, target_slot=0, tokens=5))
        logs.append(log)
    flagged = [l for l in logs if l.intervention]
    assert flagged and flagged[0].intervention["verb"] == "Test"
    assert s.rail.decisions[-1].kind.value == "BlockerRaised"


def test_budget_state_dict():
    assert _budget(5).to_dict() == {"ticks_remaining": 10, "message_tokens_remaining": {"writer": 5}, "turns_remaining": 10}


def test_single_role_team_never_forced():
    from collabrl.env import SOLO_TEAM
    from conftest import writing_task

    s = new_episode(writing_task(), SOLO_TEAM, seed=1)
    s.last_actor, s.consecutive = "solo", 10
    assert tick_handoff_clock(s, "solo", GuardConfig()) is ClockSignal.NONE
