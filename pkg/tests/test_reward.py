from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import log, make_trace, pick, writing_task

from collabrl.env import WRITING_TEAM, ActionPrimitive, Verb, legal_actions, new_episode, step
from collabrl.reward import (
    EARLY_WEIGHTS,
    LATE_WEIGHTS,
    AuditFragment,
    CurriculumSchedule,
    IncompleteTraceError,
    PenaltyConfig,
    RawRewardComponents,
    RewardBreakdown,
    RewardWeights,
    absolute_score,
    combine_reward,
    curriculum_weights,
    explain_credit,
    fragments,
    normalize_batch,
    score_components,
)
from collabrl.trajectory import Trajectory, meta_for, summarize


def test_perfect_trace_has_no_penalties():
    raw = score_components(make_trace([log(0), log(1, verb="Finalize")]))
    assert raw.quality == 1.0 and raw.coordination_penalty == 0.0 and raw.compliance_penalty == 0.0


def test_repeated_no_delta_review_turns_penalised():
    s = new_episode(writing_task(), WRITING_TEAM, seed=1, role_order=("writer", "reviewer", "planner"))
    draft = pick(legal_actions(s, "writer"), "DraftSection")
    step(s, "writer", draft)
    s.floor = "reviewer"
    logs = []
    lint = ActionPrimitive(Verb.LINT, target_slot=draft.target_slot, tokens=5)
    for _ in range(3):
        logs.append(step(s, "reviewer", lint)[1])
        s.floor = "reviewer"
    step(s, "reviewer", ActionPrimitive(Verb.HANDOFF))
    trace = Trajectory([], logs, meta_for(s), summarize(s, logs))
    # first Lint is fresh evidence; the next two repeat it with no state delta
    assert [l.artifact_delta for l in logs] == [True, False, False]
    alpha = PenaltyConfig().redundant
    assert score_components(trace).coordination_penalty >= 2 * alpha


def test_single_schema_violation():
    raw = score_components(make_trace([log(0, violations=("schema_violation",), artifact_delta=False)]))
    assert raw.compliance_penalty == 1.0


def test_incomplete_trace_rejected():
    with pytest.raises(IncompleteTraceError):
        score_components(make_trace([log(0)], terminal="Running"))


def test_raw_component_validation():
    with pytest.raises(ValueError):
        RawRewardComponents(1.5, 1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        RawRewardComponents(0.5, 1.0, -1.0, 0.0)


def _raws(qualities):
    return [RawRewardComponents(q, 10.0, 0.0, 0.0) for q in qualities]


def test_zscore_population_std():
    z = [n[0] for n in normalize_batch(_raws([0.1, 0.2, 0.3]))]
    # quality values 0.1/0.2/0.3 share the z-scores of [1, 2, 3]
    assert z == pytest.approx([-1.224744871, 0.0, 1.224744871], abs=1e-8)


def test_zscore_integer_values_hand_computed():
    raws = [RawRewardComponents(0.0, t, 0.0, 0.0) for t in (1.0, 2.0, 3.0)]
    speed = [n[1] for n in normalize_batch(raws)]
    # speed is negated, so the fastest episode scores highest
    assert speed == pytest.approx([1.224744871, 0.0, -1.224744871], abs=1e-8)


def test_zero_variance_and_singleton():
    assert normalize_batch(_raws([0.4, 0.4, 0.4])) == [(0.0,) * 4] * 3
    assert normalize_batch(_raws([0.7])) == [(0.0,) * 4]
    with pytest.raises(ValueError):
        normalize_batch([])


def test_zscore_clamped():
    z = normalize_batch(_raws([1.0] + [0.0] * 99))
    assert z[0][0] == 3.0


def test_groups_normalised_separately():
    z = normalize_batch(_raws([0.1, 0.3, 0.8, 0.9]), groups=["a", "a", "b", "b"])
    assert [x[0] for x in z] == pytest.approx([-1.0, 1.0, -1.0, 1.0])


def test_curriculum_endpoints_and_midpoint():
    sched = CurriculumSchedule(total_steps=100)
    assert curriculum_weights(0, sched) == EARLY_WEIGHTS
    assert curriculum_weights(50, sched) == LATE_WEIGHTS
    assert curriculum_weights(80, sched) == LATE_WEIGHTS
    mid = curriculum_weights(25, sched).as_tuple()
    expect = [(a + b) / 2 for a, b in zip(EARLY_WEIGHTS.as_tuple(), LATE_WEIGHTS.as_tuple())]
    assert mid == pytest.approx(expect)
    assert math.fsum(mid) == pytest.approx(1.0)


def test_curriculum_rejects_negative_step():
    with pytest.raises(ValueError):
        curriculum_weights(-1, CurriculumSchedule(10))


def test_weights_rescaled_and_validated():
    assert RewardWeights(2, 1, 1, 0).as_tuple() == (0.5, 0.25, 0.25, 0.0)
    with pytest.raises(ValueError):
        RewardWeights(0, 0, 0, 0)
    with pytest.raises(ValueError):
        RewardWeights(-1, 1, 1, 1)


def test_combine_reward():
    w = RewardWeights(0.6, 0.15, 0.15, 0.1)
    assert combine_reward((0, 0, 0, 0), w) == 0.0
    assert combine_reward((1, 0, 0, 0), w) == pytest.approx(0.6)
    n = (0.5, -1.2, 2.0, 0.3)
    # independent dot product with penalty axes entering negatively
    expect = float(np.dot([0.6, 0.15, -0.15, -0.1], n))
    assert combine_reward(n, w) == pytest.approx(expect, abs=1e-12)


def test_single_overlong_fragment():
    trace = make_trace([log(0), log(1), log(2), log(3, over_budget_tokens=6, violations=("overlong_message",))])
    coord = [f for f in fragments(trace) if f.component == "coordination"]
    assert coord == [AuditFragment(3, "writer", "coordination", 0.06, "overlong_message")]


def test_zero_penalty_fragments_only_credit():
    trace = make_trace([log(0), log(1)], qfrags=[(0, "writer", 0.5, "progress"), (1, "writer", 0.5, "progress")])
    codes = {f.reason_code for f in fragments(trace)}
    assert codes <= {"progress", "test_evidence"}


def test_fragments_sum_to_components():
    logs = [
        log(0, violations=("schema_violation",), artifact_delta=False),
        log(1, redundant=True, artifact_delta=False),
        log(2, over_budget_tokens=30, violations=("overlong_message",)),
        log(3, conflict=True),
        log(4, verb="Test", violations=("unsafe_tool",), artifact_delta=False),
        log(5, redundant=True),
    ]
    trace = make_trace(logs, quality=0.5, style_units=1)
    pen = PenaltyConfig(redundant=0.3, overlong_token=0.02, conflict=0.7, schema_violation=1.1, unsafe_tool=0.9, style_drift=0.4)
    frags = fragments(trace, pen)
    raw = score_components(trace, pen)
    # hand sums: 2*0.3 + 30*0.02 + 0.7 and 1.1 + 0.9 + 0.4
    assert raw.coordination_penalty == pytest.approx(1.9, abs=1e-12)
    assert raw.compliance_penalty == pytest.approx(2.4, abs=1e-12)
    assert math.fsum(f.delta for f in frags if f.component == "speed") == raw.speed_raw == 12.0
    bd = RewardBreakdown(raw, (0.0,) * 4, 0.0, LATE_WEIGHTS, 0)
    assert explain_credit(trace, bd, pen) == frags


def test_explain_credit_rejects_foreign_breakdown():
    trace = make_trace([log(0)])
    bd = RewardBreakdown(RawRewardComponents(0.2, 2.0, 0.0, 0.0), (0.0,) * 4, 0.0, LATE_WEIGHTS, 0)
    with pytest.raises(ValueError):
        explain_credit(trace, bd)


def test_fragment_validation():
    with pytest.raises(ValueError):
        AuditFragment(0, "writer", "speed", 1.0, "not_a_code")


def test_breakdown_round_trip():
    bd = RewardBreakdown(RawRewardComponents(0.25, 7.0, 0.5, 1.0), (0.1, -0.2, 0.3, 0.0), 0.42, EARLY_WEIGHTS, 3)
    again = RewardBreakdown.from_dict(bd.to_dict())
    assert again.raw == bd.raw and again.normalized == bd.normalized and again.batch_id == 3
    assert again.weights_used.as_tuple() == pytest.approx(bd.weights_used.as_tuple())


def test_absolute_score_bounds():
    best = absolute_score(RawRewardComponents(1.0, 0.0, 0.0, 0.0), 90)
    worst = absolute_score(RawRewardComponents(0.0, 90.0, 1e9, 1e9), 90)
    assert best == pytest.approx(1.0) and worst == pytest.approx(0.0, abs=1e-6)
