from __future__ import annotations

import pytest

from collabrl.env import (
    CODING_TEAM,
    WRITING_TEAM,
    Difficulty,
    SlotTarget,
    TaskFamily,
    TaskSpec,
    QualityBreakdown,
    StepLog,
    new_episode,
)
from collabrl.trajectory import EpisodeMeta, EpisodeOutcome, Trajectory


def writing_task(n: int = 3, max_turns: int = 30, tick_budget: int = 90, tag: int = 1) -> TaskSpec:
    return TaskSpec(
        task_family=TaskFamily.WRITING,
        difficulty=Difficulty.EASY,
        slot_count=n,
        hidden_target=tuple(SlotTarget(i, tag) for i in range(n)),
        max_turns=max_turns,
        tick_budget=tick_budget,
    )


def coding_task(diffs=((0.2, 0.4, 0.6), (0.1, 0.3, 0.5)), unsafe=(), max_turns: int = 30) -> TaskSpec:
    return TaskSpec(
        task_family=TaskFamily.CODING,
        difficulty=Difficulty.MEDIUM,
        slot_count=len(diffs),
        hidden_target=tuple(SlotTarget(i, 0, tuple(d), i in unsafe) for i, d in enumerate(diffs)),
        max_turns=max_turns,
        tick_budget=3 * max_turns,
    )


@pytest.fixture
def writing_state():
    return new_episode(writing_task(), WRITING_TEAM, seed=42)


@pytest.fixture
def coding_state():
    return new_episode(coding_task(), CODING_TEAM, seed=7)


def pick(legal, kind):
    for a in legal:
        if a.kind == kind:
            return a
    raise AssertionError(f"{kind} not legal; have {[a.kind for a in legal]}")


def make_trace(logs, quality=1.0, ticks=None, style_units=0, terminal="Finalized", qfrags=(), family="writing", max_turns=30):
    """Synthetic finished trace built straight from step logs."""
    meta = EpisodeMeta(0, family, "easy", "short", ("planner", "writer", "reviewer"), max_turns, 3 * max_turns, 3)
    outcome = EpisodeOutcome(
        quality=QualityBreakdown(quality, quality, 0.0),
        quality_overall=quality,
        quality_fragments=tuple(qfrags),
        ticks_elapsed=sum(l.ticks for l in logs) if ticks is None else ticks,
        tokens=sum(l.tokens for l in logs),
        turns=len(logs),
        terminal=terminal,
        style_drift=(0, "writer") if style_units else None,
        style_units=style_units,
    )
    return Trajectory([], logs, meta, outcome)


def log(turn, role="writer", verb="DraftSection", **kw):
    kw.setdefault("ticks", 2)
    kw.setdefault("tokens", 10)
    return StepLog(turn=turn, role=role, verb=verb, kind=verb, target_slot=kw.pop("target_slot", 0), **kw)


# acceptance verdicts, reported after the run: criterion -> (passed, detail)
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
