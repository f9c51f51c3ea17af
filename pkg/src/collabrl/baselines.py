"""Hand-written reference behaviours: a lone generalist and a fixed-rotation team.

Both choose only among ``legal_actions`` (or an explicit floor pass to a
teammate, which is always legal for a multi-role team) and are
deterministic given the episode seed.
"""

from __future__ import annotations

from typing import Optional

from collabrl.env.config import SOLO_TEAM
from collabrl.env.core import EpisodeState, new_episode
from collabrl.env.types import ActionPrimitive, SlotStatus, Verb
from collabrl.trajectory import Trajectory, meta_for, run_scripted, summarize

METHODS = ("single_agent", "scripted_team")


def _pick(legal: list, kind: str, target: Optional[int] = None) -> Optional[ActionPrimitive]:
    for a in legal:
        if a.kind == kind and (target is None or a.target_slot == target):
            return a
    return None


class SingleAgent:
    """plan -> draft all -> integrate -> test -> repair once -> finalize.

    Test only exists for coding tasks, so on writing tasks the generalist
    goes straight from integration to finalising.
    """

    def __init__(self):
        self.reviewed: set = set()
        self.repaired: set = set()

    def __call__(self, state: EpisodeState, role: str, legal: list) -> ActionPrimitive:
        coding = state.task.is_coding
        if state.scope is None and (a := _pick(legal, "Plan")):
            return a
        for kind in ("Implement" if coding else "DraftSection", "Integrate"):
            if a := _pick(legal, kind):
                return a
        for i, s in enumerate(state.slots):
            if coding and s.drafted and i not in self.reviewed and not state.task.hidden_target[i].unsafe:
                if a := _pick(legal, "Test", i):
                    self.reviewed.add(i)
                    return a
        can_repair = _pick(legal, "Repair") is not None
        for i, s in enumerate(state.slots):
            for f in s.open_failures if can_repair else ():
                if (i, f) not in self.repaired:
                    self.repaired.add((i, f))
                    return ActionPrimitive(Verb.REPAIR, target_slot=i, assertion=f, tokens=state.config.message_tokens[Verb.REPAIR])
        if a := _pick(legal, "Finalize"):
            return a
        return _pick(legal, "HandoffHuman")


class ScriptedTeam:
    """Fixed rotation: each role does at most one scripted step, then passes on.

    Reviewers lint every fresh draft and testers test every new
    implementation; nobody adapts the convention to the role order drawn
    for the episode.
    """

    def __init__(self):
        self.acted = False

    def _work(self, state: EpisodeState, role: str, legal: list) -> Optional[ActionPrimitive]:
        task = state.task
        if a := _pick(legal, "Finalize"):
            return a
        if role == "planner":
            if state.scope is None:
                return _pick(legal, "Plan")
            for i, s in enumerate(state.slots):
                if s.status is SlotStatus.DRAFTED and (s.lint_fresh if not task.is_coding else True):
                    return _pick(legal, "Integrate", i)
            return None
        if role in ("writer", "coder"):
            if a := _pick(legal, "Repair"):
                return a
            return _pick(legal, "Implement" if task.is_coding else "DraftSection")
        if role == "reviewer":
            for i, s in enumerate(state.slots):
                if s.drafted and not s.lint_fresh:
                    return _pick(legal, "Lint", i)
            return None
        if role == "tester":
            for i, s in enumerate(state.slots):
                if s.drafted and (not s.tested or s.stale) and not task.hidden_target[i].unsafe:
                    return _pick(legal, "Test", i)
        return None

    def __call__(self, state: EpisodeState, role: str, legal: list) -> ActionPrimitive:
        if not self.acted:
            a = self._work(state, role, legal)
            if a is not None:
                self.acted = a.kind != "Finalize"
                return a
        self.acted = False
        order = state.role_order
        nxt = order[(order.index(role) + 1) % len(order)]
        if _pick(legal, "HandoffRole") is None:
            return _pick(legal, "HandoffHuman")
        return ActionPrimitive(Verb.HANDOFF, to_role=nxt, tokens=state.config.message_tokens[Verb.HANDOFF])


def run_baseline(method: str, task, team, seed: int, role_order, env_config) -> Trajectory:
    if method == "single_agent":
        state = new_episode(task, SOLO_TEAM, seed, env_config)
        chooser = SingleAgent()
    elif method == "scripted_team":
        state = new_episode(task, team, seed, env_config, role_order=role_order)
        chooser = ScriptedTeam()
    else:
        raise ValueError(f"unknown baseline {method!r}")
    logs = run_scripted(state, chooser)
    return Trajectory([], logs, meta_for(state), summarize(state, logs))
