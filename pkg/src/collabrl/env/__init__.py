"""Collaborative writing/coding workflow environment."""

from collabrl.env.config import CODING_TEAM, ROLES, SOLO_TEAM, WRITING_TEAM, EnvConfig, RoleProfile
from collabrl.env.core import (
    EpisodeState,
    PreconditionError,
    apply_action,
    check_termination,
    handoff_target,
    legal_actions,
    new_episode,
    observe,
    quality_attribution,
    quality_score,
    run_tool,
    step,
)
from collabrl.env.tasks import load_task, make_task, parse_key_values, task_from_mapping
from collabrl.env.types import *  # noqa: F401,F403
