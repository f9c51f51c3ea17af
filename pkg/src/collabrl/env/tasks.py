"""Synthetic task generation and ``key = value`` task files."""

from __future__ import annotations

from pathlib import Path

from collabrl.env.types import ConfigurationError, Difficulty, SlotTarget, TaskFamily, TaskSpec
from collabrl.rng import keyed_uniform

SLOTS = {
    ("short", "easy"): 2,
    ("short", "medium"): 3,
    ("short", "hard"): 3,
    ("long", "easy"): 4,
    ("long", "medium"): 5,
    ("long", "hard"): 5,
}
ASSERTION_CEILING = {"easy": 0.3, "medium": 0.6, "hard": 0.9}
ASSERTIONS_PER_SLOT = 3
REFERENCE_SLOTS = 5


def turns_for(slot_count: int, reference_turns: int) -> int:
    """Scale a turn cap quoted for a 5-slot episode to ``slot_count`` slots."""
    return max(4, int(round(reference_turns * slot_count / REFERENCE_SLOTS)))


def make_task(
    family: TaskFamily | str,
    difficulty: Difficulty | str,
    length_class: str,
    seed: int,
    reference_turns: int = 40,
    tag_count: int = 4,
    ticks_per_turn: int = 3,
    unsafe_rate: float = 0.0,
) -> TaskSpec:
    family = TaskFamily(family)
    difficulty = Difficulty(difficulty)
    n = SLOTS[(length_class, difficulty.value)]
    keys = [keyed_uniform(seed, "order", i) for i in range(n)]
    ranks = sorted(range(n), key=lambda i: keys[i])
    order_index = [0] * n
    for pos, i in enumerate(ranks):
        order_index[i] = pos
    tag = int(keyed_uniform(seed, "term") * tag_count)
    ceiling = ASSERTION_CEILING[difficulty.value]
    targets = []
    for i in range(n):
        diffs = ()
        if family is TaskFamily.CODING:
            diffs = tuple(round(keyed_uniform(seed, "adiff", i, j) * ceiling, 6) for j in range(ASSERTIONS_PER_SLOT))
        unsafe = unsafe_rate > 0 and keyed_uniform(seed, "unsafe", i) < unsafe_rate
        targets.append(SlotTarget(order_index[i], tag, diffs, unsafe))
    max_turns = turns_for(n, reference_turns)
    return TaskSpec(
        task_family=family,
        difficulty=difficulty,
        slot_count=n,
        hidden_target=tuple(targets),
        retrieval_pool=frozenset(f"fact-{seed % 997}-{k}" for k in range(3)),
        brief_text_id=f"{family.value}-{difficulty.value}-{seed}",
        max_turns=max_turns,
        tick_budget=ticks_per_turn * max_turns,
        length_class=length_class,
    )


def parse_key_values(text: str, source: str = "<string>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _ints(s: str) -> list:
    return [int(x) for x in s.split(",") if x.strip()]


def task_from_mapping(kv: dict, source: str = "<task>") -> TaskSpec:
    """Build a TaskSpec from parsed key/value pairs.

    Recognised keys: task_family, difficulty, slot_count, order (comma list of
    per-slot order indices), term_tag, assertion_difficulties (``;`` between
    slots, ``,`` within a slot), unsafe_slots, retrieval_pool, brief_text_id,
    max_turns, tick_budget, length_class.
    """
    known = {
        "task_family",
        "difficulty",
        "slot_count",
        "order",
        "term_tag",
        "assertion_difficulties",
        "unsafe_slots",
        "retrieval_pool",
        "brief_text_id",
        "max_turns",
        "tick_budget",
        "length_class",
    }
    unknown = sorted(set(kv) - known)
    if unknown:
        raise ConfigurationError(f"{source}: unknown task keys {unknown}")
    try:
        family = TaskFamily(kv.get("task_family", "writing"))
        difficulty = Difficulty(kv.get("difficulty", "easy"))
        n = int(kv["slot_count"])
        order = _ints(kv["order"]) if "order" in kv else list(range(n))
        tag = int(kv.get("term_tag", 0))
        if "assertion_difficulties" in kv:
            per_slot = [tuple(float(x) for x in part.split(",") if x.strip()) for part in kv["assertion_difficulties"].split(";")]
        else:
            per_slot = [(0.5,) * ASSERTIONS_PER_SLOT if family is TaskFamily.CODING else () for _ in range(n)]
        unsafe = set(_ints(kv.get("unsafe_slots", "")))
        max_turns = int(kv.get("max_turns", 30))
        tick_budget = int(kv.get("tick_budget", 3 * max_turns))
    except KeyError as e:
        raise ConfigurationError(f"{source}: missing required key {e.args[0]!r}") from None
    except ValueError as e:
        raise ConfigurationError(f"{source}: {e}") from None
    if len(order) != n or len(per_slot) != n:
        raise ConfigurationError(f"{source}: order and assertion_difficulties need {n} entries")
    targets = tuple(SlotTarget(order[i], tag, per_slot[i], i in unsafe) for i in range(n))
    pool = frozenset(x.strip() for x in kv.get("retrieval_pool", "").split(",") if x.strip())
    return TaskSpec(
        task_family=family,
        difficulty=difficulty,
        slot_count=n,
        hidden_target=targets,
        retrieval_pool=pool,
        brief_text_id=kv.get("brief_text_id", ""),
        max_turns=max_turns,
        tick_budget=tick_budget,
        length_class=kv.get("length_class", "short"),
    )


def load_task(path: str | Path) -> TaskSpec:
    path = Path(path)
    return task_from_mapping(parse_key_values(path.read_text(), str(path)), str(path))

