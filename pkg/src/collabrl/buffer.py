"""Shared store of scored trajectories, tool receipts and per-role critiques."""

from __future__ import annotations

import enum
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from collabrl.env.types import ToolReceipt
from collabrl.reward import fragments
from collabrl.trajectory import Trajectory

log = logging.getLogger(__name__)

BUFFER_SCHEMA_VERSION = 1
# Critique records are a closed schema; anything else could smuggle private notes.
CRITIQUE_FIELDS = frozenset({"reason_codes", "quality_delta"})


class CritiqueSchemaError(ValueError):
    pass


class InsufficientEntriesError(ValueError):
    pass


class BufferParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


class Eviction(str, enum.Enum):
    FIFO = "fifo"


@dataclass(frozen=True)
class BufferConfig:
    capacity: int = 256
    eviction: Eviction = Eviction.FIFO
    short_long_mix: float = 0.5
    # on a missing length class: raise (strict) or fill from the other class
    strict: bool = True
    batch_size: int = 8

    def __post_init__(self):
        if self.batch_size < 1 or self.capacity < self.batch_size:
            raise ValueError("capacity must be >= batch size >= 1")
        if not 0.0 <= self.short_long_mix <= 1.0:
            raise ValueError("short_long_mix must lie in [0, 1]")
        object.__setattr__(self, "eviction", Eviction(self.eviction))

    def to_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "eviction": self.eviction.value,
            "short_long_mix": self.short_long_mix,
            "strict": self.strict,
            "batch_size": self.batch_size,
        }


def validate_critique(critique: dict) -> None:
    if not isinstance(critique, dict):
        raise CritiqueSchemaError("self_critique must map role -> record")
    for role, rec in critique.items():
        if not isinstance(rec, dict):
            raise CritiqueSchemaError(f"critique for {role!r} must be a record")
        extra = set(rec) - CRITIQUE_FIELDS
        if extra:
            raise CritiqueSchemaError(f"critique for {role!r} has forbidden fields {sorted(extra)}")
        if set(rec) != CRITIQUE_FIELDS:
            raise CritiqueSchemaError(f"critique for {role!r} needs fields {sorted(CRITIQUE_FIELDS)}")
        codes = rec["reason_codes"]
        if not isinstance(codes, list) or not all(isinstance(c, str) for c in codes):
            raise CritiqueSchemaError(f"reason_codes for {role!r} must be a list of strings")
        if not isinstance(rec["quality_delta"], (int, float)) or not math.isfinite(rec["quality_delta"]):
            raise CritiqueSchemaError(f"quality_delta for {role!r} must be a finite number")


def summarize_critique(traj: Trajectory) -> dict:
    """Per-role reason codes observed and the role's share of final quality."""
    out: dict = {r: {"reason_codes": [], "quality_delta": 0.0} for r in sorted({log.role for log in traj.logs})}
    deltas: dict = {r: [] for r in out}
    for f in fragments(traj):
        rec = out.setdefault(f.role, {"reason_codes": [], "quality_delta": 0.0})
        if f.reason_code not in rec["reason_codes"]:
            rec["reason_codes"].append(f.reason_code)
        if f.component == "quality":
            deltas.setdefault(f.role, []).append(f.delta)
    for r, rec in out.items():
        rec["reason_codes"].sort()
        rec["quality_delta"] = math.fsum(deltas.get(r, ()))
    return out


@dataclass
class BufferEntry:
    trajectory: Trajectory
    receipts: tuple
    self_critique: dict
    insertion_index: int = -1

    def __post_init__(self):
        validate_critique(self.self_critique)
        self.receipts = tuple(self.receipts)

    @classmethod
    def from_trajectory(cls, traj: Trajectory) -> "BufferEntry":
        return cls(traj, tuple(traj.receipts), summarize_critique(traj))

    @property
    def length_class(self) -> str:
        return self.trajectory.meta.length_class

    def to_dict(self) -> dict:
        return {
            "insertion_index": self.insertion_index,
            "trajectory": self.trajectory.to_dict(),
            "receipts": [r.to_dict() for r in self.receipts],
            "self_critique": self.self_critique,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BufferEntry":
        return cls(
            Trajectory.from_dict(d["trajectory"]),
            tuple(ToolReceipt.from_dict(r) for r in d["receipts"]),
            d["self_critique"],
            int(d["insertion_index"]),
        )


@dataclass
class ExperienceBuffer:
    """Bounded FIFO store. Appends go through one writer; reads copy."""

    config: BufferConfig = field(default_factory=BufferConfig)
    entries: deque = field(default_factory=deque)
    next_index: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def snapshot(self) -> tuple:
        return tuple(self.entries)

    def clear(self) -> None:
        self.entries.clear()

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "next_index": self.next_index,
            "entries": [e.to_dict() for e in self.entries],
        }


def append(buffer: ExperienceBuffer, entry: BufferEntry) -> ExperienceBuffer:
    """Add ``entry`` with the next insertion index, evicting the oldest on overflow."""
    validate_critique(entry.self_critique)
    entry.insertion_index = buffer.next_index
    buffer.next_index += 1
    buffer.entries.append(entry)
    while len(buffer.entries) > buffer.config.capacity:
        buffer.entries.popleft()
    return buffer


def extend(buffer: ExperienceBuffer, trajectories: Iterable[Trajectory]) -> ExperienceBuffer:
    for t in trajectories:
        append(buffer, BufferEntry.from_trajectory(t))
    return buffer


def sample_mixed_batch(buffer: ExperienceBuffer, n: int, rng) -> list:
    """Draw ``n`` entries without replacement, ``round(mix * n)`` of them short-class.

    ``rng`` is a ``numpy.random.Generator``. When one class is too small a
    strict buffer raises; otherwise the other class fills the gap and a
    warning is logged.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    if len(buffer) < n:
        raise InsufficientEntriesError(f"buffer holds {len(buffer)} entries, {n} requested")
    short = [e for e in buffer.entries if e.length_class == "short"]
    long_ = [e for e in buffer.entries if e.length_class == "long"]
    want_short = int(round(buffer.config.short_long_mix * n))
    want_long = n - want_short
    if want_short > len(short) or want_long > len(long_):
        msg = f"need {want_short} short + {want_long} long, have {len(short)} + {len(long_)}"
        if buffer.config.strict:
            raise InsufficientEntriesError(msg)
        log.warning("length mix not satisfiable (%s); filling from the other class", msg)
        want_short = min(want_short, len(short))
        want_long = n - want_short
        if want_long > len(long_):
            want_long = len(long_)
            want_short = n - want_long
    pick_s = rng.choice(len(short), size=want_short, replace=False) if want_short else []
    pick_l = rng.choice(len(long_), size=want_long, replace=False) if want_long else []
    batch = [short[i] for i in sorted(int(i) for i in pick_s)] + [long_[i] for i in sorted(int(i) for i in pick_l)]
    return sorted(batch, key=lambda e: e.insertion_index)


def persist(buffer: ExperienceBuffer, path) -> None:
    """JSONL: one schema header line, then one entry per line."""
    header = {
        "type": "buffer_header",
        "schema_version": BUFFER_SCHEMA_VERSION,
        "config": buffer.config.to_dict(),
        "next_index": buffer.next_index,
        "count": len(buffer),
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps({"type": "entry", **e.to_dict()}, sort_keys=True) for e in buffer.entries]
    Path(path).write_text("\n".join(lines) + "\n")


def load(path) -> ExperienceBuffer:
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    if not lines:
        raise BufferParseError(path, 1, "missing header line")
    header = _parse(path, 1, lines[0])
    if header.get("type") != "buffer_header":
        raise BufferParseError(path, 1, "first line is not a buffer header")
    if header.get("schema_version") != BUFFER_SCHEMA_VERSION:
        raise BufferParseError(path, 1, f"unsupported schema version {header.get('schema_version')}")
    try:
        cfg = BufferConfig(**header["config"])
    except (KeyError, TypeError, ValueError) as e:
        raise BufferParseError(path, 1, f"bad buffer config: {e}") from None
    buf = ExperienceBuffer(cfg, deque(), int(header.get("next_index", 0)))
    for no, line in enumerate(lines[1:], start=2):
        rec = _parse(path, no, line)
        if rec.get("type") != "entry":
            raise BufferParseError(path, no, f"record {no - 1}: expected an entry record")
        try:
            buf.entries.append(BufferEntry.from_dict(rec))
        except (KeyError, TypeError, ValueError) as e:
            raise BufferParseError(path, no, f"record {no - 1}: {type(e).__name__}: {e}") from None
    if len(buf) != header.get("count", len(buf)):
        raise BufferParseError(path, len(lines) + 1, f"expected {header['count']} entries, found {len(buf)} (truncated file?)")
    return buf


def _parse(path, no: int, line: str) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as e:
        raise BufferParseError(path, no, f"record {no - 1}: invalid JSON ({e.msg})") from None
    if not isinstance(rec, dict):
        raise BufferParseError(path, no, "record is not an object")
    return rec
