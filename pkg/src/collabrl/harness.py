"""Experiment orchestration: training runs, evaluation, ablations, failure modes, audit replay."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from collabrl.baselines import run_baseline
from collabrl.env.core import DEFAULT_CONFIG
from collabrl.env.config import EnvConfig
from collabrl.env.types import ConfigurationError, Verb
from collabrl.guards import GuardConfig
from collabrl.policy import PolicyParams, load_checkpoint, save_checkpoint
from collabrl.reward import PenaltyConfig, fragments, score_components
from collabrl.trainer import CURVE_COLUMNS, GrpoConfig, collect_rollouts, episode_plan, train_loop
from collabrl.trajectory import Trajectory

log = logging.getLogger(__name__)

TRACE_SCHEMA_VERSION = 1
METHODS = ("single_agent", "scripted_team", "grpo_team", "grpo_untrained")
REVIEW_VERBS = frozenset({Verb.LINT.value, Verb.TEST.value, Verb.PROPOSE_CHANGE.value})
ABLATIONS = (
    ("full", {}),
    ("constant_baseline", {"baseline_mode": "constant"}),
    ("no_coordination", {"coordination_term": False}),
    ("local_only", {"reward_mode": "local_only"}),
)


class HarnessIOError(OSError):
    pass


class TraceParseError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


# ---------------------------------------------------------------- config

_ENV_SCALARS = tuple(
    f.name for f in fields(EnvConfig) if f.name not in ("tick_costs", "message_tokens", "roles", "guards")
)


@dataclass(frozen=True)
class ExperimentConfig:
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    env: EnvConfig = DEFAULT_CONFIG
    penalties: PenaltyConfig = field(default_factory=PenaltyConfig)
    seeds: tuple = (0, 1, 2, 3, 4)
    output_dir: str = "runs"
    eval_episodes: int = 64
    eval_seed: int = 999
    # failure-mode thresholds
    over_planning_threshold: int = 1
    late_test_fraction: float = 0.5

    def __post_init__(self):
        if not self.seeds:
            raise ConfigurationError("seeds: need at least one seed")
        if self.eval_episodes < 1:
            raise ConfigurationError("eval_episodes: must be >= 1")
        if self.over_planning_threshold < 0:
            raise ConfigurationError("over_planning_threshold: must be >= 0")
        if not 0.0 <= self.late_test_fraction <= 1.0:
            raise ConfigurationError("late_test_fraction: must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "grpo": self.grpo.to_dict(),
            "env": self.env.to_dict(),
            "penalties": dataclasses.asdict(self.penalties),
            "seeds": list(self.seeds),
            "eval_episodes": self.eval_episodes,
            "eval_seed": self.eval_seed,
            "over_planning_threshold": self.over_planning_threshold,
            "late_test_fraction": self.late_test_fraction,
        }

    def config_hash(self) -> str:
        """Hash of everything that affects results (the output directory does not)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        return apply_overrides(self, overrides)


def config_keys() -> dict:
    """Flat key -> section for every settable option."""
    keys = {f.name: "grpo" for f in fields(GrpoConfig)}
    keys.update({f.name: "guards" for f in fields(GuardConfig)})
    keys.update({name: "env" for name in _ENV_SCALARS})
    keys.update({f.name: "penalties" for f in fields(PenaltyConfig)})
    for f in fields(ExperimentConfig):
        if f.name not in ("grpo", "env", "penalties"):
            keys[f.name] = "top"
    return keys


def _coerce(key: str, value, current):
    if not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"expected a boolean, got {text!r}")
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            return tuple(int(x) for x in text.replace(" ", "").split(",") if x)
    except ValueError as e:
        raise ConfigurationError(f"{key}: {e}") from None
    return text


def apply_overrides(config: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Apply flat ``key -> value`` overrides; values may be strings from a file or CLI."""
    keys = config_keys()
    unknown = sorted(k for k in overrides if k not in keys)
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
    sections: dict = {"grpo": {}, "guards": {}, "env": {}, "penalties": {}, "top": {}}
    current = {
        "grpo": config.grpo,
        "guards": config.env.guards,
        "env": config.env,
        "penalties": config.penalties,
        "top": config,
    }
    for k, v in overrides.items():
        sec = keys[k]
        sections[sec][k] = _coerce(k, v, getattr(current[sec], k))
    try:
        grpo = replace(config.grpo, **sections["grpo"])
    except ConfigurationError as e:
        raise ConfigurationError(f"grpo: {e}") from None
    try:
        guards = replace(config.env.guards, **sections["guards"])
        env = replace(config.env, guards=guards, **sections["env"])
    except ConfigurationError as e:
        raise ConfigurationError(f"env: {e}") from None
    try:
        penalties = replace(config.penalties, **sections["penalties"])
    except ValueError as e:
        raise ConfigurationError(f"penalties: {e}") from None
    return replace(config, grpo=grpo, env=env, penalties=penalties, **sections["top"])


# ---------------------------------------------------------------- files


def _header_line(config_hash: str, kind: str) -> str:
    return f"# collabrl {kind} config_hash={config_hash}\n"


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict], config_hash: str, kind: str) -> None:
    buf = io.StringIO()
    buf.write(_header_line(config_hash, kind))
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(row[k]) for k in columns})
    _write(path, buf.getvalue())


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_csv(path) -> list:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as e:
        raise HarnessIOError(f"cannot write {path}: {e}") from None


def mean_sem(values: Sequence[float]) -> tuple:
    """Mean and standard error (sample std / sqrt n); a single value has s.e.m. 0."""
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        return float("nan"), float("nan")
    if a.size == 1:
        return float(a[0]), 0.0
    return float(a.mean()), float(a.std(ddof=1) / math.sqrt(a.size))


def format_pm(mean: float, sem: float, digits: int = 2) -> str:
    return f"{mean:.{digits}f} ± {sem:.{digits}f}"


# ---------------------------------------------------------------- training


def train_seed(config: ExperimentConfig, seed: int, grpo: Optional[GrpoConfig] = None):
    return train_loop(grpo or config.grpo, seed, config.env, config.penalties)


def run_train(config: ExperimentConfig, out_dir: Optional[Path] = None) -> Path:
    """Train every seed; write per-seed curves and checkpoints plus an aggregate curve."""
    out = Path(out_dir or Path(config.output_dir) / "train")
    h = config.config_hash()
    _write(out / "config.json", json.dumps({"config_hash": h, **config.to_dict()}, indent=2, sort_keys=True) + "\n")
    handler = logging.FileHandler(out / "train.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handler.setLevel(logging.INFO)
    root = logging.getLogger("collabrl")
    root.addHandler(handler)
    level = root.level
    if root.getEffectiveLevel() > logging.INFO:
        root.setLevel(logging.INFO)
    try:
        log.info("config_hash %s", h)
        curves = {}
        for seed in config.seeds:
            log.info("training seed %d (%d iterations)", seed, config.grpo.iterations)
            result = train_seed(config, seed)
            curves[seed] = result.curve
            if result.curve:
                last = result.curve[-1]
                log.info("seed %d final mean_reward %.6f mean_turns %.3f", seed, last["mean_reward"], last["mean_turns"])
            write_csv(out / f"curve_seed{seed}.csv", CURVE_COLUMNS, result.curve, h, "curve")
            save_checkpoint(out / f"checkpoint_seed{seed}.json", result.params, result.critic, {"config_hash": h, "seed": seed})
        write_csv(out / "curve_aggregate.csv", *aggregate_curves(curves), h, "curve_aggregate")
    finally:
        root.removeHandler(handler)
        root.setLevel(level)
        handler.close()
    return out


def aggregate_curves(curves: dict) -> tuple:
    stats = [c for c in CURVE_COLUMNS if c != "iteration"]
    columns = ["iteration", "seeds"] + [f"{c}_{s}" for c in stats for s in ("mean", "sem")]
    n = min((len(c) for c in curves.values()), default=0)
    rows = []
    for it in range(n):
        row = {"iteration": it, "seeds": len(curves)}
        for c in stats:
            row[f"{c}_mean"], row[f"{c}_sem"] = mean_sem([curves[s][it][c] for s in sorted(curves)])
        rows.append(row)
    return columns, rows


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class MetricsRow:
    method: str
    speed_ratio: float
    writing_quality_pct: float
    coding_pass_pct: float
    mean_turns: float
    mean_tokens: float
    mean_ticks: float
    seed: int

    def __post_init__(self):
        if not self.speed_ratio > 0:
            raise ValueError("speed_ratio must be positive")
        for name in ("writing_quality_pct", "coding_pass_pct"):
            v = getattr(self, name)
            if not (math.isnan(v) or 0.0 <= v <= 100.0 + 1e-9):
                raise ValueError(f"{name} must lie in [0, 100]")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


METRIC_COLUMNS = tuple(f.name for f in fields(MetricsRow))


def evaluation_plan(config: ExperimentConfig) -> list:
    """Fixed evaluation tasks at the final episode length, shared by every method."""
    g = replace(config.grpo, batch_episodes=config.eval_episodes, iterations=1, turns_start=config.grpo.turns_max)
    return episode_plan(g, config.eval_seed, 0)


def task_set_hash(plan: list) -> str:
    blob = json.dumps([[repr(t), list(team), s, list(order)] for t, team, s, order in plan])
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def rollout_method(method: str, plan: list, config: ExperimentConfig, params: Optional[PolicyParams] = None) -> list:
    if method in ("single_agent", "scripted_team"):
        return [run_baseline(method, task, team, s, order, config.env) for task, team, s, order in plan]
    if params is None:
        raise ValueError(f"{method} needs policy parameters")
    return collect_rollouts(plan, params, env_config=config.env)


def _mean(values) -> float:
    values = list(values)
    return math.fsum(values) / len(values) if values else float("nan")


def family_summary(trajs: Sequence[Trajectory], family: Optional[str] = None) -> dict:
    sel = [t for t in trajs if family is None or t.meta.task_family == family]
    return {
        "episodes": len(sel),
        "quality": _mean(t.outcome.quality_overall for t in sel),
        "turns": _mean(t.outcome.turns for t in sel),
        "ticks": _mean(t.outcome.ticks_elapsed for t in sel),
        "tokens": _mean(t.outcome.tokens for t in sel),
    }


def metrics_row(method: str, trajs: Sequence[Trajectory], reference: Sequence[Trajectory], seed: int) -> MetricsRow:
    """Summarise ``trajs``; speed is the reference's mean ticks over the method's."""
    allm = family_summary(trajs)
    ref = family_summary(reference)
    return MetricsRow(
        method=method,
        speed_ratio=ref["ticks"] / allm["ticks"],
        writing_quality_pct=100.0 * family_summary(trajs, "writing")["quality"],
        coding_pass_pct=100.0 * family_summary(trajs, "coding")["quality"],
        mean_turns=allm["turns"],
        mean_tokens=allm["tokens"],
        mean_ticks=allm["ticks"],
        seed=seed,
    )


def run_eval(config: ExperimentConfig, checkpoint, n_episodes: Optional[int] = None, seed: int = 0) -> MetricsRow:
    """Evaluate one checkpoint against the single-agent baseline on the fixed task set."""
    if n_episodes is not None:
        config = replace(config, eval_episodes=n_episodes)
    params, _, _ = load_checkpoint(checkpoint)
    plan = evaluation_plan(config)
    single = rollout_method("single_agent", plan, config)
    return metrics_row("grpo_team", rollout_method("grpo_team", plan, config, params), single, seed)


def evaluate_all(config: ExperimentConfig, policies: dict, out_dir: Optional[Path] = None) -> dict:
    """Metrics for both baselines and every trained policy (``seed -> params``).

    Baselines are deterministic, so they are rolled out once and reported
    against every seed. Returns ``{"rows", "traces", "failures"}``.
    """
    plan = evaluation_plan(config)
    h = config.config_hash()
    traces = {m: rollout_method(m, plan, config) for m in ("single_agent", "scripted_team")}
    single = traces["single_agent"]
    rows = []
    failures = []
    for seed in sorted(policies):
        for m in ("single_agent", "scripted_team"):
            rows.append(metrics_row(m, traces[m], single, seed))
        trained = rollout_method("grpo_team", plan, config, policies[seed])
        traces[("grpo_team", seed)] = trained
        rows.append(metrics_row("grpo_team", trained, single, seed))
        counts = detect_failure_modes(trained, config.over_planning_threshold, config.late_test_fraction)
        failures.append({"method": "grpo_team", "seed": seed, **counts.to_dict()})
        ref_params = policies[seed].reference
        untrained = rollout_method("grpo_untrained", plan, config, PolicyParams(ref_params.shared, ref_params.adapters))
        traces[("grpo_untrained", seed)] = untrained
        rows.append(metrics_row("grpo_untrained", untrained, single, seed))
        counts = detect_failure_modes(untrained, config.over_planning_threshold, config.late_test_fraction)
        failures.append({"method": "grpo_untrained", "seed": seed, **counts.to_dict()})
    if out_dir is not None:
        out = Path(out_dir)
        write_csv(out / "metrics.csv", METRIC_COLUMNS, [r.to_dict() for r in rows], h, "metrics")
        write_csv(out / "metrics_summary.csv", *summary_table(rows), h, "metrics_summary")
        write_csv(out / "failure_modes.csv", ("method", "seed", *FailureModeCounts.COLUMNS), failures, h, "failure_modes")
        for key, trajs in traces.items():
            name = key if isinstance(key, str) else f"{key[0]}_seed{key[1]}"
            write_traces(out / f"traces_{name}.jsonl", trajs, h, config.penalties)
    return {"rows": rows, "traces": traces, "failures": failures}


def summary_table(rows: Sequence[MetricsRow]) -> tuple:
    """One line per method with ``mean ± s.e.m.`` over seeds."""
    columns = ("method", "seeds", "speed_ratio", "writing_quality_pct", "coding_pass_pct", "mean_turns", "mean_tokens", "mean_ticks")
    out = []
    for m in METHODS:
        sel = [r for r in rows if r.method == m]
        if not sel:
            continue
        line = {"method": m, "seeds": len(sel)}
        for c in columns[2:]:
            line[c] = format_pm(*mean_sem([getattr(r, c) for r in sel]))
        out.append(line)
    return columns, out


# ---------------------------------------------------------------- ablation

ABLATION_COLUMNS = (
    "variant",
    "seeds",
    "quality_pct_mean",
    "quality_pct_sem",
    "turns_mean",
    "turns_sem",
    "speed_ratio_mean",
    "speed_ratio_sem",
    "coding_pass_pct_mean",
    "coding_pass_pct_sem",
    "quality",
    "turns",
    "speed_ratio",
    "task_hash",
)


def ablation_metrics(trajs: Sequence[Trajectory], single: Sequence[Trajectory]) -> dict:
    """Writing-task quality, turns and speed ratio, plus coding pass rate."""
    w = family_summary(trajs, "writing")
    return {
        "quality_pct": 100.0 * w["quality"],
        "turns": w["turns"],
        "speed_ratio": family_summary(single, "writing")["ticks"] / w["ticks"],
        "coding_pass_pct": 100.0 * family_summary(trajs, "coding")["quality"],
    }


def run_ablation(config: ExperimentConfig, out_dir: Optional[Path] = None, trained: Optional[dict] = None) -> dict:
    """Train and evaluate the four variants on identical seeds and tasks.

    ``trained`` may supply already-trained ``(variant, seed) -> params``.
    Returns ``{"rows": per-variant aggregates, "per_seed": [...], "ordering": {...}}``.
    """
    trained = dict(trained or {})
    plan = evaluation_plan(config)
    th = task_set_hash(plan)
    single = rollout_method("single_agent", plan, config)
    per_seed = []
    for name, override in ABLATIONS:
        grpo = replace(config.grpo, **override)
        for seed in config.seeds:
            params = trained.get((name, seed))
            if params is None:
                log.info("ablation %s seed %d", name, seed)
                params = train_seed(config, seed, grpo).params
                trained[(name, seed)] = params
            m = ablation_metrics(rollout_method("grpo_team", plan, config, params), single)
            per_seed.append({"variant": name, "seed": seed, "task_hash": th, **m})
    rows = []
    for name, _ in ABLATIONS:
        sel = [r for r in per_seed if r["variant"] == name]
        row = {"variant": name, "seeds": len(sel), "task_hash": th}
        for k in ("quality_pct", "turns", "speed_ratio", "coding_pass_pct"):
            row[f"{k}_mean"], row[f"{k}_sem"] = mean_sem([r[k] for r in sel])
        row["quality"] = format_pm(row["quality_pct_mean"], row["quality_pct_sem"], 1)
        row["turns"] = format_pm(row["turns_mean"], row["turns_sem"], 1)
        row["speed_ratio"] = format_pm(row["speed_ratio_mean"], row["speed_ratio_sem"])
        rows.append(row)
    ordering = ablation_ordering(rows)
    if out_dir is not None:
        out = Path(out_dir)
        h = config.config_hash()
        write_csv(out / "ablation.csv", ABLATION_COLUMNS, rows, h, "ablation")
        write_csv(
            out / "ablation_seeds.csv",
            ("variant", "seed", "quality_pct", "turns", "speed_ratio", "coding_pass_pct", "task_hash"),
            per_seed,
            h,
            "ablation_seeds",
        )
        report = [_header_line(h, "ablation_ordering").rstrip("\n")]
        report += [f"{k}: {'yes' if v else 'no'}" for k, v in ordering.items()]
        _write(out / "ablation_ordering.txt", "\n".join(report) + "\n")
    return {"rows": rows, "per_seed": per_seed, "ordering": ordering, "trained": trained}


def ablation_ordering(rows: Sequence[dict]) -> dict:
    by = {r["variant"]: r for r in rows}
    full = by["full"]
    others = [by[n] for n, _ in ABLATIONS if n != "full"]
    return {
        "full >= constant_baseline on quality": full["quality_pct_mean"] >= by["constant_baseline"]["quality_pct_mean"],
        "constant_baseline >= no_coordination on quality": by["constant_baseline"]["quality_pct_mean"]
        >= by["no_coordination"]["quality_pct_mean"],
        "full has fewest turns": all(full["turns_mean"] <= o["turns_mean"] for o in others),
        "full has highest speed ratio": all(full["speed_ratio_mean"] >= o["speed_ratio_mean"] for o in others),
        "full >= every ablation on quality": all(full["quality_pct_mean"] >= o["quality_pct_mean"] for o in others),
    }


# ---------------------------------------------------------------- failure modes


@dataclass(frozen=True)
class FailureModeCounts:
    over_planning: int = 0
    review_repetition: int = 0
    late_testing: int = 0

    COLUMNS = ("over_planning", "review_repetition", "late_testing")

    def __post_init__(self):
        if min(self.over_planning, self.review_repetition, self.late_testing) < 0:
            raise ValueError("failure counts must be non-negative")

    def to_dict(self) -> dict:
        return {c: getattr(self, c) for c in self.COLUMNS}


def detect_failure_modes(trajs: Iterable, over_planning_threshold: int = 1, late_test_fraction: float = 0.5) -> FailureModeCounts:
    """Count the three failure modes over a set of finished traces.

    over_planning: episodes with more than the threshold Plan turns before the
    first draft. review_repetition: coach interventions on review verbs.
    late_testing: coding episodes whose first Test comes after the given
    fraction of the turn cap (never testing counts as late).
    """
    over = review = late = 0
    for t in trajs:
        if t.outcome.terminal == "Running":
            raise ValueError("failure modes need finished traces")
        plans = 0
        for entry in t.logs:
            if entry.verb in (Verb.DRAFT_SECTION.value, Verb.IMPLEMENT.value):
                break
            if entry.verb == Verb.PLAN.value:
                plans += 1
        over += plans > over_planning_threshold
        review += sum(1 for e in t.logs if e.intervention and e.intervention.get("verb") in REVIEW_VERBS)
        if t.meta.task_family == "coding":
            first = next((e.turn for e in t.logs if e.verb == Verb.TEST.value), None)
            late += first is None or first > late_test_fraction * t.meta.max_turns
    return FailureModeCounts(over, review, late)


def failure_deltas(untrained: FailureModeCounts, trained: FailureModeCounts) -> dict:
    """Percentage change per mode, trained relative to untrained."""
    out = {}
    for c in FailureModeCounts.COLUMNS:
        a, b = getattr(untrained, c), getattr(trained, c)
        out[c] = float("nan") if a == 0 else 100.0 * (b - a) / a
    return out


# ---------------------------------------------------------------- traces and replay


def trace_records(traj: Trajectory, index: int, penalties: PenaltyConfig = PenaltyConfig()) -> list:
    recs = [{"type": "episode", "index": index, "meta": traj.meta.to_dict(), "outcome": traj.outcome.to_dict()}]
    recs += [{"type": "turn", "episode": index, **entry.to_dict()} for entry in traj.logs]
    recs += [{"type": "fragment", "episode": index, **f.to_dict()} for f in fragments(traj, penalties)]
    raw = score_components(traj, penalties)
    rec = {"type": "reward", "episode": index, "raw": dict(zip(("quality", "speed", "coordination", "compliance"), raw.as_tuple()))}
    if traj.reward_breakdown is not None:
        rec["breakdown"] = traj.reward_breakdown.to_dict()
    recs.append(rec)
    return recs


def write_traces(path, trajs: Sequence[Trajectory], config_hash: str, penalties: PenaltyConfig = PenaltyConfig()) -> None:
    lines = [json.dumps({"type": "header", "schema_version": TRACE_SCHEMA_VERSION, "config_hash": config_hash}, sort_keys=True)]
    for i, t in enumerate(trajs):
        lines += [json.dumps(r, sort_keys=True) for r in trace_records(t, i, penalties)]
    _write(Path(path), "\n".join(lines) + "\n")


def read_traces(path) -> list:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise HarnessIOError(f"cannot read {path}: {e}") from None
    out = []
    for no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise TraceParseError(path, no, f"invalid JSON ({e.msg})") from None
        if not isinstance(rec, dict) or "type" not in rec:
            raise TraceParseError(path, no, "record has no type")
        if rec["type"] == "turn":
            for k in ("turn", "role", "verb", "target_slot"):
                if k not in rec:
                    raise TraceParseError(path, no, f"turn record missing {k!r}")
        out.append((no, rec))
    return out


def _receipt_digest(receipt: Optional[dict]) -> str:
    if not receipt:
        return "-"
    if receipt["tool"] == "Lint":
        codes = receipt["outcome"]
        return f"lint s{receipt['slot']} {'clean' if not codes else ','.join(codes)}"
    margins = receipt["outcome"]
    passed = sum(1 for m in margins if m == 0.0)
    return f"test s{receipt['slot']} {passed}/{len(margins)} pass"


def replay_audit(path) -> str:
    """Deterministic per-turn text report of a trace file."""
    records = read_traces(path)
    header = next((r for _, r in records if r["type"] == "header"), {})
    lines = [f"audit replay of {Path(path).name} (config_hash={header.get('config_hash', '?')})"]
    frags: dict = {}
    for _, r in records:
        if r["type"] == "fragment":
            frags.setdefault((r["episode"], r["turn"]), []).append(r)
    for _, r in records:
        kind = r["type"]
        if kind == "episode":
            m, o = r["meta"], r["outcome"]
            lines.append(
                f"== episode {r['index']}: {m['task_family']}/{m['difficulty']}/{m['length_class']} seed={m['seed']} "
                f"order={','.join(m['role_order'])} -> {o['terminal']} turns={o['turns']} ticks={o['ticks_elapsed']} "
                f"quality={o['quality_overall']:.4f}"
            )
        elif kind == "turn":
            target = "-" if r["target_slot"] is None else f"s{r['target_slot']}"
            credit = " ".join(
                f"{f['component']}{f['delta']:+.4g}({f['reason_code']})" for f in frags.get((r.get("episode"), r["turn"]), [])
            )
            flags = "".join(f" !{v}" for v in r.get("violations", []))
            if r.get("intervention"):
                flags += f" !coach:{r['intervention'].get('verb')}"
            lines.append(
                f"t{r['turn']:03d} {r['role']:<9} {r.get('kind', r['verb']):<13} {target:<4} "
                f"ticks={r.get('ticks', 0)} tokens={r.get('tokens', 0)} | {_receipt_digest(r.get('receipt'))} | {credit or '-'}{flags}"
            )
        elif kind == "reward":
            raw = r["raw"]
            lines.append("   reward " + " ".join(f"{k}={v:.6g}" for k, v in raw.items()))
    return "\n".join(lines) + "\n"
