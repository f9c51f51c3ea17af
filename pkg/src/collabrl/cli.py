"""Command-line entry point: train, eval, ablate, failures, replay."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from collabrl.buffer import BufferParseError
from collabrl.env.tasks import parse_key_values
from collabrl.env.types import ConfigurationError, StepLog
from collabrl.harness import (
    ExperimentConfig,
    FailureModeCounts,
    HarnessIOError,
    TraceParseError,
    apply_overrides,
    config_keys,
    detect_failure_modes,
    evaluate_all,
    failure_deltas,
    read_traces,
    replay_audit,
    run_ablation,
    run_train,
    summary_table,
)
from collabrl.policy import CheckpointError, load_checkpoint
from collabrl.trainer import NumericalError
from collabrl.trajectory import EpisodeMeta, EpisodeOutcome, Trajectory

log = logging.getLogger("collabrl")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value file; command-line flags override it")
    g = p.add_argument_group("config keys")
    for key in sorted(config_keys()):
        g.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="V", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="collabrl", description=__doc__)
    parser.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train every seed; write curves and checkpoints")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, help="run directory (default: <output_dir>/train)")

    p = sub.add_parser("eval", help="evaluate trained checkpoints against both baselines")
    _add_config_flags(p)
    p.add_argument("--run", type=Path, required=True, help="training run directory holding checkpoint_seed*.json")
    p.add_argument("--out", type=Path, help="output directory (default: <output_dir>/eval)")

    p = sub.add_parser("ablate", help="train and evaluate the four ablation variants")
    _add_config_flags(p)
    p.add_argument("--run", type=Path, help="reuse full-variant checkpoints from this training run")
    p.add_argument("--out", type=Path, help="output directory (default: <output_dir>/ablation)")

    p = sub.add_parser("failures", help="count failure modes in trace files")
    _add_config_flags(p)
    p.add_argument("traces", type=Path, help="trace JSONL to analyse")
    p.add_argument("--baseline", type=Path, help="second trace JSONL to compare against (e.g. untrained)")

    p = sub.add_parser("replay", help="render a trace file as a per-turn audit report")
    p.add_argument("trace", type=Path)
    p.add_argument("--out", type=Path, help="write the report here instead of stdout")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    config = ExperimentConfig()
    if getattr(args, "config", None) is not None:
        try:
            text = args.config.read_text()
        except OSError as e:
            raise HarnessIOError(f"cannot read config {args.config}: {e}") from None
        config = apply_overrides(config, parse_key_values(text, str(args.config)))
    cli = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return apply_overrides(config, cli)


def load_trace_episodes(path: Path) -> list:
    """Rebuild outcome-level trajectories (no transitions) from a trace file."""
    episodes: dict = {}
    for no, rec in read_traces(path):
        kind = rec["type"]
        try:
            if kind == "episode":
                episodes[rec["index"]] = [EpisodeMeta.from_dict(rec["meta"]), EpisodeOutcome.from_dict(rec["outcome"]), []]
            elif kind == "turn":
                episodes[rec["episode"]][2].append(StepLog.from_dict(rec))
        except (KeyError, TypeError, ValueError) as e:
            raise TraceParseError(path, no, f"{type(e).__name__}: {e}") from None
    return [Trajectory([], logs, meta, outcome) for meta, outcome, logs in (episodes[k] for k in sorted(episodes)) if logs]


def _checkpoints(run: Path, seeds: Sequence[int]) -> dict:
    out = {}
    for s in seeds:
        params, _, _ = load_checkpoint(run / f"checkpoint_seed{s}.json")
        out[s] = params
    return out


def cmd_train(args, config: ExperimentConfig) -> int:
    out = run_train(config, args.out)
    print(f"config_hash {config.config_hash()}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args, config: ExperimentConfig) -> int:
    out = args.out or Path(config.output_dir) / "eval"
    result = evaluate_all(config, _checkpoints(args.run, config.seeds), out)
    columns, rows = summary_table(result["rows"])
    _print_table(columns, rows)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_ablate(args, config: ExperimentConfig) -> int:
    out = args.out or Path(config.output_dir) / "ablation"
    trained = {}
    if args.run is not None:
        trained = {("full", s): p for s, p in _checkpoints(args.run, config.seeds).items()}
    result = run_ablation(config, out, trained)
    _print_table(("variant", "quality", "turns", "speed_ratio"), result["rows"])
    for k, v in result["ordering"].items():
        print(f"{k}: {'yes' if v else 'no'}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_failures(args, config: ExperimentConfig) -> int:
    p, f = config.over_planning_threshold, config.late_test_fraction
    counts = detect_failure_modes(load_trace_episodes(args.traces), p, f)
    print(" ".join(f"{c}={getattr(counts, c)}" for c in FailureModeCounts.COLUMNS))
    if args.baseline is not None:
        base = detect_failure_modes(load_trace_episodes(args.baseline), p, f)
        print("baseline " + " ".join(f"{c}={getattr(base, c)}" for c in FailureModeCounts.COLUMNS))
        deltas = failure_deltas(base, counts)
        print("change " + " ".join(f"{c}={d:+.1f}%" for c, d in deltas.items()))
    return EXIT_OK


def cmd_replay(args, config: Optional[ExperimentConfig]) -> int:
    report = replay_audit(args.trace)
    if args.out is not None:
        try:
            args.out.write_text(report)
        except OSError as e:
            raise HarnessIOError(f"cannot write {args.out}: {e}") from None
    else:
        sys.stdout.write(report)
    return EXIT_OK


def _print_table(columns, rows) -> None:
    print("  ".join(str(c) for c in columns))
    for r in rows:
        print("  ".join(str(r[c]) for c in columns))


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "failures": cmd_failures, "replay": cmd_replay}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args) if args.command != "replay" else None
        if config is not None:
            log.info("config %s", json.dumps(config.to_dict(), sort_keys=True))
        return COMMANDS[args.command](args, config)
    except ConfigurationError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, TraceParseError, BufferParseError, HarnessIOError, OSError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
