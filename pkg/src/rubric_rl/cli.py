"""Command-line entry point: ``rubric-rl <subcommand> [flags]``.

Exit status is 0 on success, 1 on invalid input or arguments, 2 on runtime
failure. Errors go to stderr as ``error_code=<CODE> <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .agents import load_agents
from .core import Situation, Status, Trajectory, canonical_emotion, default_taxonomy, validate_profile
from .corpus import (
    Difficulty,
    StatsAccumulator,
    emit_sft_pairs,
    format_table,
    partition,
    read_corpus,
    resolution_rates,
    write_corpus,
)
from .errors import PipelineError, SchemaViolation, ValidationError
from .fileio import atomic_write_text, iter_lines, write_jsonl
from .grpo import TASKS, GrpoConfig, gradcheck, grpo_train, tag_seq_task
from .manifest import RunManifest
from .rewards import RewardWeights, score_candidate
from .sandbox import DEFAULT_FILTERS, SandboxConfig, synthesize

log = logging.getLogger("rubric_rl")

TRAJECTORY_SCHEMA = """\
trajectory JSONL, one object per line:
  dialogue_id, profile{user_id, mbti, gender, relationship, occupation, about,
  recent_activities[]}, situation{text, emotion}, turns[{index, user,
  assistant_raw, spans{understanding, reasoning, emotion, response}?, decision,
  inner_decisions[], refinement_count}], decision_path[], status
  (solved|exhausted|filtered), rng_seed, split?, filter_reasons[]?"""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error_code=USAGE {message}\n")
        raise SystemExit(1)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    g.add_argument("--config", help="JSON file of flag defaults; keys are flag names with underscores")
    g.add_argument("--lenient", action="store_true", help="skip bad input records instead of failing")
    g.add_argument("--dry-run", action="store_true", help="route every agent role to scripted fixtures")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rubric-rl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = [_common()]
    fmt = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser(
        "synth", parents=common, formatter_class=fmt, help="synthesize dialogues with user/responder/evaluator agents",
        epilog="profiles JSONL: {user_id, mbti?, gender?, relationship?, occupation?, about?, recent_activities?}\n"
        "situations JSONL: {text, emotion, user_id?}\n"
        "agents: JSON {\"roles\": {role: {\"backend\": \"scripted\", \"fixture\": path} | "
        "{\"backend\": \"endpoint\", \"endpoint\": {...}, \"prompt\"?: path}}}\n\n" + TRAJECTORY_SCHEMA,
    )
    p.add_argument("--profiles", required=True)
    p.add_argument("--situations", required=True)
    p.add_argument("--agents", help="agent config (optional with --dry-run)")
    p.add_argument("--out", required=True)
    p.add_argument("--k-max", type=int, default=5)
    p.add_argument("--t-max", type=int, default=10)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--filters", default=",".join(DEFAULT_FILTERS), help="comma-separated filter names")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser(
        "score", parents=common, formatter_class=fmt, help="compute format, emotion and rubric rewards",
        epilog="input: candidate JSONL {text, gold_emotion, user?} or trajectory JSONL (one score per turn)\n"
        "output JSONL: {id, r_fmt, r_emo, r_rub, r_total, weights, rubric?}",
    )
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--agents", help="agent config providing the judge role")
    p.add_argument("--weights", default=None, help="f,e,r reward weights summing to 1 (default equal)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser(
        "partition", parents=common, formatter_class=fmt, help="split trajectories into easy and hard sets",
        epilog=TRAJECTORY_SCHEMA + "\n\nfiltered trajectories are dropped and counted.",
    )
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out-easy", required=True)
    p.add_argument("--out-hard", required=True)
    p.add_argument("--outer-only", action="store_true", help="use only each turn's final decision")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("stats", parents=common, formatter_class=fmt, help="print corpus statistics", epilog=TRAJECTORY_SCHEMA)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser(
        "emit-sft", parents=common, formatter_class=fmt, help="write (context, target) pairs from easy trajectories",
        epilog=TRAJECTORY_SCHEMA + "\n\noutput JSONL: {dialogue_id, turn, context, target}",
    )
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_emit_sft)

    p = sub.add_parser(
        "train-toy", parents=common, formatter_class=fmt, help="train a tabular policy with GRPO",
        epilog="output CSV columns: step, objective, mean_reward, kl",
    )
    p.add_argument("--task", choices=sorted(TASKS), default="two-armed")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--group-size", type=int, default=8)
    p.add_argument("--clip", type=float, default=0.2)
    p.add_argument("--beta", type=float, default=0.04)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--sampler", choices=("snapshot", "anchor"), default="snapshot")
    p.add_argument("--horizon", type=int, default=12, help="sequence length for tag-seq")
    p.add_argument("--out", help="CSV trace path (stdout if omitted)")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("gradcheck", parents=common, help="compare analytic and finite-difference gradients")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"config not found: {args.config}", code="IO_ERROR") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {args.config} is not JSON: {exc}", code="BAD_CONFIG") from None
    if not isinstance(doc, dict):
        raise ValidationError("config must be a JSON object", code="BAD_CONFIG")
    # top-level keys apply everywhere; a section named after the subcommand overrides them
    merged = {k: v for k, v in doc.items() if not isinstance(v, dict)}
    merged.update(doc.get(args.command, {}))
    known = set(vars(args))
    unknown = set(merged) - known
    if unknown:
        raise ValidationError(f"unknown config keys {sorted(unknown)}", code="BAD_CONFIG")
    sub = parser._subparsers._group_actions[0].choices[args.command]  # type: ignore[union-attr]
    sub.set_defaults(**merged)
    return parser.parse_args(argv)


# ---- subcommands ------------------------------------------------------------


def _read_jsonl(path: str, what: str, build: Callable[[dict[str, Any]], Any], lenient: bool) -> list[Any]:
    if not Path(path).is_file():
        raise ValidationError(f"cannot read {what} file {path}: no such file", code="IO_ERROR")
    items = []
    for lineno, line in iter_lines(path):
        try:
            record = json.loads(line)
            if not isinstance(record, dict):
                raise SchemaViolation(lineno, "<line>", "must be an object")
            items.append(build(record))
        except (json.JSONDecodeError, ValidationError) as exc:
            if not lenient:
                raise ValidationError(f"{path} line {lineno}: {exc}", code=getattr(exc, "code", "SCHEMA_VIOLATION")) from None
            log.warning("skipping %s line %d: %s", path, lineno, exc)
    return items


def cmd_synth(args: argparse.Namespace) -> int:
    profiles = _read_jsonl(args.profiles, "profiles", validate_profile, args.lenient)
    situations = _read_jsonl(args.situations, "situations", Situation.from_dict, args.lenient)
    setup = load_agents(args.agents, dry_run=args.dry_run)
    filters = tuple(f for f in args.filters.split(",") if f)
    config = SandboxConfig(k_max=args.k_max, t_max=args.t_max, rng_seed=args.seed, filters=filters)
    manifest = RunManifest(
        "synth",
        {"k_max": args.k_max, "t_max": args.t_max, "filters": list(filters), "parallel": args.parallel,
         "dry_run": args.dry_run, "agents": setup.snapshot},
        args.seed,
        inputs=[args.profiles, args.situations] + ([args.agents] if args.agents else []),
    )
    result = synthesize(
        profiles, situations, setup.triple_factory(situations), config,
        parallel=args.parallel, keep_going=args.lenient,
    )
    n = write_corpus(result.trajectories, args.out)
    filtered = sum(t.status is Status.FILTERED for t in result.trajectories)
    for failure in result.failures:
        print(f"error_code={failure.code} {failure}", file=sys.stderr)
    manifest.outputs = [args.out]
    manifest.counts = {"in": len(situations), "out": n, "filtered": filtered, "errored": len(result.failures)}
    manifest.write()
    print(f"wrote {n} trajectories to {args.out} ({filtered} filtered, {len(result.failures)} errored)")
    return 0


def _is_trajectory_file(path: str) -> bool:
    for _, line in iter_lines(path):
        try:
            first = json.loads(line)
        except json.JSONDecodeError:
            return False
        return isinstance(first, dict) and "turns" in first
    return False


def cmd_score(args: argparse.Namespace) -> int:
    if not Path(args.inp).is_file():
        raise ValidationError(f"cannot read {args.inp}: no such file", code="IO_ERROR")
    weights = RewardWeights.parse(args.weights) if args.weights else RewardWeights()
    judge = load_agents(args.agents, dry_run=args.dry_run).judge()
    taxonomy = default_taxonomy()
    rows: list[dict[str, Any]] = []
    errored = 0

    def emit(ident: str, raw: str, gold: Any, user: str | None) -> None:
        breakdown = score_candidate(raw, gold, judge, weights, user_utterance=user, taxonomy=taxonomy)
        rows.append({"id": ident, **breakdown.to_dict()})

    if _is_trajectory_file(args.inp):
        for traj in read_corpus(args.inp, lenient=args.lenient):
            for turn in traj.turns:
                emit(f"{traj.dialogue_id}:{turn.index}", turn.assistant_raw, traj.situation.emotion, turn.user_utterance)
    else:
        for lineno, line in iter_lines(args.inp):
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict) or not isinstance(rec.get("text"), str):
                    raise SchemaViolation(lineno, "text", "must be text")
                if not isinstance(rec.get("gold_emotion"), str):
                    raise SchemaViolation(lineno, "gold_emotion", "must be text")
                gold = canonical_emotion(rec["gold_emotion"], taxonomy)
            except (json.JSONDecodeError, ValidationError) as exc:
                if not args.lenient:
                    raise ValidationError(f"{args.inp} line {lineno}: {exc}", code=getattr(exc, "code", "SCHEMA_VIOLATION")) from None
                errored += 1
                continue
            emit(str(rec.get("id", lineno)), rec["text"], gold, rec.get("user"))

    write_jsonl(args.out, rows)
    RunManifest(
        "score", {"weights": [weights.lambda_f, weights.lambda_e, weights.lambda_r], "dry_run": args.dry_run},
        args.seed, inputs=[args.inp], outputs=[args.out], counts={"out": len(rows), "errored": errored},
    ).write()
    print(f"scored {len(rows)} candidates into {args.out}")
    return 0


def cmd_partition(args: argparse.Namespace) -> int:
    easy: list[Trajectory] = []
    hard: list[Trajectory] = []
    filtered = 0
    bad: list[tuple[int, str]] = []
    for traj in read_corpus(args.inp, lenient=args.lenient, errors=bad):
        if traj.status is Status.FILTERED:
            filtered += 1
            continue
        verdict = partition(resolution_rates(traj, outer_only=args.outer_only))
        (easy if verdict is Difficulty.EASY else hard).append(traj.replace(split=verdict.value))
    write_corpus(easy, args.out_easy)
    write_corpus(hard, args.out_hard)
    RunManifest(
        "partition", {"outer_only": args.outer_only}, args.seed,
        inputs=[args.inp], outputs=[args.out_easy, args.out_hard],
        counts={"easy": len(easy), "hard": len(hard), "filtered": filtered, "errored": len(bad)},
    ).write()
    print(f"easy={len(easy)} hard={len(hard)} filtered={filtered}")
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    by_split: dict[str, StatsAccumulator] = {}
    total = StatsAccumulator()
    for traj in read_corpus(args.inp, lenient=args.lenient):
        total.add(traj)
        if traj.split:
            by_split.setdefault(traj.split, StatsAccumulator()).add(traj)
    columns = {name: acc.result() for name, acc in by_split.items()}
    columns["all"] = total.result()
    if args.json:
        print(json.dumps({k: v.to_dict() for k, v in columns.items()}, indent=2))
    else:
        sys.stdout.write(format_table(columns))
    return 0


def cmd_emit_sft(args: argparse.Namespace) -> int:
    pairs = []
    skipped = errored = 0
    for traj in read_corpus(args.inp, lenient=args.lenient):
        if traj.status is Status.FILTERED:
            skipped += 1
            continue
        try:
            pairs.extend(emit_sft_pairs(traj))
        except ValidationError as exc:
            if not args.lenient:
                raise
            log.warning("skipping %s: %s", traj.dialogue_id, exc)
            errored += 1
    write_jsonl(args.out, (p.to_dict() for p in pairs))
    RunManifest(
        "emit-sft", {}, args.seed, inputs=[args.inp], outputs=[args.out],
        counts={"out": len(pairs), "filtered": skipped, "errored": errored},
    ).write()
    print(f"wrote {len(pairs)} pairs to {args.out}")
    return 0


def cmd_train_toy(args: argparse.Namespace) -> int:
    task = tag_seq_task(args.horizon) if args.task == "tag-seq" else TASKS[args.task]()
    config = GrpoConfig(
        epsilon_clip=args.clip, beta=args.beta, learning_rate=args.lr, steps=args.steps,
        group_size=args.group_size, sampler=args.sampler,
    )
    trace = grpo_train(task, config, args.seed)
    csv_text = trace.to_csv()
    if args.out:
        atomic_write_text(args.out, csv_text)
        RunManifest(
            "train-toy",
            {"task": args.task, "steps": args.steps, "group_size": args.group_size, "clip": args.clip,
             "beta": args.beta, "lr": args.lr, "sampler": args.sampler, "horizon": task.horizon},
            args.seed, outputs=[args.out], counts={"steps": len(trace.rows)},
        ).write()
        last = trace.rows[-1] if trace.rows else None
        if last is not None:
            print(f"final mean_reward={last.mean_reward:.4f} kl={last.kl:.4f}")
    else:
        sys.stdout.write(csv_text)
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    err = gradcheck(instances=args.instances, seed=args.seed, h=args.h)
    print(f"max_relative_error={err:.3e} instances={args.instances}")
    if err >= args.tol:
        print(f"error_code=GRADCHECK_FAILED max relative error {err:.3e} >= {args.tol:g}", file=sys.stderr)
        return 2
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except ValidationError as exc:
        print(f"error_code={exc.code} {exc}", file=sys.stderr)
        return 1
    except PipelineError as exc:
        print(f"error_code={exc.code} {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error_code=IO_ERROR {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
