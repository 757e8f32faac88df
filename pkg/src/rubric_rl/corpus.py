"""Trajectory JSONL I/O, difficulty routing, corpus statistics and SFT pairs."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

from .core import RubricDecision, Taxonomy, Trajectory
from .errors import SchemaViolation, ValidationError
from .fileio import dumps_line, iter_lines, write_jsonl
from .spans import DEFAULT_TAGS, TagSpec, render_four_span

log = logging.getLogger(__name__)


# ---- persistence ------------------------------------------------------------


def read_corpus(
    path: str | Path,
    *,
    lenient: bool = False,
    taxonomy: Taxonomy | None = None,
    errors: list[tuple[int, str]] | None = None,
) -> Iterator[Trajectory]:
    """Stream trajectories from a JSONL file.

    A bad line raises :class:`SchemaViolation` naming it, unless ``lenient``,
    in which case it is logged, appended to ``errors`` and skipped.
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"cannot read {path}: no such file", code="IO_ERROR")
    for lineno, line in iter_lines(path):
        try:
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaViolation(lineno, "<line>", f"is not valid JSON ({exc.msg})") from None
            try:
                traj = Trajectory.from_dict(record, taxonomy)
            except SchemaViolation as exc:
                raise SchemaViolation(lineno, exc.field, exc.detail) from None
            except ValidationError as exc:
                raise SchemaViolation(lineno, exc.code, str(exc)) from None
        except SchemaViolation as exc:
            if not lenient:
                raise
            log.warning("skipping %s: %s", path, exc)
            if errors is not None:
                errors.append((lineno, str(exc)))
            continue
        yield traj


def write_corpus(trajectories: Iterable[Trajectory], path: str | Path) -> int:
    return write_jsonl(path, (t.to_dict() for t in trajectories))


# ---- difficulty routing -----------------------------------------------------


@dataclass(frozen=True)
class ResolutionRates:
    p_fail: float
    p_pass: float
    p_solved: float

    def __post_init__(self) -> None:
        vals = (self.p_fail, self.p_pass, self.p_solved)
        if any(not 0.0 <= v <= 1.0 for v in vals) or abs(sum(vals) - 1.0) > 1e-9:
            raise ValidationError(f"rates {vals} are not a distribution", code="BAD_RATES")


def rates_from_counts(n_fail: int, n_pass: int, n_solved: int) -> ResolutionRates:
    total = n_fail + n_pass + n_solved
    if total <= 0 or min(n_fail, n_pass, n_solved) < 0:
        raise ValidationError("no rubric decisions to estimate rates from", code="EMPTY_TRAJECTORY")
    return ResolutionRates(n_fail / total, n_pass / total, n_solved / total)


def _decisions(traj: Trajectory, outer_only: bool) -> list[RubricDecision]:
    if outer_only:
        return list(traj.decision_path)
    return [d for t in traj.turns for d in t.inner_decisions]


def resolution_rates(traj: Trajectory | Iterable[Trajectory], *, outer_only: bool = False) -> ResolutionRates:
    """Rates over every rubric decision, inner attempts included by default.

    Several rollouts of the same dialogue may be passed together; their
    decisions are pooled.
    """
    group = [traj] if isinstance(traj, Trajectory) else list(traj)
    decisions = [d for t in group for d in _decisions(t, outer_only)]
    return rates_from_counts(
        decisions.count(RubricDecision.FAIL),
        decisions.count(RubricDecision.PASS),
        decisions.count(RubricDecision.SOLVED),
    )


class Difficulty(enum.Enum):
    EASY = "easy"
    HARD = "hard"


def partition(rates: ResolutionRates) -> Difficulty:
    # strict inequalities; ties route to HARD
    f, p, s = rates.p_fail, rates.p_pass, rates.p_solved
    return Difficulty.EASY if (f < p + s or f + p < s) else Difficulty.HARD


# ---- statistics -------------------------------------------------------------


def _ntok(text: str) -> int:
    return len(text.split())


@dataclass(frozen=True)
class CorpusStats:
    dialogue_count: int
    utterance_count: int
    avg_turns: float
    avg_query_len: float
    avg_understanding_len: float
    avg_reasoning_len: float
    avg_response_len: float
    emotion_label_count: int
    profile_count: int

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


_SPAN_FIELDS = ("understanding", "reasoning", "response")


@dataclass
class StatsAccumulator:
    """Single-pass accumulator; shards combine with :meth:`merge`.

    Span lengths average over turns whose final revision parsed.
    """

    dialogues: int = 0
    turns: int = 0
    query_tokens: int = 0
    span_tokens: dict[str, int] = field(default_factory=lambda: dict.fromkeys(_SPAN_FIELDS, 0))
    parsed_turns: int = 0
    labels: set[str] = field(default_factory=set)
    profiles: set[str] = field(default_factory=set)

    def add(self, traj: Trajectory) -> None:
        self.dialogues += 1
        self.turns += len(traj.turns)
        for t in traj.turns:
            self.query_tokens += _ntok(t.user_utterance)
            if t.parsed is not None:
                self.parsed_turns += 1
                for name in _SPAN_FIELDS:
                    self.span_tokens[name] += _ntok(getattr(t.parsed, name))
        self.labels.add(traj.situation.emotion.canonical)
        self.profiles.add(traj.profile.user_id)

    def merge(self, other: StatsAccumulator) -> StatsAccumulator:
        return StatsAccumulator(
            dialogues=self.dialogues + other.dialogues,
            turns=self.turns + other.turns,
            query_tokens=self.query_tokens + other.query_tokens,
            span_tokens={k: self.span_tokens[k] + other.span_tokens[k] for k in _SPAN_FIELDS},
            parsed_turns=self.parsed_turns + other.parsed_turns,
            labels=self.labels | other.labels,
            profiles=self.profiles | other.profiles,
        )

    def result(self) -> CorpusStats:
        def avg(num: int, den: int) -> float:
            return num / den if den else 0.0

        return CorpusStats(
            dialogue_count=self.dialogues,
            utterance_count=2 * self.turns,
            avg_turns=avg(self.turns, self.dialogues),
            avg_query_len=avg(self.query_tokens, self.turns),
            avg_understanding_len=avg(self.span_tokens["understanding"], self.parsed_turns),
            avg_reasoning_len=avg(self.span_tokens["reasoning"], self.parsed_turns),
            avg_response_len=avg(self.span_tokens["response"], self.parsed_turns),
            emotion_label_count=len(self.labels),
            profile_count=len(self.profiles),
        )


def compute_stats(trajectories: Iterable[Trajectory]) -> CorpusStats:
    acc = StatsAccumulator()
    for t in trajectories:
        acc.add(t)
    return acc.result()


_TABLE_ROWS = (
    ("# Dialogues", "dialogue_count", "{:d}"),
    ("# Utterances", "utterance_count", "{:d}"),
    ("Avg. Multi-turns", "avg_turns", "{:.3f}"),
    ("Avg. Query Length", "avg_query_len", "{:.2f}"),
    ("Avg. Understanding Length", "avg_understanding_len", "{:.2f}"),
    ("Avg. Reasoning Length", "avg_reasoning_len", "{:.2f}"),
    ("Avg. Response Length", "avg_response_len", "{:.2f}"),
    ("Emotion Labels", "emotion_label_count", "{:d}"),
    ("User Profiles", "profile_count", "{:d}"),
)


def format_table(columns: dict[str, CorpusStats]) -> str:
    """Plain-text table, one column per split (e.g. train / test / all)."""
    names = list(columns)
    cells = [[fmt.format(getattr(columns[n], attr)) for n in names] for _, attr, fmt in _TABLE_ROWS]
    label_w = max(len(r[0]) for r in _TABLE_ROWS + (("Category", "", ""),))
    col_w = [max(len(n), *(len(row[i]) for row in cells)) for i, n in enumerate(names)]
    header = "Category".ljust(label_w) + "".join("  " + n.rjust(w) for n, w in zip(names, col_w))
    lines = [header, "-" * len(header)]
    for (label, _, _), row in zip(_TABLE_ROWS, cells):
        lines.append(label.ljust(label_w) + "".join("  " + c.rjust(w) for c, w in zip(row, col_w)))
    return "\n".join(lines) + "\n"


# ---- SFT pairs --------------------------------------------------------------


@dataclass(frozen=True)
class SftPair:
    dialogue_id: str
    turn: int
    context: str
    target: str

    def to_dict(self) -> dict[str, Any]:
        return {"dialogue_id": self.dialogue_id, "turn": self.turn, "context": self.context, "target": self.target}


def _profile_lines(traj: Trajectory) -> list[str]:
    p = traj.profile
    lines = ["[profile]", f"user_id: {p.user_id}"]
    for key in ("mbti", "gender", "relationship", "occupation"):
        value = getattr(p, key)
        if value:
            lines.append(f"{key}: {value}")
    if p.about:
        lines.append(f"about: {p.about}")
    if p.recent_activities:
        lines.append("recent_activities: " + "; ".join(p.recent_activities))
    return lines


def emit_sft_pairs(traj: Trajectory, tags: TagSpec = DEFAULT_TAGS) -> list[SftPair]:
    """One (context, target) pair per turn.

    The context holds the profile, the situation, every earlier exchange with
    the assistant side rendered in canonical tags, and the current user turn.
    """
    header = _profile_lines(traj) + ["[situation]", traj.situation.text, "[dialogue]"]
    history: list[str] = []
    pairs = []
    for turn in traj.turns:
        if turn.parsed is None:
            raise ValidationError(
                f"{traj.dialogue_id} turn {turn.index} has no parseable final revision", code="UNPARSEABLE_TURN"
            )
        history.append(f"user: {turn.user_utterance}")
        target = render_four_span(turn.parsed, tags)
        pairs.append(SftPair(traj.dialogue_id, turn.index, "\n".join(header + history), target))
        history.append(f"assistant: {target}")
    return pairs


# ---- dedup ------------------------------------------------------------------


def dedup_key(traj: Trajectory) -> str:
    payload = dumps_line([traj.profile.user_id, traj.situation.text, [t.user_utterance for t in traj.turns]])
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def dedup(trajectories: Iterable[Trajectory]) -> Iterator[Trajectory]:
    """Drop exact repeats of (profile, situation, user utterances); first one wins."""
    seen: set[str] = set()
    for t in trajectories:
        key = dedup_key(t)
        if key not in seen:
            seen.add(key)
            yield t
