"""Multi-turn dialogue synthesis as a replayable state machine.

Three agents cooperate: a user generator that plays the profile, a responder
that writes four-span replies, and an evaluator that grades each reply as
fail, pass or solved. Each turn gives the responder up to ``k_max`` attempts;
a dialogue lasts at most ``t_max`` turns and ends early on a solved verdict.

The user generator only ever sees the visible conversation. Verdicts and
critiques stay between the responder and the evaluator.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .core import (
    RubricDecision,
    Situation,
    Status,
    Taxonomy,
    Trajectory,
    Turn,
    UserProfile,
    canonical_emotion,
)
from .errors import AgentFailure, UnknownLabel, ValidationError
from .spans import DEFAULT_TAGS, TagSpec, extract_spans, try_parse

log = logging.getLogger(__name__)

Message = Mapping[str, str]


@dataclass(frozen=True)
class Verdict:
    decision: RubricDecision
    critique: str | None = None


class UserGenerator(Protocol):
    def open(self, profile: UserProfile, situation: Situation) -> str: ...

    def follow_up(
        self, profile: UserProfile, situation: Situation, history: Sequence[Message], last_reply: str
    ) -> str: ...


class Responder(Protocol):
    def respond(self, history: Sequence[Message], profile: UserProfile, critique: str | None = None) -> str: ...


class Evaluator(Protocol):
    def evaluate(self, user_utterance: str, assistant_raw: str) -> Verdict: ...


@dataclass(frozen=True)
class AgentTriple:
    user_generator: UserGenerator
    responder: Responder
    evaluator: Evaluator

    def __post_init__(self) -> None:
        for name in ("user_generator", "responder", "evaluator"):
            if getattr(self, name) is None:
                raise ValidationError(f"agent {name} is not configured", code="AGENT_MISSING")


DEFAULT_FILTERS = ("f1", "f2", "f3")


@dataclass(frozen=True)
class SandboxConfig:
    k_max: int = 5
    t_max: int = 10
    rng_seed: int = 0
    filters: tuple[str, ...] = DEFAULT_FILTERS
    tags: TagSpec = DEFAULT_TAGS

    def __post_init__(self) -> None:
        if self.k_max < 1 or self.t_max < 1:
            raise ValidationError("k_max and t_max must be >= 1", code="BAD_CONFIG")
        unknown = [f for f in self.filters if f not in FILTERS]
        if unknown:
            raise ValidationError(f"unknown filter(s) {unknown}", code="UNKNOWN_FILTER_NAME")


def _reply_text(raw: str, tags: TagSpec) -> str:
    # the simulated user reads only the response span when there is one
    response = extract_spans(raw, tags)[3]
    return response.strip() if response and response.strip() else raw


def run_turn(
    history: Sequence[Message],
    profile: UserProfile,
    agents: AgentTriple,
    config: SandboxConfig,
    *,
    index: int = 1,
) -> Turn:
    if not history or history[-1].get("role") != "user":
        raise ValidationError("history must end with the pending user utterance", code="BAD_HISTORY")
    x_t = history[-1]["content"]
    decisions: list[RubricDecision] = []
    critique: str | None = None
    raw = ""
    for attempt in range(1, config.k_max + 1):
        try:
            raw = agents.responder.respond(list(history), profile, critique)
        except Exception as exc:
            raise AgentFailure("responder", attempt, exc) from exc
        try:
            verdict = agents.evaluator.evaluate(x_t, raw)
        except Exception as exc:
            raise AgentFailure("evaluator", attempt, exc) from exc
        decisions.append(verdict.decision)
        critique = verdict.critique
        if verdict.decision is not RubricDecision.FAIL:
            break
    return Turn(
        index=index,
        user_utterance=x_t,
        assistant_raw=raw,
        parsed=try_parse(raw, config.tags),
        inner_decisions=tuple(decisions),
    )


def run_trajectory(
    profile: UserProfile,
    situation: Situation,
    agents: AgentTriple,
    config: SandboxConfig,
    *,
    dialogue_id: str = "d0",
) -> Trajectory:
    """Run one dialogue to a solved verdict or ``t_max`` turns. Filters are not applied here."""
    history: list[dict[str, str]] = []
    turns: list[Turn] = []

    def fail(exc: AgentFailure) -> AgentFailure:
        exc.partial = {
            "dialogue_id": dialogue_id,
            "rng_seed": config.rng_seed,
            "turns": [t.to_dict() for t in turns],
        }
        return exc

    try:
        x_t = agents.user_generator.open(profile, situation)
    except Exception as exc:
        raise fail(AgentFailure("user_generator", 1, exc)) from exc

    status = Status.EXHAUSTED
    for t in range(1, config.t_max + 1):
        history.append({"role": "user", "content": x_t})
        try:
            turn = run_turn(history, profile, agents, config, index=t)
        except AgentFailure as exc:
            raise fail(exc) from exc.cause
        turns.append(turn)
        if turn.decision is RubricDecision.SOLVED:
            status = Status.SOLVED
            break
        if t == config.t_max:
            break
        reply = _reply_text(turn.assistant_raw, config.tags)
        history.append({"role": "assistant", "content": reply})
        try:
            x_t = agents.user_generator.follow_up(profile, situation, list(history), reply)
        except Exception as exc:
            raise fail(AgentFailure("user_generator", 1, exc)) from exc

    return Trajectory(
        dialogue_id=dialogue_id,
        profile=profile,
        situation=situation,
        turns=tuple(turns),
        status=status,
        rng_seed=config.rng_seed,
    )


# ---- filters ----------------------------------------------------------------

FilterFn = Callable[[Trajectory, TagSpec, "Taxonomy | None"], bool]


def _f1_parses(traj: Trajectory, tags: TagSpec, taxonomy: Taxonomy | None) -> bool:
    return all(try_parse(t.assistant_raw, tags) is not None for t in traj.turns)


def _f2_labels(traj: Trajectory, tags: TagSpec, taxonomy: Taxonomy | None) -> bool:
    for t in traj.turns:
        emotion = extract_spans(t.assistant_raw, tags)[2]
        if emotion is None:
            continue
        try:
            canonical_emotion(emotion, taxonomy)
        except UnknownLabel:
            return False
    return True


def _f3_users(traj: Trajectory, tags: TagSpec, taxonomy: Taxonomy | None) -> bool:
    return len(traj.turns) >= 1 and all(t.user_utterance.strip() for t in traj.turns)


FILTERS: dict[str, FilterFn] = {"f1": _f1_parses, "f2": _f2_labels, "f3": _f3_users}


def register_filter(name: str, fn: FilterFn) -> None:
    if name in FILTERS:
        raise ValidationError(f"filter {name!r} already registered", code="DUPLICATE_FILTER")
    FILTERS[name] = fn


def apply_filters(
    traj: Trajectory,
    filters: Iterable[str] = DEFAULT_FILTERS,
    *,
    tags: TagSpec = DEFAULT_TAGS,
    taxonomy: Taxonomy | None = None,
) -> list[str]:
    """Names of the failed predicates, sorted; an empty list means the trajectory is kept."""
    names = list(filters)
    unknown = [n for n in names if n not in FILTERS]
    if unknown:
        raise ValidationError(f"unknown filter(s) {unknown}", code="UNKNOWN_FILTER_NAME")
    return sorted({n for n in names if not FILTERS[n](traj, tags, taxonomy)})


def mark_filtered(traj: Trajectory, reasons: Sequence[str]) -> Trajectory:
    if not reasons:
        return traj
    return traj.replace(status=Status.FILTERED, filter_reasons=tuple(reasons))


# ---- batch synthesis --------------------------------------------------------


def trajectory_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


@dataclass
class SynthResult:
    trajectories: list[Trajectory] = field(default_factory=list)
    failures: list[AgentFailure] = field(default_factory=list)


def synthesize(
    profiles: Sequence[UserProfile],
    situations: Sequence[Situation],
    factory: Callable[[int], AgentTriple],
    config: SandboxConfig,
    *,
    parallel: int = 1,
    keep_going: bool = False,
    taxonomy: Taxonomy | None = None,
) -> SynthResult:
    """One trajectory per situation, in input order.

    A situation bound to a ``user_id`` uses that profile; otherwise the
    profile is drawn with the trajectory's own seed. ``factory(i)`` builds
    the agents for trajectory ``i``.
    """
    if not profiles:
        raise ValidationError("no profiles given", code="EMPTY_INPUT")
    by_id = {p.user_id: p for p in profiles}
    if parallel < 1:
        raise ValidationError("parallel must be >= 1", code="BAD_CONFIG")

    def one(i: int) -> Trajectory | AgentFailure:
        situation = situations[i]
        seed = trajectory_seed(config.rng_seed, i)
        if situation.user_id is not None:
            if situation.user_id not in by_id:
                raise ValidationError(f"situation {i} names unknown profile {situation.user_id!r}", code="UNKNOWN_PROFILE")
            profile = by_id[situation.user_id]
        else:
            profile = profiles[int(np.random.default_rng(seed).integers(len(profiles)))]
        cfg = SandboxConfig(config.k_max, config.t_max, seed, config.filters, config.tags)
        try:
            traj = run_trajectory(profile, situation, factory(i), cfg, dialogue_id=f"d{i:05d}")
        except AgentFailure as exc:
            if not keep_going:
                raise
            log.warning("trajectory %d failed: %s", i, exc)
            return exc
        return mark_filtered(traj, apply_filters(traj, config.filters, tags=config.tags, taxonomy=taxonomy))

    if parallel == 1:
        outcomes = [one(i) for i in range(len(situations))]
    else:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            outcomes = list(pool.map(one, range(len(situations))))

    result = SynthResult()
    for item in outcomes:
        if isinstance(item, AgentFailure):
            result.failures.append(item)
        else:
            result.trajectories.append(item)
    return result


def verdict_from(value: Any) -> Verdict:
    """Accept ``"pass"`` or ``{"decision": "pass", "critique": "..."}``."""
    if isinstance(value, RubricDecision):
        return Verdict(value)
    if isinstance(value, str):
        return Verdict(RubricDecision.parse(value))
    if isinstance(value, Mapping) and "decision" in value:
        critique = value.get("critique")
        return Verdict(RubricDecision.parse(value["decision"]), str(critique) if critique else None)
    raise ValidationError(f"cannot read a rubric decision from {value!r}", code="BAD_DECISION")
