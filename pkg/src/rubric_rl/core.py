"""Domain types shared across the pipeline.

Everything here is immutable after construction. Trajectories serialize to
plain dicts (see :meth:`Trajectory.to_dict`) whose layout is the on-disk
JSONL schema.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ProfileError, SchemaViolation, UnknownLabel, ValidationError

MBTI_CODES = frozenset(a + b + c + d for a in "EI" for b in "SN" for c in "TF" for d in "JP")

TAXONOMY_SIZE = 32


def _levenshtein(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


@dataclass(frozen=True)
class EmotionLabel:
    canonical: str

    def __str__(self) -> str:
        return self.canonical


class Taxonomy:
    """An ordered, duplicate-free set of canonical emotion labels."""

    def __init__(self, labels: Iterable[str], *, expected_size: int | None = TAXONOMY_SIZE) -> None:
        cleaned = [lab.strip().lower() for lab in labels if lab.strip()]
        if len(set(cleaned)) != len(cleaned):
            raise ValidationError("taxonomy contains duplicate labels", code="BAD_TAXONOMY")
        if not cleaned:
            raise ValidationError("taxonomy is empty", code="BAD_TAXONOMY")
        if expected_size is not None and len(cleaned) != expected_size:
            raise ValidationError(
                f"taxonomy has {len(cleaned)} labels, expected {expected_size}", code="BAD_TAXONOMY"
            )
        self.labels: tuple[str, ...] = tuple(cleaned)
        self._members = frozenset(cleaned)

    @classmethod
    def from_file(cls, path: str | Path, *, expected_size: int | None = TAXONOMY_SIZE) -> Taxonomy:
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.splitlines(), expected_size=expected_size)

    def __contains__(self, label: object) -> bool:
        return label in self._members

    def __len__(self) -> int:
        return len(self.labels)

    def nearest(self, raw: str) -> str:
        key = raw.strip().lower()
        return min(self.labels, key=lambda lab: (_levenshtein(key, lab), lab))


@functools.lru_cache(maxsize=1)
def default_taxonomy() -> Taxonomy:
    text = resources.files("rubric_rl").joinpath("data/emotions.txt").read_text(encoding="utf-8")
    return Taxonomy(text.splitlines())


def canonical_emotion(raw: str, taxonomy: Taxonomy | None = None) -> EmotionLabel:
    """Trim and lowercase ``raw``; raise :class:`UnknownLabel` unless it is in the taxonomy."""
    taxonomy = taxonomy or default_taxonomy()
    key = str(raw).strip().lower()
    if key not in taxonomy:
        raise UnknownLabel(str(raw), taxonomy.nearest(key))
    return EmotionLabel(key)


@functools.total_ordering
class RubricDecision(enum.Enum):
    FAIL = "fail"
    PASS = "pass"
    SOLVED = "solved"

    @property
    def rank(self) -> int:
        return _DECISION_RANK[self]

    def __lt__(self, other: object) -> bool:
        if not isinstance(other, RubricDecision):
            return NotImplemented
        return self.rank < other.rank

    @classmethod
    def parse(cls, raw: str) -> RubricDecision:
        try:
            return cls(str(raw).strip().lower())
        except ValueError:
            raise ValidationError(f"unknown rubric decision {raw!r}", code="BAD_DECISION") from None


_DECISION_RANK = {RubricDecision.FAIL: 0, RubricDecision.PASS: 1, RubricDecision.SOLVED: 2}


class Status(enum.Enum):
    SOLVED = "solved"
    EXHAUSTED = "exhausted"
    FILTERED = "filtered"


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    mbti: str | None = None
    gender: str | None = None
    relationship: str | None = None
    occupation: str | None = None
    about: str = ""
    recent_activities: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.user_id or any(ch.isspace() for ch in self.user_id):
            raise ProfileError([("MISSING_ID", f"user_id {self.user_id!r} is empty or has whitespace")])
        if self.mbti is not None and self.mbti not in MBTI_CODES:
            raise ProfileError([("INVALID_MBTI", f"mbti {self.mbti!r} is not one of the 16 codes")])

    def to_dict(self) -> dict[str, Any]:
        return {
            "user_id": self.user_id,
            "mbti": self.mbti,
            "gender": self.gender,
            "relationship": self.relationship,
            "occupation": self.occupation,
            "about": self.about,
            "recent_activities": list(self.recent_activities),
        }


def _opt_text(record: Mapping[str, Any], key: str, problems: list[tuple[str, str]]) -> str | None:
    value = record.get(key)
    if value is None:
        return None
    if not isinstance(value, str):
        problems.append(("BAD_FIELD", f"{key} must be text"))
        return None
    return value


def validate_profile(record: Mapping[str, Any]) -> UserProfile:
    """Build a :class:`UserProfile` from a decoded record, reporting every bad field at once.

    Accepts either ``user_id`` or ``id`` as the identifier key.
    """
    if not isinstance(record, Mapping):
        raise ProfileError([("BAD_RECORD", "profile record must be an object")])
    problems: list[tuple[str, str]] = []

    user_id = record.get("user_id", record.get("id"))
    if not isinstance(user_id, str) or not user_id or any(ch.isspace() for ch in user_id):
        problems.append(("MISSING_ID", f"user_id {user_id!r} is missing, empty, or contains whitespace"))

    mbti = record.get("mbti")
    if mbti is not None:
        if not isinstance(mbti, str) or mbti.strip().upper() not in MBTI_CODES:
            problems.append(("INVALID_MBTI", f"mbti {mbti!r} is not one of the 16 codes"))
        else:
            mbti = mbti.strip().upper()

    about = record.get("about", "")
    if about is None:
        about = ""
    if not isinstance(about, str):
        problems.append(("BAD_FIELD", "about must be text"))

    activities = record.get("recent_activities") or []
    if not isinstance(activities, list) or not all(isinstance(a, str) for a in activities):
        problems.append(("BAD_FIELD", "recent_activities must be a list of text"))
        activities = []

    gender = _opt_text(record, "gender", problems)
    relationship = _opt_text(record, "relationship", problems)
    occupation = _opt_text(record, "occupation", problems)

    if problems:
        raise ProfileError(problems)
    return UserProfile(
        user_id=user_id,
        mbti=mbti,
        gender=gender,
        relationship=relationship,
        occupation=occupation,
        about=about,
        recent_activities=tuple(activities),
    )


@dataclass(frozen=True)
class Situation:
    text: str
    emotion: EmotionLabel
    user_id: str | None = None  # optional binding to a specific profile

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValidationError("situation text is empty", code="EMPTY_SITUATION")

    @classmethod
    def from_dict(cls, record: Mapping[str, Any], taxonomy: Taxonomy | None = None) -> Situation:
        text = record.get("text")
        if not isinstance(text, str):
            raise SchemaViolation(None, "text", "must be text")
        emotion = record.get("emotion")
        if not isinstance(emotion, str):
            raise SchemaViolation(None, "emotion", "must be text")
        user_id = record.get("user_id")
        return cls(text=text, emotion=canonical_emotion(emotion, taxonomy), user_id=user_id)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"text": self.text, "emotion": self.emotion.canonical}
        if self.user_id is not None:
            out["user_id"] = self.user_id
        return out


@dataclass(frozen=True)
class FourSpanOutput:
    understanding: str
    reasoning: str
    emotion: str
    response: str

    def __post_init__(self) -> None:
        for name in ("understanding", "reasoning", "emotion", "response"):
            if not getattr(self, name).strip():
                raise ValidationError(f"span {name!r} is empty", code="EMPTY_SPAN")

    def emotion_label(self, taxonomy: Taxonomy | None = None) -> EmotionLabel:
        return canonical_emotion(self.emotion, taxonomy)

    def to_dict(self) -> dict[str, str]:
        return {
            "understanding": self.understanding,
            "reasoning": self.reasoning,
            "emotion": self.emotion,
            "response": self.response,
        }


@dataclass(frozen=True)
class Turn:
    index: int
    user_utterance: str
    assistant_raw: str
    parsed: FourSpanOutput | None
    inner_decisions: tuple[RubricDecision, ...]

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValidationError(f"turn index {self.index} < 1", code="BAD_TURN")
        if not self.inner_decisions:
            raise ValidationError("turn has no rubric decisions", code="BAD_TURN")

    @property
    def decision(self) -> RubricDecision:
        return self.inner_decisions[-1]

    @property
    def refinement_count(self) -> int:
        return len(self.inner_decisions)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "index": self.index,
            "user": self.user_utterance,
            "assistant_raw": self.assistant_raw,
        }
        if self.parsed is not None:
            out["spans"] = self.parsed.to_dict()
        out["decision"] = self.decision.value
        out["inner_decisions"] = [d.value for d in self.inner_decisions]
        out["refinement_count"] = self.refinement_count
        return out

    @classmethod
    def from_dict(cls, record: Mapping[str, Any]) -> Turn:
        inner = tuple(RubricDecision.parse(d) for d in _req(record, "inner_decisions", list))
        spans = record.get("spans")
        parsed = FourSpanOutput(**{k: spans[k] for k in _SPAN_KEYS}) if spans is not None else None
        turn = cls(
            index=_req(record, "index", int),
            user_utterance=_req(record, "user", str),
            assistant_raw=_req(record, "assistant_raw", str),
            parsed=parsed,
            inner_decisions=inner,
        )
        if "decision" in record and RubricDecision.parse(record["decision"]) != turn.decision:
            raise SchemaViolation(None, "decision", "must equal the last inner decision")
        if "refinement_count" in record and record["refinement_count"] != turn.refinement_count:
            raise SchemaViolation(None, "refinement_count", "must equal len(inner_decisions)")
        return turn


_SPAN_KEYS = ("understanding", "reasoning", "emotion", "response")


def _req(record: Mapping[str, Any], key: str, kind: type) -> Any:
    if key not in record:
        raise SchemaViolation(None, key, "is missing")
    value = record[key]
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise SchemaViolation(None, key, f"must be {kind.__name__}")
    return value


@dataclass(frozen=True)
class Trajectory:
    dialogue_id: str
    profile: UserProfile
    situation: Situation
    turns: tuple[Turn, ...]
    status: Status
    rng_seed: int
    split: str | None = None
    filter_reasons: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        if not self.turns:
            raise ValidationError("trajectory has no turns", code="EMPTY_TRAJECTORY")
        for i, turn in enumerate(self.turns, 1):
            if turn.index != i:
                raise ValidationError(f"turn {i} carries index {turn.index}", code="BAD_TURN")
        solved_last = self.turns[-1].decision is RubricDecision.SOLVED
        if any(t.decision is RubricDecision.SOLVED for t in self.turns[:-1]):
            raise ValidationError("SOLVED may only end a trajectory", code="BAD_STATUS")
        if self.status is Status.SOLVED and not solved_last:
            raise ValidationError("status SOLVED without a final SOLVED decision", code="BAD_STATUS")
        if self.status is Status.EXHAUSTED and solved_last:
            raise ValidationError("status EXHAUSTED but the last decision is SOLVED", code="BAD_STATUS")

    @property
    def decision_path(self) -> tuple[RubricDecision, ...]:
        return tuple(t.decision for t in self.turns)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "dialogue_id": self.dialogue_id,
            "profile": self.profile.to_dict(),
            "situation": self.situation.to_dict(),
            "turns": [t.to_dict() for t in self.turns],
            "decision_path": [d.value for d in self.decision_path],
            "status": self.status.value,
            "rng_seed": self.rng_seed,
        }
        if self.split is not None:
            out["split"] = self.split
        if self.filter_reasons:
            out["filter_reasons"] = list(self.filter_reasons)
        return out

    @classmethod
    def from_dict(cls, record: Mapping[str, Any], taxonomy: Taxonomy | None = None) -> Trajectory:
        if not isinstance(record, Mapping):
            raise SchemaViolation(None, "<record>", "must be an object")
        profile = validate_profile(_req(record, "profile", dict))
        situation = Situation.from_dict(_req(record, "situation", dict), taxonomy)
        turns = tuple(Turn.from_dict(t) for t in _req(record, "turns", list))
        try:
            status = Status(_req(record, "status", str))
        except ValueError:
            raise SchemaViolation(None, "status", "is not solved/exhausted/filtered") from None
        traj = cls(
            dialogue_id=_req(record, "dialogue_id", str),
            profile=profile,
            situation=situation,
            turns=turns,
            status=status,
            rng_seed=_req(record, "rng_seed", int),
            split=record.get("split"),
            filter_reasons=tuple(record.get("filter_reasons") or ()),
        )
        if "decision_path" in record:
            path = tuple(RubricDecision.parse(d) for d in record["decision_path"])
            if path != traj.decision_path:
                raise SchemaViolation(None, "decision_path", "disagrees with the turn decisions")
        return traj

    def replace(self, **changes: Any) -> Trajectory:
        from dataclasses import replace

        return replace(self, **changes)
