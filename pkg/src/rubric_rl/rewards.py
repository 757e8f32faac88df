"""Composite candidate reward: format, emotion match, and rubric judge."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Protocol

from .core import EmotionLabel, Taxonomy, canonical_emotion
from .errors import AgentError, JudgeUnavailable, UnknownLabel, ValidationError
from .fileio import find_json_object
from .spans import DEFAULT_TAGS, TagSpec, extract_spans, format_reward

RUBRIC_FIELDS = ("relevance", "fluency", "empathy", "persona", "safety")


@dataclass(frozen=True)
class RubricScores:
    relevance: int
    fluency: int
    empathy: int
    persona: int
    safety: int
    rationale: str | None = None

    def __post_init__(self) -> None:
        for name in RUBRIC_FIELDS:
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or not 1 <= value <= 5:
                raise ValidationError(f"{name} score {value!r} outside 1..5", code="OUT_OF_RANGE")

    def values(self) -> tuple[int, ...]:
        return tuple(getattr(self, n) for n in RUBRIC_FIELDS)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {n: getattr(self, n) for n in RUBRIC_FIELDS}
        if self.rationale is not None:
            out["rationale"] = self.rationale
        return out


@dataclass(frozen=True)
class RewardWeights:
    lambda_f: float = 1 / 3
    lambda_e: float = 1 / 3
    lambda_r: float = 1 / 3

    def __post_init__(self) -> None:
        ws = (self.lambda_f, self.lambda_e, self.lambda_r)
        if any(not math.isfinite(w) or w < 0 for w in ws) or abs(sum(ws) - 1.0) > 1e-12:
            raise ValidationError(f"weights {ws} must be non-negative and sum to 1", code="BAD_WEIGHTS")

    @classmethod
    def parse(cls, text: str) -> RewardWeights:
        """Parse ``"f,e,r"``. No renormalization: the three must already sum to 1."""
        try:
            f, e, r = (float(x) for x in text.split(","))
        except ValueError:
            raise ValidationError(f"weights must look like f,e,r; got {text!r}", code="BAD_WEIGHTS") from None
        return cls(f, e, r)


@dataclass(frozen=True)
class RewardBreakdown:
    r_fmt: float
    r_emo: float
    r_rub: float
    r_total: float
    weights: RewardWeights
    rubric: RubricScores | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "r_fmt": self.r_fmt,
            "r_emo": self.r_emo,
            "r_rub": self.r_rub,
            "r_total": self.r_total,
            "weights": [self.weights.lambda_f, self.weights.lambda_e, self.weights.lambda_r],
            "rubric": self.rubric.to_dict() if self.rubric else None,
        }


def emotion_reward(predicted: str, gold: EmotionLabel, taxonomy: Taxonomy | None = None) -> int:
    try:
        return int(canonical_emotion(predicted, taxonomy) == gold)
    except UnknownLabel:
        return 0


def rubric_normalize(scores: RubricScores) -> float:
    vals = scores.values()
    if any(not 1 <= v <= 5 for v in vals):
        raise ValidationError(f"rubric scores {vals} outside 1..5", code="OUT_OF_RANGE")
    return (sum(vals) - 5) / 20


def parse_judge_output(raw: str) -> RubricScores:
    """Pull the first JSON object carrying all five rubric fields out of free text."""
    obj = find_json_object(raw, RUBRIC_FIELDS)
    if obj is None:
        raise ValidationError("no rubric object found in judge output", code="UNPARSEABLE_JUDGMENT")
    return scores_from_dict(obj)


def scores_from_dict(obj: dict[str, Any]) -> RubricScores:
    values = {}
    for name in RUBRIC_FIELDS:
        v = obj[name]
        if isinstance(v, float) and v.is_integer():
            v = int(v)
        if isinstance(v, bool) or not isinstance(v, int):
            raise ValidationError(f"{name} score {v!r} is not an integer", code="UNPARSEABLE_JUDGMENT")
        if not 1 <= v <= 5:
            raise ValidationError(f"{name} score {v} outside 1..5", code="SCORE_OUT_OF_RANGE")
        values[name] = v
    rationale = obj.get("rationale")
    return RubricScores(**values, rationale=rationale if isinstance(rationale, str) else None)


def unified_reward(
    r_fmt: float,
    r_emo: float,
    r_rub: float,
    weights: RewardWeights | None = None,
    rubric: RubricScores | None = None,
) -> RewardBreakdown:
    weights = weights or RewardWeights()
    for name, v in (("r_fmt", r_fmt), ("r_emo", r_emo), ("r_rub", r_rub)):
        if not (0.0 <= v <= 1.0):
            raise ValidationError(f"{name}={v} outside [0, 1]", code="COMPONENT_OUT_OF_RANGE")
    total = weights.lambda_f * r_fmt + weights.lambda_e * r_emo + weights.lambda_r * r_rub
    # rounding can push an all-ones total a hair past 1
    total = min(max(total, 0.0), 1.0)
    return RewardBreakdown(float(r_fmt), float(r_emo), float(r_rub), total, weights, rubric)


class Judge(Protocol):
    def judge(self, response: str, user_utterance: str | None = None) -> RubricScores: ...


def score_candidate(
    raw: str,
    gold: EmotionLabel,
    judge: Judge,
    weights: RewardWeights | None = None,
    *,
    user_utterance: str | None = None,
    tags: TagSpec = DEFAULT_TAGS,
    taxonomy: Taxonomy | None = None,
) -> RewardBreakdown:
    """Score one candidate.

    The judge only ever sees the response span. Spans are taken first-match
    even when the candidate as a whole is malformed; a candidate with no
    non-blank response span gets ``r_rub = 0`` and no judge call.
    """
    r_fmt = format_reward(raw, tags)
    _, _, emotion, response = extract_spans(raw, tags)
    r_emo = emotion_reward(emotion, gold, taxonomy) if emotion is not None else 0
    if response is None or not response.strip():
        return unified_reward(r_fmt, r_emo, 0.0, weights)
    try:
        scores = judge.judge(response.strip(), user_utterance)
    except JudgeUnavailable:
        raise
    except AgentError as exc:
        raise JudgeUnavailable(str(exc)) from exc
    return unified_reward(r_fmt, r_emo, rubric_normalize(scores), weights, scores)
