from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from conftest import TAGS, tagged
from rubric_rl.core import EmotionLabel
from rubric_rl.errors import AgentError, JudgeUnavailable, ValidationError
from rubric_rl.rewards import (
    RewardWeights,
    RubricScores,
    emotion_reward,
    parse_judge_output,
    rubric_normalize,
    score_candidate,
    unified_reward,
)

CARING = EmotionLabel("caring")
unit = st.floats(0, 1, allow_nan=False)


class FixedJudge:
    def __init__(self, *scores, error=None):
        self.scores = RubricScores(*scores) if scores else None
        self.error = error
        self.calls = []

    def judge(self, response, user_utterance=None):
        self.calls.append((response, user_utterance))
        if self.error:
            raise self.error
        return self.scores


@pytest.mark.parametrize("pred,expected", [("Caring", 1), ("caring", 1), ("content", 0), ("joyfulness", 0), ("", 0)])
def test_emotion_reward(pred, expected):
    assert emotion_reward(pred, CARING) == expected


@given(st.text(max_size=20))
def test_emotion_reward_case_invariant(x):
    assert emotion_reward(x, CARING) == emotion_reward(x.upper(), CARING)


@pytest.mark.parametrize("scores,expected", [((5,) * 5, 1.0), ((1,) * 5, 0.0), ((4, 5, 3, 4, 4), 0.75)])
def test_rubric_normalize(scores, expected):
    assert rubric_normalize(RubricScores(*scores)) == expected


@given(st.lists(st.integers(1, 5), min_size=5, max_size=5), st.integers(0, 4))
def test_rubric_normalize_is_affine(vals, i):
    if vals[i] == 5:
        return
    bumped = list(vals)
    bumped[i] += 1
    diff = rubric_normalize(RubricScores(*bumped)) - rubric_normalize(RubricScores(*vals))
    assert diff == pytest.approx(0.05, abs=1e-12)


def test_rubric_scores_range():
    with pytest.raises(ValidationError) as exc:
        RubricScores(0, 3, 3, 3, 3)
    assert exc.value.code == "OUT_OF_RANGE"


JUDGE_JSON = '{"relevance":4,"fluency":5,"empathy":3,"persona":4,"safety":4}'


def test_parse_judge_output():
    assert parse_judge_output(JUDGE_JSON).values() == (4, 5, 3, 4, 4)
    wrapped = f"Here is my assessment.\n{JUDGE_JSON}\nThanks!"
    assert parse_judge_output(wrapped).values() == (4, 5, 3, 4, 4)


def test_parse_judge_skips_unrelated_objects():
    raw = '{"note": "draft"} then {"relevance":2,"fluency":2,"empathy":2,"persona":2,"safety":2,"rationale":"meh"}'
    out = parse_judge_output(raw)
    assert out.values() == (2,) * 5
    assert out.rationale == "meh"


def test_parse_judge_out_of_range():
    with pytest.raises(ValidationError) as exc:
        parse_judge_output(JUDGE_JSON.replace('"empathy":3', '"empathy": 7'))
    assert exc.value.code == "SCORE_OUT_OF_RANGE"


@pytest.mark.parametrize("raw", ["no json here", '{"relevance": 4}', '{"relevance":"4","fluency":5,"empathy":3,"persona":4,"safety":4}'])
def test_parse_judge_unparseable(raw):
    with pytest.raises(ValidationError) as exc:
        parse_judge_output(raw)
    assert exc.value.code == "UNPARSEABLE_JUDGMENT"


def test_unified_reward_examples():
    b = unified_reward(1, 1, 0.75)
    assert b.r_total == pytest.approx(2.75 / 3, abs=1e-12)
    assert unified_reward(0, 0, 0).r_total == 0
    for w in [(1, 0, 0), (0.2, 0.3, 0.5), (1 / 3, 1 / 3, 1 / 3)]:
        assert unified_reward(1, 1, 1, RewardWeights(*w)).r_total == pytest.approx(1.0, abs=1e-12)


def test_unified_reward_range_checks():
    with pytest.raises(ValidationError) as exc:
        unified_reward(1.5, 0, 0)
    assert exc.value.code == "COMPONENT_OUT_OF_RANGE"
    with pytest.raises(ValidationError) as exc:
        RewardWeights(0.5, 0.5, 0.5)
    assert exc.value.code == "BAD_WEIGHTS"


def test_weights_parse():
    assert RewardWeights.parse("0.5,0.25,0.25") == RewardWeights(0.5, 0.25, 0.25)
    with pytest.raises(ValidationError):
        RewardWeights.parse("1,2")


@given(unit, unit, unit, st.integers(0, 2), unit)
def test_total_monotone_in_each_component(f, e, r, which, bump):
    comps = [f, e, r]
    raised = list(comps)
    raised[which] = max(raised[which], bump)
    assert unified_reward(*raised).r_total >= unified_reward(*comps).r_total


@given(st.permutations([0.1, 0.7, 0.35]))
def test_equal_weights_symmetric(perm):
    base = unified_reward(0.1, 0.7, 0.35).r_total
    assert unified_reward(*perm).r_total == pytest.approx(base, abs=1e-12)


@given(unit, unit, unit)
def test_total_is_weighted_sum(f, e, r):
    w = RewardWeights(0.5, 0.3, 0.2)
    b = unified_reward(f, e, r, w)
    assert b.r_total == pytest.approx(0.5 * f + 0.3 * e + 0.2 * r, abs=1e-12)


def test_score_compliant_all_fives():
    judge = FixedJudge(5, 5, 5, 5, 5)
    b = score_candidate(tagged(e="Caring", s="  I'm here.  "), CARING, judge, user_utterance="hi")
    assert (b.r_fmt, b.r_emo, b.r_rub, b.r_total) == (1.0, 1, 1.0, 1.0)
    assert judge.calls == [("I'm here.", "hi")]


def test_score_missing_response_span():
    judge = FixedJudge(5, 5, 5, 5, 5)
    raw = tagged(e="caring").split(TAGS[6])[0]
    b = score_candidate(raw, CARING, judge)
    expected = float((Fraction(7, 9) + 1 + 0) / 3)
    assert b.r_fmt == pytest.approx(7 / 9, abs=1e-12)
    assert b.r_rub == 0
    assert b.r_total == pytest.approx(expected, abs=1e-12)
    assert b.r_total == pytest.approx(0.5926, abs=1e-4)
    assert judge.calls == []


def test_score_wrong_emotion():
    b = score_candidate(tagged(e="content"), CARING, FixedJudge(3, 3, 3, 3, 3))
    assert (b.r_fmt, b.r_emo, b.r_rub) == (1.0, 0, 0.5)
    assert b.r_total == pytest.approx(0.5, abs=1e-12)


def test_score_wraps_agent_errors():
    with pytest.raises(JudgeUnavailable):
        score_candidate(tagged(), CARING, FixedJudge(error=AgentError("down")))
