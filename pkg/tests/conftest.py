from __future__ import annotations

from importlib import resources
from pathlib import Path

import pytest

from rubric_rl.core import (
    EmotionLabel,
    FourSpanOutput,
    RubricDecision,
    Situation,
    Status,
    Trajectory,
    Turn,
    UserProfile,
)
from rubric_rl.spans import render_four_span

FIXTURES = Path(str(resources.files("rubric_rl").joinpath("data/fixtures")))

TAGS = (
    "<|understanding_begin|>", "<|understanding_end|>",
    "<|reasoning_begin|>", "<|reasoning_end|>",
    "<|emotion_begin|>", "<|emotion_end|>",
    "<|response_begin|>", "<|response_end|>",
)


def tagged(u: str = "the user is upset", r: str = "they need reassurance", e: str = "caring",
           s: str = "I am sorry, that sounds hard.") -> str:
    # written out by hand rather than through the renderer under test
    return (f"{TAGS[0]}{u}{TAGS[1]}{TAGS[2]}{r}{TAGS[3]}"
            f"{TAGS[4]}{e}{TAGS[5]}{TAGS[6]}{s}{TAGS[7]}")


def make_turn(index: int, decisions: tuple[str, ...], emotion: str = "sad", user: str | None = None) -> Turn:
    spans = FourSpanOutput("understood", "reasoned", emotion, "replied")
    return Turn(
        index=index,
        user_utterance=user or f"message {index}",
        assistant_raw=render_four_span(spans),
        parsed=spans,
        inner_decisions=tuple(RubricDecision(d) for d in decisions),
    )


def make_trajectory(paths: list[tuple[str, ...]], *, dialogue_id: str = "t0", user_id: str = "u1",
                    emotion: str = "sad", seed: int = 0) -> Trajectory:
    turns = tuple(make_turn(i, p, emotion) for i, p in enumerate(paths, 1))
    last = turns[-1].decision
    return Trajectory(
        dialogue_id=dialogue_id,
        profile=UserProfile(user_id=user_id, mbti="INFJ"),
        situation=Situation("a situation", EmotionLabel(emotion)),
        turns=turns,
        status=Status.SOLVED if last is RubricDecision.SOLVED else Status.EXHAUSTED,
        rng_seed=seed,
    )


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
