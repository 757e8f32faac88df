"""Four-span tagged output: strict parser and violation-counting format reward.

Nine constraints are checked, in this order:

* c1..c4 -- span k has its begin tag and, after it, its end tag
* c5     -- every tag occurrence in the text, read left to right, is strictly
            increasing in canonical order (no duplicates, no reordering);
            trivially true with at most one tag present
* c6..c9 -- span k has non-blank content (violated if the span is missing)

Matching is exact substring matching on the tag literals.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import FourSpanOutput
from .errors import Malformed, ValidationError

SPAN_NAMES = ("understanding", "reasoning", "emotion", "response")
K = 9


@dataclass(frozen=True)
class TagSpec:
    tags: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.tags) != 8:
            raise ValidationError("a tag spec needs exactly 8 tags", code="BAD_TAGS")
        if len(set(self.tags)) != 8 or any(not t for t in self.tags):
            raise ValidationError("tags must be distinct and non-empty", code="BAD_TAGS")
        for a in self.tags:
            for b in self.tags:
                if a != b and a in b:
                    raise ValidationError(f"tag {a!r} occurs inside {b!r}", code="BAD_TAGS")

    @classmethod
    def from_names(cls, names: tuple[str, ...] = SPAN_NAMES) -> TagSpec:
        return cls(tuple(f"<|{n}_{edge}|>" for n in names for edge in ("begin", "end")))

    def begin(self, k: int) -> str:
        return self.tags[2 * k]

    def end(self, k: int) -> str:
        return self.tags[2 * k + 1]


DEFAULT_TAGS = TagSpec.from_names()


@dataclass(frozen=True)
class ViolationVector:
    bits: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.bits) != K or any(b not in (0, 1) for b in self.bits):
            raise ValueError(f"expected {K} bits in {{0, 1}}, got {self.bits}")

    @property
    def ok(self) -> bool:
        return not any(self.bits)

    def failed(self) -> list[str]:
        return [f"c{i}" for i, b in enumerate(self.bits, 1) if b]

    def __iter__(self):
        return iter(self.bits)


def _tag_sequence(raw: str, tags: TagSpec) -> list[int]:
    hits: list[tuple[int, int]] = []
    for idx, tag in enumerate(tags.tags):
        start = raw.find(tag)
        while start != -1:
            hits.append((start, idx))
            start = raw.find(tag, start + len(tag))
    hits.sort()
    return [idx for _, idx in hits]


def extract_spans(raw: str, tags: TagSpec = DEFAULT_TAGS) -> list[str | None]:
    """First begin tag, then the first end tag after it; None when either is absent."""
    spans: list[str | None] = []
    for k in range(4):
        b = raw.find(tags.begin(k))
        if b == -1:
            spans.append(None)
            continue
        content_start = b + len(tags.begin(k))
        e = raw.find(tags.end(k), content_start)
        spans.append(None if e == -1 else raw[content_start:e])
    return spans


def check_constraints(raw: str, tags: TagSpec = DEFAULT_TAGS) -> ViolationVector:
    spans = extract_spans(raw, tags)
    seq = _tag_sequence(raw, tags)
    ordered = all(a < b for a, b in zip(seq, seq[1:]))
    bits = [int(s is None) for s in spans]
    bits.append(int(not ordered))
    bits.extend(int(s is None or not s.strip()) for s in spans)
    return ViolationVector(tuple(bits))


def format_reward(raw: str, tags: TagSpec = DEFAULT_TAGS) -> float:
    return 1.0 - sum(check_constraints(raw, tags).bits) / K


def parse_four_span(raw: str, tags: TagSpec = DEFAULT_TAGS) -> FourSpanOutput:
    violations = check_constraints(raw, tags)
    if not violations.ok:
        raise Malformed(violations)
    spans = extract_spans(raw, tags)
    return FourSpanOutput(*(s.strip() for s in spans))  # type: ignore[union-attr]


def try_parse(raw: str, tags: TagSpec = DEFAULT_TAGS) -> FourSpanOutput | None:
    try:
        return parse_four_span(raw, tags)
    except Malformed:
        return None


def render_four_span(spans: FourSpanOutput, tags: TagSpec = DEFAULT_TAGS, sep: str = "") -> str:
    parts = []
    for k, name in enumerate(SPAN_NAMES):
        parts.append(f"{tags.begin(k)}{getattr(spans, name)}{tags.end(k)}")
    return sep.join(parts)
