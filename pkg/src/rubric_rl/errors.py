"""Exception hierarchy.

Every error carries a short machine-readable ``code``. The CLI maps
:class:`ValidationError` to exit status 1 and any other
:class:`PipelineError` to exit status 2.
"""

from __future__ import annotations

from typing import Any


class PipelineError(Exception):
    code = "PIPELINE_ERROR"

    def __init__(self, message: str = "", *, code: str | None = None) -> None:
        if code is not None:
            self.code = code
        super().__init__(message or self.code)


class ValidationError(PipelineError):
    """Bad input: records, arguments, scores, or configuration."""

    code = "VALIDATION_ERROR"


class ProfileError(ValidationError):
    def __init__(self, problems: list[tuple[str, str]]) -> None:
        # problems: (code, field-level message) for every violated field
        self.problems = problems
        detail = "; ".join(f"{c}: {m}" for c, m in problems)
        super().__init__(detail, code=problems[0][0])


class UnknownLabel(ValidationError):
    code = "UNKNOWN_LABEL"

    def __init__(self, raw: str, nearest: str | None) -> None:
        self.raw = raw
        self.nearest = nearest
        super().__init__(f"unknown emotion label {raw!r} (nearest: {nearest!r})")


class Malformed(ValidationError):
    code = "MALFORMED"

    def __init__(self, violations: Any) -> None:
        self.violations = violations
        super().__init__(f"four-span output violates constraints {violations.failed()}")


class SchemaViolation(ValidationError):
    code = "SCHEMA_VIOLATION"

    def __init__(self, line: int | None, field: str, detail: str = "") -> None:
        self.line = line
        self.field = field
        self.detail = detail
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}field {field!r} {detail}".rstrip())


class AgentError(PipelineError):
    code = "AGENT_ERROR"


class AuthMissing(AgentError):
    code = "AUTH_MISSING"


class GatewayTimeout(AgentError):
    code = "TIMEOUT"


class ExhaustedRetries(AgentError):
    code = "EXHAUSTED_RETRIES"

    def __init__(self, last_status: int | str | None, calls: int) -> None:
        self.last_status = last_status
        self.calls = calls
        super().__init__(f"gave up after {calls} call(s); last status {last_status}")


class MalformedResponse(AgentError):
    code = "MALFORMED_RESPONSE"


class FixtureExhausted(AgentError):
    code = "FIXTURE_EXHAUSTED"


class JudgeUnavailable(AgentError):
    code = "JUDGE_UNAVAILABLE"


class AgentFailure(PipelineError):
    code = "AGENT_FAILURE"

    def __init__(self, role: str, attempt: int, cause: BaseException, partial: Any = None) -> None:
        self.role = role
        self.attempt = attempt
        self.cause = cause
        self.partial = partial
        super().__init__(f"{role} failed on attempt {attempt}: {cause}")


class Diverged(PipelineError):
    code = "DIVERGED"
