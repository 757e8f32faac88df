"""Agent handles: chat-completion endpoints and scripted test doubles.

A :class:`ChatClient` speaks the common chat-completions JSON shape
(``{"model", "messages": [{"role", "content"}], ...}`` in, first choice's
message content out), retries transport errors, 429 and 5xx with full-jitter
exponential backoff, and caps concurrent requests per endpoint.
"""

from __future__ import annotations

import json
import logging
import os
import random
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

from .errors import (
    AgentError,
    AuthMissing,
    ExhaustedRetries,
    FixtureExhausted,
    GatewayTimeout,
    MalformedResponse,
    ValidationError,
)

log = logging.getLogger(__name__)

Messages = Sequence[Mapping[str, str]]
# (url, headers, json payload, timeout seconds) -> (http status, response body)
Transport = Callable[[str, Mapping[str, str], Mapping[str, Any], float], "tuple[int, str]"]


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_name: str
    api_key_env: str | None = None
    timeout: float = 60.0
    max_retries: int = 3
    backoff_base: float = 1.0
    max_inflight: int = 4
    temperature: float = 0.7
    max_tokens: int = 1024

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValidationError("max_retries must be >= 0", code="BAD_CONFIG")
        if not self.timeout > 0:
            raise ValidationError("timeout must be > 0", code="BAD_CONFIG")
        if self.max_inflight < 1:
            raise ValidationError("max_inflight must be >= 1", code="BAD_CONFIG")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> EndpointConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown endpoint settings {sorted(unknown)}", code="BAD_CONFIG")
        return cls(**d)

    def public_dict(self) -> dict[str, Any]:
        # names the env var, never its value
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def urllib_transport(url: str, headers: Mapping[str, str], payload: Mapping[str, Any], timeout: float) -> tuple[int, str]:
    req = urllib.request.Request(url, data=json.dumps(payload).encode("utf-8"), headers=dict(headers), method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, resp.read().decode("utf-8", "replace")
    except urllib.error.HTTPError as exc:
        return exc.code, exc.read().decode("utf-8", "replace")


def redact(text: str, secrets: Sequence[str]) -> str:
    for s in secrets:
        if s:
            text = text.replace(s, "***")
    return text


def _retryable(status: int) -> bool:
    return status == 429 or status >= 500


class ChatClient:
    """Shareable across threads; at most ``max_inflight`` requests run at once."""

    def __init__(
        self,
        config: EndpointConfig,
        transport: Transport | None = None,
        *,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
        env: Mapping[str, str] | None = None,
    ) -> None:
        self.config = config
        self.transport = transport or urllib_transport
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._rng_lock = threading.Lock()
        self._env = os.environ if env is None else env
        self._slots = threading.BoundedSemaphore(config.max_inflight)

    def _api_key(self) -> str | None:
        name = self.config.api_key_env
        if not name:
            return None
        key = self._env.get(name)
        if not key:
            raise AuthMissing(f"environment variable {name} is not set")
        return key

    def _backoff(self, attempt: int) -> float:
        with self._rng_lock:
            return self._rng.uniform(0.0, self.config.backoff_base * 2**attempt)

    def complete(self, messages: Messages, **params: Any) -> str:
        cfg = self.config
        key = self._api_key()
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        payload: dict[str, Any] = {
            "model": cfg.model_name,
            "messages": [{"role": m["role"], "content": m["content"]} for m in messages],
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_tokens,
        }
        payload.update(params)
        url = cfg.base_url.rstrip("/") + "/chat/completions"
        secrets = [key] if key else []

        last: int | str | None = None
        timed_out = False
        for attempt in range(cfg.max_retries + 1):
            started = time.monotonic()
            with self._slots:
                try:
                    status, body = self.transport(url, headers, payload, cfg.timeout)
                except TimeoutError:
                    status, body, timed_out = -1, "", True
                except OSError as exc:
                    status, body, timed_out = -2, redact(str(exc), secrets), False
            elapsed = time.monotonic() - started
            log.info(
                "chat_complete model=%s attempt=%d status=%s elapsed=%.3fs",
                cfg.model_name, attempt + 1, status, elapsed,
            )
            if status == 200:
                return self._content(body)
            if status >= 0 and not _retryable(status):
                raise AgentError(f"endpoint rejected request with status {status}", code="REQUEST_REJECTED")
            if status >= 0:
                timed_out = False
            last = "timeout" if status == -1 else ("transport-error" if status == -2 else status)
            if attempt < cfg.max_retries:
                self._sleep(self._backoff(attempt))
        if timed_out:
            raise GatewayTimeout(f"request timed out after {cfg.max_retries + 1} attempt(s)")
        raise ExhaustedRetries(last, cfg.max_retries + 1)

    @staticmethod
    def _content(body: str) -> str:
        try:
            content = json.loads(body)["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise MalformedResponse("response lacks choices[0].message.content") from None
        if not isinstance(content, str):
            raise MalformedResponse("message content is not text")
        return content


# ---- scripted agents --------------------------------------------------------


class ScriptedAgent:
    """Replays fixture entries in order, with optional per-key overrides.

    ``exhaustion`` is ``"error"`` (raise :class:`FixtureExhausted`) or
    ``"repeat_last"``. Keyed entries never consume the ordered queue.
    """

    def __init__(self, responses: Sequence[Any], keyed: Mapping[str, Any] | None = None, exhaustion: str = "error") -> None:
        if not responses and not keyed:
            raise ValidationError("scripted fixture is empty", code="BAD_FIXTURE")
        if exhaustion not in ("error", "repeat_last"):
            raise ValidationError(f"unknown exhaustion policy {exhaustion!r}", code="BAD_FIXTURE")
        self.responses = list(responses)
        self.keyed = dict(keyed or {})
        self.exhaustion = exhaustion
        self.calls = 0
        self._pos = 0
        self._lock = threading.Lock()

    @classmethod
    def from_fixture(cls, fixture: Any) -> ScriptedAgent:
        if isinstance(fixture, list):
            return cls(fixture)
        if not isinstance(fixture, Mapping):
            raise ValidationError("fixture must be a list or an object", code="BAD_FIXTURE")
        return cls(fixture.get("responses", []), fixture.get("keyed"), fixture.get("exhaustion", "error"))

    def next(self, key: str | None = None) -> Any:
        with self._lock:
            self.calls += 1
            if key is not None and key in self.keyed:
                return self.keyed[key]
            if self._pos < len(self.responses):
                self._pos += 1
                return self.responses[self._pos - 1]
            if self.exhaustion == "repeat_last" and self.responses:
                return self.responses[-1]
            raise FixtureExhausted(f"fixture exhausted after {len(self.responses)} entries (key={key})")


def scripted_next(agent: ScriptedAgent, key: str | None = None) -> Any:
    return agent.next(key)


@dataclass
class FakeTransport:
    """Replays a list of (status, body) pairs; used for tests and dry runs.

    An entry may also be an exception instance, which is raised.
    """

    script: list[Any]
    calls: list[dict[str, Any]] = field(default_factory=list)
    delay: float = 0.0
    inflight: int = 0
    max_seen: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def __call__(self, url: str, headers: Mapping[str, str], payload: Mapping[str, Any], timeout: float) -> tuple[int, str]:
        with self._lock:
            self.calls.append({"url": url, "headers": dict(headers), "payload": payload})
            step = self.script[min(len(self.calls) - 1, len(self.script) - 1)]
            self.inflight += 1
            self.max_seen = max(self.max_seen, self.inflight)
        try:
            if self.delay:
                time.sleep(self.delay)
            if isinstance(step, BaseException):
                raise step
            return step
        finally:
            with self._lock:
                self.inflight -= 1


def completion_body(text: str) -> str:
    return json.dumps({"choices": [{"message": {"role": "assistant", "content": text}}]})
