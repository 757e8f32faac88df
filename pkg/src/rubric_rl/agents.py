"""Role adapters binding the sandbox and judge interfaces to backends.

Two backends exist: ``scripted`` (fixture replay, used by tests and
``--dry-run``) and ``endpoint`` (a chat-completions server). An agent config
is a JSON object::

    {"roles": {
        "user_generator": {"backend": "scripted", "fixture": "user.json"},
        "responder":      {"backend": "endpoint", "endpoint": {...}, "prompt": "my_prompt.txt"},
        "evaluator":      {...},
        "judge":          {...}}}

Relative paths resolve against the config file's directory.

Scripted fixtures are a list of entries, or an object with ``responses``,
``keyed`` and ``exhaustion``, or ``{"scripts": [fixture, ...]}`` to give
trajectory ``i`` the script ``i mod len(scripts)``. Text entries may use
``$situation``, ``$emotion``, ``$user_id`` and ``$turn`` placeholders.
Keys are ``open`` and ``turn:<t>`` for the user generator,
``turn:<t>:<attempt>`` for the responder and ``call:<n>`` for the evaluator,
which cannot see the turn number.
"""

from __future__ import annotations

import json
import string
import threading
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .core import Situation, UserProfile, default_taxonomy
from .errors import MalformedResponse, ValidationError
from .fileio import find_json_object
from .gateway import ChatClient, EndpointConfig, ScriptedAgent, Transport
from .rewards import RubricScores, scores_from_dict, parse_judge_output
from .sandbox import AgentTriple, Message, Verdict, verdict_from

ROLES = ("user_generator", "responder", "evaluator", "judge")
SANDBOX_ROLES = ROLES[:3]


def _fill(text: str, mapping: Mapping[str, Any]) -> str:
    return string.Template(text).safe_substitute({k: str(v) for k, v in mapping.items()})


def _situation_fields(profile: UserProfile, situation: Situation, turn: int) -> dict[str, Any]:
    return {
        "situation": situation.text,
        "emotion": situation.emotion.canonical,
        "user_id": profile.user_id,
        "turn": turn,
    }


def _user_turns(history: Sequence[Message]) -> int:
    return sum(1 for m in history if m.get("role") == "user")


# ---- scripted roles ---------------------------------------------------------


class ScriptedUser:
    def __init__(self, agent: ScriptedAgent) -> None:
        self.agent = agent
        self.received: list[tuple[Any, ...]] = []

    def open(self, profile: UserProfile, situation: Situation) -> str:
        self.received.append((profile, situation))
        return _fill(str(self.agent.next("open")), _situation_fields(profile, situation, 1))

    def follow_up(self, profile: UserProfile, situation: Situation, history: Sequence[Message], last_reply: str) -> str:
        self.received.append((profile, situation, tuple(dict(m) for m in history), last_reply))
        t = _user_turns(history) + 1
        return _fill(str(self.agent.next(f"turn:{t}")), _situation_fields(profile, situation, t))


class ScriptedResponder:
    def __init__(self, agent: ScriptedAgent, situation: Situation | None = None) -> None:
        self.agent = agent
        self.situation = situation
        self._attempt: dict[int, int] = {}

    def respond(self, history: Sequence[Message], profile: UserProfile, critique: str | None = None) -> str:
        t = _user_turns(history)
        self._attempt[t] = self._attempt.get(t, 0) + 1
        text = str(self.agent.next(f"turn:{t}:{self._attempt[t]}"))
        if self.situation is not None:
            text = _fill(text, _situation_fields(profile, self.situation, t))
        return text


class ScriptedEvaluator:
    def __init__(self, agent: ScriptedAgent) -> None:
        self.agent = agent
        self.calls: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def evaluate(self, user_utterance: str, assistant_raw: str) -> Verdict:
        with self._lock:
            self.calls.append((user_utterance, assistant_raw))
            n = len(self.calls)
        return verdict_from(self.agent.next(f"call:{n}"))


class ScriptedJudge:
    def __init__(self, agent: ScriptedAgent) -> None:
        self.agent = agent

    def judge(self, response: str, user_utterance: str | None = None) -> RubricScores:
        entry = self.agent.next()
        if isinstance(entry, Mapping):
            return scores_from_dict(dict(entry))
        return parse_judge_output(str(entry))


# ---- endpoint-backed roles --------------------------------------------------


def load_prompt(name_or_path: str | Path) -> str:
    path = Path(name_or_path)
    if path.suffix == ".txt" and path.exists():
        return path.read_text(encoding="utf-8")
    return resources.files("rubric_rl").joinpath(f"data/prompts/{name_or_path}.txt").read_text(encoding="utf-8")


def _profile_block(profile: UserProfile) -> str:
    d = profile.to_dict()
    lines = [f"{k}: {v}" for k, v in d.items() if v not in (None, "", []) and k != "recent_activities"]
    if profile.recent_activities:
        lines.append("recent_activities: " + "; ".join(profile.recent_activities))
    return "\n".join(lines)


class LlmUser:
    def __init__(self, client: ChatClient, template: str) -> None:
        self.client = client
        self.template = template

    def _prompt(self, profile: UserProfile, situation: Situation, instruction: str) -> str:
        return _fill(self.template, {
            "profile": _profile_block(profile),
            "situation": situation.text,
            "emotion": situation.emotion.canonical,
            "instruction": instruction,
        })

    def open(self, profile: UserProfile, situation: Situation) -> str:
        system = self._prompt(profile, situation, "Start the conversation by telling the assistant what is on your mind.")
        return self.client.complete([{"role": "system", "content": system}]).strip()

    def follow_up(self, profile: UserProfile, situation: Situation, history: Sequence[Message], last_reply: str) -> str:
        system = self._prompt(profile, situation, "Continue the conversation naturally, reacting to the assistant's last reply.")
        # roles are swapped: from the simulated user's side the assistant is the other speaker
        flipped = [{"role": "assistant" if m["role"] == "user" else "user", "content": m["content"]} for m in history]
        return self.client.complete([{"role": "system", "content": system}, *flipped]).strip()


class LlmResponder:
    def __init__(self, client: ChatClient, template: str) -> None:
        self.client = client
        self.template = template

    def respond(self, history: Sequence[Message], profile: UserProfile, critique: str | None = None) -> str:
        note = f"\nA reviewer rejected your previous draft: {critique}\nRevise accordingly." if critique else ""
        system = _fill(self.template, {
            "profile": _profile_block(profile),
            "labels": ", ".join(default_taxonomy().labels),
            "critique": note,
        })
        return self.client.complete([{"role": "system", "content": system}, *history])


class LlmEvaluator:
    def __init__(self, client: ChatClient, template: str) -> None:
        self.client = client
        self.template = template

    def evaluate(self, user_utterance: str, assistant_raw: str) -> Verdict:
        prompt = _fill(self.template, {"user": user_utterance, "assistant": assistant_raw})
        text = self.client.complete([{"role": "user", "content": prompt}])
        obj = find_json_object(text, ("decision",))
        if obj is None:
            raise MalformedResponse("evaluator reply has no decision object")
        try:
            return verdict_from(obj)
        except ValidationError as exc:
            raise MalformedResponse(str(exc)) from exc


class LlmJudge:
    def __init__(self, client: ChatClient, template: str) -> None:
        self.client = client
        self.template = template

    def judge(self, response: str, user_utterance: str | None = None) -> RubricScores:
        prompt = _fill(self.template, {"user": user_utterance or "(not provided)", "response": response})
        return parse_judge_output(self.client.complete([{"role": "user", "content": prompt}]))


# ---- config loading ---------------------------------------------------------


def default_fixture(role: str) -> Any:
    text = resources.files("rubric_rl").joinpath(f"data/fixtures/agents/{role}.json").read_text(encoding="utf-8")
    return json.loads(text)


def _pick_script(fixture: Any, index: int) -> ScriptedAgent:
    if isinstance(fixture, Mapping) and "scripts" in fixture:
        scripts = fixture["scripts"]
        if not scripts:
            raise ValidationError("fixture has an empty scripts list", code="BAD_FIXTURE")
        return ScriptedAgent.from_fixture(scripts[index % len(scripts)])
    return ScriptedAgent.from_fixture(fixture)


@dataclass
class AgentSetup:
    """Resolved backends for every role; builds fresh per-trajectory agents."""

    fixtures: dict[str, Any]
    clients: dict[str, ChatClient]
    prompts: dict[str, str]
    snapshot: dict[str, Any]

    def _shared(self, role: str) -> Any:
        cls = {"user_generator": LlmUser, "responder": LlmResponder, "evaluator": LlmEvaluator, "judge": LlmJudge}[role]
        return cls(self.clients[role], self.prompts[role])

    def triple_factory(self, situations: Sequence[Situation]) -> Callable[[int], AgentTriple]:
        missing = [r for r in SANDBOX_ROLES if r not in self.fixtures and r not in self.clients]
        if missing:
            raise ValidationError(f"agent config lacks role(s) {missing}", code="AGENT_MISSING")
        shared = {r: self._shared(r) for r in SANDBOX_ROLES if r in self.clients}

        def build(i: int) -> AgentTriple:
            def get(role: str, wrap: Callable[[ScriptedAgent], Any]) -> Any:
                if role in shared:
                    return shared[role]
                return wrap(_pick_script(self.fixtures[role], i))

            return AgentTriple(
                user_generator=get("user_generator", ScriptedUser),
                responder=get("responder", lambda a: ScriptedResponder(a, situations[i])),
                evaluator=get("evaluator", ScriptedEvaluator),
            )

        return build

    def judge(self) -> Any:
        if "judge" in self.clients:
            return self._shared("judge")
        if "judge" in self.fixtures:
            return ScriptedJudge(_pick_script(self.fixtures["judge"], 0))
        raise ValidationError("agent config lacks a judge role", code="AGENT_MISSING")


def _read_fixture(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"fixture not found: {path}", code="IO_ERROR") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"fixture {path} is not JSON: {exc}", code="BAD_FIXTURE") from None


def load_agents(config_path: str | Path | None, *, dry_run: bool = False, transport: Transport | None = None) -> AgentSetup:
    """Read an agent config; ``dry_run`` forces every role onto scripted fixtures.

    Under ``dry_run`` a role without a scripted fixture falls back to the
    bundled default fixture. Endpoint clients are shared per distinct endpoint
    so the in-flight cap holds across roles and trajectories. ``transport``
    replaces the HTTP layer (tests use a fake one).
    """
    roles: Mapping[str, Any] = {}
    base = Path(".")
    if config_path is not None:
        path = Path(config_path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ValidationError(f"agent config not found: {path}", code="IO_ERROR") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"agent config {path} is not JSON: {exc}", code="BAD_CONFIG") from None
        roles = doc.get("roles", {}) if isinstance(doc, Mapping) else {}
        base = path.parent
        unknown = set(roles) - set(ROLES)
        if unknown:
            raise ValidationError(f"unknown role(s) {sorted(unknown)}", code="BAD_CONFIG")
    elif not dry_run:
        raise ValidationError("an agent config is required unless --dry-run is given", code="BAD_CONFIG")

    setup = AgentSetup({}, {}, {}, {})
    clients_by_cfg: dict[EndpointConfig, ChatClient] = {}
    for role in ROLES:
        spec = roles.get(role)
        backend = spec.get("backend") if isinstance(spec, Mapping) else None
        if spec is not None and backend not in ("scripted", "endpoint"):
            raise ValidationError(f"role {role}: backend must be scripted or endpoint", code="BAD_CONFIG")
        if backend == "scripted":
            if "fixture" not in spec:
                raise ValidationError(f"role {role}: scripted backend needs a fixture", code="BAD_CONFIG")
            fixture_path = base / spec["fixture"]
            setup.fixtures[role] = _read_fixture(fixture_path)
            setup.snapshot[role] = {"backend": "scripted", "fixture": str(spec["fixture"])}
        elif backend == "endpoint" and not dry_run:
            cfg = EndpointConfig.from_dict(spec.get("endpoint", {}))
            setup.clients[role] = clients_by_cfg.setdefault(cfg, ChatClient(cfg, transport))
            prompt = spec.get("prompt")
            setup.prompts[role] = load_prompt(base / prompt if prompt else role)
            setup.snapshot[role] = {"backend": "endpoint", "endpoint": cfg.public_dict(), "prompt": prompt}
        elif dry_run:
            setup.fixtures[role] = default_fixture(role)
            setup.snapshot[role] = {"backend": "scripted", "fixture": f"<bundled {role}>"}
    return setup
