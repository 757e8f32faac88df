import json
import logging
import random
import threading

import pytest

from conftest import FIXTURES, tagged
from rubric_rl.agents import load_agents
from rubric_rl.core import Situation, canonical_emotion, validate_profile
from rubric_rl.errors import (
    AgentError,
    AuthMissing,
    ExhaustedRetries,
    FixtureExhausted,
    GatewayTimeout,
    MalformedResponse,
    ValidationError,
)
from rubric_rl.gateway import ChatClient, EndpointConfig, FakeTransport, ScriptedAgent, completion_body, scripted_next
from rubric_rl.sandbox import SandboxConfig, synthesize

MSG = [{"role": "user", "content": "hello"}]
SECRET = "sk-test-5ecret-value-0123456789"


def client(script, *, seed=0, env=None, **cfg):
    sleeps: list[float] = []
    transport = FakeTransport(list(script))
    config = EndpointConfig(base_url="http://fake.local/v1", model_name="m", **cfg)
    c = ChatClient(config, transport, sleep=sleeps.append, rng=random.Random(seed), env=env or {})
    return c, transport, sleeps


def test_happy_path():
    c, transport, sleeps = client([(200, completion_body("hi there"))])
    assert c.complete(MSG) == "hi there"
    assert len(transport.calls) == 1
    assert sleeps == []
    payload = transport.calls[0]["payload"]
    assert payload["messages"] == MSG and payload["model"] == "m"
    assert transport.calls[0]["url"] == "http://fake.local/v1/chat/completions"


def test_rate_limited_then_success_backoff_schedule():
    c, transport, sleeps = client([(429, ""), (429, ""), (200, completion_body("ok"))], seed=3, max_retries=3, backoff_base=0.5)
    assert c.complete(MSG) == "ok"
    assert len(transport.calls) == 3
    replay = random.Random(3)
    assert sleeps == [replay.uniform(0, 0.5 * 2**0), replay.uniform(0, 0.5 * 2**1)]
    assert 0 <= sleeps[0] <= 0.5 and 0 <= sleeps[1] <= 1.0


def test_persistent_server_error():
    c, transport, sleeps = client([(500, "boom")], max_retries=2)
    with pytest.raises(ExhaustedRetries) as exc:
        c.complete(MSG)
    assert len(transport.calls) == 3
    assert exc.value.last_status == 500
    assert exc.value.code == "EXHAUSTED_RETRIES"
    assert len(sleeps) == 2


@pytest.mark.parametrize("retries", [0, 1, 4])
def test_call_budget(retries):
    c, transport, _ = client([(503, "")], max_retries=retries)
    with pytest.raises(ExhaustedRetries):
        c.complete(MSG)
    assert len(transport.calls) == retries + 1


def test_transport_errors_are_retried():
    c, transport, _ = client([ConnectionResetError("reset"), (200, completion_body("fine"))])
    assert c.complete(MSG) == "fine"
    assert len(transport.calls) == 2


def test_timeout():
    c, transport, _ = client([TimeoutError()], max_retries=1)
    with pytest.raises(GatewayTimeout) as exc:
        c.complete(MSG)
    assert exc.value.code == "TIMEOUT"
    assert len(transport.calls) == 2


def test_client_errors_are_not_retried():
    c, transport, _ = client([(400, "bad request")], max_retries=3)
    with pytest.raises(AgentError):
        c.complete(MSG)
    assert len(transport.calls) == 1


@pytest.mark.parametrize("body", ["not json", json.dumps({"choices": []}), json.dumps({"choices": [{"message": {"content": 5}}]})])
def test_malformed_response(body):
    c, _, _ = client([(200, body)])
    with pytest.raises(MalformedResponse):
        c.complete(MSG)


def test_auth_missing():
    c, transport, _ = client([(200, completion_body("x"))], api_key_env="MY_KEY")
    with pytest.raises(AuthMissing):
        c.complete(MSG)
    assert transport.calls == []


def test_auth_header_sent():
    c, transport, _ = client([(200, completion_body("x"))], api_key_env="MY_KEY", env={"MY_KEY": SECRET})
    c.complete(MSG)
    assert transport.calls[0]["headers"]["Authorization"] == f"Bearer {SECRET}"


def test_config_invariants():
    with pytest.raises(ValidationError):
        EndpointConfig("u", "m", max_retries=-1)
    with pytest.raises(ValidationError):
        EndpointConfig("u", "m", timeout=0)
    with pytest.raises(ValidationError):
        EndpointConfig("u", "m", max_inflight=0)
    with pytest.raises(ValidationError):
        EndpointConfig.from_dict({"base_url": "u", "model_name": "m", "api_key": SECRET})


def test_inflight_cap_under_load():
    transport = FakeTransport([(200, completion_body("x"))], delay=0.01)
    c = ChatClient(EndpointConfig("http://fake", "m", max_inflight=3), transport, sleep=lambda _s: None)
    threads = [threading.Thread(target=c.complete, args=(MSG,)) for _ in range(24)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(transport.calls) == 24
    assert 1 <= transport.max_seen <= 3


def test_no_secret_in_logs(caplog):
    caplog.set_level(logging.DEBUG)
    c, _, _ = client(
        [OSError(f"proxy refused Bearer {SECRET}"), (502, ""), (200, completion_body("ok"))],
        api_key_env="MY_KEY", env={"MY_KEY": SECRET},
    )
    assert c.complete(MSG) == "ok"
    assert caplog.records
    assert SECRET not in caplog.text
    assert SECRET not in json.dumps(c.config.public_dict())


def test_no_secret_in_trajectories(tmp_path, monkeypatch, caplog):
    caplog.set_level(logging.DEBUG)
    monkeypatch.setenv("SANDBOX_KEY", SECRET)
    endpoint = {"base_url": "http://fake/v1", "model_name": "m", "api_key_env": "SANDBOX_KEY"}
    cfg = {"roles": {r: {"backend": "endpoint", "endpoint": endpoint} for r in ("user_generator", "responder", "evaluator")}}
    path = tmp_path / "agents.json"
    path.write_text(json.dumps(cfg))

    def fake(url, headers, payload, timeout):
        prompt = payload["messages"][0]["content"]
        if "Answer with one JSON object" in prompt and "decision" in prompt:
            return 200, completion_body('{"decision": "solved", "critique": ""}')
        if "four tagged parts" in prompt:
            return 200, completion_body(tagged(e="sad"))
        return 200, completion_body("I have had a rough week.")

    setup = load_agents(path, transport=fake)
    profile = validate_profile({"user_id": "u1", "mbti": "INTP"})
    situations = [Situation("lost my keys", canonical_emotion("sad"))]
    result = synthesize([profile], situations, setup.triple_factory(situations), SandboxConfig())
    dumped = json.dumps([t.to_dict() for t in result.trajectories]) + json.dumps(setup.snapshot)
    assert result.trajectories[0].decision_path[-1].value == "solved"
    assert SECRET not in dumped
    assert SECRET not in caplog.text


# ---- scripted agents --------------------------------------------------------


def test_scripted_ordered():
    agent = ScriptedAgent(["a", "b"])
    assert [scripted_next(agent), scripted_next(agent)] == ["a", "b"]


def test_scripted_repeat_last():
    agent = ScriptedAgent(["a", "b"], exhaustion="repeat_last")
    assert [agent.next() for _ in range(4)] == ["a", "b", "b", "b"]


def test_scripted_error_policy():
    agent = ScriptedAgent(["a"])
    agent.next()
    with pytest.raises(FixtureExhausted) as exc:
        agent.next()
    assert exc.value.code == "FIXTURE_EXHAUSTED"


def test_scripted_keyed_entries_do_not_consume():
    agent = ScriptedAgent.from_fixture({"responses": ["x", "y"], "keyed": {"turn:2:1": "special"}})
    assert agent.next("turn:1:1") == "x"
    assert agent.next("turn:2:1") == "special"
    assert agent.next("turn:3:1") == "y"


def test_scripted_needs_content():
    with pytest.raises(ValidationError):
        ScriptedAgent([])


def test_bundled_agent_config_loads():
    setup = load_agents(FIXTURES / "agents.json")
    assert set(setup.fixtures) == {"user_generator", "responder", "evaluator", "judge"}
    assert setup.clients == {}


def test_dry_run_overrides_endpoints(tmp_path):
    cfg = {"roles": {"responder": {"backend": "endpoint", "endpoint": {"base_url": "http://x", "model_name": "m"}}}}
    path = tmp_path / "a.json"
    path.write_text(json.dumps(cfg))
    setup = load_agents(path, dry_run=True)
    assert setup.clients == {}
    assert set(setup.fixtures) == {"user_generator", "responder", "evaluator", "judge"}
    with pytest.raises(ValidationError):
        load_agents(None)
