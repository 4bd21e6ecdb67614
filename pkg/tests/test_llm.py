import json
import logging

import httpx
import pytest

from synthir.http import AuthenticationError, MalformedResponse, RetriesExhausted
from synthir.llm import ChatClient, ChatRequest, MockChatClient, ScriptedChatClient, template_responder


def completion(text):
    return {"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]}


@pytest.fixture
def api_key(monkeypatch):
    monkeypatch.setenv("TEST_LLM_KEY", "sk-test")


def make_client(handler, **kw):
    sleeps = []
    client = ChatClient("http://llm.local/v1", "test-model", api_key_env="TEST_LLM_KEY",
                        transport=httpx.MockTransport(handler), sleep=sleeps.append, **kw)
    return client, sleeps


def test_echo_yes(api_key):
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers["authorization"]
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json=completion("YES"))

    client, _ = make_client(handler)
    assert client.chat(ChatRequest("sys", "user msg", 0.0, 5)) == "YES"
    assert seen["url"] == "http://llm.local/v1/chat/completions"
    assert seen["auth"] == "Bearer sk-test"
    assert seen["body"]["messages"] == [{"role": "system", "content": "sys"}, {"role": "user", "content": "user msg"}]
    assert seen["body"]["temperature"] == 0.0 and seen["body"]["max_tokens"] == 5


def test_retries_429_then_succeeds(api_key, caplog):
    statuses = iter([429, 429, 200])

    def handler(request):
        code = next(statuses)
        return httpx.Response(code, json=completion("ok") if code == 200 else {"error": "slow down"})

    client, sleeps = make_client(handler, backoff_base=0.5)
    with caplog.at_level(logging.WARNING):
        assert client.chat(ChatRequest("s", "u")) == "ok"
    assert sleeps == [0.5, 1.0]
    assert sum("retry" in r.message for r in caplog.records) == 2


def test_5xx_and_timeouts_are_transient(api_key):
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        if calls["n"] == 1:
            raise httpx.ReadTimeout("slow", request=request)
        if calls["n"] == 2:
            return httpx.Response(503)
        return httpx.Response(200, json=completion("fine"))

    client, sleeps = make_client(handler)
    assert client.chat(ChatRequest("s", "u")) == "fine"
    assert len(sleeps) == 2


def test_exhausted_retries_carry_attempt_count(api_key):
    client, sleeps = make_client(lambda r: httpx.Response(500), max_retries=3)
    with pytest.raises(RetriesExhausted) as info:
        client.chat(ChatRequest("s", "u"))
    assert info.value.attempts == 4
    assert sleeps == [0.5, 1.0, 2.0]


def test_auth_failure_not_retried(api_key):
    client, sleeps = make_client(lambda r: httpx.Response(401))
    with pytest.raises(AuthenticationError):
        client.chat(ChatRequest("s", "u"))
    assert sleeps == []


def test_malformed_response(api_key):
    client, _ = make_client(lambda r: httpx.Response(200, json={"nothing": True}))
    with pytest.raises(MalformedResponse):
        client.chat(ChatRequest("s", "u"))


def test_missing_key(monkeypatch):
    monkeypatch.delenv("TEST_LLM_KEY", raising=False)
    with pytest.raises(ValueError, match="TEST_LLM_KEY"):
        ChatClient("http://llm.local/v1", "m", api_key_env="TEST_LLM_KEY")


def test_mock_and_scripted_clients():
    mock = MockChatClient(lambda s, u: "YES")
    assert mock.chat(ChatRequest("s", "u")) == "YES"
    assert mock.calls == 1
    scripted = ScriptedChatClient(["a", RuntimeError("boom")])
    assert scripted.chat(ChatRequest("s", "u")) == "a"
    with pytest.raises(RuntimeError):
        scripted.chat(ChatRequest("s", "u"))


def test_template_responder_is_deterministic():
    prompt = "Keyword search.\nWrite 2 search queries.\n\nDocument:\nalpha beta gamma delta epsilon"
    a = template_responder("sys", prompt)
    assert a == template_responder("sys", prompt)
    assert a.splitlines()[0].startswith("1. ")
    assert len(a.splitlines()) == 2


def test_template_responder_verification():
    yes = "Query: budget memo\n\nDocument:\nthe budget memo is attached\n\nDoes this document answer the query? Answer YES or NO."
    no = "Query: budget memo\n\nDocument:\nlunch order\n\nDoes this document answer the query? Answer YES or NO."
    assert template_responder("s", yes) == "YES"
    assert template_responder("s", no) == "NO"
