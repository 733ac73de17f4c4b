"""Completion client tests: request validation, retry behavior, stop
enforcement, and mock determinism."""

import pytest
import requests

from patchscribe.llm import (
    BackendUnavailable,
    BadRequest,
    CompletionRequest,
    HTTPCompletionClient,
    MockCompletionClient,
    truncate_at_stop,
)


class FakeResponse:
    def __init__(self, status_code, payload=None, text=""):
        self.status_code = status_code
        self._payload = payload or {}
        self.text = text

    def json(self):
        return self._payload


class FakeSession:
    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({"url": url, "json": json, "headers": headers})
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


def make_client(outcomes, **kw):
    session = FakeSession(outcomes)
    client = HTTPCompletionClient(
        "http://llm.test/v1/completions",
        backoff_base_s=0.0,
        session=session,
        **kw,
    )
    return client, session


class TestRequestValidation:
    def test_defaults(self):
        req = CompletionRequest(prompt="p")
        assert req.max_tokens == 256
        assert req.temperature == 0.7
        assert req.stop_sequences == ("###", "\nRaw:")

    def test_bad_max_tokens(self):
        with pytest.raises(ValueError):
            CompletionRequest(prompt="p", max_tokens=0)

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            CompletionRequest(prompt="p", temperature=-0.1)


class TestTruncate:
    def test_earliest_stop_wins(self):
        text, hit = truncate_at_stop("caption text\nRaw: more ### x", ("###", "\nRaw:"))
        assert text == "caption text"
        assert hit

    def test_no_stop(self):
        text, hit = truncate_at_stop("clean", ("###",))
        assert text == "clean" and not hit


class TestHTTPClient:
    def test_success_round_trip(self):
        client, session = make_client(
            [FakeResponse(200, {"text": "A farmland plot.", "finish_reason": "stop"})]
        )
        resp = client.complete(CompletionRequest(prompt="describe"))
        assert resp.text == "A farmland plot."
        assert resp.finish_reason == "stop"
        sent = session.calls[0]["json"]
        assert sent["prompt"] == "describe"
        assert sent["max_tokens"] == 256
        assert sent["temperature"] == 0.7
        assert sent["stop"] == ["###", "\nRaw:"]

    def test_auth_token_from_environment(self, monkeypatch):
        monkeypatch.setenv("COMPLETION_API_TOKEN", "sekrit")
        client, session = make_client([FakeResponse(200, {"text": "x"})])
        client.complete(CompletionRequest(prompt="p"))
        assert session.calls[0]["headers"]["Authorization"] == "Bearer sekrit"

    def test_no_token_no_header(self, monkeypatch):
        monkeypatch.delenv("COMPLETION_API_TOKEN", raising=False)
        client, session = make_client([FakeResponse(200, {"text": "x"})])
        client.complete(CompletionRequest(prompt="p"))
        assert "Authorization" not in session.calls[0]["headers"]

    def test_500_thrice_with_retry_limit_2(self):
        client, session = make_client(
            [FakeResponse(500)] * 3, max_retries=2
        )
        with pytest.raises(BackendUnavailable):
            client.complete(CompletionRequest(prompt="p"))
        assert len(session.calls) == 3

    def test_transient_then_success(self):
        client, _ = make_client(
            [
                requests.ConnectionError("down"),
                FakeResponse(200, {"text": "ok"}),
            ]
        )
        assert client.complete(CompletionRequest(prompt="p")).text == "ok"

    def test_4xx_raises_bad_request_immediately(self):
        client, session = make_client([FakeResponse(422, text="bad prompt")])
        with pytest.raises(BadRequest):
            client.complete(CompletionRequest(prompt="p"))
        assert len(session.calls) == 1

    def test_stop_enforced_client_side(self):
        client, _ = make_client(
            [FakeResponse(200, {"text": "good part ### trailing", "finish_reason": "length"})]
        )
        resp = client.complete(CompletionRequest(prompt="p"))
        assert resp.text == "good part "
        assert resp.finish_reason == "stop"
        for stop in ("###", "\nRaw:"):
            assert stop not in resp.text


class TestMock:
    def test_fixture_answer(self):
        mock = MockCompletionClient(fixtures={"the prompt": "A farmland plot."})
        resp = mock.complete(CompletionRequest(prompt="the prompt"))
        assert resp.text == "A farmland plot."
        assert resp.finish_reason == "stop"

    def test_fallback_is_deterministic(self):
        a = MockCompletionClient().complete(CompletionRequest(prompt="unseen"))
        b = MockCompletionClient().complete(CompletionRequest(prompt="unseen"))
        assert a == b

    def test_distinct_prompts_distinct_texts(self):
        mock = MockCompletionClient()
        texts = {
            mock.complete(CompletionRequest(prompt=f"prompt {i}")).text
            for i in range(50)
        }
        assert len(texts) == 50

    def test_fallback_contains_no_stop_sequences(self):
        mock = MockCompletionClient()
        for i in range(20):
            resp = mock.complete(CompletionRequest(prompt=f"p{i}"))
            assert "###" not in resp.text
            assert "\nRaw:" not in resp.text
