"""Text-completion client for a base (continuation-style) language model.

Prompts end with an open ``Caption:`` / ``Revision:`` slot and the model is
expected to keep writing until a stop sequence (the next section marker)
appears. ``HTTPCompletionClient`` talks to a real endpoint;
``MockCompletionClient`` answers deterministically for tests and offline
runs, deriving unseen captions from a hash of the prompt so distinct
prompts never collide.
"""

from __future__ import annotations

import hashlib
import logging
import os
import threading
import time
from dataclasses import dataclass, field

import requests

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.7
DEFAULT_MAX_TOKENS = 256
#: Section markers of the prompt templates; continuation must stop there.
DEFAULT_STOP_SEQUENCES = ("###", "\nRaw:")


class BackendUnavailable(Exception):
    """Completion endpoint kept failing after retries."""


class BadRequest(Exception):
    """Completion endpoint rejected the request."""


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    max_tokens: int = DEFAULT_MAX_TOKENS
    temperature: float = DEFAULT_TEMPERATURE
    stop_sequences: tuple[str, ...] = DEFAULT_STOP_SEQUENCES

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    finish_reason: str  # stop | length | error


def truncate_at_stop(text: str, stop_sequences: tuple[str, ...]) -> tuple[str, bool]:
    """Cut ``text`` at the earliest stop sequence; returns (text, hit)."""
    cut = len(text)
    for stop in stop_sequences:
        idx = text.find(stop)
        if idx != -1:
            cut = min(cut, idx)
    return text[:cut], cut < len(text)


class HTTPCompletionClient:
    """JSON-over-HTTP completion backend.

    Request body: ``{"prompt", "max_tokens", "temperature", "stop"}``;
    response body: ``{"text", "finish_reason"}``. The auth token is read
    from the environment variable named by ``token_env`` so credentials
    never live in config files. Stop sequences are also enforced
    client-side: whatever the backend returns is truncated at the first
    stop marker.
    """

    def __init__(
        self,
        url: str,
        *,
        model: str | None = None,
        token_env: str = "COMPLETION_API_TOKEN",
        max_concurrency: int = 4,
        max_retries: int = 4,
        backoff_base_s: float = 1.0,
        timeout_s: float = 120.0,
        session: requests.Session | None = None,
    ) -> None:
        self.url = url
        self.model = model
        self.token_env = token_env
        self.max_retries = max_retries
        self.backoff_base_s = backoff_base_s
        self.timeout_s = timeout_s
        self._session = session or requests.Session()
        self._gate = threading.Semaphore(max_concurrency)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        body: dict = {
            "prompt": req.prompt,
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
            "stop": list(req.stop_sequences),
        }
        if self.model:
            body["model"] = self.model

        last_error: Exception | None = None
        with self._gate:
            for attempt in range(self.max_retries + 1):
                try:
                    resp = self._session.post(
                        self.url,
                        json=body,
                        headers=self._headers(),
                        timeout=self.timeout_s,
                    )
                except requests.RequestException as e:
                    last_error = e
                else:
                    if resp.status_code == 200:
                        payload = resp.json()
                        text, hit = truncate_at_stop(
                            str(payload.get("text", "")), req.stop_sequences
                        )
                        reason = payload.get("finish_reason", "stop")
                        if hit:
                            reason = "stop"
                        return CompletionResponse(text=text, finish_reason=reason)
                    if 400 <= resp.status_code < 500 and resp.status_code != 429:
                        raise BadRequest(f"HTTP {resp.status_code}: {resp.text[:200]}")
                    last_error = BackendUnavailable(f"HTTP {resp.status_code}")
                if attempt < self.max_retries:
                    time.sleep(self.backoff_base_s * (2 ** attempt))
        raise BackendUnavailable(f"giving up after retries: {last_error}")


# Deterministic caption scaffolds for the mock. The hash suffix keeps
# distinct prompts distinct even when they pick the same scaffold.
_MOCK_BANK = (
    "A {noun} occupies much of this patch, with {feature} likely visible around it. "
    "The surrounding ground may be {ground} (signature {sig}).",
    "This patch centers on a {noun}, bordered by what may be {feature}. "
    "Nearby land is possibly {ground} (signature {sig}).",
    "A prominent {noun} dominates the view here. It is likely flanked by {feature}, "
    "and the remaining area may consist of {ground} (signature {sig}).",
    "The main element is a {noun} whose edges may touch {feature}. "
    "Beyond it the patch likely shows {ground} (signature {sig}).",
)
_MOCK_NOUNS = ("field", "pond", "building block", "wooded area", "road corridor")
_MOCK_FEATURES = ("narrow tracks", "scattered trees", "low fences", "drainage lines")
_MOCK_GROUNDS = ("farmland", "grass", "bare soil", "mixed vegetation")


@dataclass
class MockCompletionClient:
    """Offline stand-in: fixture answers by exact prompt, else a caption
    synthesized deterministically from the prompt hash."""

    fixtures: dict[str, str] = field(default_factory=dict)
    calls: int = 0

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        self.calls += 1
        if req.prompt in self.fixtures:
            text, _ = truncate_at_stop(self.fixtures[req.prompt], req.stop_sequences)
            return CompletionResponse(text=text, finish_reason="stop")
        digest = hashlib.sha256(req.prompt.encode("utf-8")).hexdigest()
        pick = int(digest[:8], 16)
        text = _MOCK_BANK[pick % len(_MOCK_BANK)].format(
            noun=_MOCK_NOUNS[pick // 7 % len(_MOCK_NOUNS)],
            feature=_MOCK_FEATURES[pick // 11 % len(_MOCK_FEATURES)],
            ground=_MOCK_GROUNDS[pick // 13 % len(_MOCK_GROUNDS)],
            sig=digest[:10],
        )
        text, _ = truncate_at_stop(text, req.stop_sequences)
        return CompletionResponse(text=text, finish_reason="stop")
