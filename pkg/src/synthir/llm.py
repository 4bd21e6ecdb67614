"""Chat-completion clients: an OpenAI-compatible HTTP client and an offline mock."""

from __future__ import annotations

import hashlib
import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import httpx

from synthir.http import EndpointError, MalformedResponse, post_json

logger = logging.getLogger(__name__)


@dataclass
class ChatRequest:
    system: str
    user: str
    temperature: float = 0.0
    max_tokens: int = 512


class ChatClient:
    """Minimal client for ``POST {base_url}/chat/completions``.

    The API key is read from the environment variable named by
    ``api_key_env`` at construction time.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "OPENAI_API_KEY",
        max_retries: int = 5,
        backoff_base: float = 0.5,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not base_url:
            raise ValueError("chat endpoint base_url is not configured")
        api_key = os.environ.get(api_key_env)
        if not api_key:
            raise ValueError(f"environment variable {api_key_env} holding the API key is not set")
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self._sleep = sleep
        self._headers = {"Authorization": f"Bearer {api_key}"}
        self._http = httpx.Client(timeout=timeout, transport=transport)
        self.calls = 0

    def chat(self, request: ChatRequest) -> str:
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        self.calls += 1
        body = post_json(
            self._http, self.url, payload, self._headers,
            max_retries=self.max_retries, backoff_base=self.backoff_base, sleep=self._sleep,
        )
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"{self.url}: no choices[0].message.content in response") from exc
        if not isinstance(text, str):
            raise MalformedResponse(f"{self.url}: message content is not a string")
        return text

    def close(self) -> None:
        self._http.close()


class MockChatClient:
    """Offline stand-in; ``responder(system, user)`` produces the completion text."""

    def __init__(self, responder: Callable[[str, str], str] | None = None):
        self.responder = responder or template_responder
        self._lock = threading.Lock()
        self.calls = 0

    def chat(self, request: ChatRequest) -> str:
        with self._lock:
            self.calls += 1
        return self.responder(request.system, request.user)

    def close(self) -> None:
        pass


class ScriptedChatClient:
    """Returns queued responses in order; an ``Exception`` instance in the queue is raised."""

    def __init__(self, responses: Sequence[str | Exception]):
        self._responses = list(responses)
        self._lock = threading.Lock()
        self.calls = 0

    def chat(self, request: ChatRequest) -> str:
        with self._lock:
            self.calls += 1
            if not self._responses:
                raise EndpointError("scripted client has no responses left")
            item = self._responses.pop(0)
        if isinstance(item, Exception):
            raise item
        return item

    def close(self) -> None:
        pass


# Template mock -------------------------------------------------------------

_STOP = frozenset(
    "a an and are as at be by for from has have i in is it of on or our re that the this to was we "
    "were will with you your about what which who how find any".split()
)
_WORD_RE = re.compile(r"[^\W_]+")


def _content_words(text: str) -> list[str]:
    return [w for w in _WORD_RE.findall(text.lower()) if w not in _STOP and len(w) > 2]


def _section(user: str, marker: str) -> str:
    idx = user.find(marker)
    return user[idx + len(marker):] if idx >= 0 else ""


def template_responder(system: str, user: str, words_per_query: int = 3) -> str:
    """Deterministic fake LLM for the default prompt templates.

    Verification prompts (containing "YES or NO") are answered YES when every
    content word of the query occurs in the candidate document. Generation
    prompts get a numbered list of queries built from words sampled from the
    document, styled by the persona named in the prompt.
    """
    if "YES or NO" in user:
        q_at = user.find("Query:")
        query = user[q_at + 6:].split("\n", 1)[0] if q_at >= 0 else ""
        doc = user[user.find("Document:", max(q_at, 0)):user.rfind("Does this document")]
        needed = set(_content_words(query))
        return "YES" if needed and needed <= set(_content_words(doc)) else "NO"

    m = re.search(r"Write (\d+)", user)
    n = int(m.group(1)) if m else 1
    words = sorted(set(_content_words(_section(user, "Document:"))))
    if not words:
        return "I could not find anything to ask about."
    rng = random.Random(hashlib.sha256((system + "\x00" + user).encode()).digest())
    lowered = user.lower()
    if "keyword" in lowered:
        style = "{}"
    elif "task" in lowered:
        style = "find the message about {}"
    else:
        style = "what do we know about {}?"
    lines = []
    for i in range(n):
        picked = rng.sample(words, min(words_per_query, len(words)))
        lines.append(f"{i + 1}. " + style.format(" ".join(picked)))
    return "\n".join(lines)
