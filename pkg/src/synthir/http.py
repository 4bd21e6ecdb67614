"""JSON-over-HTTP POST with exponential backoff, shared by the LLM and embedding clients."""

from __future__ import annotations

import logging
import time
from typing import Callable

import httpx

logger = logging.getLogger(__name__)

TRANSIENT_STATUS = frozenset({408, 409, 429}) | frozenset(range(500, 600))


class EndpointError(RuntimeError):
    """Base class for endpoint failures."""


class AuthenticationError(EndpointError):
    pass


class RetriesExhausted(EndpointError):
    def __init__(self, url: str, attempts: int, last_error: str):
        super().__init__(f"{url}: gave up after {attempts} attempt(s); last error: {last_error}")
        self.attempts = attempts
        self.last_error = last_error


class MalformedResponse(EndpointError):
    pass


def post_json(
    client: httpx.Client,
    url: str,
    payload: dict,
    headers: dict | None = None,
    max_retries: int = 5,
    backoff_base: float = 0.5,
    backoff_cap: float = 30.0,
    sleep: Callable[[float], None] = time.sleep,
) -> dict:
    """POST ``payload`` and return the decoded JSON body.

    Timeouts, connection errors, 408/409/429 and 5xx are retried up to
    ``max_retries`` times with delays ``backoff_base * 2**n`` (capped).
    401/403 raise :class:`AuthenticationError` immediately; other 4xx raise
    :class:`EndpointError`.
    """
    attempts = 0
    while True:
        attempts += 1
        try:
            resp = client.post(url, json=payload, headers=headers)
        except (httpx.TimeoutException, httpx.TransportError) as exc:
            last = f"{type(exc).__name__}: {exc}"
        else:
            if resp.status_code in (401, 403):
                raise AuthenticationError(f"{url}: HTTP {resp.status_code}")
            if resp.status_code in TRANSIENT_STATUS:
                last = f"HTTP {resp.status_code}"
            elif resp.status_code >= 400:
                raise EndpointError(f"{url}: HTTP {resp.status_code}: {resp.text[:200]}")
            else:
                try:
                    body = resp.json()
                except ValueError as exc:
                    raise MalformedResponse(f"{url}: response is not JSON") from exc
                if not isinstance(body, dict):
                    raise MalformedResponse(f"{url}: expected a JSON object")
                return body
        if attempts > max_retries:
            raise RetriesExhausted(url, attempts, last)
        delay = min(backoff_cap, backoff_base * 2 ** (attempts - 1))
        logger.warning("%s: %s; retry %d/%d in %.2fs", url, last, attempts, max_retries, delay)
        sleep(delay)
