"""Minimal chat-completion client (OpenAI-style JSON over HTTP) with retries."""

from __future__ import annotations

import logging
import os
import threading
import time
from typing import Any

import httpx

from .config import BackendConfig

log = logging.getLogger(__name__)


class BackendUnavailable(RuntimeError):
    pass


class ChatClient:
    """POSTs ``{"model", "messages", "temperature"}`` and returns the first choice's content.

    ``transport`` lets tests plug in an ``httpx.MockTransport``.
    """

    def __init__(self, backend: BackendConfig, transport: httpx.BaseTransport | None = None, log_llm: bool = False):
        self.backend = backend
        self.log_llm = log_llm
        self._gate = threading.BoundedSemaphore(max(1, backend.max_concurrency))
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(backend.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(timeout=backend.timeout, headers=headers, transport=transport)

    def close(self) -> None:
        self._http.close()

    def complete(self, messages: list[dict[str, str]]) -> str:
        body: dict[str, Any] = {
            "model": self.backend.model,
            "messages": messages,
            "temperature": self.backend.temperature,
        }
        last_err: Exception | None = None
        for attempt in range(self.backend.max_retries + 1):
            try:
                with self._gate:
                    resp = self._http.post(self.backend.endpoint, json=body)
                if resp.status_code >= 500 or resp.status_code == 429:
                    raise httpx.HTTPStatusError(f"status {resp.status_code}", request=resp.request, response=resp)
                resp.raise_for_status()
                data = resp.json()
                content = data["choices"][0]["message"]["content"]
                if self.log_llm:
                    log.info("llm request=%s response=%s", _redact(body), content)
                return content
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                last_err = exc
                log.warning("chat completion attempt %d failed: %s", attempt + 1, exc)
                if attempt < self.backend.max_retries:
                    time.sleep(min(0.5 * 2**attempt, 8.0))
        raise BackendUnavailable(f"chat endpoint failed after {self.backend.max_retries + 1} attempts: {last_err}")


def _redact(body: dict[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in body.items() if k.lower() not in ("api_key", "authorization")}
