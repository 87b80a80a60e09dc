"""Chat-completions client with retry and exponential backoff."""

from __future__ import annotations

import logging
import os
import time
from typing import Any, Sequence

import httpx

from ..errors import BackendError, BackendUnavailable
from .config import BackendConfig

log = logging.getLogger(__name__)

RETRY_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class ChatClient:
    def __init__(self, config: BackendConfig, transport: httpx.BaseTransport | None = None,
                 sleep=time.sleep) -> None:
        self.config = config
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(config.api_key_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(timeout=config.timeout, headers=headers, transport=transport)
        self._sleep = sleep

    def close(self) -> None:
        self._client.close()

    def build_request(self, messages: Sequence[dict], *, logprobs: bool = False,
                      max_tokens: int | None = None, temperature: float | None = None) -> dict[str, Any]:
        cfg = self.config
        body: dict[str, Any] = {
            "model": cfg.model_name,
            "messages": list(messages),
            "temperature": cfg.temperature if temperature is None else temperature,
            "max_tokens": cfg.max_tokens if max_tokens is None else max_tokens,
        }
        if logprobs:
            body["logprobs"] = True
            body["top_logprobs"] = cfg.top_logprobs
        return body

    def post(self, body: dict[str, Any]) -> dict[str, Any]:
        """POST ``body``; retry transient failures with exponential backoff."""
        cfg = self.config
        last: Exception | None = None
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                delay = cfg.backoff_base * 2 ** (attempt - 1)
                log.warning("retrying chat request (attempt %d) in %.2fs: %s", attempt + 1, delay, last)
                self._sleep(delay)
            try:
                resp = self._client.post(cfg.endpoint_url, json=body)
            except httpx.TransportError as exc:
                last = exc
                continue
            if resp.status_code in RETRY_STATUS:
                last = BackendError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                last = exc
                continue
        raise BackendUnavailable(f"{cfg.endpoint_url}: giving up after {cfg.max_retries + 1} attempts: {last}")


def response_text(data: dict[str, Any]) -> str:
    try:
        return data["choices"][0]["message"].get("content") or ""
    except (KeyError, IndexError, TypeError, AttributeError):
        return ""


def first_token_logprobs(data: dict[str, Any]) -> list[dict] | None:
    try:
        content = data["choices"][0]["logprobs"]["content"]
        return list(content[0]["top_logprobs"])
    except (KeyError, IndexError, TypeError):
        return None
