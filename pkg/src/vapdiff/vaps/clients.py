"""Multimodal chat clients.

A request is a list of messages; each message is ``{"role", "content"}``
where content is an ordered list of parts, either ``{"type": "text",
"text": ...}`` or ``{"type": "image", "data": <png bytes>}``.  Clients
return the assistant's reply text.
"""

from __future__ import annotations

import base64
import hashlib
import logging
import os
import threading
import time
from typing import Callable, Protocol, Sequence

import httpx

from ..errors import ProtocolError, TransportError

log = logging.getLogger(__name__)

Message = dict
API_KEY_ENV = "VAPDIFF_MLLM_API_KEY"


def text_part(text: str) -> dict:
    return {"type": "text", "text": text}


def image_part(data: bytes) -> dict:
    return {"type": "image", "data": data}


class MllmClient(Protocol):
    def chat(self, messages: Sequence[Message]) -> str: ...


class MockClient:
    """Deterministic client that returns scripted replies and records every request.

    ``responder`` maps a request to a reply; by default replies cycle through
    ``replies`` by turn number within a three-turn exchange.
    """

    def __init__(
        self,
        replies: Sequence[str] = ("R1", "R2", "R3"),
        responder: Callable[[Sequence[Message]], str] | None = None,
    ):
        self.replies = list(replies)
        self.responder = responder
        self.requests: list[list[Message]] = []
        self._lock = threading.Lock()

    def chat(self, messages: Sequence[Message]) -> str:
        with self._lock:
            turn = len(self.requests)
            self.requests.append([dict(m) for m in messages])
        if self.responder is not None:
            return self.responder(messages)
        return self.replies[turn % len(self.replies)]

    @property
    def calls(self) -> int:
        return len(self.requests)


def image_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class LookupClient:
    """Stand-in MLLM for the toy benchmark.

    Step-3 requests (the ones carrying an image after earlier answers) are
    answered with the ground-truth attribute string registered for that
    image's bytes; step 1 gets a generic observation and step 2 an
    image-free attribute checklist.
    """

    def __init__(self, descriptions: dict[str, str], fail_on: set[str] | None = None):
        self.descriptions = descriptions
        self.fail_on = fail_on or set()
        self.calls = 0
        self._lock = threading.Lock()

    def chat(self, messages: Sequence[Message]) -> str:
        with self._lock:
            self.calls += 1
        parts = [p for m in messages for p in m["content"]]
        images = [p["data"] for p in parts if p["type"] == "image"]
        if not images:
            return (
                "Lesions vary in shape (round, angular), color (red, brown, dark), "
                "size relative to the frame, and surface texture (smooth or speckled)."
            )
        key = image_digest(images[0])
        if key in self.fail_on:
            raise TransportError(f"simulated failure for image {key[:12]}")
        desc = self.descriptions.get(key)
        if desc is None:
            raise ProtocolError(f"no description registered for image {key[:12]}")
        n_text = sum(p["type"] == "text" for p in parts)
        if n_text <= 1:
            return f"I observe a colored region on a textured background. {desc}"
        return desc


class HttpChatClient:
    """Chat-completion style HTTP adapter.

    Images are sent as base64 ``image_url`` data URIs.  The bearer token is
    read from ``VAPDIFF_MLLM_API_KEY``.  Failed calls are retried with
    exponential backoff.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        timeout: float = 60.0,
        attempts: int = 3,
        backoff: float = 1.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self.model = model
        self.attempts = attempts
        self.backoff = backoff
        self._sleep = sleep
        headers = {}
        token = os.environ.get(API_KEY_ENV)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._http = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    @staticmethod
    def to_wire(messages: Sequence[Message]) -> list[dict]:
        wire = []
        for m in messages:
            content = []
            for p in m["content"]:
                if p["type"] == "text":
                    content.append({"type": "text", "text": p["text"]})
                else:
                    b64 = base64.b64encode(p["data"]).decode("ascii")
                    content.append({"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}})
            wire.append({"role": m["role"], "content": content})
        return wire

    def chat(self, messages: Sequence[Message]) -> str:
        body = {"model": self.model, "messages": self.to_wire(messages)}
        last: Exception | None = None
        for attempt in range(self.attempts):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._http.post(self.endpoint, json=body)
                if resp.status_code >= 500 or resp.status_code == 429:
                    last = TransportError(f"HTTP {resp.status_code} from {self.endpoint}")
                    continue
                if resp.status_code >= 400:
                    raise TransportError(f"HTTP {resp.status_code} from {self.endpoint}: {resp.text[:200]}")
                data = resp.json()
            except (httpx.TransportError, ValueError) as exc:
                last = exc
                log.warning("MLLM call failed (attempt %d/%d): %s", attempt + 1, self.attempts, exc)
                continue
            try:
                return data["choices"][0]["message"]["content"] or ""
            except (KeyError, IndexError, TypeError) as exc:
                raise ProtocolError(f"malformed chat response: {exc}") from exc
        raise TransportError(f"MLLM request failed after {self.attempts} attempts: {last}")
