"""Chat client for multimodal LLM services, plus the scripted test double.

Remote mode speaks the OpenAI-style chat-completions JSON protocol with
image parts sent as base64 data URLs. Scripted mode replays responses
from a JSONL file keyed by (prompt kind, sample id, iteration), making
every pipeline run a pure function of its inputs.

The HTTP transport is injectable so retry behavior is testable without a
network.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import requests

from .embed import DEFAULT_API_KEY_ENV, ProviderConfig, embed_text
from .errors import (
    ChatTimeoutError,
    MalformedResponseError,
    RateLimitedError,
    RemoteError,
    ScriptMissError,
)
from .prompts import (
    IMAGE_MARKER,
    KIND_FINAL_ANSWER,
    MAIN_IMAGE_MARKER,
    fewshot_template,
    render_prompt,
)

logger = logging.getLogger(__name__)

ROLE_SYSTEM = "system"
ROLE_USER = "user"
ROLE_ASSISTANT = "assistant"

MODE_REMOTE = "remote"
MODE_SCRIPTED = "scripted"

# (url, payload, headers, timeout) -> (status, parsed body)
Transport = Callable[[str, dict, dict, float], tuple[int, dict]]


@dataclass
class ChatMessage:
    """One chat turn: a role and an ordered list of text/image parts.

    Parts are ``{"text": str}`` or ``{"image": bytes | url-string}``;
    image parts are only valid in user messages.
    """

    role: str
    parts: list[dict]

    def __post_init__(self):
        if self.role not in (ROLE_SYSTEM, ROLE_USER, ROLE_ASSISTANT):
            raise ValueError(f"bad role {self.role!r}")
        if not self.parts:
            raise ValueError("message needs at least one part")
        for p in self.parts:
            if "text" not in p and "image" not in p:
                raise ValueError("part must carry 'text' or 'image'")
            if "image" in p and self.role != ROLE_USER:
                raise ValueError("image parts are only allowed in user messages")

    @classmethod
    def user(cls, *parts: dict) -> "ChatMessage":
        return cls(ROLE_USER, list(parts))

    @classmethod
    def user_text(cls, text: str) -> "ChatMessage":
        return cls(ROLE_USER, [{"text": text}])


@dataclass(frozen=True)
class LlmConfig:
    mode: str = MODE_SCRIPTED
    endpoint: str | None = None
    model: str | None = None
    temperature: float = 0.0
    max_tokens: int = 1024
    script_path: str | None = None
    api_key_env: str = DEFAULT_API_KEY_ENV
    timeout: float = 60.0
    max_retries: int = 3
    backoff_base: float = 0.5
    max_in_flight: int = 4

    def __post_init__(self):
        if self.mode not in (MODE_REMOTE, MODE_SCRIPTED):
            raise ValueError(f"unknown llm mode {self.mode!r}")
        if self.mode == MODE_SCRIPTED and not self.script_path:
            raise ValueError("scripted mode requires script_path")
        if self.mode == MODE_REMOTE and not self.endpoint:
            raise ValueError("remote mode requires endpoint")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass
class ChatTelemetry:
    calls: int = 0
    attempts: int = 0
    retries: int = 0


def sniff_mime(data: bytes) -> str:
    if data.startswith(b"\x89PNG"):
        return "image/png"
    if data.startswith(b"\xff\xd8"):
        return "image/jpeg"
    if data.startswith((b"GIF87a", b"GIF89a")):
        return "image/gif"
    return "application/octet-stream"


def image_part_url(image: bytes | str) -> str:
    """Data URL for raw bytes; URL strings pass through unchanged."""
    if isinstance(image, str):
        return image
    return f"data:{sniff_mime(image)};base64," + base64.b64encode(image).decode("ascii")


def load_script(path: str | Path) -> dict[tuple[str, str, int], str]:
    """Load a scripted-response file: JSONL of {key: {...}, response: str}."""
    table: dict[tuple[str, str, int], str] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            key = obj["key"]
            table[(key["kind"], key["sample_id"], int(key["iteration"]))] = obj["response"]
    return table


def _default_transport(url: str, payload: dict, headers: dict, timeout: float) -> tuple[int, dict]:
    resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
    try:
        body = resp.json()
    except ValueError:
        body = {"raw": resp.text}
    return resp.status_code, body


class LlmClient:
    """Shareable chat client; one instance serves a whole benchmark run."""

    def __init__(self, cfg: LlmConfig, transport: Transport | None = None):
        self.cfg = cfg
        self.telemetry = ChatTelemetry()
        self._transport = transport or _default_transport
        self._sem = threading.BoundedSemaphore(cfg.max_in_flight)
        self._script: dict[tuple[str, str, int], str] | None = None
        if cfg.mode == MODE_SCRIPTED:
            self._script = load_script(cfg.script_path)

    def chat(self, messages: Sequence[ChatMessage], *, kind: str,
             sample_id: str = "", iteration: int = 0) -> str:
        """Send one chat call and return the assistant text.

        ``kind``/``sample_id``/``iteration`` key the scripted lookup; the
        remote path ignores them beyond logging.
        """
        if not messages:
            raise ValueError("messages must be nonempty")
        self.telemetry.calls += 1
        if self._script is not None:
            key = (kind, sample_id, iteration)
            self.telemetry.attempts += 1
            if key not in self._script:
                raise ScriptMissError(kind, sample_id, iteration)
            return self._script[key]
        return self._remote_chat(messages)

    def _remote_chat(self, messages: Sequence[ChatMessage]) -> str:
        payload = {
            "model": self.cfg.model,
            "messages": [self._wire_message(m) for m in messages],
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_tokens,
        }
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.cfg.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"

        last_status = None
        for attempt in range(self.cfg.max_retries + 1):
            self.telemetry.attempts += 1
            if attempt > 0:
                self.telemetry.retries += 1
            try:
                with self._sem:
                    status, body = self._transport(
                        self.cfg.endpoint, payload, headers, self.cfg.timeout
                    )
            except requests.Timeout:
                last_status = "timeout"
                self._backoff_or_raise(attempt, ChatTimeoutError("chat call timed out"))
                continue
            if status == 200:
                return self._extract_text(body)
            last_status = status
            if status == 429:
                self._backoff_or_raise(attempt, RateLimitedError("rate limited past retry budget"))
            elif 500 <= status < 600:
                self._backoff_or_raise(attempt, RemoteError(status, str(body)))
            else:
                raise RemoteError(status, str(body))
        raise RemoteError(0, f"retries exhausted (last status {last_status})")

    def _backoff_or_raise(self, attempt: int, exc: Exception) -> None:
        if attempt >= self.cfg.max_retries:
            raise exc
        delay = self.cfg.backoff_base * (2 ** attempt)
        logger.warning("chat attempt %d failed (%s), retrying in %.1fs",
                       attempt + 1, exc, delay)
        time.sleep(delay)

    @staticmethod
    def _wire_message(message: ChatMessage) -> dict:
        content = []
        for part in message.parts:
            if "text" in part:
                content.append({"type": "text", "text": part["text"]})
            else:
                content.append({
                    "type": "image_url",
                    "image_url": {"url": image_part_url(part["image"])},
                })
        return {"role": message.role, "content": content}

    @staticmethod
    def _extract_text(body: dict) -> str:
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(f"cannot extract completion text: {exc}") from None


def chat(cfg: LlmConfig, messages: Sequence[ChatMessage], *, kind: str,
         sample_id: str = "", iteration: int = 0) -> str:
    """One-shot convenience wrapper around a transient LlmClient."""
    return LlmClient(cfg).chat(messages, kind=kind, sample_id=sample_id, iteration=iteration)


@dataclass(frozen=True)
class FewshotDemo:
    """One answer-extraction demonstration: image, reasoning-record
    context, question, and its gold answer."""

    image: bytes | str
    context: str
    question: str
    answer: str


def build_fewshot_prompt(question: str, image: bytes | str, records: str,
                         demos: Sequence[FewshotDemo]) -> list[ChatMessage]:
    """Assemble the few-shot answer-extraction message.

    Demo images and example blocks interleave exactly as the template
    lays them out; with no demos this degenerates to the plain
    final-answer prompt.
    """
    if not demos:
        text = render_prompt(KIND_FINAL_ANSWER, question=question, reasoning_records=records)
        return [ChatMessage.user({"text": text}, {"image": image})]

    slots = {"question": question, "reasoning_records": records}
    for i, demo in enumerate(demos, start=1):
        slots[f"few_shot_context_{i}"] = demo.context
        slots[f"few_shot_question_{i}"] = demo.question
        slots[f"few_shot_answer_{i}"] = demo.answer
    text = fewshot_template(len(demos)).format(**slots)

    parts: list[dict] = []
    cursor = 0
    markers = [(IMAGE_MARKER.format(n=i), demo.image) for i, demo in enumerate(demos, start=1)]
    markers.append((MAIN_IMAGE_MARKER, image))
    for marker, img in markers:
        idx = text.index(marker, cursor)
        chunk = text[cursor:idx]
        if chunk:
            parts.append({"text": chunk})
        parts.append({"image": img})
        cursor = idx + len(marker)
    tail = text[cursor:]
    if tail:
        parts.append({"text": tail})
    return [ChatMessage.user(*parts)]


def select_fewshot_demos(question: str, pool: Sequence[FewshotDemo],
                         provider: ProviderConfig, n: int = 3) -> list[FewshotDemo]:
    """Pick the ``n`` pool demos whose questions embed closest to the
    query question (ties resolved by pool order)."""
    if n <= 0 or not pool:
        return []
    qvec = embed_text(provider, question)
    sims = [float(np.dot(qvec, embed_text(provider, d.question))) for d in pool]
    order = sorted(range(len(pool)), key=lambda i: (-sims[i], i))
    return [pool[i] for i in order[:n]]
