"""Completion backends and parsers for tagged model output.

Two backend kinds share one ``complete(request)`` surface: ``RemoteBackend``
talks to an OpenAI-style chat-completions endpoint, ``ScriptedBackend``
replays deterministic responses for tests and offline runs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import httpx

from .domain import DONE

log = logging.getLogger(__name__)

# inference defaults used for fine-tuned agents
DEFAULT_TEMPERATURE = 0.1
DEFAULT_TOP_P = 0.95


class GatewayError(RuntimeError):
    pass


class UnknownBackend(GatewayError):
    pass


class BackendUnavailable(GatewayError):
    """Raised when a remote backend keeps failing after all retries."""

    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class ParseError(ValueError):
    def __init__(self, message: str, raw: Any):
        super().__init__(message)
        self.raw = raw


class TagParseError(ParseError):
    pass


class FenceParseError(ParseError):
    pass


@dataclass(frozen=True)
class Message:
    role: str
    content: str


@dataclass(frozen=True)
class CompletionRequest:
    messages: tuple[Message, ...]
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    max_tokens: int = 2048
    stop_sequences: tuple[str, ...] = ()
    backend_id: str = "default"
    seed: int | None = None
    # free-form routing hints (role, task_id, try, turn); never sent remotely
    metadata: Mapping[str, Any] = field(default_factory=dict, compare=False)

    @classmethod
    def user(cls, prompt: str, **kw) -> "CompletionRequest":
        return cls(messages=(Message("user", prompt),), **kw)

    @property
    def prompt_text(self) -> str:
        return "\n".join(m.content for m in self.messages)

    def validate(self, max_temperature: float = 2.0) -> None:
        if not self.messages:
            raise ValueError("completion request needs at least one message")
        if not 0 <= self.temperature <= max_temperature:
            raise ValueError(f"temperature {self.temperature} outside [0, {max_temperature}]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    def fingerprint(self) -> str:
        payload = json.dumps(
            {"messages": [[m.role, m.content] for m in self.messages],
             "temperature": self.temperature, "seed": self.seed},
            sort_keys=True, ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Completion:
    text: str
    tokens_in: int
    tokens_out: int
    attempts: int = 1
    backend_id: str = ""


class Backend(Protocol):
    backend_id: str
    kind: str

    def complete(self, request: CompletionRequest) -> Completion: ...


def whitespace_tokens(text: str) -> int:
    return len(text.split())


Responder = Callable[[CompletionRequest], str]


class ScriptedBackend:
    """Deterministic backend.

    ``script`` is a list (replied in order), a mapping from request
    fingerprint to reply, or a callable ``request -> reply``. Token usage is
    counted as whitespace-separated tokens.
    """

    kind = "Scripted"
    max_temperature = 2.0

    def __init__(self, script: list[str] | Mapping[str, str] | Responder, backend_id: str = "scripted"):
        self.backend_id = backend_id
        self._script = script
        self._position = 0
        self._lock = threading.Lock()
        self.calls: list[CompletionRequest] = []

    def complete(self, request: CompletionRequest) -> Completion:
        request.validate(self.max_temperature)
        with self._lock:
            self.calls.append(request)
            if callable(self._script):
                text = self._script(request)
            elif isinstance(self._script, Mapping):
                try:
                    text = self._script[request.fingerprint()]
                except KeyError:
                    raise GatewayError(f"{self.backend_id}: no scripted reply for this request") from None
            else:
                if self._position >= len(self._script):
                    raise GatewayError(f"{self.backend_id}: script exhausted after {self._position} replies")
                text = self._script[self._position]
                self._position += 1
        return Completion(text, whitespace_tokens(request.prompt_text), whitespace_tokens(text), 1, self.backend_id)

    @classmethod
    def from_file(cls, path: str | os.PathLike, backend_id: str | None = None) -> "ScriptedBackend":
        """Load a replay file.

        Accepted JSON layouts: a list of replies; ``{"responses": [...]}``;
        ``{"responses": {"0": ..., "1": ...}}`` keyed by ordinal;
        ``{"fingerprints": {sha256: reply}}``; or ``{"rules": [...],
        "default": reply}`` where each rule may constrain ``role``,
        ``task_id``, ``try``, ``contains`` (substring of the prompt) and
        ``regex``, and gives a ``reply``. The first matching rule wins.
        """
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        bid = backend_id or Path(path).stem
        if isinstance(data, list):
            return cls([str(x) for x in data], bid)
        if "responses" in data:
            resp = data["responses"]
            if isinstance(resp, Mapping):
                resp = [resp[k] for k in sorted(resp, key=int)]
            return cls(list(resp), bid)
        if "fingerprints" in data:
            return cls(dict(data["fingerprints"]), bid)
        if "rules" in data:
            return cls(rule_responder(data["rules"], data.get("default")), bid)
        raise ValueError(f"{path}: unrecognised replay file layout")


def rule_responder(rules: list[Mapping], default: str | None = None) -> Responder:
    compiled = [(r, re.compile(r["regex"], re.DOTALL) if "regex" in r else None) for r in rules]

    def respond(request: CompletionRequest) -> str:
        meta = request.metadata
        prompt = request.prompt_text
        for rule, rx in compiled:
            if "role" in rule and meta.get("role") != rule["role"]:
                continue
            if "task_id" in rule and meta.get("task_id") != rule["task_id"]:
                continue
            if "try" in rule and meta.get("try") != rule["try"]:
                continue
            if "contains" in rule and rule["contains"] not in prompt:
                continue
            if rx is not None and not rx.search(prompt):
                continue
            return rule["reply"]
        if default is None:
            raise GatewayError("no replay rule matched the request")
        return default

    return respond


_TRANSIENT_STATUS = {408, 409, 429, 500, 502, 503, 504}


class RemoteBackend:
    """Chat-completions client with bounded retries and an in-flight cap.

    The bearer key is read from the environment variable named by
    ``api_key_env`` at call time.
    """

    kind = "Remote"
    max_temperature = 2.0

    def __init__(
        self,
        backend_id: str,
        model: str,
        endpoint: str,
        api_key_env: str = "SQLFIX_API_KEY",
        max_retries: int = 3,
        backoff_s: float = 1.0,
        timeout_s: float = 120.0,
        max_in_flight: int = 4,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.backend_id = backend_id
        self.model = model
        self.endpoint = endpoint.rstrip("/")
        self.api_key_env = api_key_env
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._client = httpx.Client(timeout=timeout_s, transport=transport)
        self.tokens_in = 0
        self.tokens_out = 0

    def _body(self, request: CompletionRequest) -> dict:
        body = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        }
        if request.stop_sequences:
            body["stop"] = list(request.stop_sequences)
        if request.seed is not None:
            body["seed"] = request.seed
        return body

    def complete(self, request: CompletionRequest) -> Completion:
        request.validate(self.max_temperature)
        headers = {}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        url = f"{self.endpoint}/chat/completions"
        last = ""
        with self._slots:
            for attempt in range(1, self.max_retries + 1):
                try:
                    resp = self._client.post(url, json=self._body(request), headers=headers)
                except httpx.TransportError as exc:
                    last = f"transport error: {exc}"
                else:
                    if resp.status_code in _TRANSIENT_STATUS:
                        last = f"HTTP {resp.status_code}"
                    elif resp.status_code >= 400:
                        raise GatewayError(f"{self.backend_id}: HTTP {resp.status_code}: {resp.text[:200]}")
                    else:
                        data = resp.json()
                        text = data["choices"][0]["message"]["content"] or ""
                        usage = data.get("usage") or {}
                        t_in = int(usage.get("prompt_tokens", 0))
                        t_out = int(usage.get("completion_tokens", 0))
                        self.tokens_in += t_in
                        self.tokens_out += t_out
                        return Completion(text, t_in, t_out, attempt, self.backend_id)
                log.warning("%s attempt %d/%d failed: %s", self.backend_id, attempt, self.max_retries, last)
                if attempt < self.max_retries:
                    self._sleep(self.backoff_s * 2 ** (attempt - 1))
        raise BackendUnavailable(f"{self.backend_id}: giving up after {self.max_retries} attempts ({last})",
                                 self.max_retries)

    def close(self) -> None:
        self._client.close()


class Gateway:
    """Registry routing requests to backends by ``backend_id``."""

    def __init__(self, backends: list[Backend] = ()):
        self._backends: dict[str, Backend] = {}
        for b in backends:
            self.register(b)

    def register(self, backend: Backend) -> None:
        self._backends[backend.backend_id] = backend

    def get(self, backend_id: str) -> Backend:
        try:
            return self._backends[backend_id]
        except KeyError:
            raise UnknownBackend(f"backend {backend_id!r} is not registered") from None

    def complete(self, request: CompletionRequest) -> Completion:
        backend = self.get(request.backend_id)
        request.validate(getattr(backend, "max_temperature", 2.0))
        return backend.complete(request)


# -- output grammar ---------------------------------------------------------------

TAGS = ("thought", "action")


def parse_tagged(text: Any, tag: str) -> str:
    """Content of the first ``<tag>...</tag>`` pair, stripped.

    For ``action`` the sentinel ``[DONE]`` is returned as ``DONE``.
    """
    if tag not in TAGS:
        raise ValueError(f"unknown tag {tag!r}")
    if not isinstance(text, str):
        raise TagParseError(f"expected text, got {type(text).__name__}", text)
    m = re.search(rf"<{tag}>(.*?)</{tag}>", text, re.DOTALL | re.IGNORECASE)
    if m is None:
        if re.search(rf"<{tag}>", text, re.IGNORECASE):
            raise TagParseError(f"unterminated <{tag}> tag", text)
        raise TagParseError(f"missing <{tag}> tag", text)
    content = m.group(1).strip()
    if not content:
        raise TagParseError(f"empty <{tag}> tag", text)
    if tag == "action" and content.upper() in ("[DONE]", "DONE"):
        return DONE
    return content


_FENCE = re.compile(r"```[ \t]*sql\b[^\n]*?\n?(.*?)```", re.DOTALL | re.IGNORECASE)


def extract_sql_fence(text: Any) -> str:
    """Body of the first fenced ``sql`` block."""
    if not isinstance(text, str):
        raise FenceParseError(f"expected text, got {type(text).__name__}", text)
    m = _FENCE.search(text)
    if m is None:
        raise FenceParseError("no ```sql fenced block found", text)
    body = m.group(1).strip()
    if not body:
        raise FenceParseError("empty ```sql block", text)
    return body
