"""Chat-completion access: OpenAI-compatible HTTP, scripted mocks, and replay.

Every response passes through a content-addressed cache (one JSON record per
request hash).  The replay provider serves exclusively from that cache and
never touches the network, which is what makes experiment reruns
bit-reproducible.
"""
from __future__ import annotations

import collections
import hashlib
import importlib
import json
import logging
import os
import random
import re
import tempfile
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import CacheMissError, ConfigurationError, ElicitationParseError, TransportError

log = logging.getLogger(__name__)

JSON_REMINDER = "Your previous reply could not be parsed. Respond with valid JSON only."


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.1
    model_id: str = "mock"
    max_tokens: int | None = None

    def __post_init__(self):
        msgs = tuple((str(r), str(c)) for r, c in self.messages)
        if not msgs:
            raise ValueError("a chat request needs at least one message")
        for role, _ in msgs:
            if role not in ("system", "user"):
                raise ValueError(f"unsupported role {role!r}")
        if not self.temperature >= 0:
            raise ValueError("temperature must be non-negative")
        object.__setattr__(self, "messages", msgs)

    def key(self) -> str:
        payload = json.dumps(
            {"model_id": self.model_id, "temperature": float(self.temperature), "messages": [list(m) for m in self.messages]},
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def to_json(self) -> dict:
        return {
            "model_id": self.model_id,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "messages": [{"role": r, "content": c} for r, c in self.messages],
        }

    def with_message(self, role: str, content: str) -> "ChatRequest":
        return replace(self, messages=self.messages + ((role, content),))

    @property
    def text(self) -> str:
        """All message contents joined; handy for scripted responders."""
        return "\n".join(c for _, c in self.messages)


class ProviderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["http_openai_compatible", "mock", "replay"] = "mock"
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    credential: str = "OPENAI_API_KEY"
    model_id: str = "mock"
    temperature: float = Field(0.1, ge=0)
    max_tokens: int | None = None
    requests_per_minute: float = Field(60.0, gt=0)
    retry_limit: int = Field(5, ge=0)
    timeout: float = 60.0
    cache_dir: str | None = None
    # mock only
    responder: str | None = None
    responder_args: dict[str, Any] = Field(default_factory=dict)
    responses: dict[str, str] = Field(default_factory=dict)
    default_response: str | None = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "replay" and not self.cache_dir:
            raise ValueError("replay provider needs cache_dir")
        return self


class ResponseCache:
    """Append-only directory of ``<key>.json`` records."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> str | None:
        path = self._path(key)
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))["response"]

    def put(self, request: ChatRequest, response: str) -> bool:
        key = request.key()
        path = self._path(key)
        record = {"key": key, "request": request.to_json(), "response": response, "timestamp": time.time()}
        with self._lock:
            if path.exists():
                return False
            fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(record, fh, ensure_ascii=False, indent=1)
            os.replace(tmp, path)
        return True

    def __len__(self) -> int:
        return sum(1 for _ in self.directory.glob("*.json"))


class RateLimiter:
    """Sliding 60 s window; at most ``requests_per_minute`` admissions per window."""

    def __init__(self, requests_per_minute: float, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep, window: float = 60.0):
        self.capacity = max(1, int(requests_per_minute))
        self.window = window
        self.clock = clock
        self.sleep = sleep
        self._admitted: collections.deque[float] = collections.deque()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        with self._lock:
            while True:
                now = self.clock()
                # tolerance stops a float-rounded sleep from landing just short of expiry
                while self._admitted and self._admitted[0] + self.window <= now + 1e-9:
                    self._admitted.popleft()
                if len(self._admitted) < self.capacity:
                    self._admitted.append(now)
                    return now
                self.sleep(self._admitted[0] + self.window - now)


def load_responder(path: str, args: dict | None = None) -> Callable[[ChatRequest], str]:
    """Import ``package.module:factory`` and call it with ``args``."""
    module_name, _, attr = path.partition(":")
    if not attr:
        raise ConfigurationError(f"responder must look like 'module:factory', got {path!r}")
    factory = getattr(importlib.import_module(module_name), attr)
    return factory(**(args or {}))


@dataclass
class GatewayStats:
    network_calls: int = 0
    mock_calls: int = 0
    cache_hits: int = 0
    cache_writes: int = 0


class Gateway:
    def __init__(
        self,
        config: ProviderConfig,
        responder: Callable[[ChatRequest], str] | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
        http_client: Any = None,
        seed: int = 0,
    ):
        self.config = config
        self.cache = ResponseCache(config.cache_dir) if config.cache_dir else None
        if responder is None and config.kind == "mock" and config.responder:
            responder = load_responder(config.responder, config.responder_args)
        self.responder = responder
        self.limiter = RateLimiter(config.requests_per_minute, clock=clock, sleep=sleep)
        self.sleep = sleep
        self._http = http_client
        self._jitter = random.Random(seed)
        self._lock = threading.Lock()
        self.stats = GatewayStats()

    def request(self, system: str | None, user: str, **kwargs) -> ChatRequest:
        messages = ([("system", system)] if system else []) + [("user", user)]
        kwargs.setdefault("temperature", self.config.temperature)
        kwargs.setdefault("model_id", self.config.model_id)
        kwargs.setdefault("max_tokens", self.config.max_tokens)
        return ChatRequest(tuple(messages), **kwargs)

    def _bump(self, name: str):
        with self._lock:
            setattr(self.stats, name, getattr(self.stats, name) + 1)

    def complete(self, request: ChatRequest) -> str:
        key = request.key()
        kind = self.config.kind
        if kind == "replay":
            cached = self.cache.get(key)
            if cached is None:
                raise CacheMissError(key)
            self._bump("cache_hits")
            return cached
        if kind == "http_openai_compatible" and self.cache is not None:
            cached = self.cache.get(key)
            if cached is not None:
                self._bump("cache_hits")
                return cached
        if kind == "mock":
            text = self._mock(request, key)
            self._bump("mock_calls")
        else:
            text = self._http_complete(request)
        if self.cache is not None and self.cache.put(request, text):
            self._bump("cache_writes")
        return text

    def _mock(self, request: ChatRequest, key: str) -> str:
        if key in self.config.responses:
            return self.config.responses[key]
        if self.responder is not None:
            return self.responder(request)
        if self.config.default_response is not None:
            return self.config.default_response
        raise ConfigurationError(f"mock provider has no response for request hash {key}")

    def _http_complete(self, request: ChatRequest) -> str:
        token = os.environ.get(self.config.credential)
        if not token:
            raise ConfigurationError(f"environment variable {self.config.credential} is not set")
        import httpx

        body = {
            "model": request.model_id,
            "messages": [{"role": r, "content": c} for r, c in request.messages],
            "temperature": request.temperature,
        }
        if request.max_tokens is not None:
            body["max_tokens"] = request.max_tokens
        headers = {"Authorization": f"Bearer {token}"}
        client = self._http or httpx.Client(timeout=self.config.timeout)
        last_error: Exception | None = None
        try:
            for attempt in range(self.config.retry_limit + 1):
                if attempt:
                    delay = 2.0 ** (attempt - 1) * self._jitter.uniform(0.8, 1.2)
                    self.sleep(delay)
                self.limiter.acquire()
                self._bump("network_calls")
                try:
                    resp = client.post(self.config.endpoint, json=body, headers=headers)
                except httpx.HTTPError as exc:
                    last_error = exc
                    log.warning("transport failure (attempt %d): %s", attempt + 1, exc)
                    continue
                if resp.status_code == 429 or resp.status_code >= 500:
                    last_error = TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                    log.warning("retryable status %d (attempt %d)", resp.status_code, attempt + 1)
                    continue
                if resp.status_code >= 400:
                    raise TransportError(f"HTTP {resp.status_code}: {resp.text[:500]}")
                return resp.json()["choices"][0]["message"]["content"]
        finally:
            if self._http is None:
                client.close()
        raise TransportError(f"gave up after {self.config.retry_limit + 1} attempts: {last_error}")

    def complete_json(self, request: ChatRequest, max_json_retries: int = 3) -> dict:
        raw = ""
        for attempt in range(max_json_retries + 1):
            req = request if attempt == 0 else request.with_message("user", f"{JSON_REMINDER} (attempt {attempt + 1})")
            raw = self.complete(req)
            try:
                return extract_json(raw)
            except ValueError:
                log.info("unparsable JSON reply (attempt %d)", attempt + 1)
        raise ElicitationParseError(f"no valid JSON object after {max_json_retries + 1} attempts", raw)


_THINK = re.compile(r"<think>.*?</think>", re.DOTALL | re.IGNORECASE)
_FENCE = re.compile(r"```[a-zA-Z]*")


def strip_thinking(text: str) -> str:
    text = _THINK.sub("", text)
    # some servers drop the opening tag
    if "</think>" in text.lower():
        text = text[text.lower().rindex("</think>") + len("</think>"):]
    return text


def _balanced_spans(text: str):
    """Yield (start, end) of every balanced ``{...}`` span, respecting JSON strings."""
    for start, ch in enumerate(text):
        if ch != "{":
            continue
        depth = 0
        in_str = False
        escape = False
        for i in range(start, len(text)):
            c = text[i]
            if in_str:
                if escape:
                    escape = False
                elif c == "\\":
                    escape = True
                elif c == '"':
                    in_str = False
            elif c == '"':
                in_str = True
            elif c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth == 0:
                    yield start, i + 1
                    break


def extract_json(text: str) -> dict:
    """Parse the longest balanced-brace object in a reply; raises ValueError."""
    cleaned = _FENCE.sub("", strip_thinking(text))
    spans = sorted(_balanced_spans(cleaned), key=lambda s: s[0] - s[1])
    for start, end in spans:
        try:
            value = json.loads(cleaned[start:end])
        except json.JSONDecodeError:
            continue
        if isinstance(value, dict):
            return value
    raise ValueError("no JSON object found in reply")


_registry: dict[str, Gateway] = {}


def _shared(config: ProviderConfig) -> Gateway:
    key = config.model_dump_json()
    if key not in _registry:
        _registry[key] = Gateway(config)
    return _registry[key]


def complete(config: ProviderConfig, request: ChatRequest) -> str:
    return _shared(config).complete(request)


def complete_json(config: ProviderConfig, request: ChatRequest, max_json_retries: int = 3) -> dict:
    return _shared(config).complete_json(request, max_json_retries)
