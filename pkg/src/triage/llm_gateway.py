"""Chat-completion gateway with two interchangeable backends.

The live backend speaks the OpenAI-compatible chat-completions HTTP contract
(the protocol both DeepSeek and Qwen endpoints expose). The scripted backend
replays recorded replies from a JSON Lines fixture file, which is what every
test and CI run uses: given a fixed fixture, replay is fully deterministic.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Protocol

import httpx

from .errors import (
    AuthFailure,
    GatewayError,
    MalformedProviderResponse,
    MissingFixture,
    RateLimited,
    Timeout,
)

AGENT_TAGS = ("recipient", "inquirer", "department", "patient", "evaluator", "imputer")

# Decision agents must be stable; the patient simulation and questioning
# benefit from variety.
DEFAULT_TEMPERATURES: Mapping[str, float] = {
    "recipient": 0.0,
    "department": 0.0,
    "evaluator": 0.0,
    "imputer": 0.0,
    "patient": 0.7,
    "inquirer": 0.7,
}

ENV_API_KEY = "TRIAGE_LLM_API_KEY"
ENV_ENDPOINT = "TRIAGE_LLM_ENDPOINT"
ENV_MODEL = "TRIAGE_LLM_MODEL"


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ("system", "user"):
            raise ValueError(f"role must be 'system' or 'user', got {self.role!r}")


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class ChatExchange:
    agent_tag: str
    session_id: str
    round: int
    messages: tuple[ChatMessage, ...]
    params: GenerationParams = GenerationParams()

    def __post_init__(self) -> None:
        if self.agent_tag not in AGENT_TAGS:
            raise ValueError(f"agent_tag must be one of {AGENT_TAGS}")
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[0].role != "system":
            raise ValueError("first message must have role 'system'")

    def digest(self) -> str:
        return request_digest(m.content for m in self.messages)


@dataclass(frozen=True)
class CompletionResult:
    text: str
    latency_ms: float = 0.0
    attempt: int = 1


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "live"
    endpoint: str = ""
    model_id: str = ""
    api_key_source: str = ENV_API_KEY
    timeout: float = 60.0
    max_retries: int = 2
    fixture_path: Path | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("live", "scripted"):
            raise ValueError(f"backend kind must be 'live' or 'scripted', got {self.kind!r}")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.kind == "scripted" and self.fixture_path is None:
            raise ValueError("scripted backend requires fixture_path")


def request_digest(contents) -> str:
    """Stable hash of the concatenated message contents."""
    h = hashlib.sha256()
    for content in contents:
        h.update(content.encode("utf-8"))
        h.update(b"\x1e")
    return h.hexdigest()[:16]


class Backend(Protocol):
    def complete(self, exchange: ChatExchange) -> CompletionResult: ...


def _normalize_endpoint(endpoint: str) -> str:
    base = endpoint.rstrip("/")
    if base.endswith("/chat/completions"):
        return base
    return base + "/chat/completions"


class LiveBackend:
    """OpenAI-compatible chat-completions client with bounded retries.

    Transient failures (timeouts, 429, 5xx, connection errors) are retried
    with exponential backoff and full jitter; auth and malformed-payload
    failures abort immediately so the orchestrator can tell them apart.
    """

    def __init__(
        self,
        config: BackendConfig,
        post_fn: Callable[..., httpx.Response] | None = None,
        sleep_fn: Callable[[float], None] = time.sleep,
        backoff_base: float = 0.5,
    ) -> None:
        self.config = config
        self._post = post_fn if post_fn is not None else self._default_post
        self._sleep = sleep_fn
        self._backoff_base = backoff_base

    def _default_post(self, url: str, *, headers: dict, json_body: dict, timeout: float):
        return httpx.post(url, headers=headers, json=json_body, timeout=timeout)

    def complete(self, exchange: ChatExchange) -> CompletionResult:
        api_key = os.environ.get(self.config.api_key_source, "")
        if not api_key:
            raise AuthFailure(
                f"environment variable {self.config.api_key_source!r} is not set"
            )
        endpoint = self.config.endpoint or os.environ.get(ENV_ENDPOINT, "")
        if not endpoint:
            raise GatewayError("no endpoint configured (set TRIAGE_LLM_ENDPOINT)")
        url = _normalize_endpoint(endpoint)
        model = self.config.model_id or os.environ.get(ENV_MODEL, "")
        body = {
            "model": model,
            "messages": [{"role": m.role, "content": m.content} for m in exchange.messages],
            "temperature": exchange.params.temperature,
            "max_tokens": exchange.params.max_tokens,
        }
        headers = {"Authorization": f"Bearer {api_key}"}
        attempts = self.config.max_retries + 1
        last_error: GatewayError | None = None
        started = time.perf_counter()
        for attempt in range(1, attempts + 1):
            try:
                response = self._post(
                    url, headers=headers, json_body=body, timeout=self.config.timeout
                )
            except httpx.TimeoutException as exc:
                last_error = Timeout(f"provider timed out after {self.config.timeout}s: {exc}")
            except httpx.HTTPError as exc:
                last_error = Timeout(f"connection failure: {exc}")
            else:
                status = response.status_code
                if status in (401, 403):
                    raise AuthFailure(f"provider rejected credentials (HTTP {status})")
                if status == 429:
                    last_error = RateLimited("provider returned HTTP 429")
                elif status >= 500:
                    last_error = Timeout(f"provider returned HTTP {status}")
                elif status >= 400:
                    raise MalformedProviderResponse(
                        f"provider returned HTTP {status}: {response.text[:200]}"
                    )
                else:
                    text = self._extract_text(response)
                    latency = (time.perf_counter() - started) * 1000.0
                    return CompletionResult(text=text, latency_ms=latency, attempt=attempt)
            if attempt < attempts:
                delay = self._backoff_base * (2 ** (attempt - 1)) * random.random()
                self._sleep(delay)
        assert last_error is not None
        raise last_error

    @staticmethod
    def _extract_text(response: httpx.Response) -> str:
        try:
            payload = response.json()
            text = payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedProviderResponse(
                f"could not extract completion text: {exc}"
            ) from exc
        if not isinstance(text, str) or not text:
            raise MalformedProviderResponse("provider returned an empty completion")
        return text


class ScriptedBackend:
    """Replays recorded replies from a JSON Lines fixture file.

    Lookup relaxes from most to least specific so a single fixture can serve
    many synthetic sessions: (agent_tag, session_id, round, digest) first,
    then (agent_tag, round, digest), then (agent_tag, digest).
    """

    def __init__(self, fixture_path: str | Path) -> None:
        self.fixture_path = Path(fixture_path)
        self._exact: dict[tuple[str, str, int, str], str] = {}
        self._by_round: dict[tuple[str, int, str], str] = {}
        self._by_tag: dict[tuple[str, str], str] = {}
        if self.fixture_path.exists():
            for line in self.fixture_path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                entry = json.loads(line)
                self._add(entry)

    def _add(self, entry: Mapping) -> None:
        tag = entry["agent_tag"]
        sid = entry["session_id"]
        rnd = int(entry["round"])
        digest = entry["digest"]
        reply = entry["reply"]
        self._exact[(tag, sid, rnd, digest)] = reply
        self._by_round.setdefault((tag, rnd, digest), reply)
        self._by_tag.setdefault((tag, digest), reply)

    def complete(self, exchange: ChatExchange) -> CompletionResult:
        digest = exchange.digest()
        reply = self._exact.get(
            (exchange.agent_tag, exchange.session_id, exchange.round, digest)
        )
        if reply is None:
            reply = self._by_round.get((exchange.agent_tag, exchange.round, digest))
        if reply is None:
            reply = self._by_tag.get((exchange.agent_tag, digest))
        if reply is None:
            raise MissingFixture(exchange.agent_tag, exchange.session_id, exchange.round)
        return CompletionResult(text=reply, latency_ms=0.0, attempt=1)


_record_locks: dict[str, threading.Lock] = {}
_record_locks_guard = threading.Lock()


def _lock_for(path: Path) -> threading.Lock:
    key = str(path)
    with _record_locks_guard:
        if key not in _record_locks:
            _record_locks[key] = threading.Lock()
        return _record_locks[key]


def scripted_record(
    exchange: ChatExchange, result: CompletionResult, fixture_path: str | Path
) -> None:
    """Upsert one reply into a fixture file, keyed by
    (agent_tag, session_id, round, request-digest)."""
    path = Path(fixture_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    key = (exchange.agent_tag, exchange.session_id, exchange.round, exchange.digest())
    with _lock_for(path):
        entries: dict[tuple[str, str, int, str], dict] = {}
        if path.exists():
            for line in path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                entry = json.loads(line)
                entries[
                    (entry["agent_tag"], entry["session_id"], int(entry["round"]), entry["digest"])
                ] = entry
        entries[key] = {
            "agent_tag": exchange.agent_tag,
            "session_id": exchange.session_id,
            "round": exchange.round,
            "digest": key[3],
            "reply": result.text,
        }
        with path.open("w", encoding="utf-8") as fh:
            for entry in entries.values():
                fh.write(json.dumps(entry, ensure_ascii=False))
                fh.write("\n")


class RecordingBackend:
    """Wraps any backend, persisting every completion into a fixture file."""

    def __init__(self, inner: Backend, fixture_path: str | Path) -> None:
        self.inner = inner
        self.fixture_path = Path(fixture_path)

    def complete(self, exchange: ChatExchange) -> CompletionResult:
        result = self.inner.complete(exchange)
        scripted_record(exchange, result, self.fixture_path)
        return result


class CountingBackend:
    """Wraps any backend, counting completions per agent tag."""

    def __init__(self, inner: Backend) -> None:
        self.inner = inner
        self._counts: dict[str, int] = {}
        self._lock = threading.Lock()

    def complete(self, exchange: ChatExchange) -> CompletionResult:
        with self._lock:
            self._counts[exchange.agent_tag] = self._counts.get(exchange.agent_tag, 0) + 1
        return self.inner.complete(exchange)

    def count(self, agent_tag: str) -> int:
        with self._lock:
            return self._counts.get(agent_tag, 0)

    @property
    def counts(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)


def backend_for(config: BackendConfig) -> Backend:
    """Build the backend a config describes. Callers that issue many
    completions should hold on to the returned instance so the scripted
    fixture is loaded once."""
    if config.kind == "scripted":
        return ScriptedBackend(config.fixture_path)  # type: ignore[arg-type]
    return LiveBackend(config)


def complete(exchange: ChatExchange, config: BackendConfig) -> CompletionResult:
    """One-shot completion through whichever backend ``config`` describes."""
    return backend_for(config).complete(exchange)


def default_params(agent_tag: str) -> GenerationParams:
    return GenerationParams(temperature=DEFAULT_TEMPERATURES.get(agent_tag, 0.0))
