"""Chat-completion backends: OpenAI-compatible HTTP, scripted mock, and a
persistent single-flight cache that wraps either of them."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Protocol, Union

import httpx

from .core import DecodeParams

logger = logging.getLogger(__name__)

NO_SCRIPT = "NO-SCRIPT"
API_KEY_ENV = "MASSRAG_API_KEY"
BASE_URL_ENV = "MASSRAG_BASE_URL"


class BackendError(RuntimeError):
    kind = "backend"


class TransportError(BackendError):
    """Network-level failure; retryable."""

    kind = "transport"


class EndpointError(BackendError):
    kind = "endpoint"

    def __init__(self, status: int, body: str) -> None:
        self.status = status
        self.body = body
        super().__init__(f"endpoint returned HTTP {status}: {body[:200]}")


class EmptyOutputError(BackendError):
    kind = "empty_output"


class CacheError(RuntimeError):
    """The on-disk cache store is unreadable or corrupt."""


class MockScriptError(ValueError):
    def __init__(self, path: Union[str, Path], line: int, message: str) -> None:
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


@dataclass(frozen=True)
class ChatRequest:
    """One chat completion request.

    ``role``, ``query_id`` and ``view`` are routing tags for scripted mocks and
    call logs; they are not part of the cache key.
    """

    system_prompt: str
    user_prompt: str
    decode: DecodeParams = field(default_factory=DecodeParams)
    model_name: str = ""
    role: str = ""
    query_id: str = ""
    view: str = ""

    def __post_init__(self) -> None:
        if not self.user_prompt:
            raise ValueError("user_prompt must be non-empty")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: Optional[int] = None
    completion_tokens: Optional[int] = None
    from_cache: bool = False


def cache_key(req: ChatRequest) -> str:
    """Hex digest over model, prompts and decoding parameters."""
    payload = json.dumps(
        [
            req.model_name,
            req.system_prompt,
            req.user_prompt,
            req.decode.temperature,
            req.decode.top_p,
            req.decode.max_tokens,
        ],
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def prompt_digest(req: ChatRequest) -> str:
    """Digest of the prompt text alone, used to key mock script entries."""
    return hashlib.sha256(
        (req.system_prompt + "\n\n" + req.user_prompt).encode("utf-8")
    ).hexdigest()


class Backend(Protocol):
    fingerprint: str

    def complete(self, req: ChatRequest) -> ChatResponse: ...


class HttpBackend:
    """OpenAI-compatible ``/chat/completions`` client with bounded retries.

    Retries cover transport failures, 429 and 5xx responses: three attempts
    with exponential backoff starting at ``backoff`` seconds.
    """

    def __init__(
        self,
        base_url: Optional[str] = None,
        api_key: Optional[str] = None,
        *,
        timeout: float = 120.0,
        max_attempts: int = 3,
        backoff: float = 1.0,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        base_url = base_url or os.environ.get(BASE_URL_ENV, "")
        if not base_url:
            raise ValueError(f"no base URL configured (set {BASE_URL_ENV} or backend.base_url)")
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.max_attempts = max_attempts
        self.backoff = backoff
        self._sleep = sleep
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)
        self.fingerprint = f"http:{self.base_url}"

    def close(self) -> None:
        self._client.close()

    def _payload(self, req: ChatRequest) -> dict:
        messages = []
        if req.system_prompt:
            messages.append({"role": "system", "content": req.system_prompt})
        messages.append({"role": "user", "content": req.user_prompt})
        return {
            "model": req.model_name,
            "messages": messages,
            "temperature": req.decode.temperature,
            "top_p": req.decode.top_p,
            "max_tokens": req.decode.max_tokens,
        }

    def complete(self, req: ChatRequest) -> ChatResponse:
        url = f"{self.base_url}/chat/completions"
        last: Optional[BackendError] = None
        for attempt in range(self.max_attempts):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self._client.post(url, json=self._payload(req))
            except httpx.TransportError as exc:
                last = TransportError(f"{type(exc).__name__}: {exc}")
                logger.warning("attempt %d/%d to %s failed: %s", attempt + 1, self.max_attempts, url, last)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = EndpointError(resp.status_code, resp.text)
                logger.warning("attempt %d/%d to %s failed: %s", attempt + 1, self.max_attempts, url, last)
                continue
            if not 200 <= resp.status_code < 300:
                raise EndpointError(resp.status_code, resp.text)
            return self._parse(resp)
        assert last is not None
        raise last

    @staticmethod
    def _parse(resp: httpx.Response) -> ChatResponse:
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise EndpointError(resp.status_code, f"malformed completion body ({exc}): {resp.text}") from exc
        if not text.strip():
            raise EmptyOutputError("endpoint returned an empty completion")
        usage = data.get("usage") or {}
        return ChatResponse(
            text=text,
            prompt_tokens=usage.get("prompt_tokens"),
            completion_tokens=usage.get("completion_tokens"),
        )


_MOCK_ERRORS = {
    "transport": TransportError,
    "empty": EmptyOutputError,
    "empty_output": EmptyOutputError,
}


@dataclass(frozen=True)
class _Entry:
    response: str
    error: Optional[str] = None


class MockBackend:
    """Scripted backend answering by exact lookup.

    Lookup order: ``(role, query_id, view)``, then ``(role, query_id)``, then
    the prompt digest. Unmatched requests get the ``NO-SCRIPT`` sentinel.
    Every call is appended to ``calls`` as ``(role, query_id, view)``.
    """

    def __init__(
        self,
        by_role: Optional[dict[tuple[str, str, str], _Entry]] = None,
        by_digest: Optional[dict[str, _Entry]] = None,
        fingerprint: str = "mock",
    ) -> None:
        self._by_role = dict(by_role or {})
        self._by_digest = dict(by_digest or {})
        self.fingerprint = fingerprint
        self.calls: list[tuple[str, str, str]] = []
        self._lock = threading.Lock()

    @classmethod
    def from_responses(cls, table: dict, fingerprint: str = "mock") -> "MockBackend":
        """Build from ``{(role, query_id[, view]): text}``."""
        by_role = {}
        for key, text in table.items():
            role, qid, *rest = key
            by_role[(role, qid, rest[0] if rest else "")] = _Entry(text)
        return cls(by_role, fingerprint=fingerprint)

    @property
    def call_count(self) -> int:
        with self._lock:
            return len(self.calls)

    def complete(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls.append((req.role, req.query_id, req.view))
        entry = (
            self._by_role.get((req.role, req.query_id, req.view))
            or self._by_role.get((req.role, req.query_id, ""))
            or self._by_digest.get(prompt_digest(req))
        )
        if entry is None:
            return ChatResponse(text=NO_SCRIPT)
        if entry.error is not None:
            if entry.error.startswith("http_"):
                raise EndpointError(int(entry.error[5:]), "scripted failure")
            raise _MOCK_ERRORS[entry.error](f"scripted {entry.error} failure")
        if not entry.response.strip():
            raise EmptyOutputError("scripted empty completion")
        return ChatResponse(text=entry.response)


def mock_script_load(path: Union[str, Path]) -> MockBackend:
    """Load a line-delimited mock script.

    Each line is a JSON object with ``response`` (or ``error``) and either
    ``role`` + ``query_id`` (optionally ``view``) or ``prompt_digest``.
    """
    path = Path(path)
    raw = path.read_bytes()
    by_role: dict[tuple[str, str, str], _Entry] = {}
    by_digest: dict[str, _Entry] = {}
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MockScriptError(path, lineno, f"invalid JSON: {exc.msg}") from exc
        if not isinstance(rec, dict):
            raise MockScriptError(path, lineno, "record must be an object")
        error = rec.get("error")
        if error is not None and error not in _MOCK_ERRORS and not str(error).startswith("http_"):
            raise MockScriptError(path, lineno, f"unknown error kind {error!r}")
        if error is None and not isinstance(rec.get("response"), str):
            raise MockScriptError(path, lineno, "missing string field 'response'")
        entry = _Entry(rec.get("response", ""), error)
        if "prompt_digest" in rec:
            key = str(rec["prompt_digest"])
            if key in by_digest:
                raise MockScriptError(path, lineno, f"duplicate prompt_digest {key!r}")
            by_digest[key] = entry
        elif "role" in rec and "query_id" in rec:
            rkey = (str(rec["role"]), str(rec["query_id"]), str(rec.get("view", "")))
            if rkey in by_role:
                raise MockScriptError(path, lineno, f"duplicate key {rkey!r}")
            by_role[rkey] = entry
        else:
            raise MockScriptError(path, lineno, "need role+query_id or prompt_digest")
    digest = hashlib.sha256(raw).hexdigest()[:12]
    return MockBackend(by_role, by_digest, fingerprint=f"mock:{digest}")


class CountingBackend:
    """Pass-through wrapper counting calls per role tag."""

    def __init__(self, inner: Backend) -> None:
        self.inner = inner
        self.fingerprint = inner.fingerprint
        self.by_role: dict[str, int] = {}
        self._lock = threading.Lock()

    @property
    def total(self) -> int:
        with self._lock:
            return sum(self.by_role.values())

    def complete(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            self.by_role[req.role] = self.by_role.get(req.role, 0) + 1
        return self.inner.complete(req)


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    upstream_calls: int = 0

    def to_dict(self) -> dict:
        return {"hits": self.hits, "misses": self.misses, "upstream_calls": self.upstream_calls}


class _Flight:
    def __init__(self) -> None:
        self.done = threading.Event()
        self.response: Optional[ChatResponse] = None
        self.error: Optional[BaseException] = None


class CachingBackend:
    """Wraps a backend with an append-only JSONL cache keyed by ``cache_key``.

    Concurrent requests for the same key share a single upstream call.
    """

    def __init__(self, inner: Backend, path: Union[str, Path, None] = None) -> None:
        self.inner = inner
        self.fingerprint = inner.fingerprint
        self.path = Path(path) if path is not None else None
        self.stats = CacheStats()
        self._store: dict[str, ChatResponse] = {}
        self._inflight: dict[str, _Flight] = {}
        self._lock = threading.Lock()
        self._write_lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        assert self.path is not None
        lineno = 0
        try:
            with self.path.open(encoding="utf-8") as f:
                for lineno, line in enumerate(f, 1):
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    self._store[rec["key"]] = ChatResponse(
                        text=rec["text"],
                        prompt_tokens=rec.get("prompt_tokens"),
                        completion_tokens=rec.get("completion_tokens"),
                    )
        except (OSError, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CacheError(f"cache store {self.path} is corrupt near line {lineno}: {exc}") from exc

    def __len__(self) -> int:
        return len(self._store)

    def _persist(self, key: str, resp: ChatResponse) -> None:
        if self.path is None:
            return
        rec = {
            "key": key,
            "text": resp.text,
            "prompt_tokens": resp.prompt_tokens,
            "completion_tokens": resp.completion_tokens,
        }
        with self._write_lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(rec, ensure_ascii=False) + "\n")

    def complete(self, req: ChatRequest) -> ChatResponse:
        return self.get_or_call(cache_key(req), req)

    def get_or_call(self, key: str, req: ChatRequest) -> ChatResponse:
        with self._lock:
            hit = self._store.get(key)
            if hit is not None:
                self.stats.hits += 1
                return replace(hit, from_cache=True)
            flight = self._inflight.get(key)
            leader = flight is None
            if leader:
                flight = self._inflight[key] = _Flight()
                self.stats.misses += 1
            else:
                self.stats.hits += 1
        assert flight is not None
        if not leader:
            flight.done.wait()
            if flight.error is not None:
                raise flight.error
            assert flight.response is not None
            return replace(flight.response, from_cache=True)
        try:
            with self._lock:
                self.stats.upstream_calls += 1
            resp = replace(self.inner.complete(req), from_cache=False)
            self._persist(key, resp)
            with self._lock:
                self._store[key] = resp
            flight.response = resp
            return resp
        except BaseException as exc:
            flight.error = exc
            raise
        finally:
            with self._lock:
                del self._inflight[key]
            flight.done.set()
