"""HTTP JSON transport, append-only response caches, and a retrying chat client.

Every external call in the package goes through a *transport*: any object
with ``post(url, body, headers, timeout) -> dict``. Live runs use
:class:`HttpTransport`; tests and offline reruns use :class:`ReplayTransport`
over a recorded transcript file. :class:`RecordingTransport` wraps either one
to count calls and optionally save a transcript.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol

from rerankkit.errors import TransportError, ValidationError

logger = logging.getLogger(__name__)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def content_hash(*parts: Any) -> str:
    return hashlib.sha256(canonical_json(list(parts)).encode("utf-8")).hexdigest()


class Transport(Protocol):
    def post(self, url: str, body: dict, headers: dict, timeout: float) -> dict: ...


class HttpTransport:
    """Live transport backed by :mod:`httpx`."""

    def __init__(self, client: Any = None):
        import httpx

        self._httpx = httpx
        self._client = client or httpx.Client()

    def post(self, url: str, body: dict, headers: dict, timeout: float) -> dict:
        httpx = self._httpx
        try:
            resp = self._client.post(url, json=body, headers=headers, timeout=timeout)
        except httpx.HTTPError as exc:
            raise TransportError(f"POST {url} failed: {exc}", context={"url": url}) from exc
        if resp.status_code >= 400:
            raise TransportError(
                f"POST {url} returned HTTP {resp.status_code}: {resp.text[:200]}",
                status=resp.status_code,
                context={"url": url},
            )
        try:
            return resp.json()
        except ValueError as exc:
            raise TransportError(f"POST {url} returned non-JSON body", status=resp.status_code) from exc

    def close(self) -> None:
        self._client.close()


def request_key(url: str, body: dict) -> str:
    return content_hash(url, body)


class ReplayTransport:
    """Serves responses from a transcript: JSONL of ``{"url", "body", "response"}``.

    Requests are matched on URL plus canonical body; headers are ignored so
    API keys never end up in transcripts. A missing entry raises a
    non-transient :class:`TransportError`.
    """

    def __init__(self, entries: Iterable[dict] = ()):
        self._responses: dict[str, dict] = {}
        for e in entries:
            self._responses[request_key(e["url"], e["body"])] = e["response"]

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ReplayTransport":
        with open(path, encoding="utf-8") as fh:
            return cls(json.loads(line) for line in fh if line.strip())

    def post(self, url: str, body: dict, headers: dict, timeout: float) -> dict:
        try:
            return self._responses[request_key(url, body)]
        except KeyError:
            raise TransportError(
                f"no recorded response for POST {url}", status=404, context={"url": url}
            ) from None


class RecordingTransport:
    """Wraps a transport, counting calls and keeping a transcript of successes."""

    def __init__(self, inner: Transport):
        self.inner = inner
        self.calls: list[tuple[str, dict]] = []
        self.transcript: list[dict] = []
        self._lock = threading.Lock()

    def post(self, url: str, body: dict, headers: dict, timeout: float) -> dict:
        with self._lock:
            self.calls.append((url, body))
        response = self.inner.post(url, body, headers, timeout)
        with self._lock:
            self.transcript.append({"url": url, "body": body, "response": response})
        return response

    @property
    def n_calls(self) -> int:
        return len(self.calls)

    def save(self, path: str | os.PathLike) -> None:
        # sorted so the file is stable regardless of thread scheduling
        lines = sorted({canonical_json(e) for e in self.transcript})
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


class FunctionTransport:
    """Adapts ``handler(url, body) -> dict`` into a transport (fixture endpoints)."""

    def __init__(self, handler: Callable[[str, dict], dict]):
        self.handler = handler

    def post(self, url: str, body: dict, headers: dict, timeout: float) -> dict:
        return self.handler(url, body)


class JsonlCache:
    """Append-only key/value cache persisted as JSONL ``{"key", "value"}``.

    ``path=None`` gives an in-memory cache. Writes go through one lock so
    concurrent workers never interleave lines.
    """

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self._data: dict[str, Any] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        rec = json.loads(line)
                    except json.JSONDecodeError:
                        # a torn final line from an interrupted run is dropped
                        logger.warning("skipping corrupt cache line %s:%d", self.path, lineno)
                        continue
                    self._data[rec["key"]] = rec["value"]

    def __contains__(self, key: str) -> bool:
        return key in self._data

    def __len__(self) -> int:
        return len(self._data)

    def get(self, key: str, default: Any = None) -> Any:
        return self._data.get(key, default)

    def put(self, key: str, value: Any) -> None:
        with self._lock:
            if key in self._data and self._data[key] == value:
                return
            self._data[key] = value
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(canonical_json({"key": key, "value": value}) + "\n")


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 4
    initial_backoff_s: float = 1.0
    backoff_factor: float = 2.0
    max_backoff_s: float = 30.0

    def delays(self) -> Iterable[float]:
        delay = self.initial_backoff_s
        for _ in range(self.max_attempts - 1):
            yield min(delay, self.max_backoff_s)
            delay *= self.backoff_factor


def resolve_api_key(env_var: str | None) -> str | None:
    if not env_var:
        return None
    return os.environ.get(env_var) or None


def post_with_retries(
    transport: Transport,
    url: str,
    body: dict,
    headers: dict,
    timeout: float,
    retry: RetryPolicy = RetryPolicy(),
    sleep: Callable[[float], None] = time.sleep,
) -> dict:
    """POST with exponential backoff on transient failures; other failures surface at once."""
    delays = iter(retry.delays())
    while True:
        try:
            return transport.post(url, body, headers, timeout)
        except TransportError as exc:
            if not exc.transient:
                raise
            delay = next(delays, None)
            if delay is None:
                raise TransportError(
                    f"{exc} (gave up after {retry.max_attempts} attempts)",
                    status=exc.status,
                    context=exc.context,
                ) from exc
            logger.info("transient failure on %s, retrying in %.2fs: %s", url, delay, exc)
            sleep(delay)


@dataclass(frozen=True)
class ChatEndpoint:
    """A chat-completion style endpoint (POST ``{model, messages, temperature}``)."""

    endpoint_url: str
    model_name: str
    api_key_env_var: str | None = None
    max_concurrent: int = 4
    timeout_ms: int = 60_000
    temperature: float = 0.0
    max_attempts: int = 4
    initial_backoff_s: float = 1.0

    def __post_init__(self) -> None:
        if self.max_concurrent < 1:
            raise ValidationError("max_concurrent must be >= 1")
        if self.timeout_ms < 1:
            raise ValidationError("timeout_ms must be positive")

    @property
    def retry(self) -> RetryPolicy:
        return RetryPolicy(max_attempts=self.max_attempts, initial_backoff_s=self.initial_backoff_s)


def _message_text(response: dict) -> str:
    try:
        content = response["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise TransportError("chat response has no choices[0].message.content", status=502) from None
    return content or ""


class ChatClient:
    """Bounded, retried chat-completion calls against one endpoint."""

    def __init__(
        self,
        endpoint: ChatEndpoint,
        transport: Transport,
        *,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self.transport = transport
        self.sleep = sleep
        # one bounded pool per client, i.e. per judge / per endpoint
        self._sem = threading.BoundedSemaphore(endpoint.max_concurrent)

    def request_body(self, messages: list[dict]) -> dict:
        return {
            "model": self.endpoint.model_name,
            "messages": messages,
            "temperature": self.endpoint.temperature,
        }

    def complete(self, messages: list[dict]) -> str:
        ep = self.endpoint
        headers = {"Content-Type": "application/json"}
        key = resolve_api_key(ep.api_key_env_var)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        with self._sem:
            resp = post_with_retries(
                self.transport,
                ep.endpoint_url,
                self.request_body(messages),
                headers,
                ep.timeout_ms / 1000.0,
                ep.retry,
                self.sleep,
            )
        return _message_text(resp)


def chat_response(text: str) -> dict:
    """Shape ``text`` like a chat-completion response (handy for fixture endpoints)."""
    return {"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]}

