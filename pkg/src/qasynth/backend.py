"""Chat-completion backends.

Every stage talks to a :class:`Backend`. The production implementation
speaks the OpenAI-compatible ``/chat/completions`` protocol that Ollama,
LM Studio, vLLM and friends expose; test doubles live in :mod:`qasynth.mock`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Sequence, TypeVar

import httpx

from .ledger import RunLedger

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class BackendError(RuntimeError):
    pass


class BackendTimeout(BackendError):
    pass


class RateLimited(BackendError):
    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class MalformedResponse(BackendError):
    pass


class RequestRejected(BackendError):
    """Non-retryable 4xx response (bad model name, auth failure, ...)."""


class Exhausted(BackendError):
    """Every attempt failed; ``last_error`` holds the final cause."""

    def __init__(self, message: str, last_error: BaseException | None = None):
        super().__init__(message)
        self.last_error = last_error


@dataclass(frozen=True)
class ChatPrompt:
    user: str
    system: str = ""
    temperature: float = 0.7
    max_output_tokens: int = 1024
    stop: tuple[str, ...] = ()
    task: str = ""

    def __post_init__(self):
        if not self.user.strip():
            raise ValueError("prompt user message must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")

    def digest(self) -> str:
        """Stable hash of everything that can change the completion."""
        payload = json.dumps(
            [self.system, self.user, self.temperature, self.max_output_tokens, list(self.stop)],
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class BackendConfig:
    base_url: str = "http://localhost:11434/v1"
    model_name: str = "qwen3:8b"
    api_key: str | None = None
    max_parallel: int = 4
    timeout: float = 120.0
    max_attempts: int = 4
    backoff_base: float = 1.0

    def __post_init__(self):
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")

    @classmethod
    def from_env(cls, **overrides: Any) -> "BackendConfig":
        """Read DSCORE_API_BASE, DSCORE_API_KEY and DSCORE_MODEL."""
        env = {}
        if os.environ.get("DSCORE_API_BASE"):
            env["base_url"] = os.environ["DSCORE_API_BASE"]
        if os.environ.get("DSCORE_API_KEY"):
            env["api_key"] = os.environ["DSCORE_API_KEY"]
        if os.environ.get("DSCORE_MODEL"):
            env["model_name"] = os.environ["DSCORE_MODEL"]
        env.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**env)

    def redacted(self) -> dict:
        return {
            "base_url": self.base_url,
            "model_name": self.model_name,
            "max_parallel": self.max_parallel,
            "timeout": self.timeout,
            "max_attempts": self.max_attempts,
            "backoff_base": self.backoff_base,
        }


def map_bounded(
    fn: Callable[[T], R], items: Sequence[T], max_workers: int
) -> list[tuple[int, R | Exception]]:
    """Apply ``fn`` to every item with at most ``max_workers`` threads.

    Returns ``(index, result)`` pairs in input order. A raised exception
    becomes that item's result instead of aborting the batch.
    """
    if not items:
        return []

    def call(item: T) -> R | Exception:
        try:
            return fn(item)
        except Exception as exc:  # per-item isolation
            return exc

    if max_workers <= 1 or len(items) == 1:
        return [(i, call(item)) for i, item in enumerate(items)]
    with ThreadPoolExecutor(max_workers=min(max_workers, len(items))) as pool:
        return list(enumerate(pool.map(call, items)))


class Backend:
    """Base class: admission limiting, ledger bookkeeping, batching.

    Subclasses implement :meth:`_complete` and return ``(text, usage)``.
    """

    def __init__(self, max_parallel: int = 1, ledger: RunLedger | None = None):
        if max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")
        self.max_parallel = max_parallel
        self.ledger = ledger if ledger is not None else RunLedger()
        self._limiter = threading.BoundedSemaphore(max_parallel)

    def _complete(self, prompt: ChatPrompt) -> tuple[str, dict]:
        raise NotImplementedError

    def complete(self, prompt: ChatPrompt) -> str:
        with self._limiter:
            started = time.perf_counter()
            try:
                text, usage = self._complete(prompt)
            except BackendError as exc:
                self.ledger.record(
                    "backend_error", task=prompt.task, error=type(exc).__name__,
                    detail=str(exc), latency_s=time.perf_counter() - started,
                )
                raise
            self.ledger.record(
                "backend_call", task=prompt.task,
                latency_s=time.perf_counter() - started, **usage,
            )
            return text

    def complete_batch(self, prompts: Sequence[ChatPrompt]) -> list[tuple[int, str | Exception]]:
        """Complete many prompts; results are keyed by input index."""
        return map_bounded(self.complete, list(prompts), self.max_parallel)


class OpenAICompatibleBackend(Backend):
    """HTTP client for ``POST <base_url>/chat/completions``.

    Rate limits (429), 5xx responses, timeouts and unparseable bodies are
    retried with exponential backoff ``backoff_base * 2**k`` up to
    ``cfg.max_attempts`` attempts; other 4xx statuses fail immediately.
    """

    def __init__(
        self,
        cfg: BackendConfig,
        ledger: RunLedger | None = None,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        super().__init__(cfg.max_parallel, ledger)
        self.cfg = cfg
        self._sleep = sleep
        headers = {"Content-Type": "application/json"}
        if cfg.api_key:
            headers["Authorization"] = f"Bearer {cfg.api_key}"
        self._client = httpx.Client(
            base_url=cfg.base_url.rstrip("/") + "/",
            headers=headers,
            timeout=cfg.timeout,
            transport=transport,
        )

    def close(self) -> None:
        self._client.close()

    def _payload(self, prompt: ChatPrompt) -> dict:
        messages = []
        if prompt.system:
            messages.append({"role": "system", "content": prompt.system})
        messages.append({"role": "user", "content": prompt.user})
        body: dict[str, Any] = {
            "model": self.cfg.model_name,
            "messages": messages,
            "temperature": prompt.temperature,
            "max_tokens": prompt.max_output_tokens,
        }
        if prompt.stop:
            body["stop"] = list(prompt.stop)
        return body

    def _attempt(self, body: dict) -> tuple[str, dict]:
        try:
            resp = self._client.post("chat/completions", json=body)
        except httpx.TimeoutException as exc:
            raise BackendTimeout(f"request timed out after {self.cfg.timeout}s") from exc
        except httpx.TransportError as exc:
            raise BackendError(f"transport error: {exc}") from exc
        if resp.status_code == 429:
            retry_after = resp.headers.get("Retry-After")
            try:
                delay = float(retry_after) if retry_after else None
            except ValueError:
                delay = None
            raise RateLimited("HTTP 429 rate limited", retry_after=delay)
        if resp.status_code >= 500:
            raise BackendError(f"HTTP {resp.status_code} from server")
        if resp.status_code >= 400:
            raise RequestRejected(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
            content = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected response body: {resp.text[:200]}") from exc
        if not isinstance(content, str):
            raise MalformedResponse("message content is not a string")
        usage = data.get("usage") or {}
        return content, {
            "prompt_tokens": usage.get("prompt_tokens"),
            "completion_tokens": usage.get("completion_tokens"),
        }

    def _complete(self, prompt: ChatPrompt) -> tuple[str, dict]:
        body = self._payload(prompt)
        last: BackendError | None = None
        for attempt in range(1, self.cfg.max_attempts + 1):
            try:
                text, usage = self._attempt(body)
                usage["attempts"] = attempt
                usage["retries"] = attempt - 1
                return text, usage
            except RequestRejected:
                raise
            except BackendError as exc:
                last = exc
            if attempt == self.cfg.max_attempts:
                break
            delay = self.cfg.backoff_base * 2 ** (attempt - 1)
            if isinstance(last, RateLimited) and last.retry_after is not None:
                delay = max(delay, last.retry_after)
            self.ledger.record("backend_retry", task=prompt.task, attempt=attempt,
                               error=type(last).__name__, delay_s=delay)
            log.info("retrying %s after %s (attempt %d)", prompt.task or "request",
                     type(last).__name__, attempt)
            self._sleep(delay)
        raise Exhausted(f"all {self.cfg.max_attempts} attempts failed: {last}", last)
