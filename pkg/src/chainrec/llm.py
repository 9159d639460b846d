"""Chat-completion gateway with retries and bounded parallelism, plus a
scripted mock for offline runs."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import httpx

from .prompts import PromptText

logger = logging.getLogger(__name__)

API_KEY_ENV = "R2REC_API_KEY"
RETRYABLE_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class EndpointError(RuntimeError):
    pass


class AuthenticationError(EndpointError):
    pass


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.6
    top_p: float = 0.9
    max_tokens: int = 2048
    n_samples: int = 1

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


@dataclass(frozen=True)
class RawResponse:
    text: str
    finish_reason: str  # "stop" | "length" | "error"
    usage: Mapping[str, int] = field(default_factory=dict)
    latency_ms: int = 0

    @property
    def ok(self) -> bool:
        return self.finish_reason != "error"


class ChatGateway:
    """Client for an OpenAI-style ``/chat/completions`` endpoint.

    Each of the ``n_samples`` completions is its own request. Transient
    failures (429, 5xx, transport errors) are retried with exponential
    backoff; a sample that still fails comes back with ``finish_reason="error"``
    so the rest of its group survives. Authentication failures abort at once.
    All requests through one gateway share a ``max_inflight`` semaphore.
    """

    def __init__(self, base_url: str, model_name: str, api_key: str | None = None,
                 max_inflight: int = 4, max_attempts: int = 5, backoff_base: float = 1.0,
                 backoff_factor: float = 2.0, timeout: float = 120.0,
                 client: httpx.Client | None = None, sleep: Callable[[float], None] = time.sleep,
                 log_path=None):
        if max_inflight < 1:
            raise ValueError("max_inflight must be >= 1")
        self.base_url = base_url.rstrip("/")
        self.model_name = model_name
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.max_inflight = max_inflight
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self._client = client or httpx.Client(timeout=timeout)
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max_inflight)
        self._log_path = log_path
        self._log_lock = threading.Lock()

    def close(self):
        self._client.close()

    def _payload(self, prompt: PromptText, params: GenerationParams) -> dict:
        return {
            "model": self.model_name,
            "messages": prompt.messages(),
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
        }

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _request_once(self, payload: dict) -> RawResponse:
        start = time.monotonic()
        with self._slots:
            resp = self._client.post(f"{self.base_url}/chat/completions",
                                     json=payload, headers=self._headers())
        latency = int((time.monotonic() - start) * 1000)
        if resp.status_code in (401, 403):
            raise AuthenticationError(f"endpoint rejected credentials (HTTP {resp.status_code})")
        resp.raise_for_status()
        body = resp.json()
        choice = body["choices"][0]
        reason = choice.get("finish_reason") or "stop"
        return RawResponse(
            text=choice["message"].get("content") or "",
            finish_reason="length" if reason == "length" else "stop",
            usage={k: int(v) for k, v in (body.get("usage") or {}).items() if isinstance(v, int)},
            latency_ms=latency,
        )

    def _request(self, payload: dict) -> RawResponse:
        delay = self.backoff_base
        for attempt in range(1, self.max_attempts + 1):
            try:
                return self._request_once(payload)
            except AuthenticationError:
                raise
            except httpx.HTTPStatusError as exc:
                code = exc.response.status_code
                if code not in RETRYABLE_STATUS:
                    logger.warning("non-retryable HTTP %d", code)
                    return RawResponse("", "error")
                err = f"HTTP {code}"
            except (httpx.TransportError, ValueError, KeyError) as exc:
                err = repr(exc)
            if attempt < self.max_attempts:
                logger.info("attempt %d failed (%s); retrying in %.1fs", attempt, err, delay)
                self._sleep(delay)
                delay *= self.backoff_factor
        logger.warning("giving up after %d attempts", self.max_attempts)
        return RawResponse("", "error")

    def complete(self, prompt: PromptText, params: GenerationParams) -> list[RawResponse]:
        payload = self._payload(prompt, params)
        if params.n_samples == 1:
            out = [self._request(payload)]
        else:
            workers = min(params.n_samples, self.max_inflight)
            with ThreadPoolExecutor(max_workers=workers) as pool:
                out = list(pool.map(lambda _: self._request(payload), range(params.n_samples)))
        if all(not r.ok for r in out):
            raise EndpointError(f"all {len(out)} samples failed after retries")
        self._log(prompt, params, out)
        return out

    def _log(self, prompt: PromptText, params: GenerationParams, out: Sequence[RawResponse]):
        if self._log_path is None:
            return
        record = {"fingerprint": prompt.fingerprint, "system": prompt.system, "user": prompt.user,
                  "params": asdict(params), "responses": [asdict(r) for r in out]}
        with self._log_lock, open(self._log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


class MockGateway:
    """Returns canned text keyed by prompt fingerprint.

    A script value may be a single string or a list; with a list, sample ``j``
    of a request gets entry ``j % len``; a ``None`` entry simulates a sample
    that failed after retries. Unknown fingerprints get ``fallback``. Every
    transmitted prompt is kept in ``calls``.
    """

    def __init__(self, script: Mapping[str, str | Sequence[str]] | None = None,
                 fallback: str = "", fallback_fn: Callable[[PromptText], str] | None = None):
        self.script = dict(script or {})
        self.fallback = fallback
        self.fallback_fn = fallback_fn
        self.calls: list[PromptText] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path, fallback: str = "") -> "MockGateway":
        """Script file: one ``{"fingerprint": ..., "text": ...}`` or ``"texts": [...]`` per line."""
        script = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    script[obj["fingerprint"]] = obj["texts"] if "texts" in obj else obj["text"]
        return cls(script, fallback)

    def complete(self, prompt: PromptText, params: GenerationParams) -> list[RawResponse]:
        with self._lock:
            self.calls.append(prompt)
        entry = self.script.get(prompt.fingerprint)
        if entry is None:
            entry = self.fallback_fn(prompt) if self.fallback_fn else self.fallback
        texts = [entry] if isinstance(entry, str) else list(entry)
        out = []
        for j in range(params.n_samples):
            text = texts[j % len(texts)]
            out.append(RawResponse("", "error") if text is None else RawResponse(text, "stop"))
        if all(not r.ok for r in out):
            raise EndpointError(f"all {len(out)} samples failed after retries")
        return out

    def close(self):
        pass


def complete_mock(prompt: PromptText, script: Mapping[str, str | Sequence[str]],
                  fallback: str = "", params: GenerationParams | None = None) -> list[RawResponse]:
    return MockGateway(script, fallback).complete(prompt, params or GenerationParams())
