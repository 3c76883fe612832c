"""Client for chat-completions-compatible inference endpoints.

Sends each rendered prompt as a single user message (text part, then the
image parts base64-inlined), always with the fixed generation settings
the prompts carry. Responses are cached in a content-addressed directory
of JSON files so that re-runs are reproducible and free; retries use
exponential backoff with jitter; a client-side token bucket enforces the
requests-per-minute cap.
"""

from __future__ import annotations

import base64
import json
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import requests

from .datamodel import RawJudgment, canonical_json, sha256_hex
from .promptforge import RenderedPrompt

DEFAULT_TIMEOUT_S = 120.0
_RETRYABLE_STATUSES = frozenset({429, 500, 502, 503, 504})


class EndpointError(Exception):
    """The endpoint could not produce a response within the retry budget."""

    def __init__(self, message: str, status: int | None, attempts: int):
        super().__init__(f"{message} (status={status}, attempts={attempts})")
        self.status = status
        self.attempts = attempts


class Timeout(EndpointError):
    """Every attempt exceeded the per-request timeout."""


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff_base_s: float = 1.0
    jitter: float = 0.1

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.backoff_base_s < 0 or not (0 <= self.jitter <= 1):
            raise ValueError("backoff_base_s must be >= 0 and jitter in [0, 1]")


@dataclass(frozen=True)
class EndpointConfig:
    """Where and how to call one inference endpoint.

    ``auth_token_env`` names the environment variable holding the bearer
    token; the secret itself never appears in configs or logs.
    """

    base_url: str
    model: str
    auth_token_env: str | None = None
    max_concurrency: int = 4
    requests_per_minute: float | None = None
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    timeout_s: float = DEFAULT_TIMEOUT_S
    cache_dir: str | None = None

    def __post_init__(self) -> None:
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if self.requests_per_minute is not None and self.requests_per_minute <= 0:
            raise ValueError("requests_per_minute must be positive")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")


@dataclass(frozen=True)
class JudgmentFailure:
    """A per-item batch failure; batches never abort on item errors."""

    sample_id: str
    prompt_digest: str
    message: str
    status: int | None
    attempts: int


def cache_key(model: str, prompt_digest: str, params: dict) -> str:
    payload = canonical_json({"model": model, "prompt_digest": prompt_digest,
                              "params": params})
    return sha256_hex(payload.encode("utf-8"))


class JudgmentCache:
    """Content-addressed store: cache/{first-2-hex}/{key}.json.

    Readers are lock-free; writers write to a temp file and atomically
    rename it into place, so concurrent requests never observe partial
    entries.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> RawJudgment | None:
        path = self._path(key)
        if not path.is_file():
            return None
        return RawJudgment.from_dict(json.loads(path.read_text(encoding="utf-8")))

    def put(self, key: str, judgment: RawJudgment) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.parent / f".{key}.{os.getpid()}.{threading.get_ident()}.tmp"
        tmp.write_text(canonical_json(judgment.to_dict()), encoding="utf-8")
        os.replace(tmp, path)


class TokenBucket:
    """Thread-safe requests-per-minute limiter."""

    def __init__(
        self,
        rate_per_minute: float,
        capacity: float | None = None,
        clock: Callable[[], float] = time.monotonic,
        sleeper: Callable[[float], None] = time.sleep,
    ):
        if rate_per_minute <= 0:
            raise ValueError("rate_per_minute must be positive")
        self.rate_per_sec = rate_per_minute / 60.0
        self.capacity = capacity if capacity is not None else max(1.0, self.rate_per_sec)
        self._tokens = self.capacity
        self._clock = clock
        self._sleeper = sleeper
        self._last = clock()
        self._lock = threading.Lock()

    def _refill(self) -> None:
        now = self._clock()
        self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate_per_sec)
        self._last = now

    def acquire(self) -> float:
        """Block until one request token is available; return seconds waited."""
        waited = 0.0
        while True:
            with self._lock:
                self._refill()
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return waited
                needed = (1.0 - self._tokens) / self.rate_per_sec
            self._sleeper(needed)
            waited += needed


def estimate_tokens(text: str) -> int:
    """Whitespace token count, used when the endpoint reports no usage."""
    return len(text.split())


class JudgeClient:
    """Shareable across worker threads; see EndpointConfig for knobs."""

    def __init__(
        self,
        endpoint: EndpointConfig,
        clock: Callable[[], float] = time.monotonic,
        sleeper: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
        transport: Callable | None = None,
    ):
        self.endpoint = endpoint
        self._clock = clock
        self._sleeper = sleeper
        self._rng = rng or random.Random()
        self._post = transport or requests.post
        self._cache = JudgmentCache(endpoint.cache_dir) if endpoint.cache_dir else None
        self._bucket = (
            TokenBucket(endpoint.requests_per_minute, clock=clock, sleeper=sleeper)
            if endpoint.requests_per_minute
            else None
        )

    # Wire format --------------------------------------------------------

    def _image_part(self, ref) -> dict:
        path = ref.resolve_path()
        if path is not None and path.is_file():
            encoded = base64.b64encode(path.read_bytes()).decode("ascii")
            url = f"data:image/png;base64,{encoded}"
        else:
            url = ref.uri
        return {"type": "image_url", "image_url": {"url": url}}

    def _request_body(self, prompt: RenderedPrompt) -> dict:
        content = [{"type": "text", "text": prompt.text}]
        content.extend(self._image_part(ref) for ref in prompt.attachments)
        return {
            "model": self.endpoint.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": prompt.generation_params["temperature"],
            "max_tokens": prompt.generation_params["max_output_tokens"],
        }

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.endpoint.auth_token_env:
            token = os.environ.get(self.endpoint.auth_token_env, "")
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    # Core request loop ----------------------------------------------------

    def _backoff(self, attempt: int) -> float:
        base = self.endpoint.retry.backoff_base_s * (2 ** (attempt - 1))
        return base * (1.0 + self.endpoint.retry.jitter * self._rng.random())

    def _request(self, prompt: RenderedPrompt) -> RawJudgment:
        url = self.endpoint.base_url.rstrip("/") + "/chat/completions"
        body = self._request_body(prompt)
        attempts = self.endpoint.retry.max_attempts
        last_status: int | None = None
        timed_out = False
        for attempt in range(1, attempts + 1):
            if self._bucket is not None:
                self._bucket.acquire()
            start = self._clock()
            try:
                response = self._post(
                    url, json=body, headers=self._headers(),
                    timeout=self.endpoint.timeout_s,
                )
            except requests.exceptions.Timeout:
                timed_out = True
                last_status = None
            except requests.exceptions.RequestException:
                timed_out = False
                last_status = None
            else:
                latency_ms = (self._clock() - start) * 1000.0
                if response.status_code == 200:
                    return self._judgment_from_response(prompt, response.json(),
                                                        latency_ms)
                last_status = response.status_code
                timed_out = False
                if response.status_code not in _RETRYABLE_STATUSES:
                    raise EndpointError("endpoint rejected the request",
                                        status=last_status, attempts=attempt)
            if attempt < attempts:
                self._sleeper(self._backoff(attempt))
        if timed_out:
            raise Timeout("request timed out", status=None, attempts=attempts)
        raise EndpointError("retries exhausted", status=last_status, attempts=attempts)

    def _judgment_from_response(self, prompt: RenderedPrompt, data: dict,
                                latency_ms: float) -> RawJudgment:
        text = data["choices"][0]["message"]["content"]
        usage = data.get("usage") or {}
        tokens_in = usage.get("prompt_tokens")
        tokens_out = usage.get("completion_tokens")
        estimated = tokens_in is None or tokens_out is None
        if tokens_in is None:
            tokens_in = estimate_tokens(prompt.text)
        if tokens_out is None:
            tokens_out = estimate_tokens(text)
        return RawJudgment(
            sample_id=prompt.sample_id or "",
            raw_text=text,
            prompt_digest=prompt.prompt_digest,
            latency_ms=latency_ms,
            spec=prompt.spec,
            tokens_in=tokens_in,
            tokens_out=tokens_out,
            retrieved_from_cache=False,
            usage_estimated=estimated,
        )

    # Public operations ------------------------------------------------------

    def evaluate(self, prompt: RenderedPrompt) -> RawJudgment:
        key = cache_key(self.endpoint.model, prompt.prompt_digest,
                        dict(prompt.generation_params))
        if self._cache is not None:
            hit = self._cache.get(key)
            if hit is not None:
                return replace(hit, retrieved_from_cache=True)
        judgment = self._request(prompt)
        if self._cache is not None:
            self._cache.put(key, judgment)
        return judgment

    def batch_evaluate(
        self, prompts: Sequence[RenderedPrompt]
    ) -> list[RawJudgment | JudgmentFailure]:
        """Evaluate prompts concurrently, preserving input order.

        Item failures become JudgmentFailure entries at their position;
        the batch itself never raises.
        """
        if not prompts:
            return []

        def one(prompt: RenderedPrompt) -> RawJudgment | JudgmentFailure:
            try:
                return self.evaluate(prompt)
            except EndpointError as exc:
                return JudgmentFailure(
                    sample_id=prompt.sample_id or "",
                    prompt_digest=prompt.prompt_digest,
                    message=str(exc),
                    status=exc.status,
                    attempts=exc.attempts,
                )

        with ThreadPoolExecutor(max_workers=self.endpoint.max_concurrency) as pool:
            return list(pool.map(one, prompts))

    def probe_throughput(self, prompt: RenderedPrompt, n_runs: int) -> dict:
        """Measure output tokens per wall-clock second, bypassing the cache."""
        if n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        total_tokens = 0
        total_seconds = 0.0
        estimated = False
        for _ in range(n_runs):
            start = self._clock()
            judgment = self._request(prompt)
            total_seconds += self._clock() - start
            total_tokens += judgment.tokens_out or 0
            estimated = estimated or judgment.usage_estimated
        if total_seconds <= 0 or total_tokens == 0:
            raise EndpointError("throughput probe produced no measurable output",
                                status=None, attempts=n_runs)
        tokens_per_sec = total_tokens / total_seconds
        return {
            "tokens_per_sec": tokens_per_sec,
            "ms_per_token": 1000.0 / tokens_per_sec,
            "total_output_tokens": total_tokens,
            "total_seconds": total_seconds,
            "usage_estimated": estimated,
        }
