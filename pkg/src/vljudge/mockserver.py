"""Bundled chat-completions mock server for offline runs and tests.

Serves POST /chat/completions on an ephemeral localhost port. Behaviour
is a pluggable *policy*: a callable taking the request body and returning
a :class:`MockReply` (content, status, artificial delay, usage). Built-in
policies produce schema-valid verdicts deterministically:

- ``seeded``: verdict derived from the SHA-256 of the prompt text, so
  identical prompts always get identical replies.
- ``first_slot``: always prefers "Model A" — a judge with maximal
  position bias.
- ``content_preference``: prefers whichever candidate text contains the
  ``[[PREFERRED]]`` marker (falling back to lexicographic order), no
  matter which slot holds it — a judge with zero position bias.

The server counts in-flight requests so tests can assert that observed
peak concurrency never exceeds a client's configured limit.
"""

from __future__ import annotations

import hashlib
import json
import re
import sys
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Mapping

PREFERRED_MARKER = "[[PREFERRED]]"
FAIL_MARKER = "[[FAIL]]"

_TYPE_CLAUSE = re.compile(r"'Type' key will contain either (.+?), depending")
_SECTION_A = re.compile(r"\[Model A Generated [^\]]+\]\n(.*?)(?=\n\n\[)", re.DOTALL)
_SECTION_B = re.compile(r"\[Model B Generated [^\]]+\]\n(.*?)(?=\n\n\[)", re.DOTALL)
_SECTION_SINGLE = re.compile(r"\[Model Generated [^\]]+\]\n(.*?)(?=\n\n\[)", re.DOTALL)


@dataclass(frozen=True)
class MockReply:
    """What the policy wants the server to send back."""

    content: str = ""
    status: int = 200
    delay_s: float = 0.0
    usage: Mapping | None = None
    omit_usage: bool = False


@dataclass(frozen=True)
class PromptFeatures:
    """Shape of a judge prompt, recovered from its text."""

    pairwise: bool
    multi: bool
    type_names: tuple[str, ...]
    body_a: str | None
    body_b: str | None
    body_single: str | None


def request_text(body: Mapping) -> str:
    """Extract the text part of the single user message."""
    try:
        return body["messages"][0]["content"][0]["text"]
    except (KeyError, IndexError, TypeError):
        return ""


def parse_prompt_features(text: str) -> PromptFeatures:
    pairwise = "(i) Model" in text
    multi = "(iii) Type" in text
    type_names: tuple[str, ...] = ()
    clause = _TYPE_CLAUSE.search(text)
    if clause:
        type_names = tuple(
            part.strip().strip("'") for part in clause.group(1).split(" or ")
        )
    match_a = _SECTION_A.search(text)
    match_b = _SECTION_B.search(text)
    match_s = _SECTION_SINGLE.search(text)
    return PromptFeatures(
        pairwise=pairwise,
        multi=multi,
        type_names=type_names,
        body_a=match_a.group(1) if match_a else None,
        body_b=match_b.group(1) if match_b else None,
        body_single=match_s.group(1) if match_s else None,
    )


def _verdict_content(features: PromptFeatures, pick_label: Callable[[int], str],
                     pick_score: Callable[[int], int], note: str) -> str:
    if features.pairwise:
        if features.multi and features.type_names:
            entries = [
                {"Model": pick_label(i), "Explanation": note, "Type": name}
                for i, name in enumerate(features.type_names)
            ]
            return json.dumps(entries)
        return json.dumps({"Model": pick_label(0), "Explanation": note})
    if features.multi and features.type_names:
        entries = [
            {"Score": pick_score(i), "Explanation": note, "Type": name}
            for i, name in enumerate(features.type_names)
        ]
        return json.dumps(entries)
    return json.dumps({"Score": pick_score(0), "Explanation": note})


def seeded_policy(body: Mapping) -> MockReply:
    """Deterministic schema-valid verdict derived from the prompt digest."""
    text = request_text(body)
    features = parse_prompt_features(text)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    labels = ("Model A", "Model B", "Tie")
    content = _verdict_content(
        features,
        pick_label=lambda i: labels[digest[i % len(digest)] % 3],
        pick_score=lambda i: digest[i % len(digest)] % 5 + 1,
        note=f"Deterministic verdict {digest[:4].hex()}.",
    )
    return MockReply(content=content)


def first_slot_policy(body: Mapping) -> MockReply:
    """Always prefers whatever sits in the Model A slot."""
    features = parse_prompt_features(request_text(body))
    content = _verdict_content(
        features,
        pick_label=lambda i: "Model A",
        pick_score=lambda i: 3,
        note="The first response is preferred.",
    )
    return MockReply(content=content)


def content_preference_policy(body: Mapping) -> MockReply:
    """Prefers a candidate by its text alone, ignoring slot order."""
    features = parse_prompt_features(request_text(body))
    body_a = features.body_a or ""
    body_b = features.body_b or ""
    in_a = PREFERRED_MARKER in body_a
    in_b = PREFERRED_MARKER in body_b
    if in_a != in_b:
        label = "Model A" if in_a else "Model B"
    elif body_a == body_b:
        label = "Tie"
    else:
        label = "Model A" if body_a < body_b else "Model B"
    content = _verdict_content(
        features,
        pick_label=lambda i: label,
        pick_score=lambda i: 3,
        note="Chosen by content.",
    )
    return MockReply(content=content)


NAMED_POLICIES = {
    "seeded": seeded_policy,
    "first_slot": first_slot_policy,
    "content_preference": content_preference_policy,
}


def always_status(status: int, message: str = "scripted failure") -> Callable:
    """Policy that fails every request with the given HTTP status."""

    def policy(body: Mapping) -> MockReply:
        return MockReply(content=message, status=status)

    return policy


def fixed_rate_policy(tokens_per_sec: float, n_tokens: int) -> Callable:
    """Policy emitting exactly ``n_tokens`` at a scripted generation rate."""
    if tokens_per_sec <= 0 or n_tokens < 1:
        raise ValueError("tokens_per_sec must be positive and n_tokens >= 1")

    def policy(body: Mapping) -> MockReply:
        content = " ".join(["tok"] * n_tokens)
        return MockReply(
            content=content,
            delay_s=n_tokens / tokens_per_sec,
            usage={"prompt_tokens": len(request_text(body).split()),
                   "completion_tokens": n_tokens,
                   "total_tokens": len(request_text(body).split()) + n_tokens},
        )

    return policy


def fail_on_marker(inner: Callable, marker: str = FAIL_MARKER,
                   status: int = 500) -> Callable:
    """Wrap a policy so prompts containing ``marker`` fail with ``status``."""

    def policy(body: Mapping) -> MockReply:
        if marker in request_text(body):
            return MockReply(content="marked prompt", status=status)
        return inner(body)

    return policy


def without_usage(inner: Callable) -> Callable:
    """Wrap a policy so replies omit the usage block."""

    def policy(body: Mapping) -> MockReply:
        reply = inner(body)
        return MockReply(content=reply.content, status=reply.status,
                         delay_s=reply.delay_s, usage=None, omit_usage=True)

    return policy


class _QuietServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def handle_error(self, request, client_address):
        exc = sys.exc_info()[1]
        if isinstance(exc, (ConnectionError, BrokenPipeError, TimeoutError)):
            return
        super().handle_error(request, client_address)


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, *args) -> None:
        pass

    def _respond(self, status: int, payload: dict) -> None:
        data = json.dumps(payload).encode("utf-8")
        try:
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)
        except OSError:
            pass

    def do_POST(self) -> None:
        owner: MockInferenceServer = self.server.owner  # type: ignore[attr-defined]
        if self.path.rstrip("/") != "/chat/completions":
            self._respond(404, {"error": {"message": "unknown route"}})
            return
        length = int(self.headers.get("Content-Length") or 0)
        try:
            body = json.loads(self.rfile.read(length) or b"{}")
        except json.JSONDecodeError:
            self._respond(400, {"error": {"message": "invalid JSON body"}})
            return
        owner._enter(body, {k.lower(): v for k, v in self.headers.items()})
        try:
            reply = owner.policy(body)
            if reply.delay_s > 0:
                time.sleep(reply.delay_s)
            if reply.status != 200:
                self._respond(reply.status, {"error": {
                    "message": reply.content or "scripted failure",
                    "code": reply.status,
                }})
                return
            prompt_text = request_text(body)
            payload = {
                "id": f"mockcmpl-{owner.request_count}",
                "object": "chat.completion",
                "model": body.get("model", "mock"),
                "choices": [{
                    "index": 0,
                    "message": {"role": "assistant", "content": reply.content},
                    "finish_reason": "stop",
                }],
            }
            if not reply.omit_usage:
                if reply.usage is not None:
                    payload["usage"] = dict(reply.usage)
                else:
                    tokens_in = len(prompt_text.split())
                    tokens_out = len(reply.content.split())
                    payload["usage"] = {
                        "prompt_tokens": tokens_in,
                        "completion_tokens": tokens_out,
                        "total_tokens": tokens_in + tokens_out,
                    }
            self._respond(200, payload)
        finally:
            owner._exit()


class MockInferenceServer:
    """Threaded localhost chat-completions server with request accounting."""

    def __init__(self, policy: str | Callable = "seeded", host: str = "127.0.0.1"):
        if isinstance(policy, str):
            if policy not in NAMED_POLICIES:
                raise ValueError(f"unknown policy {policy!r}; "
                                 f"known: {sorted(NAMED_POLICIES)}")
            policy = NAMED_POLICIES[policy]
        self.policy = policy
        self._host = host
        self._server: _QuietServer | None = None
        self._thread: threading.Thread | None = None
        self._lock = threading.Lock()
        self._in_flight = 0
        self._peak = 0
        self._count = 0
        self._bodies: list[dict] = []
        self._headers: list[dict] = []

    # Request accounting (called from handler threads) ---------------------

    def _enter(self, body: dict, headers: dict) -> None:
        with self._lock:
            self._in_flight += 1
            self._peak = max(self._peak, self._in_flight)
            self._count += 1
            self._bodies.append(body)
            self._headers.append(headers)

    def _exit(self) -> None:
        with self._lock:
            self._in_flight -= 1

    @property
    def peak_concurrency(self) -> int:
        with self._lock:
            return self._peak

    @property
    def request_count(self) -> int:
        with self._lock:
            return self._count

    @property
    def request_bodies(self) -> list[dict]:
        with self._lock:
            return list(self._bodies)

    @property
    def request_headers(self) -> list[dict]:
        with self._lock:
            return list(self._headers)

    def reset_counters(self) -> None:
        with self._lock:
            self._peak = 0
            self._count = 0
            self._bodies.clear()
            self._headers.clear()

    # Lifecycle -------------------------------------------------------------

    @property
    def base_url(self) -> str:
        if self._server is None:
            raise RuntimeError("server is not running")
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "MockInferenceServer":
        if self._server is not None:
            return self
        self._server = _QuietServer((self._host, 0), _Handler)
        self._server.owner = self  # type: ignore[attr-defined]
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None

    def __enter__(self) -> "MockInferenceServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
