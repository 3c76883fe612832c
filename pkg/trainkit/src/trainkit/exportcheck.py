"""Schema validation for chat-format training exports (JSONL).

Each line must hold one JSON object with a ``messages`` list whose
roles strictly alternate user/assistant starting with the user and
ending with an assistant turn. User content is either a non-empty
string or a list of parts (text / image_ref); every image reference
must carry a content digest and point at something that resolves.
Validation is fail-fast: the first violation raises SchemaError with
the offending line number.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

_SHA256_HEX = re.compile(r"^[0-9a-fA-F]{64}$")


class SchemaError(ValueError):
    """A training export violates the chat schema; carries the line."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


def _check_image_ref(part: dict, base_dir: Path, line: int) -> None:
    uri = part.get("uri")
    if not isinstance(uri, str) or not uri:
        raise SchemaError("image_ref part needs a non-empty 'uri'", line)
    digest = part.get("sha256")
    if not isinstance(digest, str) or not _SHA256_HEX.match(digest):
        raise SchemaError(
            f"image_ref {uri!r} needs a 64-hex 'sha256' digest", line)
    if "://" in uri:  # remote reference: existence is not checked here
        return
    candidate = Path(uri)
    if not candidate.is_absolute():
        candidate = base_dir / candidate
    if not candidate.is_file():
        raise SchemaError(f"image_ref {uri!r} does not resolve to a file", line)


def _check_user_content(content: object, base_dir: Path, line: int) -> None:
    if isinstance(content, str):
        if not content.strip():
            raise SchemaError("user content string is empty", line)
        return
    if not isinstance(content, list) or not content:
        raise SchemaError(
            "user content must be a non-empty string or a list of parts", line)
    has_text = False
    for part in content:
        if not isinstance(part, dict):
            raise SchemaError("user content part must be an object", line)
        kind = part.get("type")
        if kind == "text":
            text = part.get("text")
            if not isinstance(text, str):
                raise SchemaError("text part needs a string 'text'", line)
            if text.strip():
                has_text = True
        elif kind == "image_ref":
            _check_image_ref(part, base_dir, line)
        else:
            raise SchemaError(f"unknown content part type {kind!r}", line)
    if not has_text:
        raise SchemaError("user turn has no non-empty text part", line)


def _check_messages(messages: object, base_dir: Path, line: int) -> None:
    if not isinstance(messages, list):
        raise SchemaError("'messages' must be a list", line)
    if len(messages) < 2 or len(messages) % 2 != 0:
        raise SchemaError(
            f"'messages' needs an even number of turns (>= 2), got "
            f"{len(messages)}", line)
    for index, message in enumerate(messages):
        if not isinstance(message, dict):
            raise SchemaError(f"message {index} must be an object", line)
        expected_role = "user" if index % 2 == 0 else "assistant"
        role = message.get("role")
        if role != expected_role:
            raise SchemaError(
                f"message {index} has role {role!r}, expected "
                f"{expected_role!r} (roles must alternate starting with "
                "the user)", line)
        content = message.get("content")
        if expected_role == "user":
            _check_user_content(content, base_dir, line)
        else:
            if not isinstance(content, str) or not content.strip():
                raise SchemaError(
                    f"assistant message {index} needs a non-empty string "
                    "content", line)


def validate_export(path: str | Path) -> dict:
    """Validate a training JSONL file; returns a schema report.

    The report is ``{"lines": N, "errors": 0, "labels": {...},
    "eval_modes": {...}}`` where the two maps count records by their
    optional ``meta.label`` / ``meta.eval_mode`` fields. Any violation
    raises SchemaError naming the line instead of being tallied.
    """
    source = Path(path)
    base_dir = source.parent
    labels: dict[str, int] = {}
    eval_modes: dict[str, int] = {}
    n_lines = 0
    with open(source, "r", encoding="utf-8") as fh:
        for line_number, raw in enumerate(fh, start=1):
            if not raw.strip():
                raise SchemaError("blank line", line_number)
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc}", line_number) from exc
            if not isinstance(record, dict):
                raise SchemaError("record must be a JSON object", line_number)
            _check_messages(record.get("messages"), base_dir, line_number)
            meta = record.get("meta")
            if meta is not None and not isinstance(meta, dict):
                raise SchemaError("'meta' must be an object", line_number)
            if isinstance(meta, dict):
                label = meta.get("label")
                if isinstance(label, str):
                    labels[label] = labels.get(label, 0) + 1
                eval_mode = meta.get("eval_mode")
                if isinstance(eval_mode, str):
                    eval_modes[eval_mode] = eval_modes.get(eval_mode, 0) + 1
            n_lines += 1
    if n_lines == 0:
        raise SchemaError("file is empty", 0)
    return {
        "lines": n_lines,
        "errors": 0,
        "labels": labels,
        "eval_modes": eval_modes,
    }
