"""Extract structured verdicts from noisy judge output.

A fixed four-pass repair ladder turns raw text into a schema-valid
payload, stopping at the first pass that succeeds:

1. strict parse of the whole text as JSON;
2. strict parse of a single leading fenced code block (trailing prose
   after the closing fence is tolerated);
3. concatenated bare JSON objects wrapped into an array;
4. lenient repair: fenced-block or balanced-bracket extraction with
   surrounding prose dropped, quoting of single-quoted or unquoted keys,
   quoting of bare-word values, trailing-comma removal.

Passes 1-2 yield adherence "strict" (unless the payload needed a shape
coercion), 3-4 yield "repaired" with the applied repairs named in
repair_trace, and exhaustion yields "failed". Repairs only ever touch
structure: no pass rewrites a Score or Model value.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Any, Callable, Mapping

from .datamodel import JudgmentSpec, ParsedVerdict, VerdictValue
from .promptforge import CRITERION_TYPE_NAME

ALL_PASSES = (1, 2, 3, 4)

_FENCE = re.compile(r"```(?:json)?[ \t]*\n?(?P<body>.*?)```", re.DOTALL | re.IGNORECASE)
_LEADING_FENCE = re.compile(r"^\s*```", re.DOTALL)

_PAYLOAD_KEYS = {"score", "model", "explanation", "type"}
_JSON_LITERALS = {"true", "false", "null"}

# verbatim-label normal forms → canonical slot letter
_LABEL_FORMS = {"model a": "A", "a": "A", "model b": "B", "b": "B", "tie": "TIE"}

_SOURCE_TO_UNDERLYING = {
    "response_a": "model_a",
    "response_b": "model_b",
    "caption_a": "model_a",
    "caption_b": "model_b",
}

_TYPE_TO_CRITERION = {
    "informativeness": "informativeness",
    "factual correctness": "factual_correctness",
    "factual_correctness": "factual_correctness",
    "relevance": "relevance",
    "relevancy": "relevance",
    "overall quality": "multidimensional",
    "multidimensional": "multidimensional",
}


class UnresolvableLabel(ValueError):
    """A pairwise Model value matches none of the accepted label forms."""


class _HardFail(Exception):
    """A present-but-invalid Score/Model value: the whole record fails."""


# Normalizers -----------------------------------------------------------------


def normalize_type(raw: str) -> str:
    s = raw.strip().lower().replace("_", " ")
    s = re.sub(r"\s+", " ", s)
    return s.strip().strip(".!,:;'\"").strip()


def type_to_criterion(raw: str) -> str | None:
    return _TYPE_TO_CRITERION.get(normalize_type(raw))


def normalize_preference_label(raw: str) -> str | None:
    """Map a verbatim Model value to 'A', 'B' or 'TIE'; None if unknown."""
    s = raw.strip().strip("'\"").strip().lower()
    s = re.sub(r"\s+", " ", s).strip(".!,:;")
    return _LABEL_FORMS.get(s)


# Text surgery ----------------------------------------------------------------


def _split_string_segments(text: str) -> list[tuple[bool, str]]:
    """Split into (is_inside_double_quoted_string, chunk) runs."""
    segs: list[tuple[bool, str]] = []
    buf: list[str] = []
    in_str = False
    esc = False
    for ch in text:
        if in_str:
            buf.append(ch)
            if esc:
                esc = False
            elif ch == "\\":
                esc = True
            elif ch == '"':
                segs.append((True, "".join(buf)))
                buf = []
                in_str = False
        else:
            if ch == '"':
                if buf:
                    segs.append((False, "".join(buf)))
                buf = [ch]
                in_str = True
            else:
                buf.append(ch)
    if buf:
        segs.append((in_str, "".join(buf)))
    return segs


def _apply_outside_strings(text: str, fn: Callable[[str], str]) -> str:
    return "".join(chunk if is_str else fn(chunk)
                   for is_str, chunk in _split_string_segments(text))


def _balanced_region(text: str) -> tuple[str, str, str] | None:
    """First balanced top-level bracket region, with leading/trailing rest."""
    starts = [i for i in (text.find("["), text.find("{")) if i >= 0]
    if not starts:
        return None
    start = min(starts)
    depth = 0
    in_str = False
    esc = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_str:
            if esc:
                esc = False
            elif ch == "\\":
                esc = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"':
            in_str = True
        elif ch in "[{":
            depth += 1
        elif ch in "]}":
            depth -= 1
            if depth == 0:
                return text[start:i + 1], text[:start], text[i + 1:]
    return None


def _fix_single_quoted_keys(text: str) -> str:
    return _apply_outside_strings(
        text, lambda s: re.sub(r"'([^'\n]*)'(\s*:)", lambda m: json.dumps(m.group(1)) + m.group(2), s)
    )


def _fix_single_quoted_values(text: str) -> str:
    return _apply_outside_strings(
        text,
        lambda s: re.sub(r"(:\s*)'([^'\n]*)'", lambda m: m.group(1) + json.dumps(m.group(2)), s),
    )


def _fix_unquoted_keys(text: str) -> str:
    def fix(s: str) -> str:
        return re.sub(
            r"([{,]\s*)([A-Za-z_][A-Za-z0-9_ -]*?)\s*:",
            lambda m: m.group(1) + json.dumps(m.group(2)) + ":",
            s,
        )

    return _apply_outside_strings(text, fix)


def _fix_unquoted_values(text: str) -> str:
    def fix(s: str) -> str:
        def repl(m: re.Match) -> str:
            token = m.group(2).strip()
            if token.rstrip(".").lower() in _JSON_LITERALS:
                return m.group(0)
            return m.group(1) + json.dumps(token)

        return re.sub(r"(:\s*)([A-Za-z][A-Za-z ]*\.?)(?=\s*[,}\]])", repl, s)

    return _apply_outside_strings(text, fix)


def _fix_trailing_commas(text: str) -> str:
    return _apply_outside_strings(text, lambda s: re.sub(r",(\s*[}\]])", r"\1", s))


_LENIENT_FIXES: tuple[tuple[str, Callable[[str], str]], ...] = (
    ("single_quoted_keys", _fix_single_quoted_keys),
    ("single_quoted_values", _fix_single_quoted_values),
    ("unquoted_keys", _fix_unquoted_keys),
    ("unquoted_values", _fix_unquoted_values),
    ("trailing_comma", _fix_trailing_commas),
)


# Ladder passes ---------------------------------------------------------------


def _try_strict(text: str) -> tuple[Any, list[str]] | None:
    try:
        return json.loads(text), []
    except (json.JSONDecodeError, ValueError):
        return None


def _try_fenced(text: str) -> tuple[Any, list[str]] | None:
    if not _LEADING_FENCE.match(text):
        return None
    if text.count("```") != 2:
        return None
    m = _FENCE.search(text)
    if m is None:
        return None
    try:
        return json.loads(m.group("body")), []
    except (json.JSONDecodeError, ValueError):
        return None


def _parse_object_stream(text: str) -> list[dict] | None:
    """Concatenated bare objects separated by whitespace (or stray commas)."""
    decoder = json.JSONDecoder()
    s = text.strip()
    idx = 0
    values: list[dict] = []
    while idx < len(s):
        try:
            value, end = decoder.raw_decode(s, idx)
        except (json.JSONDecodeError, ValueError):
            return None
        if not isinstance(value, dict):
            return None
        values.append(value)
        idx = end
        while idx < len(s) and (s[idx].isspace() or s[idx] == ","):
            idx += 1
    return values or None


def _try_json_lines(text: str) -> tuple[Any, list[str]] | None:
    values = _parse_object_stream(text)
    if values is None:
        return None
    return values, ["json_lines"]


def _try_lenient(text: str) -> tuple[Any, list[str]] | None:
    trace = ["lenient"]
    m = _FENCE.search(text)
    if m is not None:
        candidate = m.group("body")
        trace.append("fence_extraction")
        if text[: m.start()].strip() or text[m.end():].strip():
            trace.append("trailing_prose")
    else:
        region = _balanced_region(text)
        if region is None:
            return None
        candidate, leading, trailing = region
        trace.append("bracket_region")
        if leading.strip() or trailing.strip():
            trace.append("trailing_prose")

    parsed = _try_strict(candidate)
    if parsed is not None:
        return parsed[0], trace

    fixed = candidate
    for name, fn in _LENIENT_FIXES:
        updated = fn(fixed)
        if updated != fixed:
            trace.append(name)
            fixed = updated
    parsed = _try_strict(fixed)
    if parsed is not None:
        return parsed[0], trace

    stream = _parse_object_stream(fixed)
    if stream is not None:
        trace.append("json_lines")
        return stream, trace
    return None


_PASS_FNS: dict[int, Callable[[str], tuple[Any, list[str]] | None]] = {
    1: _try_strict,
    2: _try_fenced,
    3: _try_json_lines,
    4: _try_lenient,
}


# Shape and schema ------------------------------------------------------------


def _looks_like_payload_object(d: dict) -> bool:
    return any(str(k).lower().strip() in _PAYLOAD_KEYS for k in d)


def _looks_model_keyed(d: dict) -> bool:
    if not d:
        return False
    return all(
        isinstance(v, dict) and isinstance(k, str)
        and normalize_preference_label(k) in ("A", "B")
        for k, v in d.items()
    )


def _normalize_shape(value: Any, spec: JudgmentSpec) -> tuple[list[dict], list[str]] | None:
    trace: list[str] = []
    if isinstance(value, list):
        dicts = [x for x in value if isinstance(x, dict)]
        if not dicts:
            return None
        if len(dicts) != len(value):
            trace.append("dropped_non_object_entries")
        if not spec.is_multi_criteria:
            trace.append("array_unwrap")
        return dicts, trace
    if isinstance(value, dict):
        if _looks_like_payload_object(value):
            if spec.is_multi_criteria:
                trace.append("single_object_wrap")
            return [value], trace
        if _looks_model_keyed(value):
            entries = [{"Model": k, **v} for k, v in value.items()]
            trace.append("model_keyed_object")
            return entries, trace
    return None


def _coerce_score(value: Any) -> int | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        score = value
    elif isinstance(value, float) and value.is_integer():
        score = int(value)
    elif isinstance(value, str) and re.fullmatch(r"-?\d+", value.strip()):
        score = int(value.strip())
    else:
        return None
    return score if score in (1, 2, 3, 4, 5) else None


def _validate_entries(
    entries_raw: list[dict], spec: JudgmentSpec
) -> tuple[list[tuple[str | None, VerdictValue]], list[str]] | None:
    out: list[tuple[str | None, VerdictValue]] = []
    trace: list[str] = []
    dropped = 0
    for entry in entries_raw:
        low = {str(k).lower().strip(): v for k, v in entry.items()}
        raw_expl = low.get("explanation")
        explanation = "" if raw_expl is None else str(raw_expl)
        raw_type = low.get("type")
        claimed = str(raw_type) if raw_type is not None else None
        if spec.eval_mode == "pointwise":
            if "score" not in low:
                dropped += 1
                continue
            score = _coerce_score(low["score"])
            if score is None:
                raise _HardFail(f"invalid Score value: {low['score']!r}")
            out.append((claimed, VerdictValue(score=score, explanation=explanation)))
        else:
            if "model" not in low:
                dropped += 1
                continue
            label = low["model"]
            if not isinstance(label, str) or not label.strip():
                raise _HardFail(f"invalid Model value: {label!r}")
            out.append((claimed, VerdictValue(preference=label, explanation=explanation)))
    if dropped:
        trace.append("dropped_invalid_entries")
    if not out:
        return None
    return out, trace


@dataclass(frozen=True)
class AssignmentReport:
    """How payload entries map onto the requested criteria."""

    assigned: Mapping[str, VerdictValue]
    duplicates: Mapping[str, int]  # criterion → total claim count (≥ 2)
    omissions: tuple[str, ...]
    unmatched_types: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "assigned", dict(self.assigned))
        object.__setattr__(self, "duplicates", dict(self.duplicates))

    @property
    def degenerate(self) -> bool:
        return bool(self.duplicates or self.omissions or self.unmatched_types)


def _assign_entries(
    entries: list[tuple[str | None, VerdictValue]], criteria: tuple[str, ...]
) -> AssignmentReport:
    assigned: dict[str, VerdictValue] = {}
    claims: dict[str, int] = {}
    unmatched: list[str] = []
    for claimed, value in entries:
        if claimed is None:
            criterion = next((c for c in criteria if c not in assigned), None)
        else:
            criterion = type_to_criterion(claimed)
            if criterion is not None and criterion not in criteria:
                unmatched.append(claimed)
                continue
            if criterion is None:
                unmatched.append(claimed)
                continue
        if criterion is None:
            continue
        claims[criterion] = claims.get(criterion, 0) + 1
        if criterion not in assigned:
            assigned[criterion] = value
    duplicates = {c: n for c, n in claims.items() if n > 1}
    omissions = tuple(c for c in criteria if c not in assigned)
    return AssignmentReport(
        assigned=assigned,
        duplicates=duplicates,
        omissions=omissions,
        unmatched_types=tuple(unmatched),
    )


# Public operations -----------------------------------------------------------


def extract_payload(
    raw: str, spec: JudgmentSpec, passes: tuple[int, ...] = ALL_PASSES
) -> ParsedVerdict:
    for pass_no in passes:
        parsed = _PASS_FNS[pass_no](raw)
        if parsed is None:
            continue
        value, pass_trace = parsed
        shaped = _normalize_shape(value, spec)
        if shaped is None:
            continue
        entries_raw, shape_trace = shaped
        try:
            validated = _validate_entries(entries_raw, spec)
        except _HardFail:
            return ParsedVerdict.failure()
        if validated is None:
            continue
        entries, entry_trace = validated

        trace = [*pass_trace, *shape_trace, *entry_trace]
        if spec.is_multi_criteria:
            per_criterion = dict(_assign_entries(entries, spec.criteria).assigned)
        else:
            per_criterion = {spec.criteria[0]: entries[0][1]}
            if len(entries) > 1:
                trace.append("extra_entries")
        adherence = "strict" if pass_no in (1, 2) and not trace else "repaired"
        return ParsedVerdict(
            per_criterion=per_criterion,
            adherence=adherence,
            repair_trace=tuple(trace),
            entries=tuple(entries),
        )
    return ParsedVerdict.failure()


def resolve_pairwise(verdict: ParsedVerdict, slot_map: Mapping[str, str]) -> dict[str, str]:
    """Map label-space preferences to underlying models {model_a, model_b, tie}."""
    a_source = slot_map.get("model_a_answer", slot_map.get("model_a_caption"))
    b_source = slot_map.get("model_b_answer", slot_map.get("model_b_caption"))
    if a_source not in _SOURCE_TO_UNDERLYING or b_source not in _SOURCE_TO_UNDERLYING:
        raise ValueError("slot_map does not describe a pairwise prompt")
    resolved: dict[str, str] = {}
    for criterion, value in verdict.per_criterion.items():
        if value.preference is None:
            raise ValueError(f"criterion {criterion!r} holds a score, not a preference")
        label = normalize_preference_label(value.preference)
        if label is None:
            raise UnresolvableLabel(value.preference)
        if label == "TIE":
            resolved[criterion] = "tie"
        elif label == "A":
            resolved[criterion] = _SOURCE_TO_UNDERLYING[a_source]
        else:
            resolved[criterion] = _SOURCE_TO_UNDERLYING[b_source]
    return resolved


def resolve_multicriteria(verdict: ParsedVerdict, spec: JudgmentSpec) -> AssignmentReport:
    if not spec.is_multi_criteria:
        raise ValueError("resolve_multicriteria requires a multi-criteria spec")
    return _assign_entries(list(verdict.entries), spec.criteria)


def canonical_payload(verdict: ParsedVerdict, spec: JudgmentSpec) -> str:
    """Re-serialize a verdict into the exact reply shape the prompt requested."""
    if verdict.failed:
        raise ValueError("cannot serialize a failed verdict")

    def body(value: VerdictValue) -> dict:
        out: dict[str, Any] = {}
        if spec.eval_mode == "pointwise":
            out["Score"] = value.score
        else:
            out["Model"] = value.preference
        out["Explanation"] = value.explanation
        return out

    if spec.is_multi_criteria:
        array = []
        for criterion in spec.criteria:
            if criterion not in verdict.per_criterion:
                continue
            obj = body(verdict.per_criterion[criterion])
            obj["Type"] = CRITERION_TYPE_NAME.get(criterion, criterion.replace("_", " "))
            array.append(obj)
        return json.dumps(array, ensure_ascii=False)
    return json.dumps(body(verdict.per_criterion[spec.criteria[0]]), ensure_ascii=False)
