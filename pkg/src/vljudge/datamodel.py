"""Canonical domain types shared by every module of the harness.

All types are immutable value objects, safe to share between concurrent
workers. Semantic sample invariants are reported by ``validate_sample``
as data rather than raised, so that malformed records can be carried
around, inspected and counted.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

# Closed vocabularies ------------------------------------------------------

TASK_KINDS = frozenset({"open_qa", "captioning", "instruction_following", "ood_molecular"})
SOURCES = frozenset(
    {"statista", "pew", "opencqa", "vistext_l1", "vistext_l2l3", "chart_instruct_eval", "chebi"}
)
CHART_TYPES = frozenset({"bar", "line", "pie", "table", "area", "scatter"})
EVAL_MODES = frozenset({"pairwise", "pointwise"})
REFERENCE_MODES = frozenset({"with_reference", "without_reference"})
ORDERS = frozenset({"AB", "BA"})
ADHERENCE_LEVELS = frozenset({"strict", "repaired", "failed"})
CRITERIA_MODES = frozenset({"single_criterion", "multi_criteria"})

FACTUAL_CORRECTNESS = "factual_correctness"
INFORMATIVENESS = "informativeness"
RELEVANCE = "relevance"
MULTIDIMENSIONAL = "multidimensional"
# Closed set of criteria the harness knows how to phrase; any other
# snake_case name is accepted as an escape hatch for future criteria.
KNOWN_CRITERIA = frozenset({FACTUAL_CORRECTNESS, INFORMATIVENESS, RELEVANCE, MULTIDIMENSIONAL})

PAIRWISE_LABELS = frozenset({"model_a", "model_b", "tie"})
POINTWISE_LABELS = frozenset({"1", "2", "3", "4", "5"})


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(value: Any) -> str:
    """Deterministic JSON used for digests and byte-stable reports."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _require(value: str, domain: frozenset, what: str) -> str:
    if value not in domain:
        raise ValueError(f"{what} must be one of {sorted(domain)}, got {value!r}")
    return value


# Domain types -------------------------------------------------------------


@dataclass(frozen=True)
class ImageRef:
    """Content-addressed image reference: a URI plus the SHA-256 of its bytes."""

    uri: str
    sha256: str

    @classmethod
    def for_file(cls, path: str | Path) -> "ImageRef":
        p = Path(path)
        return cls(uri=str(p), sha256=sha256_hex(p.read_bytes()))

    def resolve_path(self) -> Path | None:
        """Local filesystem path for this reference, or None for remote URIs."""
        if self.uri.startswith("file://"):
            return Path(self.uri[len("file://"):])
        if "://" in self.uri:
            return None
        return Path(self.uri)

    def to_dict(self) -> dict:
        return {"uri": self.uri, "sha256": self.sha256}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ImageRef":
        return cls(uri=d["uri"], sha256=d["sha256"])


@dataclass(frozen=True)
class ComplexityFlags:
    complex_chart: bool = False
    complex_query: bool = False

    def to_dict(self) -> dict:
        return {"complex_chart": self.complex_chart, "complex_query": self.complex_query}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ComplexityFlags":
        return cls(bool(d.get("complex_chart", False)), bool(d.get("complex_query", False)))


@dataclass(frozen=True)
class ChartSample:
    """One chart task instance to be judged."""

    id: str
    image: ImageRef
    task_kind: str
    source: str
    query: str | None = None
    gold_reference: str | None = None
    chart_type: str | None = None
    complexity: ComplexityFlags | None = None
    synthetic_query: bool = False

    def __post_init__(self) -> None:
        _require(self.task_kind, TASK_KINDS, "task_kind")
        _require(self.source, SOURCES, "source")
        if self.chart_type is not None:
            _require(self.chart_type, CHART_TYPES, "chart_type")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "id": self.id,
            "image": self.image.to_dict(),
            "task_kind": self.task_kind,
            "source": self.source,
        }
        if self.query is not None:
            d["query"] = self.query
        if self.gold_reference is not None:
            d["gold_reference"] = self.gold_reference
        if self.chart_type is not None:
            d["chart_type"] = self.chart_type
        if self.complexity is not None:
            d["complexity"] = self.complexity.to_dict()
        if self.synthetic_query:
            d["synthetic_query"] = True
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ChartSample":
        return cls(
            id=d["id"],
            image=ImageRef.from_dict(d["image"]),
            task_kind=d["task_kind"],
            source=d["source"],
            query=d.get("query"),
            gold_reference=d.get("gold_reference"),
            chart_type=d.get("chart_type"),
            complexity=ComplexityFlags.from_dict(d["complexity"]) if d.get("complexity") else None,
            synthetic_query=bool(d.get("synthetic_query", False)),
        )

    def with_query(self, query: str, synthetic: bool = True) -> "ChartSample":
        return replace(self, task_kind="open_qa", query=query, synthetic_query=synthetic)


@dataclass(frozen=True)
class CandidateResponse:
    """A model-generated response under judgment."""

    model_id: str
    text: str
    char_length: int = -1
    token_length: int | None = None

    def __post_init__(self) -> None:
        if self.char_length < 0:
            object.__setattr__(self, "char_length", len(self.text))
        elif self.char_length != len(self.text):
            raise ValueError("char_length must equal len(text)")
        if self.token_length is not None and self.text and self.token_length < 1:
            raise ValueError("token_length must be >= 1 for non-empty text")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "model_id": self.model_id,
            "text": self.text,
            "char_length": self.char_length,
        }
        if self.token_length is not None:
            d["token_length"] = self.token_length
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CandidateResponse":
        return cls(
            model_id=d["model_id"],
            text=d["text"],
            char_length=d.get("char_length", -1),
            token_length=d.get("token_length"),
        )


@dataclass(frozen=True)
class JudgmentSpec:
    """What to ask a judge: mode, reference handling, criteria and order."""

    eval_mode: str
    reference_mode: str
    criteria: tuple[str, ...]
    judge_model: str
    order: str = "AB"

    def __post_init__(self) -> None:
        _require(self.eval_mode, EVAL_MODES, "eval_mode")
        _require(self.reference_mode, REFERENCE_MODES, "reference_mode")
        _require(self.order, ORDERS, "order")
        if not self.criteria:
            raise ValueError("criteria must be a non-empty ordered set")
        if len(set(self.criteria)) != len(self.criteria):
            raise ValueError("criteria must not contain duplicates")
        object.__setattr__(self, "criteria", tuple(self.criteria))

    @property
    def is_multi_criteria(self) -> bool:
        return len(self.criteria) >= 2

    @property
    def criteria_mode(self) -> str:
        return "multi_criteria" if self.is_multi_criteria else "single_criterion"

    def to_dict(self) -> dict:
        return {
            "eval_mode": self.eval_mode,
            "reference_mode": self.reference_mode,
            "criteria": list(self.criteria),
            "judge_model": self.judge_model,
            "order": self.order,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "JudgmentSpec":
        return cls(
            eval_mode=d["eval_mode"],
            reference_mode=d["reference_mode"],
            criteria=tuple(d["criteria"]),
            judge_model=d["judge_model"],
            order=d.get("order", "AB"),
        )


@dataclass(frozen=True)
class RawJudgment:
    """The judge's untouched output plus usage and latency telemetry.

    ``spec`` is None for utility calls (e.g. question generation) that go
    through the same client but are not judgments.
    """

    sample_id: str
    raw_text: str
    prompt_digest: str
    latency_ms: float
    spec: JudgmentSpec | None = None
    tokens_in: int | None = None
    tokens_out: int | None = None
    retrieved_from_cache: bool = False
    usage_estimated: bool = False

    def __post_init__(self) -> None:
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be non-negative")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "sample_id": self.sample_id,
            "raw_text": self.raw_text,
            "prompt_digest": self.prompt_digest,
            "latency_ms": self.latency_ms,
            "retrieved_from_cache": self.retrieved_from_cache,
        }
        if self.spec is not None:
            d["spec"] = self.spec.to_dict()
        if self.tokens_in is not None:
            d["tokens_in"] = self.tokens_in
        if self.tokens_out is not None:
            d["tokens_out"] = self.tokens_out
        if self.usage_estimated:
            d["usage_estimated"] = True
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RawJudgment":
        return cls(
            sample_id=d["sample_id"],
            raw_text=d["raw_text"],
            prompt_digest=d["prompt_digest"],
            latency_ms=d["latency_ms"],
            spec=JudgmentSpec.from_dict(d["spec"]) if d.get("spec") else None,
            tokens_in=d.get("tokens_in"),
            tokens_out=d.get("tokens_out"),
            retrieved_from_cache=bool(d.get("retrieved_from_cache", False)),
            usage_estimated=bool(d.get("usage_estimated", False)),
        )


@dataclass(frozen=True)
class VerdictValue:
    """A single-criterion verdict: a preference label or a 1-5 score.

    ``preference`` keeps the verbatim model label from the payload
    (e.g. "Model A"); normalization to underlying models happens in
    verdictparse.resolve_pairwise. Scores are constrained to {1..5} at
    construction.
    """

    preference: str | None = None
    score: int | None = None
    explanation: str = ""

    def __post_init__(self) -> None:
        if (self.preference is None) == (self.score is None):
            raise ValueError("exactly one of preference or score must be set")
        if self.score is not None and self.score not in (1, 2, 3, 4, 5):
            raise ValueError(f"score must be in {{1,2,3,4,5}}, got {self.score!r}")
        if self.preference is not None and not str(self.preference).strip():
            raise ValueError("preference label must be non-empty")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"explanation": self.explanation}
        if self.preference is not None:
            d["preference"] = self.preference
        if self.score is not None:
            d["score"] = self.score
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "VerdictValue":
        return cls(
            preference=d.get("preference"),
            score=d.get("score"),
            explanation=d.get("explanation", ""),
        )


@dataclass(frozen=True)
class ParsedVerdict:
    """Structured verdicts extracted from one raw judgment.

    ``entries`` preserves the payload objects in order as (claimed type,
    value) pairs so that duplicate / omitted criteria can be audited;
    ``per_criterion`` keeps the first value matched to each requested
    criterion.
    """

    per_criterion: Mapping[str, VerdictValue]
    adherence: str
    repair_trace: tuple[str, ...] = ()
    entries: tuple[tuple[str | None, VerdictValue], ...] = ()

    def __post_init__(self) -> None:
        _require(self.adherence, ADHERENCE_LEVELS, "adherence")
        if self.adherence == "strict" and self.repair_trace:
            raise ValueError("strict verdicts must have an empty repair_trace")
        if self.adherence == "failed" and self.per_criterion:
            raise ValueError("failed verdicts must have empty per_criterion")
        object.__setattr__(self, "per_criterion", dict(self.per_criterion))
        object.__setattr__(self, "repair_trace", tuple(self.repair_trace))
        object.__setattr__(self, "entries", tuple(self.entries))

    @property
    def failed(self) -> bool:
        return self.adherence == "failed"

    def to_dict(self) -> dict:
        return {
            "per_criterion": {k: v.to_dict() for k, v in self.per_criterion.items()},
            "adherence": self.adherence,
            "repair_trace": list(self.repair_trace),
            "entries": [{"type": t, "value": v.to_dict()} for t, v in self.entries],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ParsedVerdict":
        return cls(
            per_criterion={k: VerdictValue.from_dict(v) for k, v in d["per_criterion"].items()},
            adherence=d["adherence"],
            repair_trace=tuple(d.get("repair_trace", ())),
            entries=tuple(
                (e.get("type"), VerdictValue.from_dict(e["value"])) for e in d.get("entries", ())
            ),
        )

    @classmethod
    def failure(cls) -> "ParsedVerdict":
        return cls(per_criterion={}, adherence="failed")


@dataclass(frozen=True)
class MetricReport:
    """Aggregated metric values for one (judge, dataset, configuration) cell."""

    judge_model: str
    dataset: str
    eval_mode: str
    reference_mode: str
    criteria: tuple[str, ...]
    n_items: int
    criteria_mode: str = "single_criterion"
    judgment_accuracy: float | None = None
    error_distance: float | None = None
    position_bias_rate: float | None = None
    length_bias_rate: float | None = None
    format_adherence_rate: float = 0.0
    instruction_following_accuracy: float | None = None
    spearman_rho: float | None = None

    def __post_init__(self) -> None:
        _require(self.eval_mode, EVAL_MODES, "eval_mode")
        _require(self.reference_mode, REFERENCE_MODES, "reference_mode")
        _require(self.criteria_mode, CRITERIA_MODES, "criteria_mode")
        object.__setattr__(self, "criteria", tuple(self.criteria))
        for name, lo, hi in (
            ("judgment_accuracy", 0.0, 1.0),
            ("error_distance", 0.0, 5.0),
            ("position_bias_rate", 0.0, 1.0),
            ("length_bias_rate", 0.0, 1.0),
            ("format_adherence_rate", 0.0, 1.0),
            ("instruction_following_accuracy", 0.0, 1.0),
            ("spearman_rho", -1.0, 1.0),
        ):
            v = getattr(self, name)
            if v is not None and not (lo <= v <= hi):
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")
        if self.judgment_accuracy is not None and self.eval_mode != "pairwise":
            raise ValueError("judgment_accuracy is defined for pairwise cells only")
        if self.error_distance is not None and self.eval_mode != "pointwise":
            raise ValueError("error_distance is defined for pointwise cells only")
        if self.n_items <= 0 and self._any_metric_present():
            raise ValueError("n_items must be > 0 when any metric is present")

    def _any_metric_present(self) -> bool:
        return any(
            getattr(self, m) is not None
            for m in (
                "judgment_accuracy",
                "error_distance",
                "position_bias_rate",
                "length_bias_rate",
                "instruction_following_accuracy",
                "spearman_rho",
            )
        ) or self.n_items > 0

    def to_dict(self) -> dict:
        return {
            "cell": {
                "judge_model": self.judge_model,
                "dataset": self.dataset,
                "eval_mode": self.eval_mode,
                "reference_mode": self.reference_mode,
                "criteria": list(self.criteria),
                "criteria_mode": self.criteria_mode,
            },
            "judgment_accuracy": self.judgment_accuracy,
            "error_distance": self.error_distance,
            "position_bias_rate": self.position_bias_rate,
            "length_bias_rate": self.length_bias_rate,
            "format_adherence_rate": self.format_adherence_rate,
            "instruction_following_accuracy": self.instruction_following_accuracy,
            "spearman_rho": self.spearman_rho,
            "n_items": self.n_items,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MetricReport":
        cell = d["cell"]
        return cls(
            judge_model=cell["judge_model"],
            dataset=cell["dataset"],
            eval_mode=cell["eval_mode"],
            reference_mode=cell["reference_mode"],
            criteria=tuple(cell["criteria"]),
            criteria_mode=cell.get("criteria_mode", "single_criterion"),
            judgment_accuracy=d.get("judgment_accuracy"),
            error_distance=d.get("error_distance"),
            position_bias_rate=d.get("position_bias_rate"),
            length_bias_rate=d.get("length_bias_rate"),
            format_adherence_rate=d.get("format_adherence_rate", 0.0),
            instruction_following_accuracy=d.get("instruction_following_accuracy"),
            spearman_rho=d.get("spearman_rho"),
            n_items=d["n_items"],
        )


SchemaKey = tuple[str, str, str]  # (source, eval_mode, label)


@dataclass(frozen=True)
class DistributionSchema:
    """Target counts per (source, eval_mode, label) cell for dataset sampling."""

    counts: Mapping[SchemaKey, int]
    criteria_mode: str = "single_criterion"

    def __post_init__(self) -> None:
        _require(self.criteria_mode, CRITERIA_MODES, "criteria_mode")
        counts = dict(self.counts)
        for (source, eval_mode, label), n in counts.items():
            _require(source, SOURCES, "source")
            _require(eval_mode, EVAL_MODES, "eval_mode")
            labels = POINTWISE_LABELS if eval_mode == "pointwise" else PAIRWISE_LABELS
            _require(label, labels, f"{eval_mode} label")
            if n < 0:
                raise ValueError(f"cell count must be >= 0, got {n} for {(source, eval_mode, label)}")
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def label_marginals(self) -> dict[tuple[str, str], int]:
        out: dict[tuple[str, str], int] = {}
        for (_, eval_mode, label), n in self.counts.items():
            out[(eval_mode, label)] = out.get((eval_mode, label), 0) + n
        return out

    def source_marginals(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for (source, _, _), n in self.counts.items():
            out[source] = out.get(source, 0) + n
        return out

    @classmethod
    def from_marginals(
        cls,
        source_counts: Mapping[str, int],
        label_counts: Mapping[tuple[str, str], int],
        criteria_mode: str = "single_criterion",
    ) -> "DistributionSchema":
        """Build joint cells from source and label marginals.

        Each (eval_mode, label) row is split across sources proportionally
        to the source totals, with largest-remainder rounding corrected so
        that both marginals are hit exactly.
        """
        total = sum(source_counts.values())
        if total != sum(label_counts.values()):
            raise ValueError("source and label marginals must have equal totals")
        sources = sorted(source_counts)
        rows = sorted(label_counts.items())
        counts: dict[SchemaKey, int] = {}
        remaining = dict(source_counts)
        for i, source in enumerate(sources):
            if i == len(sources) - 1:
                # last source takes whatever each row still needs
                for (eval_mode, label), c in rows:
                    already = sum(
                        counts.get((s, eval_mode, label), 0) for s in sources[:-1]
                    )
                    counts[(source, eval_mode, label)] = c - already
                continue
            frac = source_counts[source] / total if total else 0.0
            floors = []
            for (eval_mode, label), c in rows:
                exact = c * frac
                floors.append([int(exact), exact - int(exact), (eval_mode, label), c])
            need = source_counts[source] - sum(f[0] for f in floors)
            # hand out +1 to the rows with the largest fractional remainder
            for f in sorted(floors, key=lambda f: -f[1])[:need]:
                f[0] += 1
            for base, _, (eval_mode, label), c in floors:
                if base > c:
                    raise ValueError("marginals admit no feasible joint allocation")
                counts[(source, eval_mode, label)] = base
        counts = {k: v for k, v in counts.items() if v > 0}
        schema = cls(counts=counts, criteria_mode=criteria_mode)
        if schema.source_marginals() != {s: n for s, n in source_counts.items() if n > 0}:
            raise ValueError("joint allocation failed to reproduce source marginals")
        return schema

    def to_dict(self) -> dict:
        return {
            "criteria_mode": self.criteria_mode,
            "cells": [
                {"source": s, "eval_mode": m, "label": l, "count": n}
                for (s, m, l), n in sorted(self.counts.items())
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DistributionSchema":
        return cls(
            counts={
                (c["source"], c["eval_mode"], c["label"]): c["count"] for c in d["cells"]
            },
            criteria_mode=d.get("criteria_mode", "single_criterion"),
        )


# Validation ----------------------------------------------------------------


def validate_sample(sample: ChartSample) -> list[str]:
    """Return every violated sample invariant; an empty list means ok."""
    violations: list[str] = []
    if sample.task_kind == "open_qa" and not sample.query:
        violations.append("open_qa requires query")
    path = sample.image.resolve_path()
    if path is not None and path.is_file():
        if sha256_hex(path.read_bytes()) != sample.image.sha256:
            violations.append("digest mismatch")
    if (
        sample.source == "pew"
        and sample.task_kind == "open_qa"
        and not sample.synthetic_query
    ):
        violations.append("pew open_qa queries must be flagged synthetic_query")
    return violations


# JSONL helpers --------------------------------------------------------------


def write_jsonl(path: str | Path, records: Iterable[Mapping[str, Any]]) -> int:
    """Write one JSON object per line; returns the number of lines."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
            n += 1
    return n


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_samples_jsonl(path: str | Path, samples: Iterable[ChartSample]) -> int:
    return write_jsonl(path, (s.to_dict() for s in samples))


def read_samples_jsonl(path: str | Path) -> list[ChartSample]:
    return [ChartSample.from_dict(d) for d in read_jsonl(path)]


@dataclass(frozen=True)
class JudgmentRecord:
    """One (raw judgment, parsed verdict, gold label) triple."""

    judgment: RawJudgment
    verdict: ParsedVerdict
    gold: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "judgment": self.judgment.to_dict(),
            "verdict": self.verdict.to_dict(),
            "gold": dict(self.gold),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "JudgmentRecord":
        return cls(
            judgment=RawJudgment.from_dict(d["judgment"]),
            verdict=ParsedVerdict.from_dict(d["verdict"]),
            gold=d.get("gold", {}),
        )


def write_judgment_records(path: str | Path, records: Iterable[JudgmentRecord]) -> int:
    return write_jsonl(path, (r.to_dict() for r in records))


def read_judgment_records(path: str | Path) -> list[JudgmentRecord]:
    return [JudgmentRecord.from_dict(d) for d in read_jsonl(path)]
