"""Build distillation training sets from teacher judgments.

The pipeline has four stages: ingest raw teacher outputs into labeled
training candidates (unparseable verdicts are dropped and counted),
synthesize open-ended questions for pew chart summaries through the
question-generation prompt, sample candidates down to an exact
per-(source, eval-mode, label) distribution, and export the result as
chat-format training JSONL whose bytes are deterministic.
"""

from __future__ import annotations

import os
import random
import warnings
from collections import deque
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .datamodel import (
    CandidateResponse,
    ChartSample,
    DistributionSchema,
    JudgmentSpec,
    PAIRWISE_LABELS,
    POINTWISE_LABELS,
    SchemaKey,
    canonical_json,
    read_jsonl,
    sha256_hex,
)
from .judgeclient import JudgeClient, JudgmentFailure
from .promptforge import (
    RenderedPrompt,
    TemplateSet,
    render_pairwise,
    render_pointwise,
    render_question_gen,
)
from .verdictparse import (
    canonical_payload,
    extract_payload,
    normalize_preference_label,
)

# Stock distribution targets for the two dataset-building modes. The
# single-criterion targets are stated as marginals (joint cells are
# allocated by largest remainder); the multi-criteria targets are given
# directly as cells and total 2,826.
SINGLE_CRITERION_SOURCE_MARGINALS: dict[str, int] = {"statista": 6898, "pew": 2827}
SINGLE_CRITERION_LABEL_MARGINALS: dict[tuple[str, str], int] = {
    ("pointwise", "1"): 801,
    ("pointwise", "2"): 1000,
    ("pointwise", "3"): 1000,
    ("pointwise", "4"): 1000,
    ("pointwise", "5"): 1000,
    ("pairwise", "tie"): 2000,
    ("pairwise", "model_a"): 1500,
    ("pairwise", "model_b"): 1424,
}
MULTICRITERIA_CELLS: dict[SchemaKey, int] = {
    ("pew", "pointwise", "1"): 510,
    ("pew", "pointwise", "2"): 548,
    ("pew", "pointwise", "3"): 414,
    ("pew", "pointwise", "4"): 179,
    ("pew", "pointwise", "5"): 113,
    ("pew", "pairwise", "tie"): 268,
    ("pew", "pairwise", "model_a"): 568,
    ("pew", "pairwise", "model_b"): 226,
}


def stock_single_criterion_schema() -> DistributionSchema:
    return DistributionSchema.from_marginals(
        SINGLE_CRITERION_SOURCE_MARGINALS,
        SINGLE_CRITERION_LABEL_MARGINALS,
        criteria_mode="single_criterion",
    )


def stock_multicriteria_schema() -> DistributionSchema:
    return DistributionSchema(counts=dict(MULTICRITERIA_CELLS),
                              criteria_mode="multi_criteria")


class InsufficientPool(ValueError):
    """The candidate pool cannot fill every schema cell."""

    def __init__(self, deficits: Mapping[SchemaKey, int]):
        self.cells = dict(deficits)
        listed = ", ".join(f"{cell}: short by {n}"
                           for cell, n in sorted(self.cells.items()))
        super().__init__(f"pool cannot fill schema cells ({listed})")


class DecouplingViolation(UserWarning):
    """A teacher model id also appears in the evaluation-judge set."""


@dataclass(frozen=True)
class TrainingCandidate:
    """One labeled distillation example: prompt inputs plus teacher target."""

    sample: ChartSample
    responses: tuple[CandidateResponse, ...]
    spec: JudgmentSpec
    verdict_json: str
    rationale: str
    label: str

    def __post_init__(self) -> None:
        expected = 1 if self.spec.eval_mode == "pointwise" else 2
        if len(self.responses) != expected:
            raise ValueError(
                f"{self.spec.eval_mode} candidates need {expected} responses, "
                f"got {len(self.responses)}"
            )
        domain = POINTWISE_LABELS if self.spec.eval_mode == "pointwise" else PAIRWISE_LABELS
        if self.label not in domain:
            raise ValueError(f"label {self.label!r} invalid for {self.spec.eval_mode}")
        object.__setattr__(self, "responses", tuple(self.responses))

    @property
    def cell(self) -> SchemaKey:
        return (self.sample.source, self.spec.eval_mode, self.label)

    @property
    def teacher_model(self) -> str:
        return self.spec.judge_model

    @cached_property
    def digest(self) -> str:
        return sha256_hex(canonical_json(self.to_dict()).encode("utf-8"))

    def to_dict(self) -> dict:
        return {
            "sample": self.sample.to_dict(),
            "responses": [r.to_dict() for r in self.responses],
            "spec": self.spec.to_dict(),
            "verdict_json": self.verdict_json,
            "rationale": self.rationale,
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainingCandidate":
        return cls(
            sample=ChartSample.from_dict(d["sample"]),
            responses=tuple(CandidateResponse.from_dict(r) for r in d["responses"]),
            spec=JudgmentSpec.from_dict(d["spec"]),
            verdict_json=d["verdict_json"],
            rationale=d["rationale"],
            label=d["label"],
        )


@dataclass(frozen=True)
class IngestResult:
    candidates: tuple[TrainingCandidate, ...]
    dropped: int
    dropped_raw: tuple[str, ...]
    decoupling_violations: tuple[str, ...]


def ingest_teacher_judgments(
    records: Iterable[Mapping] | str | Path,
    eval_judge_ids: Iterable[str] = (),
) -> IngestResult:
    """Turn raw teacher-judgment records into labeled training candidates.

    Each input record carries the judged sample, the candidate responses
    (one for pointwise, two for pairwise), the judgment spec whose
    ``judge_model`` is the teacher id, and the teacher's raw reply text.
    Replies that fail parsing (or carry no usable label) are dropped and
    counted, with the raw text kept for audit. A teacher id that also
    appears in ``eval_judge_ids`` triggers a DecouplingViolation warning.
    """
    if isinstance(records, (str, Path)):
        records = read_jsonl(records)
    judge_ids = frozenset(eval_judge_ids)
    candidates: list[TrainingCandidate] = []
    dropped = 0
    dropped_raw: list[str] = []
    violations: list[str] = []
    for record in records:
        sample = ChartSample.from_dict(record["sample"])
        responses = tuple(CandidateResponse.from_dict(r) for r in record["responses"])
        spec = JudgmentSpec.from_dict(record["spec"])
        raw_text = record["raw_text"]
        verdict = extract_payload(raw_text, spec)
        labeled = _label_from_verdict(verdict, spec)
        if labeled is None:
            dropped += 1
            dropped_raw.append(raw_text)
            continue
        label, first_present = labeled
        teacher = spec.judge_model
        if teacher in judge_ids and teacher not in violations:
            violations.append(teacher)
            warnings.warn(
                DecouplingViolation(
                    f"teacher model {teacher!r} is also an evaluation judge; "
                    "training and evaluation stages should use distinct models"
                ),
                stacklevel=2,
            )
        candidates.append(TrainingCandidate(
            sample=sample,
            responses=responses,
            spec=spec,
            verdict_json=canonical_payload(verdict, spec),
            rationale=verdict.per_criterion[first_present].explanation,
            label=label,
        ))
    return IngestResult(
        candidates=tuple(candidates),
        dropped=dropped,
        dropped_raw=tuple(dropped_raw),
        decoupling_violations=tuple(violations),
    )


_SLOT_TO_LABEL = {"A": "model_a", "B": "model_b", "TIE": "tie"}


def _label_from_verdict(verdict, spec: JudgmentSpec) -> tuple[str, str] | None:
    """(training label, labeling criterion): the first spec criterion the
    verdict covers supplies the label; None when no usable label exists."""
    if verdict.failed:
        return None
    criterion = next((c for c in spec.criteria if c in verdict.per_criterion), None)
    if criterion is None:
        return None
    value = verdict.per_criterion[criterion]
    if spec.eval_mode == "pointwise":
        return str(value.score), criterion
    slot = normalize_preference_label(value.preference)
    if slot is None:
        return None
    return _SLOT_TO_LABEL[slot], criterion


def sample_to_schema(
    pool: Sequence[TrainingCandidate],
    schema: DistributionSchema,
    seed: int,
    downscale: bool = False,
) -> list[TrainingCandidate]:
    """Draw an exact-count dataset from the pool, deterministically.

    Every schema cell is filled with exactly its target count, sampled
    without replacement; within a cell the draw balances candidate
    criteria round-robin. Only candidates whose criteria mode matches the
    schema's are eligible, so single- and multi-criteria flavors never
    mix. Results depend only on (pool contents, schema, seed) — not on
    pool ordering. With ``downscale``, a short pool scales every cell by
    the largest feasible common ratio instead of failing.
    """
    groups: dict[SchemaKey, list[TrainingCandidate]] = {}
    for candidate in pool:
        if candidate.spec.criteria_mode != schema.criteria_mode:
            continue
        groups.setdefault(candidate.cell, []).append(candidate)

    targets = {cell: n for cell, n in schema.counts.items() if n > 0}
    deficits = {
        cell: n - len(groups.get(cell, ()))
        for cell, n in targets.items()
        if len(groups.get(cell, ())) < n
    }
    if deficits:
        if not downscale:
            raise InsufficientPool(deficits)
        ratio = min(len(groups.get(cell, ())) / n for cell, n in targets.items())
        targets = {cell: int(n * ratio) for cell, n in targets.items()}

    selected: list[TrainingCandidate] = []
    for cell in sorted(targets):
        count = targets[cell]
        if count == 0:
            continue
        rng = random.Random(f"{seed}|{cell[0]}|{cell[1]}|{cell[2]}")
        selected.extend(_balanced_pick(groups[cell], count, rng))
    return selected


def _balanced_pick(
    candidates: Sequence[TrainingCandidate], count: int, rng: random.Random
) -> list[TrainingCandidate]:
    by_criteria: dict[tuple[str, ...], list[TrainingCandidate]] = {}
    for candidate in candidates:
        by_criteria.setdefault(candidate.spec.criteria, []).append(candidate)
    queues: list[deque[TrainingCandidate]] = []
    for key in sorted(by_criteria):
        bucket = sorted(by_criteria[key], key=lambda c: c.digest)
        rng.shuffle(bucket)
        queues.append(deque(bucket))
    picked: list[TrainingCandidate] = []
    while len(picked) < count:
        advanced = False
        for queue in queues:
            if len(picked) >= count:
                break
            if queue:
                picked.append(queue.popleft())
                advanced = True
        if not advanced:
            raise InsufficientPool({})
    return picked


@dataclass(frozen=True)
class QuestionFailure:
    sample_id: str
    message: str
    status: int | None = None
    attempts: int | None = None


@dataclass(frozen=True)
class QuestionSynthesis:
    """Samples after question generation; failed items pass through unchanged."""

    samples: tuple[ChartSample, ...]
    failures: tuple[QuestionFailure, ...]


def synthesize_questions(
    samples: Sequence[ChartSample],
    client: JudgeClient,
    templates: TemplateSet | None = None,
) -> QuestionSynthesis:
    """Generate an open-ended question for each pew summary sample.

    Successful items come back as open_qa samples with the generated
    question (first non-empty line of the reply) and synthetic_query set.
    Per-item endpoint failures and empty generations are recorded; those
    samples pass through unchanged.
    """
    samples = list(samples)
    wrong_source = [s.id for s in samples if s.source != "pew"]
    if wrong_source:
        raise ValueError(
            f"questions are synthesized for the pew split only; "
            f"got other sources for: {wrong_source}"
        )
    missing_ref = [s.id for s in samples
                   if not (s.gold_reference and s.gold_reference.strip())]
    if missing_ref:
        raise ValueError(f"samples lack the gold summary needed for question "
                         f"generation: {missing_ref}")

    prompts = [
        replace(render_question_gen(s.gold_reference, s.image, templates),
                sample_id=s.id)
        for s in samples
    ]
    results = client.batch_evaluate(prompts)

    out: list[ChartSample] = []
    failures: list[QuestionFailure] = []
    for sample, result in zip(samples, results):
        if isinstance(result, JudgmentFailure):
            failures.append(QuestionFailure(sample.id, result.message,
                                            result.status, result.attempts))
            out.append(sample)
            continue
        question = _first_nonempty_line(result.raw_text)
        if not question:
            failures.append(QuestionFailure(sample.id,
                                            "generator returned empty text"))
            out.append(sample)
            continue
        out.append(sample.with_query(question))
    return QuestionSynthesis(samples=tuple(out), failures=tuple(failures))


def _first_nonempty_line(text: str) -> str:
    for line in text.splitlines():
        stripped = line.strip()
        if stripped:
            return stripped
    return ""


def render_candidate_prompt(
    candidate: TrainingCandidate, templates: TemplateSet | None = None
) -> RenderedPrompt:
    """The exact judge prompt a student model trains against."""
    if candidate.spec.eval_mode == "pointwise":
        return render_pointwise(candidate.sample, candidate.responses[0],
                                candidate.spec, templates)
    return render_pairwise(candidate.sample, candidate.responses[0],
                           candidate.responses[1], candidate.spec, templates)


def export_training_jsonl(
    dataset: Sequence[TrainingCandidate],
    path: str | Path,
    templates: TemplateSet | None = None,
) -> dict:
    """Write chat-format training records; returns {n_records, sha256}.

    Output bytes are deterministic: records are ordered by (sample id,
    candidate digest) regardless of input order, and serialization is
    canonical. The digest covers the exact file bytes.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    ordered = sorted(dataset, key=lambda c: (c.sample.id, c.digest))
    lines = []
    for candidate in ordered:
        prompt = render_candidate_prompt(candidate, templates)
        record = {
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": prompt.text},
                        {
                            "type": "image_ref",
                            "uri": candidate.sample.image.uri,
                            "sha256": candidate.sample.image.sha256,
                        },
                    ],
                },
                {"role": "assistant", "content": candidate.verdict_json},
            ],
            "meta": {
                "sample_id": candidate.sample.id,
                "source": candidate.sample.source,
                "task_kind": candidate.sample.task_kind,
                "chart_type": candidate.sample.chart_type,
                "eval_mode": candidate.spec.eval_mode,
                "reference_mode": candidate.spec.reference_mode,
                "criteria": list(candidate.spec.criteria),
                "criteria_mode": candidate.spec.criteria_mode,
                "label": candidate.label,
                "teacher_model": candidate.teacher_model,
            },
        }
        lines.append(canonical_json(record))
    payload = ("\n".join(lines) + "\n").encode("utf-8")
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.parent / f".{target.name}.{os.getpid()}.tmp"
    tmp.write_bytes(payload)
    os.replace(tmp, target)
    return {"n_records": len(lines), "sha256": sha256_hex(payload)}


def dataset_marginals(dataset: Sequence[TrainingCandidate]) -> dict:
    """Tabulate source, (eval_mode, label) and chart-type marginals."""
    sources: dict[str, int] = {}
    labels: dict[str, int] = {}
    chart_types: dict[str, int] = {}
    for candidate in dataset:
        sources[candidate.sample.source] = sources.get(candidate.sample.source, 0) + 1
        key = f"{candidate.spec.eval_mode}:{candidate.label}"
        labels[key] = labels.get(key, 0) + 1
        if candidate.sample.chart_type:
            chart_types[candidate.sample.chart_type] = (
                chart_types.get(candidate.sample.chart_type, 0) + 1
            )
    return {"source": sources, "label": labels, "chart_type": chart_types}
