"""Render every judge-prompt variant from external template files.

Four judge templates (pairwise/pointwise x with/without reference) cover
both single- and multi-criteria prompting: the criteria list, reply-shape
contract and section layout are injected through ``{{slot}}`` placeholders.
Two more templates cover synthetic question generation and the
out-of-domain molecular captioning comparison. Rendering is pure:
identical inputs produce byte-identical text.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

from .datamodel import (
    CandidateResponse,
    ChartSample,
    ImageRef,
    JudgmentSpec,
    canonical_json,
    sha256_hex,
)

GENERATION_TEMPERATURE = 1.0
MAX_OUTPUT_TOKENS = 300

TEMPLATE_NAMES = (
    "pointwise_with_ref",
    "pointwise_without_ref",
    "pairwise_with_ref",
    "pairwise_without_ref",
    "question_gen",
    "ood_pairwise",
)

# What one judged artifact is called, per task kind.
UNITS = {"open_qa": "answer", "captioning": "summary", "instruction_following": "response"}
PLURALS = {"answer": "answers", "summary": "summaries", "response": "responses"}
TASK_CONTEXTS = {
    "open_qa": "a given question in the open-ended chart question answering task",
    "captioning": "the chart summarization task",
    "instruction_following": "the chart instruction-following task",
}
TASK_SHORT = {
    "open_qa": "the chart question-answering task",
    "captioning": "the chart summarization task",
    "instruction_following": "the chart instruction-following task",
}

CRITERION_DISPLAY = {
    "factual_correctness": "Factual Correctness",
    "informativeness": "Informativeness",
    "relevance": "Relevance",
    "multidimensional": (
        "Overall Quality (considering factual correctness, informativeness, and relevance)"
    ),
}
CRITERION_TYPE_NAME = {
    "factual_correctness": "factual correctness",
    "informativeness": "informativeness",
    "relevance": "relevance",
    "multidimensional": "overall quality",
}

_PLACEHOLDER = re.compile(r"\{\{(\w+)\}\}")


class PromptError(ValueError):
    """A prompt cannot be rendered from the given inputs."""


class MissingReference(PromptError):
    pass


class MissingQuery(PromptError):
    pass


class EmptySummary(PromptError):
    pass


class EmptyCaption(PromptError):
    pass


class TemplateError(PromptError):
    """The template itself is malformed or a placeholder went unfilled."""


@dataclass(frozen=True)
class RenderedPrompt:
    """A fully-filled instruction text plus its image attachments.

    ``slot_map`` records where each slot's content came from, for audit;
    ``generation_params`` carry the sampling settings every judge call
    must use.
    """

    text: str
    attachments: tuple[ImageRef, ...]
    slot_map: Mapping[str, str]
    generation_params: Mapping[str, Any] = field(
        default_factory=lambda: {
            "temperature": GENERATION_TEMPERATURE,
            "max_output_tokens": MAX_OUTPUT_TOKENS,
        }
    )
    sample_id: str | None = None
    spec: JudgmentSpec | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "attachments", tuple(self.attachments))
        object.__setattr__(self, "slot_map", dict(self.slot_map))
        object.__setattr__(self, "generation_params", dict(self.generation_params))

    @property
    def prompt_digest(self) -> str:
        payload = {
            "text": self.text,
            "attachments": [a.sha256 for a in self.attachments],
            "params": dict(self.generation_params),
        }
        return sha256_hex(canonical_json(payload).encode("utf-8"))


@dataclass(frozen=True)
class TemplateSet:
    """The six named templates, loaded once and shared read-only."""

    templates: Mapping[str, str]

    def __post_init__(self) -> None:
        missing = [n for n in TEMPLATE_NAMES if n not in self.templates]
        if missing:
            raise TemplateError(f"missing templates: {missing}")
        object.__setattr__(self, "templates", dict(self.templates))

    @classmethod
    def load(cls, directory: str | Path) -> "TemplateSet":
        d = Path(directory)
        return cls(
            templates={
                name: (d / f"{name}.txt").read_text(encoding="utf-8")
                for name in TEMPLATE_NAMES
            }
        )

    def fill(self, name: str, slots: Mapping[str, str]) -> str:
        template = self.templates[name]

        def sub(m: re.Match) -> str:
            key = m.group(1)
            if key not in slots:
                raise TemplateError(f"template {name!r}: unfilled placeholder {key!r}")
            return slots[key]

        return _PLACEHOLDER.sub(sub, template).rstrip()


_default_templates: TemplateSet | None = None


def default_templates() -> TemplateSet:
    global _default_templates
    if _default_templates is None:
        _default_templates = TemplateSet.load(resources.files("vljudge") / "templates")
    return _default_templates


def template_dir_digest(templates: TemplateSet | None = None) -> str:
    """Stable digest over the template texts, recorded in run manifests."""
    active = templates if templates is not None else default_templates()
    payload = canonical_json({name: active.templates[name] for name in TEMPLATE_NAMES})
    return sha256_hex(payload.encode("utf-8"))


# Slot builders ---------------------------------------------------------------


def _criteria_header(criteria: tuple[str, ...]) -> str:
    names = [CRITERION_DISPLAY.get(c, c.replace("_", " ").title()) for c in criteria]
    if len(names) == 1:
        return names[0]
    return ", ".join(names[:-1]) + " and " + names[-1]


def _type_clause(criteria: tuple[str, ...], unit: str) -> str:
    if len(criteria) < 2:
        return ""
    quoted = " or ".join(
        f"'{CRITERION_TYPE_NAME.get(c, c.replace('_', ' '))}'" for c in criteria
    )
    return (
        f", while the value for the 'Type' key will contain either {quoted},"
        f" depending on the type for which you assess the {unit}"
    )


def _sections_preamble(unit: str, has_query: bool, with_ref: bool, pairwise: bool,
                       task_short: str) -> str:
    generated = f"model-generated {PLURALS[unit] if pairwise else unit}"
    if has_query and with_ref:
        head = (
            f"you are first given the question, followed by the gold reference {unit}. "
            f"Afterward, you are given the {generated}."
        )
    elif has_query:
        head = f"you are first given the question. Afterward, you are given the {generated}."
    elif with_ref:
        head = (
            f"you are first given the gold reference {unit}. "
            f"Afterward, you are given the {generated}."
        )
    else:
        head = f"you are given the {generated}."
    return (
        f"In the following, {head} You are also provided with the chart image"
        f" as the context for {task_short}."
    )


def _tail_sections(parts: list[tuple[str, str]]) -> str:
    return "\n\n".join(f"[{label}]\n{content}" for label, content in parts)


def _check_sample(sample: ChartSample, spec: JudgmentSpec) -> str:
    try:
        unit = UNITS[sample.task_kind]
    except KeyError:
        raise PromptError(f"no judge template for task kind {sample.task_kind!r}")
    if spec.reference_mode == "with_reference" and not sample.gold_reference:
        raise MissingReference(f"sample {sample.id}: with_reference but no gold_reference")
    if sample.task_kind == "open_qa" and not sample.query:
        raise MissingQuery(f"sample {sample.id}: open_qa without query")
    return unit


# Renderers -------------------------------------------------------------------


def render_pointwise(
    sample: ChartSample,
    response: CandidateResponse,
    spec: JudgmentSpec,
    templates: TemplateSet | None = None,
) -> RenderedPrompt:
    if spec.eval_mode != "pointwise":
        raise PromptError(f"render_pointwise needs a pointwise spec, got {spec.eval_mode}")
    templates = templates or default_templates()
    unit = _check_sample(sample, spec)
    with_ref = spec.reference_mode == "with_reference"
    multi = spec.is_multi_criteria

    parts: list[tuple[str, str]] = []
    slot_map: dict[str, str] = {
        "criteria_list": "spec.criteria",
        "image": "sample.image",
        "model_answer": "response.text",
        "model_answer_model": response.model_id,
    }
    if sample.query:
        parts.append(("Question", sample.query))
        slot_map["question"] = "sample.query"
    if with_ref:
        parts.append((f"Gold Reference {unit.title()}", sample.gold_reference or ""))
        slot_map["gold_reference"] = "sample.gold_reference"
    parts.append((f"Model Generated {unit.title()}", response.text))

    name = "pointwise_with_ref" if with_ref else "pointwise_without_ref"
    text = templates.fill(
        name,
        {
            "criteria_list": _criteria_header(spec.criteria),
            "unit": unit,
            "task_context": TASK_CONTEXTS[sample.task_kind],
            "payload_shape": "an Array of JSON" if multi else "a JSON object",
            "key_list": (
                "(i) Score, (ii) Explanation, (iii) Type" if multi
                else "(i) Score, (ii) Explanation"
            ),
            "type_clause": _type_clause(spec.criteria, unit),
            "sections_preamble": _sections_preamble(
                unit, bool(sample.query), with_ref, False, TASK_SHORT[sample.task_kind]
            ),
            "tail_sections": _tail_sections(parts),
        },
    )
    return RenderedPrompt(
        text=text,
        attachments=(sample.image,),
        slot_map=slot_map,
        sample_id=sample.id,
        spec=spec,
    )


def render_pairwise(
    sample: ChartSample,
    response_a: CandidateResponse,
    response_b: CandidateResponse,
    spec: JudgmentSpec,
    templates: TemplateSet | None = None,
) -> RenderedPrompt:
    if spec.eval_mode != "pairwise":
        raise PromptError(f"render_pairwise needs a pairwise spec, got {spec.eval_mode}")
    templates = templates or default_templates()
    unit = _check_sample(sample, spec)
    with_ref = spec.reference_mode == "with_reference"
    multi = spec.is_multi_criteria

    if spec.order == "AB":
        first, second = response_a, response_b
        first_src, second_src = "response_a", "response_b"
    else:
        first, second = response_b, response_a
        first_src, second_src = "response_b", "response_a"

    parts: list[tuple[str, str]] = []
    slot_map: dict[str, str] = {
        "criteria_list": "spec.criteria",
        "image": "sample.image",
        "model_a_answer": first_src,
        "model_a_answer_model": first.model_id,
        "model_b_answer": second_src,
        "model_b_answer_model": second.model_id,
    }
    if sample.query:
        parts.append(("Question", sample.query))
        slot_map["question"] = "sample.query"
    if with_ref:
        parts.append((f"Gold Reference {unit.title()}", sample.gold_reference or ""))
        slot_map["gold_reference"] = "sample.gold_reference"
    parts.append((f"Model A Generated {unit.title()}", first.text))
    parts.append((f"Model B Generated {unit.title()}", second.text))

    name = "pairwise_with_ref" if with_ref else "pairwise_without_ref"
    text = templates.fill(
        name,
        {
            "criteria_list": _criteria_header(spec.criteria),
            "unit": unit,
            "unit_plural": PLURALS[unit],
            "task_context": TASK_CONTEXTS[sample.task_kind],
            "payload_shape": "an Array of JSON" if multi else "a JSON object",
            "key_list": (
                "(i) Model, (ii) Explanation, (iii) Type" if multi
                else "(i) Model, (ii) Explanation"
            ),
            "type_clause": _type_clause(spec.criteria, unit),
            "sections_preamble": _sections_preamble(
                unit, bool(sample.query), with_ref, True, TASK_SHORT[sample.task_kind]
            ),
            "tail_sections": _tail_sections(parts),
        },
    )
    return RenderedPrompt(
        text=text,
        attachments=(sample.image,),
        slot_map=slot_map,
        sample_id=sample.id,
        spec=spec,
    )


def render_question_gen(
    summary: str,
    image: ImageRef,
    templates: TemplateSet | None = None,
) -> RenderedPrompt:
    if not summary or not summary.strip():
        raise EmptySummary("question generation requires a non-empty summary")
    templates = templates or default_templates()
    text = templates.fill("question_gen", {"summary": summary})
    return RenderedPrompt(
        text=text,
        attachments=(image,),
        slot_map={"summary": "summary", "image": "image"},
    )


def render_ood_pairwise(
    caption_a: str,
    caption_b: str,
    image: ImageRef,
    order: str = "AB",
    templates: TemplateSet | None = None,
) -> RenderedPrompt:
    if not caption_a or not caption_a.strip():
        raise EmptyCaption("caption_a must be non-empty")
    if not caption_b or not caption_b.strip():
        raise EmptyCaption("caption_b must be non-empty")
    if order not in ("AB", "BA"):
        raise PromptError(f"order must be AB or BA, got {order!r}")
    templates = templates or default_templates()
    if order == "AB":
        first, second = caption_a, caption_b
        first_src, second_src = "caption_a", "caption_b"
    else:
        first, second = caption_b, caption_a
        first_src, second_src = "caption_b", "caption_a"
    text = templates.fill("ood_pairwise", {"caption_a": first, "caption_b": second})
    return RenderedPrompt(
        text=text,
        attachments=(image,),
        slot_map={
            "model_a_caption": first_src,
            "model_b_caption": second_src,
            "image": "image",
        },
    )
