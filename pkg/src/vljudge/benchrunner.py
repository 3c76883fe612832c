"""Config-driven benchmark orchestration and command-line interface.

A run configuration (YAML, with JSON accepted) names datasets, judge
endpoints, and an evaluation matrix. ``run_suite`` renders every prompt
in the matrix, evaluates through the caching client, parses verdicts,
scores metric cells, and writes a report bundle: manifest.json,
judgments.jsonl, and metrics.{json,csv,md}. Pairwise cells with bias
enabled run both candidate orders and report position bias. metrics.json
is byte-deterministic for a given config, datasets and judge behaviour;
only the manifest carries timing.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import yaml

from .databuilder import (
    InsufficientPool,
    export_training_jsonl,
    ingest_teacher_judgments,
    sample_to_schema,
    stock_multicriteria_schema,
    stock_single_criterion_schema,
)
from .datamodel import (
    CandidateResponse,
    ChartSample,
    DistributionSchema,
    EVAL_MODES,
    JudgmentSpec,
    KNOWN_CRITERIA,
    PAIRWISE_LABELS,
    RawJudgment,
    REFERENCE_MODES,
    canonical_json,
    read_jsonl,
    sha256_hex,
    validate_sample,
)
from .judgeclient import EndpointConfig, EndpointError, JudgeClient, JudgmentFailure, RetryPolicy
from .metrics import (
    EvalRecord,
    MetricReport,
    aggregate,
    cross_cell_average,
    reports_to_csv,
    reports_to_json,
)
from .promptforge import (
    PromptError,
    RenderedPrompt,
    render_pairwise,
    render_pointwise,
    template_dir_digest,
)
from .verdictparse import UnresolvableLabel, extract_payload, resolve_pairwise

REPORT_FORMATS = ("markdown", "csv", "json")
CRITERION_ORDER = ("factual_correctness", "informativeness", "relevance",
                   "multidimensional")
CRITERION_SHORT = {
    "factual_correctness": "FC",
    "informativeness": "I",
    "relevance": "Rel.",
    "multidimensional": "Multi.",
}

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_ENDPOINT = 4
ENDPOINT_FAILURE_THRESHOLD = 0.10


class ConfigError(Exception):
    """The run configuration is invalid; ``path`` points at the key."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class DatasetError(Exception):
    """A referenced dataset file is missing or malformed."""


# Configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    name: str
    path: Path
    reference_judge: str | None = None


@dataclass(frozen=True)
class JudgeConfig:
    name: str
    endpoint: EndpointConfig


@dataclass(frozen=True)
class RunConfig:
    run_name: str
    datasets: tuple[DatasetConfig, ...]
    judges: tuple[JudgeConfig, ...]
    eval_modes: tuple[str, ...]
    reference_modes: tuple[str, ...]
    criteria: tuple[str, ...]
    multi_criteria: bool
    bias: bool
    output_dir: Path
    cache_dir: Path

    def criteria_sets(self) -> list[tuple[str, ...]]:
        if self.multi_criteria:
            return [self.criteria]
        return [(criterion,) for criterion in self.criteria]


def load_config(path: str | Path) -> dict:
    target = Path(path)
    if not target.is_file():
        raise ConfigError(f"config file not found: {target}")
    text = target.read_text(encoding="utf-8")
    try:
        if target.suffix == ".json":
            data = json.loads(text)
        else:
            data = yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"config does not parse: {exc}") from exc
    if not isinstance(data, Mapping):
        raise ConfigError("config root must be a mapping")
    return dict(data)


def _expect(mapping: Mapping, key: str, kind: type, path: str, default=None,
            required: bool = True):
    if key not in mapping:
        if required:
            raise ConfigError("required key is missing", f"{path}.{key}" if path else key)
        return default
    value = mapping[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or (kind is not bool and isinstance(value, bool)):
        raise ConfigError(f"expected {kind.__name__}, got {type(value).__name__}",
                          f"{path}.{key}" if path else key)
    return value


def _judge_config(entry: Any, index: int, cache_dir: Path) -> JudgeConfig:
    path = f"judges[{index}]"
    if not isinstance(entry, Mapping):
        raise ConfigError("judge entry must be a mapping", path)
    name = _expect(entry, "name", str, path)
    base_url = _expect(entry, "base_url", str, path)
    if not base_url.startswith(("http://", "https://")):
        raise ConfigError("base_url must start with http:// or https://",
                          f"{path}.base_url")
    retry_raw = entry.get("retry", {})
    if not isinstance(retry_raw, Mapping):
        raise ConfigError("retry must be a mapping", f"{path}.retry")
    retry = RetryPolicy(
        max_attempts=_expect(retry_raw, "max_attempts", int, f"{path}.retry",
                             default=3, required=False),
        backoff_base_s=_expect(retry_raw, "backoff_base_s", float, f"{path}.retry",
                               default=1.0, required=False),
        jitter=_expect(retry_raw, "jitter", float, f"{path}.retry",
                       default=0.1, required=False),
    )
    rpm = entry.get("requests_per_minute")
    if rpm is not None and (isinstance(rpm, bool) or not isinstance(rpm, (int, float))):
        raise ConfigError("requests_per_minute must be a number",
                          f"{path}.requests_per_minute")
    try:
        endpoint = EndpointConfig(
            base_url=base_url,
            model=_expect(entry, "model", str, path, default=name, required=False),
            auth_token_env=_expect(entry, "auth_token_env", str, path,
                                   default=None, required=False),
            max_concurrency=_expect(entry, "max_concurrency", int, path,
                                    default=4, required=False),
            requests_per_minute=rpm,
            retry=retry,
            timeout_s=_expect(entry, "timeout_s", float, path,
                              default=120.0, required=False),
            cache_dir=str(cache_dir),
        )
    except ValueError as exc:
        raise ConfigError(str(exc), path) from exc
    return JudgeConfig(name=name, endpoint=endpoint)


def validate_config(raw: Mapping, base_dir: Path) -> RunConfig:
    """Normalize and validate a parsed config; raises ConfigError."""
    run_name = _expect(raw, "run_name", str, "", default="run", required=False)

    datasets_raw = _expect(raw, "datasets", list, "")
    if not datasets_raw:
        raise ConfigError("at least one dataset is required", "datasets")
    datasets = []
    seen = set()
    for i, entry in enumerate(datasets_raw):
        path = f"datasets[{i}]"
        if not isinstance(entry, Mapping):
            raise ConfigError("dataset entry must be a mapping", path)
        name = _expect(entry, "name", str, path)
        if name in seen:
            raise ConfigError(f"duplicate dataset name {name!r}", f"{path}.name")
        seen.add(name)
        file_path = base_dir / _expect(entry, "path", str, path)
        datasets.append(DatasetConfig(
            name=name,
            path=file_path,
            reference_judge=_expect(entry, "reference_judge", str, path,
                                    default=None, required=False),
        ))

    output_raw = _expect(raw, "output", dict, "")
    output_dir = base_dir / _expect(output_raw, "dir", str, "output")
    cache_dir = base_dir / raw["cache_dir"] if isinstance(raw.get("cache_dir"), str) \
        else output_dir / "cache"

    judges_raw = _expect(raw, "judges", list, "")
    if not judges_raw:
        raise ConfigError("at least one judge is required", "judges")
    judges = []
    seen = set()
    for i, entry in enumerate(judges_raw):
        judge = _judge_config(entry, i, cache_dir)
        if judge.name in seen:
            raise ConfigError(f"duplicate judge name {judge.name!r}",
                              f"judges[{i}].name")
        seen.add(judge.name)
        judges.append(judge)

    matrix = _expect(raw, "matrix", dict, "")
    eval_modes = _expect(matrix, "eval_modes", list, "matrix")
    for i, mode in enumerate(eval_modes):
        if mode not in EVAL_MODES:
            raise ConfigError(f"unknown eval mode {mode!r}",
                              f"matrix.eval_modes[{i}]")
    if not eval_modes:
        raise ConfigError("at least one eval mode is required", "matrix.eval_modes")
    reference_modes = _expect(matrix, "reference_modes", list, "matrix",
                              default=["with_reference"], required=False)
    for i, mode in enumerate(reference_modes):
        if mode not in REFERENCE_MODES:
            raise ConfigError(f"unknown reference mode {mode!r}",
                              f"matrix.reference_modes[{i}]")
    if not reference_modes:
        raise ConfigError("at least one reference mode is required",
                          "matrix.reference_modes")
    criteria = _expect(matrix, "criteria", list, "matrix")
    for i, criterion in enumerate(criteria):
        if criterion not in KNOWN_CRITERIA:
            raise ConfigError(f"unknown criterion {criterion!r}",
                              f"matrix.criteria[{i}]")
    if not criteria:
        raise ConfigError("at least one criterion is required", "matrix.criteria")
    if len(set(criteria)) != len(criteria):
        raise ConfigError("criteria must be unique", "matrix.criteria")
    multi = _expect(matrix, "multi_criteria", bool, "matrix",
                    default=False, required=False)
    if multi and len(criteria) < 2:
        raise ConfigError("multi_criteria requires at least two criteria",
                          "matrix.multi_criteria")
    bias = _expect(matrix, "bias", bool, "matrix", default=False, required=False)

    return RunConfig(
        run_name=run_name,
        datasets=tuple(datasets),
        judges=tuple(judges),
        eval_modes=tuple(eval_modes),
        reference_modes=tuple(reference_modes),
        criteria=tuple(criteria),
        multi_criteria=multi,
        bias=bias,
        output_dir=output_dir,
        cache_dir=cache_dir,
    )


# Dataset loading -------------------------------------------------------------


@dataclass(frozen=True)
class EvalItem:
    """One evaluation unit: a sample, its candidate responses, and gold."""

    sample: ChartSample
    responses: tuple[CandidateResponse, ...]
    gold_preferences: Mapping[str, str] = field(default_factory=dict)
    gold_scores: Mapping[tuple[str, str], int] = field(default_factory=dict)

    def preference_for(self, criterion: str) -> str | None:
        return self.gold_preferences.get(criterion,
                                         self.gold_preferences.get("*"))

    def score_for(self, model_id: str, criterion: str) -> int | None:
        return self.gold_scores.get((model_id, criterion),
                                    self.gold_scores.get((model_id, "*")))


def _normalize_gold(gold: Mapping, where: str) -> tuple[dict, dict]:
    preferences: dict[str, str] = {}
    scores: dict[tuple[str, str], int] = {}
    raw_pref = gold.get("preference")
    if isinstance(raw_pref, str):
        preferences["*"] = raw_pref
    elif isinstance(raw_pref, Mapping):
        for criterion, label in raw_pref.items():
            preferences[str(criterion)] = label
    elif raw_pref is not None:
        raise DatasetError(f"{where}: gold.preference must be a label or a "
                           "criterion-to-label mapping")
    for label in preferences.values():
        if label not in PAIRWISE_LABELS:
            raise DatasetError(f"{where}: gold preference {label!r} must be one "
                               f"of {sorted(PAIRWISE_LABELS)}")
    raw_scores = gold.get("scores", {})
    if not isinstance(raw_scores, Mapping):
        raise DatasetError(f"{where}: gold.scores must be a mapping")
    for model_id, value in raw_scores.items():
        if isinstance(value, Mapping):
            pairs: Iterable[tuple[str, Any]] = value.items()
        else:
            pairs = [("*", value)]
        for criterion, score in pairs:
            if not isinstance(score, int) or isinstance(score, bool) \
                    or not 1 <= score <= 5:
                raise DatasetError(f"{where}: gold score for {model_id!r} must "
                                   f"be an integer in 1..5, got {score!r}")
            scores[(str(model_id), str(criterion))] = score
    return preferences, scores


def load_eval_items(
    config: DatasetConfig,
    *,
    need_pairwise: bool,
    need_pointwise: bool,
    need_reference: bool,
    criteria: Sequence[str],
) -> list[EvalItem]:
    """Read and validate one dataset file against the configured matrix."""
    if not config.path.is_file():
        raise DatasetError(f"dataset {config.name!r}: file not found: {config.path}")
    items: list[EvalItem] = []
    try:
        rows = list(read_jsonl(config.path))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"dataset {config.name!r}: invalid JSON: {exc}") from exc
    if not rows:
        raise DatasetError(f"dataset {config.name!r}: file is empty")
    for i, row in enumerate(rows):
        where = f"dataset {config.name!r} item {i}"
        try:
            sample = ChartSample.from_dict(row["sample"])
            responses = tuple(CandidateResponse.from_dict(r)
                              for r in row.get("responses", []))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{where}: {exc}") from exc
        issues = validate_sample(sample)
        if issues:
            raise DatasetError(f"{where} ({sample.id}): {'; '.join(issues)}")
        if not responses:
            raise DatasetError(f"{where} ({sample.id}): needs at least one response")
        if need_pairwise and len(responses) < 2:
            raise DatasetError(f"{where} ({sample.id}): pairwise evaluation needs "
                               "two responses")
        if need_reference and not (sample.gold_reference
                                   and sample.gold_reference.strip()):
            raise DatasetError(f"{where} ({sample.id}): with_reference evaluation "
                               "needs a gold reference")
        gold = row.get("gold", {})
        if not isinstance(gold, Mapping):
            raise DatasetError(f"{where} ({sample.id}): gold must be a mapping")
        preferences, scores = _normalize_gold(gold, f"{where} ({sample.id})")
        item = EvalItem(sample=sample, responses=responses,
                        gold_preferences=preferences, gold_scores=scores)
        for criterion in criteria:
            if need_pairwise and item.preference_for(criterion) is None:
                raise DatasetError(f"{where} ({sample.id}): missing gold preference "
                                   f"for criterion {criterion!r}")
            if need_pointwise:
                for response in responses:
                    if item.score_for(response.model_id, criterion) is None:
                        raise DatasetError(
                            f"{where} ({sample.id}): missing gold score for "
                            f"model {response.model_id!r}, criterion {criterion!r}")
        items.append(item)
    return items


# Suite execution -------------------------------------------------------------


@dataclass(frozen=True)
class _Planned:
    prompt: RenderedPrompt
    item: EvalItem
    judged: CandidateResponse | None  # set for pointwise prompts


@dataclass(frozen=True)
class ReportBundle:
    output_dir: Path
    reports: tuple[MetricReport, ...]
    average: Mapping
    manifest: Mapping
    endpoint_failure_rate: float


class _RunState:
    def __init__(self) -> None:
        self.records: list[EvalRecord] = []
        self.ba_records: list[EvalRecord] = []
        self.archive: list[dict] = []
        self.prompts_pointwise = 0
        self.prompts_pairwise = 0
        self.prompts_bias = 0
        self.judgments = 0
        self.cache_hits = 0
        self.endpoint_failures = 0


def _build_prompts(items: Sequence[EvalItem], spec: JudgmentSpec) -> list[_Planned]:
    planned: list[_Planned] = []
    try:
        for item in items:
            if spec.eval_mode == "pointwise":
                for response in item.responses:
                    prompt = render_pointwise(item.sample, response, spec)
                    prompt = dataclasses.replace(
                        prompt, sample_id=f"{item.sample.id}::{response.model_id}")
                    planned.append(_Planned(prompt, item, response))
            else:
                prompt = render_pairwise(item.sample, item.responses[0],
                                         item.responses[1], spec)
                planned.append(_Planned(prompt, item, None))
    except PromptError as exc:
        raise DatasetError(f"cannot render prompt: {exc}") from exc
    return planned


def _resolved_preferences(verdict, slot_map: Mapping[str, str]) -> dict[str, str]:
    """Per-criterion underlying-model preferences; unresolvable ones omitted."""
    resolved: dict[str, str] = {}
    for criterion, value in verdict.per_criterion.items():
        single = dataclasses.replace(verdict, per_criterion={criterion: value})
        try:
            resolved.update(resolve_pairwise(single, slot_map))
        except (UnresolvableLabel, ValueError):
            continue
    return resolved


def _consume(
    state: _RunState,
    planned: Sequence[_Planned],
    results: Sequence[RawJudgment | JudgmentFailure],
    spec: JudgmentSpec,
    dataset: str,
    judge_name: str,
    into: list[EvalRecord],
) -> None:
    for plan, result in zip(planned, results):
        item = plan.item
        state.judgments += 1
        common = dict(
            judge_model=judge_name,
            dataset=dataset,
            eval_mode=spec.eval_mode,
            reference_mode=spec.reference_mode,
            criteria_mode=spec.criteria_mode,
            task_kind=item.sample.task_kind,
        )
        if spec.eval_mode == "pairwise":
            common["length_a"] = item.responses[0].char_length
            common["length_b"] = item.responses[1].char_length

        if isinstance(result, JudgmentFailure):
            state.endpoint_failures += 1
            state.archive.append({
                "sample_id": result.sample_id,
                "order": spec.order,
                "criteria": list(spec.criteria),
                "dataset": dataset,
                "judge": judge_name,
                "endpoint_error": {"message": result.message,
                                   "status": result.status,
                                   "attempts": result.attempts},
            })
            for criterion in spec.criteria:
                into.append(EvalRecord(
                    sample_id=result.sample_id, criterion=criterion,
                    adherence="failed",
                    gold_preference=(item.preference_for(criterion)
                                     if spec.eval_mode == "pairwise" else None),
                    gold_score=(item.score_for(plan.judged.model_id, criterion)
                                if plan.judged is not None else None),
                    **common,
                ))
            continue

        state.cache_hits += int(result.retrieved_from_cache)
        verdict = extract_payload(result.raw_text, spec)
        state.archive.append({
            **result.to_dict(),
            "order": spec.order,
            "dataset": dataset,
            "judge": judge_name,
            "adherence": verdict.adherence,
        })
        preferences = (_resolved_preferences(verdict, plan.prompt.slot_map)
                       if spec.eval_mode == "pairwise" and not verdict.failed
                       else {})
        for criterion in spec.criteria:
            value = verdict.per_criterion.get(criterion)
            adherence = verdict.adherence
            predicted_score = None
            predicted_preference = None
            if spec.eval_mode == "pointwise":
                gold_score = (item.score_for(plan.judged.model_id, criterion)
                              if plan.judged is not None else None)
                gold_preference = None
                if adherence != "failed" and value is not None:
                    predicted_score = value.score
            else:
                gold_score = None
                gold_preference = item.preference_for(criterion)
                if adherence != "failed":
                    predicted_preference = preferences.get(criterion)
            into.append(EvalRecord(
                sample_id=result.sample_id,
                criterion=criterion,
                adherence=adherence,
                predicted_preference=predicted_preference,
                predicted_score=predicted_score,
                gold_preference=gold_preference,
                gold_score=gold_score,
                **common,
            ))


def run_suite(config_path: str | Path, output_dir: str | Path | None = None) -> ReportBundle:
    """Execute the configured evaluation matrix and write the report bundle."""
    config_path = Path(config_path)
    raw = load_config(config_path)
    config = validate_config(raw, config_path.parent)
    out_dir = Path(output_dir) if output_dir is not None else config.output_dir
    started = time.time()
    started_at = datetime.now(timezone.utc).isoformat()

    need_pairwise = "pairwise" in config.eval_modes
    need_pointwise = "pointwise" in config.eval_modes
    need_reference = "with_reference" in config.reference_modes
    loaded: list[tuple[DatasetConfig, list[EvalItem]]] = []
    dataset_digests: dict[str, str] = {}
    for ds in config.datasets:
        items = load_eval_items(ds, need_pairwise=need_pairwise,
                                need_pointwise=need_pointwise,
                                need_reference=need_reference,
                                criteria=config.criteria)
        loaded.append((ds, items))
        dataset_digests[ds.name] = sha256_hex(ds.path.read_bytes())

    state = _RunState()
    for judge in config.judges:
        client = JudgeClient(judge.endpoint)
        for ds, items in loaded:
            for eval_mode in config.eval_modes:
                for reference_mode in config.reference_modes:
                    for criteria in config.criteria_sets():
                        spec = JudgmentSpec(
                            eval_mode=eval_mode,
                            reference_mode=reference_mode,
                            criteria=criteria,
                            judge_model=judge.name,
                            order="AB",
                        )
                        planned = _build_prompts(items, spec)
                        if eval_mode == "pointwise":
                            state.prompts_pointwise += len(planned)
                        else:
                            state.prompts_pairwise += len(planned)
                        results = client.batch_evaluate([p.prompt for p in planned])
                        _consume(state, planned, results, spec, ds.name,
                                 judge.name, state.records)
                        if eval_mode == "pairwise" and config.bias:
                            spec_ba = dataclasses.replace(spec, order="BA")
                            planned_ba = _build_prompts(items, spec_ba)
                            state.prompts_bias += len(planned_ba)
                            results_ba = client.batch_evaluate(
                                [p.prompt for p in planned_ba])
                            _consume(state, planned_ba, results_ba, spec_ba,
                                     ds.name, judge.name, state.ba_records)

    reports = aggregate(state.records, state.ba_records)
    average = cross_cell_average(reports)
    failure_rate = (state.endpoint_failures / state.judgments
                    if state.judgments else 0.0)

    config_digest = sha256_hex(config_path.read_bytes())
    identity = {
        "config_digest": config_digest,
        "dataset_digests": dataset_digests,
        "template_digest": template_dir_digest(),
    }
    manifest = {
        "run_name": config.run_name,
        **identity,
        "manifest_digest": sha256_hex(canonical_json(identity).encode("utf-8")),
        "judges": [j.name for j in config.judges],
        "datasets": {ds.name: {"items": len(items),
                               "reference_judge": ds.reference_judge}
                     for ds, items in loaded},
        "matrix": {
            "eval_modes": list(config.eval_modes),
            "reference_modes": list(config.reference_modes),
            "criteria": list(config.criteria),
            "multi_criteria": config.multi_criteria,
            "bias": config.bias,
        },
        "counts": {
            "prompts_pointwise": state.prompts_pointwise,
            "prompts_pairwise": state.prompts_pairwise,
            "prompts_bias": state.prompts_bias,
            "judgments": state.judgments,
            "cache_hits": state.cache_hits,
            "endpoint_failures": state.endpoint_failures,
        },
        "cache_hit_rate": (state.cache_hits / state.judgments
                           if state.judgments else 0.0),
        "endpoint_failure_rate": failure_rate,
        "started_at": started_at,
        "wall_time_s": time.time() - started,
    }

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(
        reports_to_json(reports, average), encoding="utf-8")
    (out_dir / "metrics.csv").write_text(reports_to_csv(reports), encoding="utf-8")
    (out_dir / "metrics.md").write_text(
        render_report(reports, "markdown", average), encoding="utf-8")
    with open(out_dir / "judgments.jsonl", "w", encoding="utf-8") as fh:
        for row in state.archive:
            fh.write(canonical_json(row) + "\n")
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")

    return ReportBundle(
        output_dir=out_dir,
        reports=tuple(reports),
        average=average,
        manifest=manifest,
        endpoint_failure_rate=failure_rate,
    )


# Report rendering ------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return "—"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def _row_average(values: Sequence[float | None]) -> float | None:
    present = [v for v in values if v is not None]
    return sum(present) / len(present) if present else None


def render_report(reports: Sequence[MetricReport], fmt: str,
                  average: Mapping | None = None) -> str:
    """Render metric cells as markdown, CSV or JSON."""
    if fmt == "json":
        return reports_to_json(reports, average)
    if fmt == "csv":
        return reports_to_csv(reports)
    if fmt != "markdown":
        raise ValueError(f"unknown report format {fmt!r}; "
                         f"expected one of {REPORT_FORMATS}")

    groups: dict[tuple[str, str, str, str], list[MetricReport]] = {}
    for report in reports:
        key = (report.judge_model, report.dataset, report.reference_mode,
               report.criteria_mode)
        groups.setdefault(key, []).append(report)

    lines = ["# Evaluation report", ""]
    for key in sorted(groups):
        judge, dataset, reference_mode, criteria_mode = key
        cells = groups[key]
        criteria = sorted({c.criteria[0] for c in cells if c.criteria},
                          key=lambda c: (CRITERION_ORDER.index(c)
                                         if c in CRITERION_ORDER else 99, c))
        by_cell = {(c.eval_mode, c.criteria[0]): c for c in cells if c.criteria}
        headers = [CRITERION_SHORT.get(c, c) for c in criteria]
        lines.append(f"## judge={judge} dataset={dataset} "
                     f"reference={reference_mode} criteria={criteria_mode}")
        lines.append("")
        lines.append("| Metric | " + " | ".join(headers) + " | Avg. |")
        lines.append("|" + " --- |" * (len(headers) + 2))

        metric_rows = [
            ("Judgment accuracy (pairwise)", "pairwise", "judgment_accuracy"),
            ("Error distance (pointwise)", "pointwise", "error_distance"),
            ("Spearman rho (pointwise)", "pointwise", "spearman_rho"),
            ("Position bias (pairwise)", "pairwise", "position_bias_rate"),
            ("Length bias (pairwise)", "pairwise", "length_bias_rate"),
            ("Instruction following (pairwise)", "pairwise",
             "instruction_following_accuracy"),
            ("Instruction following (pointwise)", "pointwise",
             "instruction_following_accuracy"),
            ("Format adherence (pairwise)", "pairwise", "format_adherence_rate"),
            ("Format adherence (pointwise)", "pointwise", "format_adherence_rate"),
        ]
        for label, mode, attr in metric_rows:
            values = [getattr(by_cell[(mode, c)], attr)
                      if (mode, c) in by_cell else None for c in criteria]
            if all(v is None for v in values):
                continue
            row = [ _fmt(v) for v in values ]
            lines.append(f"| {label} | " + " | ".join(row)
                         + f" | {_fmt(_row_average(values))} |")
        adherence_values = [c.format_adherence_rate for c in cells
                            if c.format_adherence_rate is not None]
        if adherence_values:
            overall = sum(adherence_values) / len(adherence_values)
            lines.append("")
            lines.append(f"**Format following (overall avg.): {overall:.4f}**")
        lines.append("")

    if average:
        lines.append("## Cross-cell averages")
        lines.append("")
        for name in sorted(average):
            if name == "n_cells":
                continue
            lines.append(f"- {name}: {_fmt(average[name])}")
        lines.append(f"- cells: {average.get('n_cells', len(reports))}")
        lines.append("")
    return "\n".join(lines)


def load_reports(path: str | Path) -> tuple[list[MetricReport], dict]:
    """Read metrics.json (or a bundle directory) back into MetricReports."""
    target = Path(path)
    if target.is_dir():
        target = target / "metrics.json"
    if not target.is_file():
        raise FileNotFoundError(f"no metrics.json at {target}")
    payload = json.loads(target.read_text(encoding="utf-8"))
    reports = [MetricReport.from_dict(cell) for cell in payload.get("cells", [])]
    return reports, payload.get("average", {})


# Dataset building ------------------------------------------------------------


def build_dataset(config_path: str | Path) -> dict:
    """Run ingest -> schema sampling -> export from a build config."""
    config_path = Path(config_path)
    raw = load_config(config_path)
    base = config_path.parent
    pool_path = base / _expect(raw, "pool", str, "")
    output_path = base / _expect(raw, "output", str, "")
    seed = _expect(raw, "seed", int, "", default=0, required=False)
    downscale = _expect(raw, "downscale", bool, "", default=False, required=False)
    judge_ids = raw.get("eval_judge_ids", [])
    if not isinstance(judge_ids, list):
        raise ConfigError("expected list", "eval_judge_ids")

    schema_value = raw.get("schema", "single_criterion")
    if schema_value == "single_criterion":
        schema = stock_single_criterion_schema()
    elif schema_value == "multi_criteria":
        schema = stock_multicriteria_schema()
    elif isinstance(schema_value, list):
        counts = {}
        for i, cell in enumerate(schema_value):
            if not isinstance(cell, Mapping):
                raise ConfigError("schema cell must be a mapping", f"schema[{i}]")
            counts[(
                _expect(cell, "source", str, f"schema[{i}]"),
                _expect(cell, "eval_mode", str, f"schema[{i}]"),
                str(cell.get("label", "")),
            )] = _expect(cell, "count", int, f"schema[{i}]")
        mode = raw.get("criteria_mode", "single_criterion")
        try:
            schema = DistributionSchema(counts=counts, criteria_mode=mode)
        except ValueError as exc:
            raise ConfigError(str(exc), "schema") from exc
    else:
        raise ConfigError("schema must be 'single_criterion', 'multi_criteria' "
                          "or a list of cells", "schema")

    if not pool_path.is_file():
        raise DatasetError(f"pool file not found: {pool_path}")
    ingest = ingest_teacher_judgments(pool_path, eval_judge_ids=judge_ids)
    try:
        dataset = sample_to_schema(list(ingest.candidates), schema, seed=seed,
                                   downscale=downscale)
    except InsufficientPool as exc:
        raise DatasetError(str(exc)) from exc
    summary = export_training_jsonl(dataset, output_path)
    return {
        **summary,
        "path": str(output_path),
        "pool_candidates": len(ingest.candidates),
        "dropped_teacher_records": ingest.dropped,
        "decoupling_violations": list(ingest.decoupling_violations),
    }


# CLI -------------------------------------------------------------------------


def _cmd_run(args) -> int:
    try:
        bundle = run_suite(args.config, args.output_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    counts = bundle.manifest["counts"]
    print(f"run complete: {len(bundle.reports)} metric cells -> {bundle.output_dir}")
    print(f"judgments={counts['judgments']} cache_hits={counts['cache_hits']} "
          f"endpoint_failures={counts['endpoint_failures']}")
    if bundle.endpoint_failure_rate > ENDPOINT_FAILURE_THRESHOLD:
        print(f"endpoint failure rate {bundle.endpoint_failure_rate:.1%} exceeds "
              f"{ENDPOINT_FAILURE_THRESHOLD:.0%}", file=sys.stderr)
        return EXIT_ENDPOINT
    return EXIT_OK


def _cmd_report(args) -> int:
    try:
        reports, average = load_reports(args.bundle)
    except (FileNotFoundError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"cannot load bundle: {exc}", file=sys.stderr)
        return EXIT_DATASET
    print(render_report(reports, args.format, average))
    return EXIT_OK


def _cmd_build_dataset(args) -> int:
    try:
        summary = build_dataset(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_bench(args) -> int:
    endpoint = EndpointConfig(
        base_url=args.endpoint,
        model=args.model,
        auth_token_env=args.auth_token_env,
        retry=RetryPolicy(max_attempts=args.max_attempts),
        timeout_s=args.timeout,
    )
    client = JudgeClient(endpoint)
    prompt = RenderedPrompt(
        text=args.prompt, attachments=(), slot_map={},
        generation_params={"temperature": 1.0, "max_output_tokens": args.max_tokens},
    )
    try:
        report = client.probe_throughput(prompt, n_runs=args.runs)
    except EndpointError as exc:
        print(f"endpoint error: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    estimated = " (token counts estimated)" if report["usage_estimated"] else ""
    print(f"tokens_per_sec={report['tokens_per_sec']:.2f} "
          f"ms_per_token={report['ms_per_token']:.2f} "
          f"runs={args.runs}{estimated}")
    return EXIT_OK


def _cmd_parse(args) -> int:
    path = Path(args.raw)
    if not path.is_file():
        print(f"no such file: {path}", file=sys.stderr)
        return EXIT_DATASET
    totals = {"strict": 0, "repaired": 0, "failed": 0}
    for row in read_jsonl(path):
        judgment = RawJudgment.from_dict(row)
        if judgment.spec is None:
            print(f"record {judgment.sample_id!r} carries no judgment spec",
                  file=sys.stderr)
            return EXIT_DATASET
        verdict = extract_payload(judgment.raw_text, judgment.spec)
        totals[verdict.adherence] += 1
        out = {
            "sample_id": judgment.sample_id,
            "adherence": verdict.adherence,
            "repair_trace": list(verdict.repair_trace),
            "verdict": {
                criterion: dataclasses.asdict(value)
                for criterion, value in verdict.per_criterion.items()
            },
        }
        print(canonical_json(out))
    total = sum(totals.values())
    print(f"parsed {total} records: {totals['strict']} strict, "
          f"{totals['repaired']} repaired, {totals['failed']} failed",
          file=sys.stderr)
    return EXIT_OK


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vljudge",
        description="Evaluate vision-language judges over chart tasks and "
                    "build distillation datasets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute the evaluation matrix of a config")
    p_run.add_argument("config")
    p_run.add_argument("--output-dir", default=None,
                       help="override the config's output directory")
    p_run.set_defaults(func=_cmd_run)

    p_report = sub.add_parser("report", help="re-render a run's metrics")
    p_report.add_argument("bundle", help="run directory or metrics.json path")
    p_report.add_argument("--format", choices=REPORT_FORMATS, default="markdown")
    p_report.set_defaults(func=_cmd_report)

    p_build = sub.add_parser("build-dataset",
                             help="build a training set from teacher judgments")
    p_build.add_argument("config")
    p_build.set_defaults(func=_cmd_build_dataset)

    p_bench = sub.add_parser("bench", help="measure endpoint throughput")
    p_bench.add_argument("endpoint", help="base URL of the inference endpoint")
    p_bench.add_argument("--model", default="default")
    p_bench.add_argument("--runs", type=int, default=3)
    p_bench.add_argument("--prompt", default="Describe the trend in one sentence.")
    p_bench.add_argument("--max-tokens", type=int, default=300)
    p_bench.add_argument("--timeout", type=float, default=120.0)
    p_bench.add_argument("--max-attempts", type=int, default=3)
    p_bench.add_argument("--auth-token-env", default=None)
    p_bench.set_defaults(func=_cmd_bench)

    p_parse = sub.add_parser("parse",
                             help="audit raw judgments through the parser only")
    p_parse.add_argument("raw", help="JSONL of raw judgment records")
    p_parse.set_defaults(func=_cmd_parse)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_arg_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
