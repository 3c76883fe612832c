"""Evaluation metrics over resolved judgments.

All operations consume ``EvalRecord`` rows: one resolved verdict for one
(sample, criterion) in one configuration cell. Records with adherence
"failed" carry no prediction and are penalized deterministically —
incorrect for accuracy-style metrics, a fixed distance of 5.0 for
error_distance — so that a judge whose output never parses scores
0.00 / 5.00 / 0.00 across the board.

Every function is pure and permutation-invariant over its input records.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from .datamodel import (
    ADHERENCE_LEVELS,
    CRITERIA_MODES,
    EVAL_MODES,
    REFERENCE_MODES,
    MetricReport,
    canonical_json,
)

FAILED_SCORE_PENALTY = 5.0

_PREFERENCES = frozenset({"model_a", "model_b", "tie"})


class EmptyInput(ValueError):
    pass


class MisalignedRuns(ValueError):
    pass


class DegenerateInput(ValueError):
    pass


@dataclass(frozen=True)
class EvalRecord:
    """One resolved verdict for one (sample, criterion) in one cell."""

    sample_id: str
    judge_model: str
    dataset: str
    eval_mode: str
    reference_mode: str
    criterion: str
    criteria_mode: str
    adherence: str
    predicted_preference: str | None = None
    predicted_score: int | None = None
    gold_preference: str | None = None
    gold_score: int | None = None
    length_a: int | None = None
    length_b: int | None = None
    task_kind: str | None = None

    def __post_init__(self) -> None:
        for name, domain in (
            ("eval_mode", EVAL_MODES),
            ("reference_mode", REFERENCE_MODES),
            ("criteria_mode", CRITERIA_MODES),
            ("adherence", ADHERENCE_LEVELS),
        ):
            value = getattr(self, name)
            if value not in domain:
                raise ValueError(f"{name} must be one of {sorted(domain)}, got {value!r}")
        if self.adherence == "failed" and (
            self.predicted_preference is not None or self.predicted_score is not None
        ):
            raise ValueError("failed records must carry no prediction")
        for name in ("predicted_preference", "gold_preference"):
            value = getattr(self, name)
            if value is not None and value not in _PREFERENCES:
                raise ValueError(f"{name} must be in {sorted(_PREFERENCES)}, got {value!r}")
        for name in ("predicted_score", "gold_score"):
            value = getattr(self, name)
            if value is not None and value not in (1, 2, 3, 4, 5):
                raise ValueError(f"{name} must be in 1..5, got {value!r}")

    @property
    def cell(self) -> tuple[str, str, str, str, str, str]:
        return (
            self.judge_model,
            self.dataset,
            self.eval_mode,
            self.reference_mode,
            self.criteria_mode,
            self.criterion,
        )


def _require_nonempty(records: Sequence, what: str) -> None:
    if not records:
        raise EmptyInput(f"{what} requires at least one record")


# Core metrics ----------------------------------------------------------------


def judgment_accuracy(records: Sequence[EvalRecord]) -> float:
    """Exact-match rate of resolved pairwise preferences; failed = incorrect."""
    records = list(records)
    _require_nonempty(records, "judgment_accuracy")
    correct = 0
    for r in records:
        if r.eval_mode != "pairwise":
            raise ValueError("judgment_accuracy is defined over pairwise records")
        if r.gold_preference is None:
            raise ValueError(f"record {r.sample_id} lacks a gold preference")
        if r.adherence != "failed" and r.predicted_preference == r.gold_preference:
            correct += 1
    return correct / len(records)


def error_distance(records: Sequence[EvalRecord]) -> float:
    """Mean |predicted − gold| over pointwise records; failed = 5.0."""
    records = list(records)
    _require_nonempty(records, "error_distance")
    total = 0.0
    for r in records:
        if r.eval_mode != "pointwise":
            raise ValueError("error_distance is defined over pointwise records")
        if r.gold_score is None:
            raise ValueError(f"record {r.sample_id} lacks a gold score")
        if r.adherence == "failed" or r.predicted_score is None:
            total += FAILED_SCORE_PENALTY
        else:
            total += abs(r.predicted_score - r.gold_score)
    return total / len(records)


def position_bias_rate(ab_runs: Sequence[EvalRecord],
                       ba_runs: Sequence[EvalRecord]) -> float:
    """Fraction of items whose resolved preference changes with order.

    Runs are aligned by (sample_id, criterion); a failed side counts as
    a disagreement.
    """
    ab = {(r.sample_id, r.criterion): r for r in ab_runs}
    ba = {(r.sample_id, r.criterion): r for r in ba_runs}
    if len(ab) != len(ab_runs) or len(ba) != len(ba_runs):
        raise MisalignedRuns("duplicate (sample, criterion) items within a run")
    if set(ab) != set(ba):
        raise MisalignedRuns("AB and BA runs cover different items")
    _require_nonempty(list(ab), "position_bias_rate")
    flips = 0
    for key, r_ab in ab.items():
        r_ba = ba[key]
        if r_ab.adherence == "failed" or r_ba.adherence == "failed":
            flips += 1
        elif r_ab.predicted_preference != r_ba.predicted_preference:
            flips += 1
    return flips / len(ab)


def length_bias_rate(records: Sequence[EvalRecord]) -> float:
    """Rate of wrong verdicts that picked the strictly longer response.

    Records with gold = tie or equal candidate lengths are excluded from
    the denominator.
    """
    eligible = [
        r for r in records
        if r.gold_preference is not None and r.gold_preference != "tie"
        and r.length_a is not None and r.length_b is not None
        and r.length_a != r.length_b
    ]
    if not eligible:
        raise EmptyInput("length_bias_rate has no eligible records")
    biased = 0
    for r in eligible:
        if r.adherence == "failed" or r.predicted_preference is None:
            continue
        longer = "model_a" if r.length_a > r.length_b else "model_b"
        if r.predicted_preference != r.gold_preference and r.predicted_preference == longer:
            biased += 1
    return biased / len(eligible)


def format_adherence_rate(records: Sequence[EvalRecord]) -> float:
    records = list(records)
    _require_nonempty(records, "format_adherence_rate")
    return sum(1 for r in records if r.adherence == "strict") / len(records)


def instruction_following_accuracy(records: Sequence[EvalRecord]) -> float:
    """Exact match against the dataset's gold annotation; failed = incorrect."""
    records = list(records)
    _require_nonempty(records, "instruction_following_accuracy")
    correct = 0
    for r in records:
        if r.adherence == "failed":
            continue
        if r.eval_mode == "pairwise":
            correct += int(r.predicted_preference == r.gold_preference
                           and r.gold_preference is not None)
        else:
            correct += int(r.predicted_score == r.gold_score
                           and r.gold_score is not None)
    return correct / len(records)


def _average_ranks(values: Sequence[float]) -> list[float]:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        average = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = average
        i = j + 1
    return ranks


def spearman_rho(scores_a: Sequence[float], scores_b: Sequence[float]) -> float:
    """Spearman rank correlation with average-rank tie handling."""
    if len(scores_a) != len(scores_b):
        raise ValueError("score lists must be aligned")
    if len(scores_a) < 2:
        raise ValueError("need at least two paired scores")
    if len(set(scores_a)) == 1 or len(set(scores_b)) == 1:
        raise DegenerateInput("rank correlation is undefined for a constant list")
    ra = _average_ranks(scores_a)
    rb = _average_ranks(scores_b)
    n = len(ra)
    mean_a = sum(ra) / n
    mean_b = sum(rb) / n
    cov = sum((x - mean_a) * (y - mean_b) for x, y in zip(ra, rb))
    var_a = sum((x - mean_a) ** 2 for x in ra)
    var_b = sum((y - mean_b) ** 2 for y in rb)
    return cov / math.sqrt(var_a * var_b)


def composite_bias(position_rate: float, length_rate: float) -> float:
    return (position_rate + length_rate) / 2


# Aggregation -----------------------------------------------------------------


def aggregate(
    records: Sequence[EvalRecord],
    ba_records: Sequence[EvalRecord] = (),
) -> list[MetricReport]:
    """One MetricReport per (judge, dataset, mode, reference, criteria) cell.

    ``records`` are the primary-order (AB) rows and drive every metric;
    ``ba_records`` only feed position bias for pairwise cells that have a
    matching swapped run.
    """
    cells: dict[tuple, list[EvalRecord]] = {}
    for r in records:
        cells.setdefault(r.cell, []).append(r)
    ba_cells: dict[tuple, list[EvalRecord]] = {}
    for r in ba_records:
        ba_cells.setdefault(r.cell, []).append(r)

    reports = []
    for cell_key in sorted(cells):
        cell_records = cells[cell_key]
        judge_model, dataset, eval_mode, reference_mode, criteria_mode, criterion = cell_key
        accuracy = None
        distance = None
        position = None
        length = None
        instruction = None
        rho = None

        if eval_mode == "pairwise":
            accuracy = judgment_accuracy(cell_records)
            try:
                length = length_bias_rate(cell_records)
            except EmptyInput:
                length = None
            if cell_key in ba_cells:
                position = position_bias_rate(cell_records, ba_cells[cell_key])
        else:
            distance = error_distance(cell_records)
            paired = [
                (r.predicted_score, r.gold_score)
                for r in cell_records
                if r.adherence != "failed"
                and r.predicted_score is not None and r.gold_score is not None
            ]
            if len(paired) >= 2:
                try:
                    rho = spearman_rho([p for p, _ in paired], [g for _, g in paired])
                except DegenerateInput:
                    rho = None
        if all(r.task_kind == "instruction_following" for r in cell_records):
            instruction = instruction_following_accuracy(cell_records)

        reports.append(MetricReport(
            judge_model=judge_model,
            dataset=dataset,
            eval_mode=eval_mode,
            reference_mode=reference_mode,
            criteria=(criterion,),
            criteria_mode=criteria_mode,
            n_items=len(cell_records),
            judgment_accuracy=accuracy,
            error_distance=distance,
            position_bias_rate=position,
            length_bias_rate=length,
            format_adherence_rate=format_adherence_rate(cell_records),
            instruction_following_accuracy=instruction,
            spearman_rho=rho,
        ))
    return reports


_AVERAGED_METRICS = (
    "judgment_accuracy",
    "error_distance",
    "position_bias_rate",
    "length_bias_rate",
    "format_adherence_rate",
    "instruction_following_accuracy",
    "spearman_rho",
)


def cross_cell_average(reports: Sequence[MetricReport]) -> dict[str, float | int]:
    """Unweighted means over cells, per metric, skipping absent values."""
    out: dict[str, float | int] = {"n_cells": len(reports)}
    for name in _AVERAGED_METRICS:
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if values:
            out[name] = sum(values) / len(values)
    return out


# Report serialization --------------------------------------------------------

_CSV_COLUMNS = (
    "judge_model", "dataset", "eval_mode", "reference_mode", "criteria_mode",
    "criterion", "n_items", "judgment_accuracy", "error_distance",
    "position_bias_rate", "length_bias_rate", "format_adherence_rate",
    "instruction_following_accuracy", "spearman_rho",
)


def _row(report: MetricReport) -> dict:
    d = report.to_dict()
    cell = d.pop("cell")
    cell["criterion"] = cell.pop("criteria")[0]
    return {**cell, **d}


def reports_to_json(reports: Sequence[MetricReport],
                    average: Mapping | None = None) -> str:
    payload: dict = {"cells": [r.to_dict() for r in reports]}
    if average is not None:
        payload["average"] = dict(average)
    return canonical_json(payload)


def reports_to_csv(reports: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=_CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for report in reports:
        row = _row(report)
        writer.writerow({k: ("" if row.get(k) is None else row.get(k))
                         for k in _CSV_COLUMNS})
    return buf.getvalue()


def reports_to_markdown(reports: Sequence[MetricReport]) -> str:
    def fmt(v) -> str:
        if v is None:
            return "—"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    lines = [
        "| " + " | ".join(_CSV_COLUMNS) + " |",
        "| " + " | ".join("---" for _ in _CSV_COLUMNS) + " |",
    ]
    for report in reports:
        row = _row(report)
        lines.append("| " + " | ".join(fmt(row.get(k)) for k in _CSV_COLUMNS) + " |")
    return "\n".join(lines) + "\n"
