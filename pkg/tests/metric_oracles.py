"""Independent brute-force reference implementations of every metric,
written as literally as possible from the definitions, for oracle
equivalence tests. Deliberately slow and simple; never import from
vljudge.metrics internals beyond the record type."""

import random

from vljudge.metrics import EvalRecord


def oracle_judgment_accuracy(records):
    hits = 0
    for r in records:
        if r.adherence == "failed":
            continue
        if r.predicted_preference == r.gold_preference:
            hits += 1
    return hits / len(records)


def oracle_error_distance(records):
    total = 0.0
    for r in records:
        if r.adherence == "failed" or r.predicted_score is None:
            total += 5.0
        else:
            total += abs(r.predicted_score - r.gold_score)
    return total / len(records)


def oracle_position_bias(ab_runs, ba_runs):
    ba_by_key = {(r.sample_id, r.criterion): r for r in ba_runs}
    flips = 0
    for a in ab_runs:
        b = ba_by_key[(a.sample_id, a.criterion)]
        failed = a.adherence == "failed" or b.adherence == "failed"
        if failed or a.predicted_preference != b.predicted_preference:
            flips += 1
    return flips / len(ab_runs)


def oracle_length_bias(records):
    eligible = []
    for r in records:
        if r.gold_preference in (None, "tie"):
            continue
        if r.length_a is None or r.length_b is None or r.length_a == r.length_b:
            continue
        eligible.append(r)
    if not eligible:
        return None
    n = 0
    for r in eligible:
        if r.adherence == "failed" or r.predicted_preference is None:
            continue
        if r.length_a > r.length_b:
            longer = "model_a"
        else:
            longer = "model_b"
        if r.predicted_preference == longer and r.predicted_preference != r.gold_preference:
            n += 1
    return n / len(eligible)


def oracle_format_adherence(records):
    return len([r for r in records if r.adherence == "strict"]) / len(records)


def oracle_instruction_following(records):
    hits = 0
    for r in records:
        if r.adherence == "failed":
            continue
        if r.eval_mode == "pairwise":
            ok = r.gold_preference is not None and r.predicted_preference == r.gold_preference
        else:
            ok = r.gold_score is not None and r.predicted_score == r.gold_score
        if ok:
            hits += 1
    return hits / len(records)


def oracle_spearman(xs, ys):
    import scipy.stats

    return float(scipy.stats.spearmanr(list(xs), list(ys)).statistic)


# Random fixture generators ----------------------------------------------------

PREFS = ["model_a", "model_b", "tie"]


def random_pairwise_records(rng: random.Random, n: int, dataset="d",
                            allow_failed=True) -> list[EvalRecord]:
    records = []
    for i in range(n):
        failed = allow_failed and rng.random() < 0.15
        la, lb = rng.randint(1, 400), rng.randint(1, 400)
        records.append(EvalRecord(
            sample_id=f"s{i}",
            judge_model="j",
            dataset=dataset,
            eval_mode="pairwise",
            reference_mode=rng.choice(["with_reference", "without_reference"]),
            criterion="relevance",
            criteria_mode="single_criterion",
            adherence="failed" if failed else rng.choice(["strict", "repaired"]),
            predicted_preference=None if failed else rng.choice(PREFS),
            gold_preference=rng.choice(PREFS),
            length_a=la,
            length_b=lb,
        ))
    return records


def random_pointwise_records(rng: random.Random, n: int,
                             allow_failed=True) -> list[EvalRecord]:
    records = []
    for i in range(n):
        failed = allow_failed and rng.random() < 0.15
        records.append(EvalRecord(
            sample_id=f"s{i}",
            judge_model="j",
            dataset="d",
            eval_mode="pointwise",
            reference_mode="with_reference",
            criterion="informativeness",
            criteria_mode="single_criterion",
            adherence="failed" if failed else rng.choice(["strict", "repaired"]),
            predicted_score=None if failed else rng.randint(1, 5),
            gold_score=rng.randint(1, 5),
        ))
    return records


def random_aligned_runs(rng: random.Random, n: int):
    ab = random_pairwise_records(rng, n)
    ba = []
    for r in ab:
        failed = rng.random() < 0.15
        ba.append(EvalRecord(
            sample_id=r.sample_id,
            judge_model=r.judge_model,
            dataset=r.dataset,
            eval_mode="pairwise",
            reference_mode=r.reference_mode,
            criterion=r.criterion,
            criteria_mode=r.criteria_mode,
            adherence="failed" if failed else "strict",
            predicted_preference=None if failed else rng.choice(PREFS),
            gold_preference=r.gold_preference,
            length_a=r.length_a,
            length_b=r.length_b,
        ))
    return ab, ba
