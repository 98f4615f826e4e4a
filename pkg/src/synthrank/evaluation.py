"""Ranking metrics, seed averaging, paired significance testing, and the
model-over-baseline gain summary.

Metric conventions: reciprocal rank counts the first document with grade >= 1;
average precision divides by the number of relevant documents in the
judgments (queries without any are excluded); nDCG uses linear gain
``grade / log2(rank + 1)`` with the ideal computed from the judged grades.
Documents without a judgment count as grade 0.  Queries that appear in a run
but not in the judgments are excluded with a logged count.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from statistics import fmean
from typing import Mapping, Sequence

from scipy import special

from .corpus import RunEntry

logger = logging.getLogger(__name__)

Qrels = Mapping[str, Mapping[str, int]]
Run = Mapping[str, Sequence[RunEntry]]


class EvaluationError(Exception):
    """Inconsistent evaluation inputs."""


@dataclass
class PerQueryScores:
    metric: str
    values: dict[str, float]

    def mean(self) -> float:
        if not self.values:
            raise EvaluationError(f"no query scores for metric {self.metric!r}")
        return fmean(self.values.values())


def _log_unjudged(run: Run, qrels: Qrels) -> None:
    unjudged = sum(1 for qid in run if qid not in qrels)
    if unjudged:
        logger.info("excluded %d run queries without judgments", unjudged)


def _ranked(entries: Sequence[RunEntry]) -> list[RunEntry]:
    return sorted(entries, key=lambda e: e.rank)


def mrr(run: Run, qrels: Qrels) -> PerQueryScores:
    """Mean reciprocal rank of the first relevant document (0 when none)."""
    _log_unjudged(run, qrels)
    values: dict[str, float] = {}
    for qid, judgments in qrels.items():
        rr = 0.0
        for entry in _ranked(run.get(qid, ())):
            if judgments.get(entry.doc_id, 0) >= 1:
                rr = 1.0 / entry.rank
                break
        values[qid] = rr
    return PerQueryScores(metric="mrr", values=values)


def mean_average_precision(run: Run, qrels: Qrels) -> PerQueryScores:
    """AP per query: mean of precision-at-rank over ranks holding a relevant
    document, divided by the judged relevant count."""
    _log_unjudged(run, qrels)
    values: dict[str, float] = {}
    excluded = 0
    for qid, judgments in qrels.items():
        n_relevant = sum(1 for grade in judgments.values() if grade >= 1)
        if n_relevant == 0:
            excluded += 1
            continue
        hits = 0
        ap_sum = 0.0
        for entry in _ranked(run.get(qid, ())):
            if judgments.get(entry.doc_id, 0) >= 1:
                hits += 1
                ap_sum += hits / entry.rank
        values[qid] = ap_sum / n_relevant
    if excluded:
        logger.info("excluded %d queries without relevant judgments", excluded)
    return PerQueryScores(metric="map", values=values)


def ndcg_at_k(run: Run, qrels: Qrels, k: int) -> PerQueryScores:
    if k < 1:
        raise EvaluationError(f"k must be >= 1, got {k}")
    _log_unjudged(run, qrels)
    values: dict[str, float] = {}
    for qid, judgments in qrels.items():
        ideal = sorted((g for g in judgments.values() if g > 0), reverse=True)[:k]
        idcg = sum(g / math.log2(i + 2) for i, g in enumerate(ideal))
        if idcg == 0.0:
            values[qid] = 0.0
            continue
        dcg = 0.0
        for entry in _ranked(run.get(qid, ())):
            if entry.rank > k:
                break
            grade = judgments.get(entry.doc_id, 0)
            if grade > 0:
                dcg += grade / math.log2(entry.rank + 1)
        values[qid] = dcg / idcg
    return PerQueryScores(metric=f"ndcg@{k}", values=values)


@dataclass
class SeedRunSet:
    """Per-query metric values across seeds; the (query, seed) grid must be
    dense before averaging."""

    metric: str
    seeds: list[int]
    values: dict[tuple[str, int], float]


def seed_average(seed_runs: SeedRunSet) -> PerQueryScores:
    if not seed_runs.seeds:
        raise EvaluationError("seed run set declares no seeds")
    query_ids = sorted({qid for qid, _ in seed_runs.values})
    if not query_ids:
        raise EvaluationError("seed run set holds no values")
    declared = set(seed_runs.seeds)
    for qid, seed in seed_runs.values:
        if seed not in declared:
            raise EvaluationError(f"value for undeclared seed {seed} (query {qid!r})")
    averaged: dict[str, float] = {}
    for qid in query_ids:
        per_seed = []
        for seed in seed_runs.seeds:
            try:
                per_seed.append(seed_runs.values[(qid, seed)])
            except KeyError:
                raise EvaluationError(
                    f"missing value for query {qid!r}, seed {seed}"
                ) from None
        averaged[qid] = fmean(per_seed)
    return PerQueryScores(metric=seed_runs.metric, values=averaged)


@dataclass(frozen=True)
class SignificanceResult:
    t_statistic: float
    p_value: float
    threshold: float
    significant: bool
    n_queries: int
    degenerate: bool = False


def default_threshold(n_queries: int) -> float:
    """0.01 for large query sets (over 1000), 0.05 otherwise."""
    return 0.01 if n_queries > 1000 else 0.05


def student_t_sf2(t: float, df: int) -> float:
    """Two-sided tail probability of Student's t via the regularized
    incomplete beta function."""
    if df < 1:
        raise EvaluationError(f"degrees of freedom must be >= 1, got {df}")
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_t_test(
    a: PerQueryScores, b: PerQueryScores, threshold: float | None = None
) -> SignificanceResult:
    """Two-sided paired t-test over matched per-query values.

    A zero-variance difference vector leaves t undefined; that case reports
    p = 1.0 with the degenerate flag set.
    """
    if set(a.values) != set(b.values):
        raise EvaluationError("paired t-test requires identical query sets")
    qids = sorted(a.values)
    n = len(qids)
    if n < 2:
        raise EvaluationError(f"paired t-test needs at least 2 queries, got {n}")
    if threshold is None:
        threshold = default_threshold(n)
    diffs = [a.values[qid] - b.values[qid] for qid in qids]
    mean_d = fmean(diffs)
    var = sum((d - mean_d) ** 2 for d in diffs) / (n - 1)
    sd = math.sqrt(var)
    if sd == 0.0:
        return SignificanceResult(
            t_statistic=float("nan"),
            p_value=1.0,
            threshold=threshold,
            significant=False,
            n_queries=n,
            degenerate=True,
        )
    t = mean_d / (sd / math.sqrt(n))
    p = student_t_sf2(t, n - 1)
    return SignificanceResult(
        t_statistic=t,
        p_value=p,
        threshold=threshold,
        significant=p < threshold,
        n_queries=n,
    )


@dataclass(frozen=True)
class GainReport:
    ratios: dict[tuple[str, str], float]
    average_gain: float
    win_count: int


def aggregate_gains(
    model_results: Mapping[tuple[str, str], float],
    baseline_results: Mapping[tuple[str, str], float],
) -> GainReport:
    """Model-to-baseline ratio per (dataset, metric) cell, their mean, and the
    number of cells where the model is strictly ahead."""
    if set(model_results) != set(baseline_results):
        raise EvaluationError("gain aggregation requires matching (dataset, metric) keys")
    if not model_results:
        raise EvaluationError("gain aggregation requires at least one cell")
    ratios: dict[tuple[str, str], float] = {}
    for key in sorted(model_results):
        base = baseline_results[key]
        if base == 0.0:
            raise EvaluationError(f"baseline value for {key} is zero")
        ratios[key] = model_results[key] / base
    return GainReport(
        ratios=ratios,
        average_gain=fmean(ratios.values()),
        win_count=sum(1 for r in ratios.values() if r > 1.0),
    )


_METRIC_NAMES = ("mrr", "map", "ndcg")


def parse_metric(spec: str) -> tuple[str, int | None]:
    """Parse "mrr", "map", or "ndcg@K" into (name, cutoff)."""
    name, _, suffix = spec.partition("@")
    name = name.strip().lower()
    if name not in _METRIC_NAMES:
        raise EvaluationError(f"unknown metric {spec!r}")
    if name == "ndcg":
        if not suffix:
            raise EvaluationError(f"metric {spec!r} needs a cutoff, e.g. ndcg@10")
        try:
            k = int(suffix)
        except ValueError:
            raise EvaluationError(f"bad cutoff in metric {spec!r}") from None
        return name, k
    if suffix:
        raise EvaluationError(f"metric {name!r} does not take a cutoff")
    return name, None


def compute_metric(run: Run, qrels: Qrels, spec: str) -> PerQueryScores:
    name, k = parse_metric(spec)
    if name == "mrr":
        return mrr(run, qrels)
    if name == "map":
        return mean_average_precision(run, qrels)
    return ndcg_at_k(run, qrels, k)  # type: ignore[arg-type]
