"""Ranking metrics over a run (qid -> ranked [(doc_id, score)]) and qrels
(qid -> {doc_id: grade})."""

from __future__ import annotations

import logging
import math

log = logging.getLogger(__name__)

GAINS = ("linear", "exponential")


def reciprocal_rank(ranked_ids, judged: dict, k: int) -> float:
    for i, doc_id in enumerate(ranked_ids[:k], 1):
        if judged.get(doc_id, 0) >= 1:
            return 1.0 / i
    return 0.0


def mrr_at_k(run, qrels, k=100) -> float:
    """Mean over run queries of 1/rank of the first doc with grade >= 1 in the top k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not run:
        return 0.0
    total = 0.0
    for qid, ranked in run.items():
        judged = qrels.get(qid)
        if not judged:
            log.warning("query %s has no qrels; counted as RR=0", qid)
            continue
        total += reciprocal_rank([d for d, _ in ranked], judged, k)
    return total / len(run)


def _gain(grade, mode):
    return float(grade) if mode == "linear" else float(2**grade - 1)


def dcg(grades, k, gain="linear") -> float:
    return sum(_gain(g, gain) / math.log2(i + 1) for i, g in enumerate(grades[:k], 1))


def ndcg_at_k(run, qrels, k=10, gain="linear") -> float:
    """Mean NDCG@k over run queries; unjudged docs are grade 0."""
    if gain not in GAINS:
        raise ValueError(f"unknown gain {gain!r}; expected one of {GAINS}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not run:
        return 0.0
    total = 0.0
    for qid, ranked in run.items():
        judged = qrels.get(qid, {})
        ideal = sorted((g for g in judged.values() if g > 0), reverse=True)
        if not ideal:
            log.warning("query %s has no relevant documents; NDCG counted as 0", qid)
            continue
        grades = [judged.get(d, 0) for d, _ in ranked]
        total += dcg(grades, k, gain) / dcg(ideal, k, gain)
    return total / len(run)


def parse_metric(spec: str):
    """'mrr@100' -> ('mrr', 100)."""
    name, _, k = spec.strip().lower().partition("@")
    if name not in ("mrr", "ndcg") or not k.isdigit():
        raise ValueError(f"unknown metric {spec!r}; expected mrr@K or ndcg@K")
    return name, int(k)


def evaluate(run, qrels, metrics=("mrr@100", "ndcg@10"), gain="linear"):
    """Rows of (metric, k, value, num_queries)."""
    rows = []
    for m in metrics:
        name, k = parse_metric(m)
        value = mrr_at_k(run, qrels, k) if name == "mrr" else ndcg_at_k(run, qrels, k, gain)
        rows.append((name, k, value, len(run)))
    return rows
