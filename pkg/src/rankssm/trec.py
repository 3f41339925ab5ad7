"""TREC-style text formats: run files, qrels, collection/queries TSV, metric CSV."""

from __future__ import annotations

import logging
from pathlib import Path

from .errors import ParseError

log = logging.getLogger(__name__)


def _lines(path):
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if line.strip():
                yield lineno, line


def read_run(path):
    """qid -> [(doc_id, score)] in rank order.

    Queries whose ranks are not exactly 1..n are re-ranked by score (ties by
    doc_id) with a warning.
    """
    rows: dict[str, list] = {}
    for lineno, line in _lines(path):
        parts = line.split()
        if len(parts) != 6:
            raise ParseError(path, lineno, f"expected 'qid Q0 docid rank score tag', got {line!r}")
        qid, _, doc_id, rank, score, _tag = parts
        try:
            rows.setdefault(qid, []).append((int(rank), doc_id, float(score)))
        except ValueError:
            raise ParseError(path, lineno, f"bad rank or score in {line!r}") from None
    run = {}
    for qid, entries in rows.items():
        seen = set()
        for _, doc_id, _ in entries:
            if doc_id in seen:
                raise ParseError(path, 0, f"duplicate doc {doc_id!r} for query {qid!r}")
            seen.add(doc_id)
        ranks = sorted(r for r, _, _ in entries)
        if ranks == list(range(1, len(entries) + 1)):
            entries.sort()
        else:
            log.warning("run %s: query %s has non-contiguous ranks; re-ranking by score", path, qid)
            entries.sort(key=lambda e: (-e[2], e[1]))
        run[qid] = [(doc_id, score) for _, doc_id, score in entries]
    return run


def write_run(path, run, tag="rankssm"):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid in run:
            for rank, (doc_id, score) in enumerate(run[qid], 1):
                fh.write(f"{qid} Q0 {doc_id} {rank} {score:.6f} {tag}\n")


def read_qrels(path):
    qrels: dict[str, dict[str, int]] = {}
    for lineno, line in _lines(path):
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(path, lineno, f"expected 'qid 0 docid grade', got {line!r}")
        qid, _, doc_id, grade = parts
        try:
            g = int(grade)
        except ValueError:
            raise ParseError(path, lineno, f"grade must be an integer, got {grade!r}") from None
        if g < 0:
            raise ParseError(path, lineno, f"grade must be non-negative, got {g}")
        judged = qrels.setdefault(qid, {})
        if doc_id in judged:
            log.warning("qrels %s:%d: duplicate (%s, %s); last wins", path, lineno, qid, doc_id)
        judged[doc_id] = g
    return qrels


def write_qrels(path, qrels):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid in qrels:
            for doc_id, grade in qrels[qid].items():
                fh.write(f"{qid} 0 {doc_id} {grade}\n")


def read_tsv(path):
    """id<TAB>text lines, used for both collections and query files."""
    out = {}
    for lineno, line in _lines(path):
        key, sep, text = line.partition("\t")
        if not sep or not key:
            raise ParseError(path, lineno, "expected 'id<TAB>text'")
        out[key] = text
    return out


def write_tsv(path, mapping):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, text in mapping.items():
            if "\t" in text or "\n" in text:
                raise ValueError(f"text for {key!r} contains a tab or newline")
            fh.write(f"{key}\t{text}\n")


read_collection = read_tsv
read_queries = read_tsv
write_collection = write_tsv
write_queries = write_tsv


def write_metrics_csv(path, rows):
    lines = ["metric,k,value,num_queries"] + [f"{m},{k},{v:.6f},{n}" for m, k, v, n in rows]
    Path(path).write_text("\n".join(lines) + "\n")
