"""BM25 first-stage retrieval over an in-memory inverted index, and reranking
of a run with an arbitrary scorer."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .errors import DataError

DEFAULT_K1 = 4.46
DEFAULT_B = 0.82
DEFAULT_DEPTH = 100

_SPLIT = re.compile(r"[^0-9a-z]+")


def analyze(text: str) -> list[str]:
    """Lowercase and split on anything that is not an ASCII letter or digit."""
    return [t for t in _SPLIT.split(text.lower()) if t]


class InvertedIndex:
    """term -> [(doc_id, tf), ...] sorted by doc_id, plus document lengths."""

    def __init__(self):
        self.postings: dict[str, list[tuple[str, int]]] = {}
        self.doc_lengths: dict[str, int] = {}
        self.doc_count = 0
        self.avg_doc_length = 0.0
        self._arrays = None

    @classmethod
    def build(cls, collection: Mapping[str, str]) -> "InvertedIndex":
        index = cls()
        for doc_id in sorted(collection):
            index._add(doc_id, collection[doc_id])
        index._refresh()
        return index

    def add_document(self, doc_id: str, text: str) -> None:
        self._add(doc_id, text)
        for plist in self.postings.values():
            plist.sort()
        self._refresh()

    def _add(self, doc_id, text):
        if doc_id in self.doc_lengths:
            raise DataError(f"duplicate document id {doc_id!r}")
        terms = analyze(text)
        self.doc_lengths[doc_id] = len(terms)
        for term, tf in Counter(terms).items():
            self.postings.setdefault(term, []).append((doc_id, tf))

    def _refresh(self):
        self.doc_count = len(self.doc_lengths)
        self.avg_doc_length = sum(self.doc_lengths.values()) / self.doc_count if self.doc_count else 0.0
        self._arrays = None

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log(1.0 + (self.doc_count - df + 0.5) / (df + 0.5))

    def tf(self, term: str, doc_id: str) -> int:
        for d, tf in self.postings.get(term, ()):
            if d == doc_id:
                return tf
        return 0

    def arrays(self):
        """Dense views used by :func:`retrieve_topk`; rebuilt after mutation."""
        if self._arrays is None:
            doc_ids = sorted(self.doc_lengths)
            pos = {d: i for i, d in enumerate(doc_ids)}
            lengths = np.array([self.doc_lengths[d] for d in doc_ids], dtype=np.float64)
            plists = {
                t: (np.array([pos[d] for d, _ in pl], dtype=np.int64), np.array([tf for _, tf in pl], dtype=np.float64))
                for t, pl in self.postings.items()
            }
            self._arrays = (doc_ids, lengths, plists)
        return self._arrays

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        payload = {
            "doc_lengths": self.doc_lengths,
            "postings": {t: [[d, tf] for d, tf in pl] for t, pl in sorted(self.postings.items())},
        }
        (directory / "index.json").write_text(json.dumps(payload, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "InvertedIndex":
        path = Path(directory) / "index.json"
        if not path.exists():
            raise DataError(f"no index found at {path}")
        payload = json.loads(path.read_text())
        index = cls()
        index.doc_lengths = {d: int(n) for d, n in payload["doc_lengths"].items()}
        index.postings = {t: [(d, int(tf)) for d, tf in pl] for t, pl in payload["postings"].items()}
        index._refresh()
        return index


def _term_weight(idf, tf, dl, avgdl, k1, b):
    return idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl))


def _check_params(k1, b):
    if k1 < 0 or not 0 <= b <= 1:
        raise ValueError(f"BM25 needs k1 >= 0 and 0 <= b <= 1, got k1={k1}, b={b}")


def bm25_score(query_terms, doc_id, index: InvertedIndex, k1=DEFAULT_K1, b=DEFAULT_B) -> float:
    """Lucene-style BM25 of one document; query terms are summed with repetition."""
    _check_params(k1, b)
    if doc_id not in index.doc_lengths:
        raise KeyError(f"unknown doc_id {doc_id!r}")
    if isinstance(query_terms, str):
        query_terms = analyze(query_terms)
    dl = float(index.doc_lengths[doc_id])
    score = 0.0
    for term in query_terms:
        tf = index.tf(term, doc_id)
        if tf:
            score += _term_weight(index.idf(term), float(tf), dl, index.avg_doc_length, k1, b)
    return score


def retrieve_topk(query, index: InvertedIndex, k=DEFAULT_DEPTH, k1=DEFAULT_K1, b=DEFAULT_B):
    """Exact top-k [(doc_id, score)], score descending, ties by ascending doc_id.

    Only documents sharing at least one term with the query are returned.
    """
    _check_params(k1, b)
    if index.doc_count == 0:
        raise DataError("cannot retrieve from an empty index")
    terms = analyze(query) if isinstance(query, str) else list(query)
    doc_ids, lengths, plists = index.arrays()
    scores = np.zeros(len(doc_ids))
    matched = np.zeros(len(doc_ids), dtype=bool)
    for term in terms:
        if term not in plists:
            continue
        idx, tf = plists[term]
        scores[idx] += _term_weight(index.idf(term), tf, lengths[idx], index.avg_doc_length, k1, b)
        matched[idx] = True
    cand = np.nonzero(matched)[0]
    # doc positions follow sorted doc_id order, so position breaks ties
    order = cand[np.lexsort((cand, -scores[cand]))][:k]
    return [(doc_ids[i], float(scores[i])) for i in order]


def retrieve_all(queries: Mapping[str, str], index, k=DEFAULT_DEPTH, k1=DEFAULT_K1, b=DEFAULT_B):
    return {qid: retrieve_topk(queries[qid], index, k, k1, b) for qid in sorted(queries)}


def rerank(run, scorer: Callable[[str, str], float], queries: Mapping[str, str], collection: Mapping[str, str]):
    """Re-score every (query, doc) pair; sort by new score, ties by first-stage rank."""
    out = {}
    for qid, ranked in run.items():
        if qid not in queries:
            raise DataError(f"query text missing for qid {qid!r}")
        q = queries[qid]
        rows = []
        for rank, (doc_id, _) in enumerate(ranked):
            if doc_id not in collection:
                raise DataError(f"document text missing for doc_id {doc_id!r}")
            rows.append((float(scorer(q, collection[doc_id])), rank, doc_id))
        rows.sort(key=lambda r: (-r[0], r[1]))
        out[qid] = [(doc_id, s) for s, _, doc_id in rows]
    return out
