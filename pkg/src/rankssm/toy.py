"""Deterministic synthetic retrieval corpus with term-overlap relevance.

Documents are bags of pseudo-words drawn mostly from one topic's vocabulary,
with some words borrowed from other topics.
A query is a few words of one topic; a document's grade is the number of
distinct query words it contains minus one (floored at 0), so relevance is a
pure function of lexical overlap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import trec

CONSONANTS = "bcdfghjklmnpqrstvwxyz"
VOWELS = "aeiou"


@dataclass
class ToyCorpus:
    collection: dict  # doc_id -> text
    queries: dict  # qid -> text (evaluation split)
    qrels: dict  # qid -> {doc_id: grade}
    train_queries: dict
    train_qrels: dict

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        trec.write_collection(d / "collection.tsv", self.collection)
        trec.write_queries(d / "queries.tsv", self.queries)
        trec.write_qrels(d / "qrels.txt", self.qrels)
        trec.write_queries(d / "train_queries.tsv", self.train_queries)
        trec.write_qrels(d / "train_qrels.txt", self.train_qrels)

    @classmethod
    def read(cls, directory) -> "ToyCorpus":
        d = Path(directory)
        return cls(
            trec.read_collection(d / "collection.tsv"),
            trec.read_queries(d / "queries.tsv"),
            trec.read_qrels(d / "qrels.txt"),
            trec.read_queries(d / "train_queries.tsv"),
            trec.read_qrels(d / "train_qrels.txt"),
        )


def _pseudo_words(rng, n, taken, letters):
    """n unseen consonant-vowel-consonant-vowel words whose consonants come from ``letters``."""
    letters = list(letters)
    words = []
    while len(words) < n:
        w = rng.choice(letters) + rng.choice(list(VOWELS)) + rng.choice(letters) + rng.choice(list(VOWELS))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def _judge(query_words, doc_words):
    overlap = len(set(query_words) & set(doc_words))
    return max(0, overlap - 1)


def make_toy_corpus(
    seed=13,
    n_docs=500,
    n_queries=50,
    n_train_queries=100,
    n_topics=9,
    words_per_topic=10,
    n_common=60,
    doc_len=(8, 14),
    topic_frac=0.5,
    noise_frac=0.3,
    query_len=3,
) -> ToyCorpus:
    """Build a corpus of ``n_docs`` documents spread evenly over ``n_topics`` topics.

    The consonants are split into disjoint groups: each topic spells its
    words with its own group and common words use the leftover letters.
    Each document token is a word of the document's topic (probability
    ``topic_frac``), a word of a random other topic (``noise_frac``), or a
    common word. A query is ``query_len`` distinct words of one topic.
    """
    per_topic = len(CONSONANTS) // (n_topics + 1)
    if per_topic < 2:
        raise ValueError(f"at most {len(CONSONANTS) // 2 - 1} topics are supported")
    if topic_frac + noise_frac > 1:
        raise ValueError("topic_frac + noise_frac must be <= 1")
    capacity = n_topics * math.comb(words_per_topic, query_len)
    if n_queries + n_train_queries > capacity:
        raise ValueError(f"only {capacity} distinct queries exist for this vocabulary")
    rng = np.random.default_rng(seed)
    taken: set = set()
    groups = [CONSONANTS[t * per_topic : (t + 1) * per_topic] for t in range(n_topics)]
    topics = [_pseudo_words(rng, words_per_topic, taken, g) for g in groups]
    common = _pseudo_words(rng, n_common, taken, CONSONANTS[n_topics * per_topic :])

    def draw(t):
        r = rng.random()
        if r < topic_frac:
            return topics[t][rng.integers(words_per_topic)]
        if r < topic_frac + noise_frac:
            other = (t + 1 + int(rng.integers(n_topics - 1))) % n_topics if n_topics > 1 else t
            return topics[other][rng.integers(words_per_topic)]
        return common[rng.integers(n_common)]

    docs = {}
    doc_words = {}
    width = len(str(n_docs - 1))
    for i in range(n_docs):
        t = i % n_topics
        n = int(rng.integers(doc_len[0], doc_len[1] + 1))
        words = [draw(t) for _ in range(n)]
        doc_id = f"D{i:0{width}d}"
        docs[doc_id] = " ".join(words)
        doc_words[doc_id] = words

    seen = set()  # shared so the evaluation and training splits never repeat a query

    def make_queries(prefix, count):
        queries, qrels = {}, {}
        j = 0
        while len(queries) < count:
            if len(seen) == capacity:
                raise ValueError("ran out of distinct queries with at least one relevant document")
            t = int(rng.integers(n_topics))
            words = tuple(sorted(rng.choice(words_per_topic, size=query_len, replace=False)))
            if (t, words) in seen:
                continue
            seen.add((t, words))
            qwords = [topics[t][w] for w in words]
            judged = {d: _judge(qwords, ws) for d, ws in doc_words.items()}
            judged = {d: g for d, g in judged.items() if g > 0}
            if not judged:
                continue
            qid = f"{prefix}{j:03d}"
            j += 1
            queries[qid] = " ".join(qwords)
            qrels[qid] = dict(sorted(judged.items()))
        return queries, qrels

    queries, qrels = make_queries("Q", n_queries)
    train_queries, train_qrels = make_queries("T", n_train_queries)
    return ToyCorpus(docs, queries, qrels, train_queries, train_qrels)


def bundled_toy_dir() -> Path:
    return Path(__file__).parent / "data" / "toy"


def load_bundled() -> ToyCorpus:
    return ToyCorpus.read(bundled_toy_dir())
