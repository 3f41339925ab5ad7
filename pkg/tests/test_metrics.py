import itertools
import logging

import numpy as np
import pytest

from oracles import ndcg_oracle, rr_oracle
from rankssm.metrics import evaluate, mrr_at_k, ndcg_at_k, parse_metric


def run_of(ranking, qid="q"):
    return {qid: [(d, float(len(ranking) - i)) for i, d in enumerate(ranking)]}


class TestMRR:
    def test_definitions(self):
        assert mrr_at_k(run_of(["a", "b"]), {"q": {"a": 1}}) == 1.0
        assert mrr_at_k(run_of(["x", "y", "z", "a"]), {"q": {"a": 2}}) == 0.25
        ranking = [f"d{i}" for i in range(101)]
        assert mrr_at_k(run_of(ranking), {"q": {"d100": 1}}, k=100) == 0.0

    def test_grade_zero_is_not_relevant(self):
        assert mrr_at_k(run_of(["a", "b"]), {"q": {"a": 0, "b": 1}}) == 0.5

    def test_missing_qrels_warned(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert mrr_at_k({**run_of(["a"]), **run_of(["a"], "q2")}, {"q": {"a": 1}}) == 0.5
        assert "q2" in caplog.text

    def test_bad_k(self):
        with pytest.raises(ValueError):
            mrr_at_k(run_of(["a"]), {"q": {"a": 1}}, k=0)


class TestNDCG:
    def test_worked_example(self):
        value = ndcg_at_k(run_of(["two", "three"]), {"q": {"three": 3, "two": 2}}, k=10)
        assert round(value, 5) == 0.91340
        dcg = 2 / 1 + 3 / np.log2(3)
        idcg = 3 / 1 + 2 / np.log2(3)
        assert value == pytest.approx(dcg / idcg, rel=1e-15)

    def test_ideal_is_one(self):
        qrels = {"q": {"a": 3, "b": 2, "c": 1}}
        assert ndcg_at_k(run_of(["a", "b", "c", "x"]), qrels) == 1.0
        assert mrr_at_k(run_of(["a", "b", "c", "x"]), qrels) == 1.0

    def test_relevant_outside_cutoff(self):
        ranking = [f"d{i}" for i in range(11)]
        assert ndcg_at_k(run_of(ranking), {"q": {"d10": 2}}, k=10) == 0.0

    def test_exponential_gain(self):
        value = ndcg_at_k(run_of(["two", "three"]), {"q": {"three": 3, "two": 2}}, gain="exponential")
        assert value == pytest.approx((3 + 7 / np.log2(3)) / (7 + 3 / np.log2(3)), rel=1e-15)

    def test_unknown_gain(self):
        with pytest.raises(ValueError):
            ndcg_at_k(run_of(["a"]), {"q": {"a": 1}}, gain="log")


class TestBruteForce:
    @pytest.mark.parametrize("n", range(1, 7))
    def test_all_permutations(self, n):
        rng = np.random.default_rng(n)
        docs = [f"d{i}" for i in range(n)]
        grades = {d: int(g) for d, g in zip(docs, rng.integers(0, 4, size=n))}
        if not any(grades.values()):
            grades[docs[0]] = 1
        for perm in itertools.permutations(docs):
            run = run_of(list(perm))
            for k in (1, 3, 10):
                assert mrr_at_k(run, {"q": grades}, k) == rr_oracle(perm, grades, k)
                assert ndcg_at_k(run, {"q": grades}, k) == pytest.approx(ndcg_oracle(perm, grades, k), abs=1e-15)
                assert ndcg_at_k(run, {"q": grades}, k, "exponential") == pytest.approx(
                    ndcg_oracle(perm, grades, k, exponential=True), abs=1e-15
                )

    def test_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            docs = [f"d{i}" for i in range(8)]
            ranking = list(rng.permutation(docs))
            qrels = {"q": {d: int(rng.integers(0, 3)) for d in docs}}
            for v in (mrr_at_k(run_of(ranking), qrels), ndcg_at_k(run_of(ranking), qrels)):
                assert 0.0 <= v <= 1.0


class TestEvaluate:
    def test_rows(self):
        rows = evaluate(run_of(["a", "b"]), {"q": {"b": 1}}, ["mrr@100", "ndcg@10"])
        assert rows[0] == ("mrr", 100, 0.5, 1) and rows[1][:2] == ("ndcg", 10)

    @pytest.mark.parametrize("spec", ["map@10", "mrr", "ndcg@x"])
    def test_bad_metric(self, spec):
        with pytest.raises(ValueError):
            parse_metric(spec)
