"""Acceptance criteria, each checked at its stated tolerance.

Every test records a single PASS/FAIL line (shown in the terminal summary)
and then asserts, so a failing criterion also fails the run.
"""

import itertools
import math
import time

import numpy as np
import pytest

from gradcheck import check_module, check_op
from oracles import bm25_oracle, ndcg_oracle, rr_oracle
from pipeline import run_pipeline
from rankssm import bench, kernels, toy
from rankssm import tensor as T
from rankssm.mamba import MambaBlock
from rankssm.metrics import mrr_at_k, ndcg_at_k
from rankssm.models import AttentionBlock, BackboneConfig, Reranker, score
from rankssm.reranker import (
    TrainConfig,
    build_training_samples,
    infonce_loss,
    model_scorer,
    smoothed,
    train,
)
from rankssm.retrieval import InvertedIndex, rerank, retrieve_all, retrieve_topk
from rankssm.ssm import (
    LTIParams,
    conv_apply_causal,
    discretize_zoh_t,
    linear_recurrence,
    lti_conv_forward,
    lti_recurrent_forward,
    selective_scan_fn,
)
from rankssm.tokenizer import EOS
from test_ssm import randomize, scan_inputs

SCAN_ARGS = ("x", "delta", "A", "B", "C", "skip")


def test_01_duality(acceptance):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        N, D, L = int(rng.integers(1, 17)), int(rng.integers(1, 5)), int(rng.integers(1, 129))
        p = LTIParams.random(N, D, rng)
        x = T.Tensor(rng.normal(size=(D, L)))
        conv = lti_conv_forward(x, p).data
        rec = lti_recurrent_forward(x, p).data
        worst = max(worst, float(np.max(np.abs(conv - rec) / np.maximum(np.abs(rec), 1e-12))))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and elapsed < 30
    acceptance(1, "conv/recurrent duality", ok, f"200 systems, max rel err {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_02_parallel_equals_sequential(acceptance):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst = 0.0
    for L in (1, 2, 3, 255, 256, 257, 4096):
        s = {k: T.Tensor(v) for k, v in scan_inputs(rng, L).items()}
        args = [s[k] for k in SCAN_ARGS]
        seq = selective_scan_fn(*args, mode="sequential").data
        par = selective_scan_fn(*args, mode="parallel").data
        worst = max(worst, float(np.max(np.abs(seq - par))))
        p = LTIParams.random(8, 3, rng)
        x = T.Tensor(rng.normal(size=(3, L)))
        seq = lti_recurrent_forward(x, p, "sequential").data
        par = lti_recurrent_forward(x, p, "parallel").data
        worst = max(worst, float(np.max(np.abs(seq - par))))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-10 and elapsed < 30
    acceptance(2, "parallel == sequential scan", ok, f"max abs err {worst:.2e}, {elapsed:.1f}s")
    assert ok


def _gradient_suite():
    rng = np.random.default_rng(11)

    def rand(*shape):
        return rng.normal(size=shape)

    errs = {}
    errs["matmul"] = check_op(T.matmul, [rand(3, 4), rand(4, 2)])
    for op in (T.exp, T.sigmoid, T.softplus, T.silu, T.square, T.neg, T.softmax_lastdim, T.logsumexp_lastdim):
        errs[op.__name__] = check_op(op, [rand(3, 5)])
    errs["log"] = check_op(T.log, [rng.uniform(0.5, 2.0, size=(4, 3))])
    for op in (T.add, T.sub, T.mul, T.div):
        errs[op.__name__] = check_op(op, [rand(3, 5), rng.uniform(0.5, 2.0, size=5)])
    errs["rmsnorm"] = check_op(T.rmsnorm, [rand(4, 6), rand(6)])
    errs["depthwise_conv"] = check_op(T.depthwise_causal_conv, [rand(7, 3), rand(3, 4), rand(3)])

    a = -rng.uniform(0.1, 3.0, size=(3, 4))
    a[0, 0] = -1e-7
    errs["discretize"] = check_op(lambda d, a_, b_: (lambda ab: ab[0] + 1.7 * ab[1])(discretize_zoh_t(d, a_, b_)),
                                  [rng.uniform(1e-3, 1.0, size=(3, 4)), a, rand(3, 4)])
    for mode in ("sequential", "parallel"):
        errs[f"linear_scan_{mode}"] = check_op(lambda a_, b_, h_: linear_recurrence(a_, b_, h_, mode),
                                               [rng.uniform(0.1, 0.99, size=(6, 3)), rand(6, 3), rand(3)])
        for memory in ("store_all", "recompute"):
            s = scan_inputs(rng, 7, D=2, N=3)
            errs[f"selective_{mode}_{memory}"] = check_op(
                lambda *z: selective_scan_fn(*z, mode=mode, backward_memory=memory), [s[k] for k in SCAN_ARGS])
    errs["conv"] = check_op(conv_apply_causal, [rand(2, 7), rand(2, 7)])
    p = LTIParams.random(3, 2, rng)
    x, w = T.Tensor(rand(2, 9)), rand(2, 9)
    errs["lti_conv_params"] = check_module(lambda: T.tsum(lti_conv_forward(x, p) * w), p.parameters())

    block = MambaBlock(8, rng, n_state=4)
    randomize(block, rng)
    u, w = T.parameter(rand(6, 8)), rand(6, 8)
    errs["mamba_block"] = check_module(lambda: T.tsum(block(u) * w), block.parameters() + [u])
    ablock = AttentionBlock(8, 2, True, rng)
    randomize(ablock, rng)
    u = T.parameter(rand(6, 8))
    errs["attention_block"] = check_module(lambda: T.tsum(ablock(u) * w), ablock.parameters() + [u])
    errs["infonce"] = check_op(lambda s: infonce_loss(s[0], [s[i] for i in range(1, 8)]), [rand(8)])

    m = Reranker(BackboneConfig(n_layers=2, d_model=8, n_state=4))
    randomize(m, rng)
    params = [q for n, q in m.named_parameters() if "embed" not in n]
    errs["score"] = check_module(lambda: score([5, 6, 7, 8, EOS], m.backbone, m.head), params)
    return errs


def test_03_gradient_suite(acceptance):
    t0 = time.perf_counter()
    errs = _gradient_suite()
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-4 and elapsed < 300
    acceptance(3, "finite-difference gradients", ok,
               f"{len(errs)} ops, worst {worst} rel err {errs[worst]:.2e}, {elapsed:.1f}s")
    assert ok, errs


def test_04_recompute(acceptance):
    rng = np.random.default_rng(3)
    L = 2048
    s = scan_inputs(rng, L, D=16, N=16)
    g = rng.normal(size=(L, 16))
    grads = {}

    def run(memory):
        def fn():
            ps = [T.parameter(s[k]) for k in SCAN_ARGS]
            T.backward(T.tsum(selective_scan_fn(*ps, backward_memory=memory) * g))
            grads[memory] = [q.grad for q in ps]

        return fn

    peak = {m: bench.measure_peak([run(m)]) for m in ("store_all", "recompute")}
    diff = max(float(np.max(np.abs(a - b))) for a, b in zip(grads["store_all"], grads["recompute"]))
    ok = diff < 1e-10 and peak["recompute"] < peak["store_all"]
    acceptance(4, "recompute in backward", ok,
               f"grad diff {diff:.2e}, peak store_all {peak['store_all']} B > recompute {peak['recompute']} B")
    assert ok


def test_05_infonce_closed_form(acceptance):
    errs = {}
    for k in (1, 7):
        for c in (0.0, 3.7, -120.0):
            loss = infonce_loss(T.Tensor(c), [T.Tensor(c) for _ in range(k)]).item()
            errs[(k, c)] = abs(loss - math.log(1 + k))
    worst = max(errs.values())
    ok = worst < 1e-9
    acceptance(5, "InfoNCE ln(1+k)", ok, f"k in {{1, 7}}, max abs err {worst:.1e}")
    assert ok


def test_06_metric_oracles(acceptance):
    mismatches = 0
    checked = 0
    for n in range(1, 7):
        rng = np.random.default_rng(100 + n)
        docs = [f"d{i}" for i in range(n)]
        grades = {d: int(g) for d, g in zip(docs, rng.integers(0, 4, size=n))}
        for perm in itertools.permutations(docs):
            run = {"q": [(d, float(-i)) for i, d in enumerate(perm)]}
            for k in (1, 3, 10):
                checked += 1
                if mrr_at_k(run, {"q": grades}, k) != rr_oracle(perm, grades, k):
                    mismatches += 1
                for expo in (False, True):
                    got = ndcg_at_k(run, {"q": grades}, k, "exponential" if expo else "linear")
                    if abs(got - ndcg_oracle(perm, grades, k, expo)) > 1e-12:
                        mismatches += 1
    worked = ndcg_at_k({"q": [("two", 2.0), ("three", 1.0)]}, {"q": {"three": 3, "two": 2}}, k=10)
    ok = mismatches == 0 and round(worked, 5) == 0.91340
    acceptance(6, "metric oracles", ok, f"{checked} permutation/cutoff cases, {mismatches} mismatches, "
               f"worked NDCG {worked:.5f}")
    assert ok


def test_07_bm25_oracle(acceptance):
    rng = np.random.default_rng(77)
    vocab = [f"w{i}" for i in range(300)]
    weights = 1.0 / np.arange(1, 301)
    weights /= weights.sum()
    docs = {f"doc{i:04d}": list(rng.choice(vocab, size=int(rng.integers(5, 60)), p=weights)) for i in range(2000)}
    index = InvertedIndex.build({d: " ".join(t) for d, t in docs.items()})
    worst, compared = 0.0, 0
    for _ in range(25):
        query = list(rng.choice(vocab, size=int(rng.integers(1, 5))))
        expected = bm25_oracle(docs, query, 4.46, 0.82)
        got = dict(retrieve_topk(" ".join(query), index, k=2000, k1=4.46, b=0.82))
        assert set(got) == set(expected)
        for d, s in expected.items():
            worst = max(worst, abs(got[d] - s))
            compared += 1
    ok = worst < 1e-9
    acceptance(7, "BM25 vs exhaustive oracle", ok, f"{compared} scores, max abs err {worst:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 8: end-to-end toy training
# ---------------------------------------------------------------------------

TOY_MODEL = dict(kind="mamba", n_layers=2, d_model=64, n_state=8, seed=0)
TOY_TRAIN = dict(lr=1e-3, warmup_steps=30, queries_per_batch=1, seed=0)
TOY_BUDGET_S = 15 * 60  # both toy runs together
_toy_elapsed = {}


@pytest.fixture(scope="module")
def toy_setup():
    c = toy.load_bundled()
    index = InvertedIndex.build(c.collection)
    run = retrieve_all(c.queries, index)
    train_run = retrieve_all(c.train_queries, index)
    samples = build_training_samples(c.train_qrels, train_run, c.collection, c.train_queries, k=7, seed=0)
    rng = np.random.default_rng(0)
    shuffled = {q: [r[i] for i in rng.permutation(len(r))] for q, r in run.items()}
    return c, run, samples, mrr_at_k(shuffled, c.qrels)


def _toy_mrr(model, c, run):
    return mrr_at_k(rerank(run, model_scorer(model), c.queries, c.collection), c.qrels)


def test_08_toy_training(acceptance, toy_setup):
    c, run, samples, shuffle_mrr = toy_setup
    t0 = time.perf_counter()
    model = Reranker(BackboneConfig(**TOY_MODEL))
    before = _toy_mrr(model, c, run)
    result = train(samples, model, TrainConfig(**TOY_TRAIN))
    after = _toy_mrr(model, c, run)
    sm = smoothed([loss for _, _, loss in result.loss_log], 50)
    elapsed = _toy_elapsed["full"] = time.perf_counter() - t0
    ok = after - before >= 0.15 and after - shuffle_mrr >= 0.10 and sm[-1] < sm[0] and elapsed < TOY_BUDGET_S
    acceptance(8, "toy training (full)", ok,
               f"MRR@100 untrained {before:.4f} -> trained {after:.4f} (shuffled BM25 {shuffle_mrr:.4f}); "
               f"smoothed loss {sm[0]:.4f} -> {sm[-1]:.4f}; {len(samples)} steps; {elapsed:.0f}s")
    assert ok


def test_08_toy_training_lora(acceptance, toy_setup):
    c, run, samples, _ = toy_setup
    t0 = time.perf_counter()
    model = Reranker(BackboneConfig(**TOY_MODEL))
    result = train(samples, model, TrainConfig(**TOY_TRAIN, lora=(32, 32.0)))
    sm = smoothed([loss for _, _, loss in result.loss_log], 50)
    after = _toy_mrr(model, c, run)
    elapsed = time.perf_counter() - t0
    total = elapsed + _toy_elapsed.get("full", 0.0)
    ok = sm[-1] < sm[0] and total < TOY_BUDGET_S
    acceptance(8, "toy training (LoRA rank 32)", ok,
               f"smoothed loss {sm[0]:.4f} -> {sm[-1]:.4f}; MRR@100 {after:.4f}; {elapsed:.0f}s "
               f"({total:.0f}s for both runs)")
    assert ok


def test_09_throughput_shape(acceptance):
    t0 = time.perf_counter()
    lengths = [256, 512, 1024, 2048, 4096]
    records = bench.run_benchmark(["selective_scan", "attention"], lengths, bench.BenchConfig(batch=2))
    slopes = {name: slope for name, _, slope in bench.scaling_report(records)}
    elapsed = time.perf_counter() - t0
    gap = slopes.get("attention", float("nan")) - slopes.get("selective_scan", float("nan"))
    ok = gap > 0.5 and slopes.get("selective_scan", float("inf")) < 1.5 and elapsed < 600
    acceptance(9, "throughput scaling", ok,
               f"slope attention {slopes.get('attention', float('nan')):.3f}, selective_scan "
               f"{slopes.get('selective_scan', float('nan')):.3f}, gap {gap:.3f}, {elapsed:.0f}s")
    assert ok


def test_10_determinism(acceptance, tmp_path, capsys):
    corpus = toy.bundled_toy_dir()
    first = run_pipeline(corpus, tmp_path / "a")
    second = run_pipeline(corpus, tmp_path / "b")
    differing = sorted(f for f in first if first[f] != second.get(f))
    ok = not differing and first.keys() == second.keys()
    acceptance(10, "byte-identical pipeline", ok,
               f"{len(first)} files compared (runs, metric CSVs, checkpoints); differing: {differing or 'none'}")
    assert ok
