"""Training data construction, the InfoNCE objective, and the training loop."""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .errors import ConfigError, NumericError
from .models import Reranker
from .optim import AdamW, warmup_linear_lr
from .tokenizer import CLS, EOS, SEP, encode, tokenize

log = logging.getLogger(__name__)

CAUSAL_TEMPLATE = "document: {d}\n\nquery: {q}"
NUM_INTERMEDIATE_CHECKPOINTS = 10


def format_input(q: str, d: str, kind: str, max_len: int = 512) -> list[int]:
    """Token ids for a (query, document) pair.

    Causal and Mamba backbones read the document first and the query last;
    bidirectional backbones get [CLS] q [SEP] d [EOS].
    """
    if kind == "attention-bidirectional":
        ids = [CLS] + encode(q) + [SEP] + encode(d)
        return ids[: max_len - 1] + [EOS]
    return tokenize(CAUSAL_TEMPLATE.format(d=d, q=q), max_len)


@dataclass
class TrainingSample:
    qid: str
    query: str
    pos_id: str
    pos: str
    negs: list  # [(doc_id, text), ...]

    def __post_init__(self):
        if any(doc_id == self.pos_id for doc_id, _ in self.negs):
            raise ValueError(f"positive {self.pos_id!r} also listed as a negative for {self.qid!r}")

    def to_json(self) -> str:
        return json.dumps(
            {"qid": self.qid, "query": self.query, "pos_id": self.pos_id, "pos": self.pos,
             "negs": [{"id": i, "text": t} for i, t in self.negs]},
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, line: str) -> "TrainingSample":
        obj = json.loads(line)
        return cls(obj["qid"], obj["query"], obj["pos_id"], obj["pos"], [(n["id"], n["text"]) for n in obj["negs"]])


def write_samples(path, samples):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")


def read_samples(path):
    with open(path, encoding="utf-8") as fh:
        return [TrainingSample.from_json(line) for line in fh if line.strip()]


def _sample_rng(seed, qid, pos_id):
    return np.random.default_rng([seed, zlib.crc32(qid.encode()), zlib.crc32(pos_id.encode())])


def sample_negatives(qrels, run, k=7, seed=0, depth=100):
    """(qid, positive doc_id) -> k hard negatives drawn from the run's top ``depth``.

    Candidates exclude every document judged relevant (grade >= 1) for the
    query. Sampling is uniform without replacement and keyed on
    (seed, qid, pos_id), so results do not depend on iteration order. Pairs
    with fewer than k candidates are skipped with a warning.
    """
    out = {}
    for qid in sorted(qrels):
        positives = sorted(d for d, g in qrels[qid].items() if g >= 1)
        if not positives:
            continue
        if qid not in run:
            log.warning("query %s has no first-stage results; skipped", qid)
            continue
        relevant = set(positives)
        cands = [d for d, _ in run[qid][:depth] if d not in relevant]
        if len(cands) < k:
            log.warning("query %s: %d negative candidates < %d; skipped", qid, len(cands), k)
            continue
        for pos_id in positives:
            picks = _sample_rng(seed, qid, pos_id).choice(len(cands), size=k, replace=False)
            out[(qid, pos_id)] = [cands[i] for i in picks]
    return out


def build_training_samples(qrels, run, collection, queries, k=7, seed=0, depth=100):
    samples = []
    for (qid, pos_id), negs in sample_negatives(qrels, run, k, seed, depth).items():
        samples.append(
            TrainingSample(qid, queries[qid], pos_id, collection[pos_id], [(n, collection[n]) for n in negs])
        )
    return samples


def infonce_loss(pos_score, neg_scores):
    """-log softmax of the positive against the negatives, via log-sum-exp."""
    if len(neg_scores) == 0:
        raise ValueError("InfoNCE needs at least one negative score")
    scores = T.stack([T.as_tensor(pos_score)] + [T.as_tensor(s) for s in neg_scores])
    return T.logsumexp_lastdim(scores) - pos_score


@dataclass
class TrainConfig:
    lr: float = 2e-5
    warmup_steps: int = 1000
    epochs: int = 1
    negatives_per_positive: int = 7
    queries_per_batch: int = 8
    seed: int = 0
    lora: tuple | None = None  # (rank, alpha)
    weight_decay: float = 0.01
    scan_mode: str = "sequential"

    def __post_init__(self):
        if self.epochs < 1 or self.queries_per_batch < 1 or self.negatives_per_positive < 1:
            raise ConfigError("epochs, queries_per_batch and negatives_per_positive must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")


@dataclass
class TrainResult:
    loss_log: list = field(default_factory=list)  # (step, lr, loss)
    checkpoints: list = field(default_factory=list)
    total_steps: int = 0


def checkpoint_steps(total_steps: int, n: int = NUM_INTERMEDIATE_CHECKPOINTS) -> list[int]:
    """Evenly spaced steps strictly before the end of training."""
    return [i * total_steps // (n + 1) for i in range(1, n + 1)]


def sample_loss(model: Reranker, sample: TrainingSample, mode="sequential"):
    cfg = model.config
    pos = model.score(format_input(sample.query, sample.pos, cfg.kind, cfg.max_len), mode)
    negs = [model.score(format_input(sample.query, text, cfg.kind, cfg.max_len), mode) for _, text in sample.negs]
    return infonce_loss(pos, negs)


def smoothed(values, window=50):
    """Trailing moving average; the first value averages the first ``window`` items."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        window = max(1, len(v))
    c = np.cumsum(np.concatenate([[0.0], v]))
    return (c[window:] - c[:-window]) / window


def train(samples, model: Reranker, config: TrainConfig, out_dir=None) -> TrainResult:
    """One pass (per epoch) over ``samples`` in seeded shuffled order.

    Each optimizer step averages the InfoNCE loss over ``queries_per_batch``
    samples. Writes loss.csv, model.cfg, 10 intermediate checkpoints and
    final.rksm into ``out_dir`` when given.
    """
    if not samples:
        raise ValueError("no training samples")
    if config.lora and not model.config.lora_rank:
        rank, alpha = config.lora
        model.config.lora_rank, model.config.lora_alpha = int(rank), float(alpha)
        model.backbone.apply_lora(int(rank), float(alpha), np.random.default_rng([config.seed, 2]))
    rng = np.random.default_rng(config.seed)
    qpb = config.queries_per_batch
    steps_per_epoch = math.ceil(len(samples) / qpb)
    total = steps_per_epoch * config.epochs
    warmup_linear_lr(0, config.lr, config.warmup_steps, total)  # validates the schedule

    params = model.trainable_parameters()
    opt = AdamW(params, weight_decay=config.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        model.config.save(out / "model.cfg")
    result = TrainResult(total_steps=total)
    ckpt_at = checkpoint_steps(total)

    def save(name):
        if out is not None:
            path = out / name
            save_checkpoint(path, model.state_dict())
            result.checkpoints.append(path)

    step = 0
    for i, s in enumerate(ckpt_at, 1):
        if s == 0:
            save(f"checkpoint-{i:02d}-step{s:06d}.rksm")
    for _ in range(config.epochs):
        order = rng.permutation(len(samples))
        for b in range(steps_per_epoch):
            batch = [samples[j] for j in order[b * qpb : (b + 1) * qpb]]
            opt.zero_grad()
            total_loss = 0.0
            for sample in batch:
                try:
                    loss = sample_loss(model, sample, config.scan_mode) * (1.0 / len(batch))
                except NumericError:
                    T.get_tape().clear()
                    _dump_batch(out, step + 1, batch)
                    raise
                if not np.isfinite(loss.item()):
                    T.get_tape().clear()
                    _dump_batch(out, step + 1, batch)
                    raise NumericError(f"non-finite loss at step {step + 1} (query {sample.qid})")
                T.backward(loss)
                total_loss += loss.item()
            step += 1
            lr = warmup_linear_lr(step, config.lr, config.warmup_steps, total)
            opt.step(lr)
            result.loss_log.append((step, lr, total_loss))
            for i, s in enumerate(ckpt_at, 1):
                if s == step:
                    save(f"checkpoint-{i:02d}-step{s:06d}.rksm")
    save("final.rksm")
    if out is not None:
        write_loss_log(out / "loss.csv", result.loss_log)
    return result


def _dump_batch(out, step, batch):
    if out is None:
        return
    path = out / f"nonfinite-step{step:06d}.jsonl"
    write_samples(path, batch)
    log.error("wrote offending batch to %s", path)


def write_loss_log(path, rows):
    lines = ["step,lr,loss"] + [f"{s},{lr!r},{loss!r}" for s, lr, loss in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def model_scorer(model: Reranker, mode="sequential"):
    """(query, doc) -> float closure for :func:`rankssm.retrieval.rerank`."""
    cfg = model.config

    def scorer(q, d):
        with T.no_grad():
            return model.score(format_input(q, d, cfg.kind, cfg.max_len), mode).item()

    return scorer
