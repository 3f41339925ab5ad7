"""Throughput and peak-memory harness for the sequence kernels.

Each kernel is timed on forward plus backward over ``batch`` random
sequences. Timing and memory use separate runs, because tracemalloc slows
allocation-heavy code. The attention reference is a plain O(L^2)
implementation with no fused or tiled kernel, so only the growth rate with L
is meaningful when comparing it to the scans.
"""

from __future__ import annotations

import csv
import gc
import logging
import math
import time
import tracemalloc
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import kernels
from . import tensor as T
from .mamba import MambaBlock
from .models import MASK_VALUE, AttentionBlock
from .ssm import LTIParams, build_conv_kernel, conv_apply_causal, selective_scan_fn

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "kernel", "L", "d_model", "n_state", "batch", "median_ns", "tokens_per_sec", "peak_bytes", "threads",
    "min_ns", "max_ns", "status",
)


@dataclass
class BenchConfig:
    d_model: int = 64
    n_state: int = 16
    batch: int = 4
    seed: int = 0


@dataclass
class BenchRecord:
    kernel: str
    L: int
    d_model: int
    n_state: int
    batch: int
    median_ns: int
    tokens_per_sec: float
    peak_bytes: int
    threads: int
    min_ns: int = 0
    max_ns: int = 0
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


# ---------------------------------------------------------------------------
# kernels: each factory returns a zero-argument callable doing forward+backward
# on one sequence and returning the output array
# ---------------------------------------------------------------------------


def _selective(mode="sequential", memory="store_all", backend=None):
    def factory(L, cfg, rng):
        D, N = cfg.d_model, cfg.n_state
        x = T.parameter(rng.standard_normal((L, D)))
        delta = T.parameter(rng.uniform(1e-3, 1e-1, (L, D)))
        A = T.parameter(-np.tile(np.arange(1, N + 1, dtype=np.float64), (D, 1)))
        B = T.parameter(rng.standard_normal((L, N)))
        C = T.parameter(rng.standard_normal((L, N)))
        skip = T.parameter(np.ones(D))
        gy = rng.standard_normal((L, D))

        def run():
            with kernels.use_backend(backend or kernels.get_backend()):
                y = selective_scan_fn(x, delta, A, B, C, skip, mode, memory)
                T.backward(T.tsum(y * gy))
            return y.data

        return run

    return factory


def _lti_conv(L, cfg, rng):
    params = LTIParams.random(cfg.n_state, cfg.d_model, rng)
    x = T.parameter(rng.standard_normal((cfg.d_model, L)))
    gy = rng.standard_normal((cfg.d_model, L))

    def run():
        y = conv_apply_causal(x, build_conv_kernel(params, L))
        T.backward(T.tsum(y * gy))
        return y.data

    return run


def _attention(L, cfg, rng):
    """Single-head scaled dot-product attention with a causal mask."""
    d = cfg.d_model
    q, k, v = (T.parameter(rng.standard_normal((L, d))) for _ in range(3))
    gy = rng.standard_normal((L, d))
    mask = np.triu(np.full((L, L), MASK_VALUE), k=1)

    def run():
        s = T.matmul(q, T.transpose(k)) * (1.0 / math.sqrt(d)) + mask
        y = T.matmul(T.softmax_lastdim(s), v)
        T.backward(T.tsum(y * gy))
        return y.data

    return run


def _mamba_block(L, cfg, rng):
    block = MambaBlock(cfg.d_model, rng, n_state=cfg.n_state)
    u = T.parameter(rng.standard_normal((L, cfg.d_model)))
    gy = rng.standard_normal((L, cfg.d_model))

    def run():
        y = block(u)
        T.backward(T.tsum(y * gy))
        return y.data

    return run


def _attention_block(L, cfg, rng):
    block = AttentionBlock(cfg.d_model, 1, True, rng)
    u = T.parameter(rng.standard_normal((L, cfg.d_model)))
    gy = rng.standard_normal((L, cfg.d_model))

    def run():
        y = block(u)
        T.backward(T.tsum(y * gy))
        return y.data

    return run


KERNELS = {
    "selective_scan": _selective(),
    "selective_scan_parallel": _selective(mode="parallel"),
    "selective_scan_recompute": _selective(memory="recompute"),
    "selective_scan_numpy": _selective(backend="numpy"),
    "lti_conv": _lti_conv,
    "attention": _attention,
    "mamba_block": _mamba_block,
    "attention_block": _attention_block,
}


def make_kernel(name, L, config: BenchConfig, seed=None):
    """Return ``batch`` forward+backward callables for kernel ``name`` at length L."""
    if name not in KERNELS:
        raise KeyError(f"unknown kernel {name!r}; choose from {sorted(KERNELS)}")
    rng = np.random.default_rng([config.seed if seed is None else seed, L])
    return [KERNELS[name](L, config, rng) for _ in range(config.batch)]


def _run_batch(runs):
    return [run() for run in runs]


def measure_peak(runs) -> int:
    """Peak traced allocation (bytes) of one forward+backward pass over the batch."""
    gc.collect()
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()
    base, _ = tracemalloc.get_traced_memory()
    try:
        _run_batch(runs)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        if not was_tracing:
            tracemalloc.stop()
    return max(0, peak - base)


def run_benchmark(kernel_names, lengths, config: BenchConfig | None = None, repeats=5, warmup=1):
    """Time forward+backward of each kernel at each length.

    A kernel that fails at some length (e.g. MemoryError) gets a record with
    status "failed" and the sweep continues.
    """
    config = config or BenchConfig()
    lengths = list(lengths)
    if repeats < 5:
        raise ValueError(f"repeats must be >= 5, got {repeats}")
    if warmup < 1:
        raise ValueError(f"warmup must be >= 1, got {warmup}")
    if lengths != sorted(lengths) or any(L < 1 for L in lengths):
        raise ValueError("lengths must be positive and ascending")
    threads = kernels.get_threads()
    records = []
    for name in kernel_names:
        if name not in KERNELS:
            raise KeyError(f"unknown kernel {name!r}; choose from {sorted(KERNELS)}")
        for L in lengths:
            rec = dict(kernel=name, L=L, d_model=config.d_model, n_state=config.n_state,
                       batch=config.batch, threads=threads)
            try:
                runs = make_kernel(name, L, config)
                for _ in range(warmup):
                    _run_batch(runs)
                times = []
                for _ in range(repeats):
                    t0 = time.perf_counter_ns()
                    _run_batch(runs)
                    times.append(time.perf_counter_ns() - t0)
                peak = measure_peak(runs)
                med = int(np.median(times))
                records.append(BenchRecord(
                    **rec, median_ns=med, tokens_per_sec=L * config.batch / (med * 1e-9), peak_bytes=peak,
                    min_ns=min(times), max_ns=max(times),
                ))
            except (MemoryError, FloatingPointError, ValueError) as exc:
                log.warning("kernel %s failed at L=%d: %s", name, L, exc)
                T.get_tape().clear()
                records.append(BenchRecord(**rec, median_ns=0, tokens_per_sec=0.0, peak_bytes=0, status="failed"))
            finally:
                runs = None
                gc.collect()
            log.info("%s L=%d: %s", name, L, records[-1])
    return records


def fit_slope(lengths, times) -> float:
    """Least-squares slope of log(time) against log(L)."""
    x = np.log(np.asarray(lengths, dtype=np.float64))
    y = np.log(np.asarray(times, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


def scaling_report(records):
    """Rows (kernel, n_points, slope) of the fitted log-log time scaling per kernel."""
    by_kernel: dict[str, list] = {}
    for r in records:
        if r.ok and r.median_ns > 0:
            by_kernel.setdefault(r.kernel, []).append(r)
    rows = []
    for name, recs in by_kernel.items():
        if len({r.L for r in recs}) < 3:
            log.warning("kernel %s has fewer than 3 lengths; omitted from the scaling fit", name)
            continue
        rows.append((name, len(recs), fit_slope([r.L for r in recs], [r.median_ns for r in recs])))
    return rows


def write_csv(path, records):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([getattr(r, c) if c != "tokens_per_sec" else repr(r.tokens_per_sec) for c in CSV_COLUMNS])


def read_csv(path):
    types = {f.name: f.type for f in fields(BenchRecord)}
    conv = {"int": int, "float": float, "str": str}
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(BenchRecord(**{k: conv[types[k]](v) for k, v in row.items()}))
    return out


def write_gnuplot(path, records):
    """Whitespace-separated blocks, one per kernel, separated by two blank lines."""
    lines = ["# kernel L median_ns tokens_per_sec peak_bytes"]
    by_kernel: dict[str, list] = {}
    for r in records:
        if r.ok:
            by_kernel.setdefault(r.kernel, []).append(r)
    for name, recs in by_kernel.items():
        lines.append(f"# {name}")
        lines += [f"{r.L} {r.median_ns} {r.tokens_per_sec:.6g} {r.peak_bytes}" for r in recs]
        lines += ["", ""]
    Path(path).write_text("\n".join(lines) + "\n")


def record_dicts(records):
    return [asdict(r) for r in records]
