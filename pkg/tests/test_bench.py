import logging

import numpy as np
import pytest

from rankssm import bench
from rankssm.bench import BenchConfig, BenchRecord


def synthetic(kernel, power):
    return [BenchRecord(kernel, L, 8, 4, 1, int(1000 * L**power), 0.0, 0, 1) for L in (64, 128, 256, 512)]


class TestScaling:
    def test_linear_and_quadratic(self):
        rows = dict((k, s) for k, _, s in bench.scaling_report(synthetic("lin", 1) + synthetic("quad", 2)))
        assert rows["lin"] == pytest.approx(1.0, abs=0.01)
        assert rows["quad"] == pytest.approx(2.0, abs=0.01)

    def test_too_few_points(self, caplog):
        recs = synthetic("lin", 1)[:2]
        with caplog.at_level(logging.WARNING):
            assert bench.scaling_report(recs) == []
        assert "fewer than 3" in caplog.text

    def test_failed_records_ignored(self):
        recs = synthetic("lin", 1)
        recs[0].status = "failed"
        assert bench.scaling_report(recs)[0][1] == 3


class TestRun:
    def test_empty_lengths(self):
        assert bench.run_benchmark(["selective_scan"], []) == []

    def test_records(self):
        cfg = BenchConfig(d_model=4, n_state=2, batch=2)
        recs = bench.run_benchmark(["selective_scan", "lti_conv", "attention"], [8, 16], cfg, repeats=5, warmup=1)
        assert len(recs) == 6
        for r in recs:
            assert r.ok and r.median_ns > 0 and r.min_ns <= r.median_ns <= r.max_ns and r.peak_bytes > 0
            assert r.tokens_per_sec == pytest.approx(r.L * r.batch / (r.median_ns * 1e-9), rel=1e-12)

    @pytest.mark.parametrize("kw", [dict(repeats=4), dict(warmup=0)])
    def test_protocol_bounds(self, kw):
        with pytest.raises(ValueError):
            bench.run_benchmark(["attention"], [8], **kw)

    def test_lengths_ascending(self):
        with pytest.raises(ValueError):
            bench.run_benchmark(["attention"], [16, 8])

    def test_unknown_kernel(self):
        with pytest.raises(KeyError):
            bench.run_benchmark(["fft"], [8])

    def test_failure_is_recorded(self, monkeypatch):
        def exploding(L, cfg, rng):
            raise MemoryError("simulated")

        monkeypatch.setitem(bench.KERNELS, "boom", exploding)
        recs = bench.run_benchmark(["boom", "attention"], [8], BenchConfig(d_model=4, batch=1))
        assert recs[0].status == "failed" and recs[1].ok

    def test_outputs_match_reference(self):
        cfg = BenchConfig(d_model=4, n_state=2, batch=1)
        for name in bench.KERNELS:
            (run,) = bench.make_kernel(name, 12, cfg)
            ref = run().copy()
            bench.run_benchmark([name], [12], cfg)
            (again,) = bench.make_kernel(name, 12, cfg)
            assert again().tobytes() == ref.tobytes(), name

    def test_sequential_scan_roughly_linear(self):
        cfg = BenchConfig(d_model=16, n_state=8, batch=2)
        recs = bench.run_benchmark(["selective_scan"], [512, 1024], cfg, repeats=7)
        ratio = recs[1].median_ns / recs[0].median_ns
        assert 1.5 <= ratio <= 3.0


class TestMemory:
    def test_recompute_uses_less(self):
        cfg = BenchConfig(d_model=8, n_state=16, batch=1)
        peaks = {}
        for name in ("selective_scan", "selective_scan_recompute"):
            peaks[name] = bench.measure_peak(bench.make_kernel(name, 1024, cfg))
        assert peaks["selective_scan_recompute"] < peaks["selective_scan"]


def test_csv_roundtrip(tmp_path):
    recs = synthetic("lin", 1)
    recs[1].status = "failed"
    recs[2].tokens_per_sec = 1 / 3
    bench.write_csv(tmp_path / "b.csv", recs)
    header = (tmp_path / "b.csv").read_text().splitlines()[0]
    assert header.startswith("kernel,L,d_model,n_state,batch,median_ns,tokens_per_sec,peak_bytes,threads")
    assert bench.read_csv(tmp_path / "b.csv") == recs


def test_gnuplot(tmp_path):
    bench.write_gnuplot(tmp_path / "b.dat", synthetic("lin", 1) + synthetic("quad", 2))
    text = (tmp_path / "b.dat").read_text()
    assert "# lin" in text and "# quad" in text and "\n\n\n# quad" in text
    rows = [line.split() for line in text.splitlines() if line and not line.startswith("#")]
    assert all(len(r) == 4 for r in rows) and len(rows) == 8
