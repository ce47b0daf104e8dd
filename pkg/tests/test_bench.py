"""Tests for the latency and state-size benchmark."""
import numpy as np
import pytest

from src.bench import (
    KERNELS,
    MIN_REPS,
    ROW_BLOCK,
    _inputs,
    linattn_kernel,
    normalize_mechanisms,
    run_bench,
    softmax_kernel,
    time_kernel,
    weight_matrix_bytes,
    zeros_kernel,
    zeros_naive_kernel,
)
from src.errors import ConfigError
from src.zeros_core import ScanState


class TestKernels:
    """Tests that the timed kernels compute the right thing."""

    @pytest.mark.parametrize("n", [1, 40, ROW_BLOCK + 44])
    def test_scan_matches_naive(self, n):
        """The scan kernel and the row-blocked quadratic kernel agree."""
        x = _inputs(n, 2, 8, seed=1)
        scan, _ = zeros_kernel(x)
        naive, _ = zeros_naive_kernel(x)
        assert np.abs(scan - naive).max() <= 1e-8

    def test_softmax_kernel(self):
        """Row blocks reproduce causal softmax attention."""
        x = _inputs(ROW_BLOCK + 10, 1, 4, seed=2)
        q, k, v = x["q"][0], x["k"][0], x["v"][0]
        S = q @ k.T / 2.0
        S[np.triu_indices(len(S), 1)] = -np.inf
        A = np.exp(S - S.max(-1, keepdims=True))
        expected = (A / A.sum(-1, keepdims=True)) @ v
        out, _ = softmax_kernel(x)
        assert np.allclose(out[0], expected, atol=1e-10)

    def test_linattn_first_position(self):
        """Linear attention returns v_1 at the first position."""
        x = _inputs(6, 2, 4, seed=3)
        out, _ = linattn_kernel(x)
        assert np.allclose(out[:, 0], x["v"][:, 0])

    def test_every_kernel_keeps_shape(self):
        """All kernels return [H, N, h]."""
        x = _inputs(12, 2, 4, seed=4)
        assert all(kernel(x)[0].shape == (2, 12, 4) for kernel in KERNELS.values())


class TestStateBytes:
    """Tests for the state sizes the kernels report."""

    def test_zeros_matches_scan_state(self):
        """The scan kernel reports the bytes its ScanState holds."""
        _, nbytes = zeros_kernel(_inputs(20, 4, 8, seed=5))
        assert nbytes == ScanState.empty((4,), 8, np.float64).nbytes

    def test_zeros_constant_in_length(self):
        """The scan state does not grow with N."""
        sizes = {zeros_kernel(_inputs(n, 2, 8, seed=6))[1] for n in (4, 64, ROW_BLOCK + 3)}
        assert len(sizes) == 1

    def test_linattn_constant_in_length(self):
        """Linear attention carries an h x h matrix and a normalizer per head."""
        sizes = {linattn_kernel(_inputs(n, 2, 8, seed=7))[1] for n in (4, 64)}
        assert sizes == {2 * (8 * 8 + 8) * 8}

    def test_quadratic_grows(self):
        """Quadratic mechanisms report N x N weights."""
        _, small = softmax_kernel(_inputs(16, 2, 4, seed=8))
        _, large = softmax_kernel(_inputs(32, 2, 4, seed=8))
        assert large == 4 * small == 4 * weight_matrix_bytes(np.zeros((2, 16, 4)))


class TestRunBench:
    """Tests for run_bench."""

    def test_reports(self):
        """One report per (mechanism, length) in request order."""
        reports = run_bench(["zeros", "softmax"], [8, 16], d_model=16, n_heads=2, reps=MIN_REPS)
        assert [(r.mechanism, r.seq_len) for r in reports] == [("zeros", 8), ("zeros", 16), ("softmax", 8), ("softmax", 16)]
        assert all(r.reps == MIN_REPS and r.median_ms >= 0 for r in reports)

    def test_reported_state_is_measured(self):
        """The zeros row carries ScanState.nbytes and stays flat in N."""
        reports = run_bench(["zeros"], [8, 32], d_model=16, n_heads=2, reps=MIN_REPS)
        assert {r.peak_state_bytes for r in reports} == {ScanState.empty((2,), 8, np.float64).nbytes}

    def test_single_precision_halves_state(self):
        """Single precision reports 4-byte state entries."""
        single = run_bench(["softmax"], [8], d_model=16, n_heads=2, reps=5, precision="single")[0]
        double = run_bench(["softmax"], [8], d_model=16, n_heads=2, reps=5)[0]
        assert 2 * single.peak_state_bytes == double.peak_state_bytes

    def test_too_few_reps(self):
        """Fewer than five reps are rejected."""
        with pytest.raises(ConfigError):
            run_bench(["zeros"], [8], d_model=16, n_heads=2, reps=4)

    def test_bad_head_split(self):
        """Heads must split d_model into even widths."""
        with pytest.raises(ConfigError):
            run_bench(["zeros"], [8], d_model=18, n_heads=2, reps=5)

    def test_aliases(self):
        """Short names map onto kernel names."""
        assert normalize_mechanisms(["linattn", " zeros_scan"]) == ["linattn_elu", "zeros"]
        with pytest.raises(ConfigError):
            normalize_mechanisms(["performer"])

    def test_time_kernel_counts(self):
        """Warmup calls are not timed."""
        calls = []
        times = time_kernel(lambda: calls.append(1), 5)
        assert len(times) == 5 and len(calls) == 7

    @pytest.mark.slow
    def test_scaling_bands(self):
        """Doubling N from 2048 to 4096 roughly doubles linear kernels and at least triples quadratic ones."""
        mechanisms = ["zeros", "linattn_elu", "zeros_naive", "softmax"]
        reports = run_bench(mechanisms, [2048, 4096], d_model=256, n_heads=4, reps=5)
        by = {(r.mechanism, r.seq_len): r for r in reports}
        ratio = {m: by[(m, 4096)].median_ms / by[(m, 2048)].median_ms for m in mechanisms}
        assert 1.6 <= ratio["zeros"] <= 2.5
        assert 1.6 <= ratio["linattn_elu"] <= 2.5
        assert ratio["zeros_naive"] >= 3.2
        assert ratio["softmax"] >= 3.2
        assert by[("zeros", 2048)].peak_state_bytes == by[("zeros", 4096)].peak_state_bytes
