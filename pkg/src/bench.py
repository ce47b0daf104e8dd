"""Forward-only latency and state-size measurements per mechanism and length.

Kernels work on plain arrays (no tape) for one sequence of H heads; inputs
are prepared once per (mechanism, N) and only the kernel call is timed.
Each kernel returns its output together with the bytes of the state it
carried: the scan state for linear mechanisms, the N x N weights otherwise.
Quadratic kernels walk row blocks so memory stays O(block * N).
"""
import logging
import time
from typing import Callable, Iterable

import numpy as np

from src.errors import ConfigError
from src.schemas import BenchReport
from src.tensor import default_dtype, get_default_dtype, make_rng
from src.zeros_core import rope_table, zeros_scan_kernel

logger = logging.getLogger(__name__)

WARMUP_REPS = 2
MIN_REPS = 5
ROW_BLOCK = 256

MECHANISM_ALIASES = {"linattn": "linattn_elu", "zeros_scan": "zeros"}
BENCH_MECHANISMS = ("zeros", "zeros_naive", "zeros_sm", "softmax", "linattn_elu")

KernelRun = tuple[np.ndarray, int]


def _unit(x: np.ndarray) -> np.ndarray:
    """Rows scaled to unit length (zero rows stay near zero)."""
    return x / (np.linalg.norm(x, axis=-1, keepdims=True) + 1e-6)


def _inputs(n: int, n_heads: int, head_dim: int, seed: int) -> dict[str, np.ndarray]:
    """Random per-head Q/K/V plus the rotated unit rows, clamped logits and gates the ZeroS kernels read."""
    dtype = get_default_dtype()
    rng = make_rng(seed)
    table = rope_table(n, head_dim)

    def rotate(x):
        out = np.empty_like(x)
        cos, sin = table.cos.astype(dtype), table.sin.astype(dtype)
        out[..., 0::2] = x[..., 0::2] * cos - x[..., 1::2] * sin
        out[..., 1::2] = x[..., 0::2] * sin + x[..., 1::2] * cos
        return out

    shape = (n_heads, n, head_dim)
    q, k, v = (rng.standard_normal(shape).astype(dtype) for _ in range(3))
    s = 20.0 * np.tanh(rng.standard_normal((n_heads, n)) / 20.0)
    gates = 1.0 / (1.0 + np.exp(-rng.standard_normal((n_heads, n, 3))))
    return {
        "q": q,
        "k": k,
        "v": v,
        "q_hat": rotate(_unit(q)),
        "k_hat": rotate(_unit(k)),
        "s": s.astype(dtype),
        "g0": np.zeros((n_heads, n), dtype=dtype),
        "g1": gates[..., 1].astype(dtype),
        "gh": gates[..., 2].astype(dtype),
    }


def _row_blocks(n: int) -> Iterable[tuple[int, int]]:
    """Half-open row ranges of at most ROW_BLOCK rows covering [0, n)."""
    for r0 in range(0, n, ROW_BLOCK):
        yield r0, min(n, r0 + ROW_BLOCK)


def weight_matrix_bytes(v: np.ndarray) -> int:
    """Bytes of the full per-head N x N weight matrix a quadratic mechanism defines."""
    n_heads, n = v.shape[0], v.shape[-2]
    return n_heads * n * n * v.dtype.itemsize


def zeros_naive_kernel(x: dict[str, np.ndarray]) -> KernelRun:
    q, k, v, s = x["q_hat"], x["k_hat"], x["v"], x["s"]
    n = s.shape[-1]
    steps = np.arange(1, n + 1, dtype=s.dtype)
    s_bar = np.cumsum(s, axis=-1) / steps
    run_max = np.maximum.accumulate(s, axis=-1)
    out = np.empty_like(v)
    for r0, r1 in _row_blocks(n):
        mask = np.tri(r1 - r0, r1, k=r0, dtype=bool)
        inv_t = (1.0 / steps[r0:r1])[:, None]
        delta = np.where(mask, s[:, None, :r1] - s_bar[:, r0:r1, None], 0.0)
        e = np.where(mask, np.exp(s[:, None, :r1] - run_max[:, r0:r1, None]), 0.0)
        soft = e / e.sum(axis=-1, keepdims=True)
        eps = np.where(mask, soft - inv_t, 0.0) - delta * inv_t
        r = x["g1"][:, r0:r1, None] * delta * inv_t + x["gh"][:, r0:r1, None] * eps
        w = r * (q[:, r0:r1] @ np.swapaxes(k[:, :r1], -1, -2))
        out[:, r0:r1] = w @ v[:, :r1]
    return out, weight_matrix_bytes(v)


def zeros_sm_kernel(x: dict[str, np.ndarray]) -> KernelRun:
    q, k, v = x["q"], x["k"], x["v"]
    n, h = q.shape[-2], q.shape[-1]
    steps = np.arange(1, n + 1, dtype=q.dtype)
    out = np.empty_like(v)
    for r0, r1 in _row_blocks(n):
        mask = np.tri(r1 - r0, r1, k=r0, dtype=bool)
        inv_t = (1.0 / steps[r0:r1])[:, None]
        S = np.where(mask, q[:, r0:r1] @ np.swapaxes(k[:, :r1], -1, -2) / np.sqrt(h), 0.0)
        delta = np.where(mask, S - S.sum(axis=-1, keepdims=True) * inv_t, 0.0)
        e = np.where(mask, np.exp(S - np.where(mask, S, -np.inf).max(axis=-1, keepdims=True)), 0.0)
        eps = np.where(mask, e / e.sum(axis=-1, keepdims=True) - inv_t, 0.0) - delta * inv_t
        w = x["g1"][:, r0:r1, None] * delta * inv_t + x["gh"][:, r0:r1, None] * eps
        out[:, r0:r1] = w @ v[:, :r1]
    return out, weight_matrix_bytes(v)


def softmax_kernel(x: dict[str, np.ndarray]) -> KernelRun:
    q, k, v = x["q"], x["k"], x["v"]
    n, h = q.shape[-2], q.shape[-1]
    out = np.empty_like(v)
    for r0, r1 in _row_blocks(n):
        mask = np.tri(r1 - r0, r1, k=r0, dtype=bool)
        S = np.where(mask, q[:, r0:r1] @ np.swapaxes(k[:, :r1], -1, -2) / np.sqrt(h), -np.inf)
        e = np.exp(S - S.max(axis=-1, keepdims=True))
        out[:, r0:r1] = (e / e.sum(axis=-1, keepdims=True)) @ v[:, :r1]
    return out, weight_matrix_bytes(v)


def linattn_kernel(x: dict[str, np.ndarray]) -> KernelRun:
    def phi(a):
        return np.where(a > 0, a + 1.0, np.exp(np.minimum(a, 0.0)))

    q, k, v = phi(x["q"]), phi(x["k"]), x["v"]
    n, h = q.shape[-2], q.shape[-1]
    state = np.zeros((q.shape[0], h, v.shape[-1]), dtype=q.dtype)
    z = np.zeros((q.shape[0], h), dtype=q.dtype)
    out = np.empty_like(v)
    for t in range(n):
        state += k[:, t, :, None] * v[:, t, None, :]
        z += k[:, t]
        num = np.einsum("lh,lhk->lk", q[:, t], state)
        den = np.maximum((q[:, t] * z).sum(axis=-1), 1e-6)
        out[:, t] = num / den[:, None]
    return out, state.nbytes + z.nbytes


def zeros_kernel(x: dict[str, np.ndarray]) -> KernelRun:
    out, state, _ = zeros_scan_kernel(x["q_hat"], x["k_hat"], x["v"], x["s"], x["g0"], x["g1"], x["gh"])
    return out, state.nbytes


KERNELS: dict[str, Callable[[dict], KernelRun]] = {
    "zeros": zeros_kernel,
    "zeros_naive": zeros_naive_kernel,
    "zeros_sm": zeros_sm_kernel,
    "softmax": softmax_kernel,
    "linattn_elu": linattn_kernel,
}


def normalize_mechanisms(names: Iterable[str]) -> list[str]:
    """Strip, resolve aliases and reject names without a kernel."""
    out = []
    for name in names:
        name = MECHANISM_ALIASES.get(name.strip(), name.strip())
        if name not in KERNELS:
            raise ConfigError(f"unknown bench mechanism {name!r}, expected one of {sorted(KERNELS)}")
        out.append(name)
    return out


def time_kernel(fn: Callable[[], object], reps: int) -> np.ndarray:
    """Wall times in milliseconds of `reps` calls after WARMUP_REPS discarded calls."""
    for _ in range(WARMUP_REPS):
        fn()
    times = np.empty(reps)
    for i in range(reps):
        t0 = time.perf_counter()
        fn()
        times[i] = (time.perf_counter() - t0) * 1000
    return times


def run_bench(
    mechanisms: Iterable[str],
    seq_lens: Iterable[int],
    d_model: int = 256,
    n_heads: int = 4,
    reps: int = 10,
    seed: int = 0,
    precision: str = "double",
) -> list[BenchReport]:
    """One BenchReport per (mechanism, N), in request order.

    peak_state_bytes is what the kernel reported for its carried state on the
    first warm-up call.
    """
    if reps < MIN_REPS:
        raise ConfigError(f"bench needs at least {MIN_REPS} reps, got {reps}")
    if d_model % n_heads or (d_model // n_heads) % 2:
        raise ConfigError(f"d_model {d_model} must split into {n_heads} heads of even width")
    head_dim = d_model // n_heads
    reports = []
    with default_dtype(np.float32 if precision == "single" else np.float64):
        for mechanism in normalize_mechanisms(mechanisms):
            for n in seq_lens:
                x = _inputs(n, n_heads, head_dim, seed)
                kernel = KERNELS[mechanism]
                _, state_nbytes = kernel(x)
                times = time_kernel(lambda: kernel(x), reps)
                report = BenchReport(
                    mechanism=mechanism,
                    seq_len=n,
                    d_model=d_model,
                    mean_ms=float(times.mean()),
                    median_ms=float(np.median(times)),
                    std_ms=float(times.std(ddof=1)),
                    peak_state_bytes=state_nbytes,
                    reps=reps,
                )
                logger.info(f"{mechanism} N={n}: median {report.median_ms:.2f} ms, state {state_nbytes} bytes")
                reports.append(report)
    return reports
