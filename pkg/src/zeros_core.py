"""Zero-sum linear attention kernels.

Inputs are per-head arrays with arbitrary leading axes: Q, K, V, U are
[..., N, h], gate logits are [..., N, 3] ordered (zero, first, higher), and
the deviation prior `mu` / `tau` carry the trailing extents [..., h] / [...]
(any suffix of the leading axes; gradients are summed over the rest).

Four equivalent causal evaluations are provided:
  - zeros_naive_forward: materializes the N x N weight matrix (the oracle)
  - zeros_scan_forward: one left-to-right fold with O(h^2) state
  - zeros_three_scan_forward: three plain linear-attention scans
  - zeros_encoder_forward (causal=False): global sums in O(N h^2)
"""
from __future__ import annotations

import logging
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator, Sequence

import numpy as np

from src.errors import ContractError, DimensionError, NumericError
from src.schemas import AttentionConfig, LogitKind
from src.tensor import Tensor, const, get_default_dtype, make_rng, map_unary, no_grad, repeat, softmax_rows

logger = logging.getLogger(__name__)

DEFAULT_CLAMP = 20.0
NORM_EPS = 1e-6
ROPE_BASE = 10000.0

KNOWN_FAULTS = frozenset({"skip_eps"})
_fault: ContextVar[str | None] = ContextVar("zeros_fault", default=None)


@contextmanager
def inject_fault(name: str | None) -> Iterator[None]:
    """Test-only: corrupt the weight construction for the duration of the block.

    "skip_eps" uses the raw softmax in place of the higher-order residual.
    """
    if name is not None and name not in KNOWN_FAULTS:
        raise ContractError(f"unknown fault {name!r}, expected one of {sorted(KNOWN_FAULTS)}")
    token = _fault.set(name)
    try:
        yield
    finally:
        _fault.reset(token)


def _higher_order(softmax: Tensor, delta: Tensor, inv_t) -> Tensor:
    if _fault.get() == "skip_eps":
        return softmax
    return softmax - inv_t - delta * inv_t


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# --- single rows -----------------------------------------------------------


@dataclass
class ZeroSWeightRow:
    t: int
    s: np.ndarray
    s_bar: float
    delta: np.ndarray
    softmax: np.ndarray
    eps: np.ndarray
    gates: tuple[float, float, float]
    w: np.ndarray


def _check_gates(gates: Sequence, include_zero_order: bool) -> tuple:
    if len(gates) != 3:
        raise ContractError(f"expected gates (zero, first, higher), got {len(gates)} values")
    g0, g1, gh = gates
    for name, g in (("first", g1), ("higher", gh)):
        value = _as_array(g)
        if np.any(value < 0) or np.any(value > 1):
            raise ContractError(f"{name}-order gate must lie in [0, 1], got {value}")
    if include_zero_order and np.any(np.abs(_as_array(g0)) > 1):
        raise ContractError(f"zero-order gate must lie in [-1, 1], got {_as_array(g0)}")
    return g0, g1, gh


def zero_sum_row(s, gates: Sequence[float], include_zero_order: bool = False) -> ZeroSWeightRow:
    """Full decomposition of one query row in the default dtype; plain numpy, no tape."""
    s = np.asarray(s, dtype=get_default_dtype())
    if s.ndim != 1 or s.size == 0:
        raise ContractError(f"a weight row needs a non-empty 1-D logit vector, got shape {s.shape}")
    g0, g1, gh = (float(g) for g in _check_gates(gates, include_zero_order))
    t = s.size
    s_bar = float(s.mean())
    delta = s - s_bar
    e = np.exp(s - s.max())
    softmax = e / e.sum()
    eps = softmax if _fault.get() == "skip_eps" else softmax - 1.0 / t - delta / t
    w = g1 * delta / t + gh * eps
    if include_zero_order:
        w = w + g0 / t
    return ZeroSWeightRow(t, s, s_bar, delta, softmax, eps, (g0, g1, gh), w)


def zero_sum_weights(s: Tensor, gates: Sequence, include_zero_order: bool = False) -> Tensor:
    """w = sigma1 * delta / t + sigmah * eps (+ sigma0 / t) over one logit row."""
    if s.ndim != 1 or s.shape[0] == 0:
        raise ContractError(f"zero_sum_weights needs a non-empty 1-D logit row, got shape {s.shape}")
    g0, g1, gh = _check_gates(gates, include_zero_order)
    inv_t = 1.0 / s.shape[0]
    delta = s - s.mean()
    eps = _higher_order(softmax_rows(s), delta, inv_t)
    w = delta * inv_t * g1 + eps * gh
    if include_zero_order:
        w = w + g0 * inv_t if isinstance(g0, Tensor) else w + float(g0) * inv_t
    return w


def convex_deviation_feasible(w) -> bool:
    """True iff w sums to zero and no entry undercuts -1/t (softmax minus uniform reachable)."""
    w = _as_array(w).reshape(-1)
    if w.size == 0:
        return True
    return bool(abs(w.sum()) <= 1e-9 and w.min() >= -1.0 / w.size - 1e-12)


def stability_bound(clamp: float) -> float:
    """Upper bound on t * max_i |w_{t,i}| for logits confined to [-clamp, clamp]."""
    return float(np.exp(2 * clamp) + 2 * clamp + 2)


@dataclass
class AffineReconstruction:
    weights: np.ndarray
    reconstruction: np.ndarray
    error: float
    weight_sum: float


def affine_hull_reconstruct(V: np.ndarray, target: np.ndarray) -> AffineReconstruction:
    """Write `target` as mean(V) plus a zero-sum combination of the rows of V.

    Solves [V^T; 1^T] w = [target - mean(V); 0] in the least-squares sense.
    """
    V = np.asarray(V, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if V.ndim != 2 or target.shape != (V.shape[1],):
        raise DimensionError(f"need V [n x k] and target [k], got {V.shape} and {target.shape}")
    v_avg = V.mean(axis=0)
    system = np.vstack([V.T, np.ones((1, V.shape[0]))])
    rhs = np.concatenate([target - v_avg, [0.0]])
    w, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    recon = v_avg + V.T @ w
    return AffineReconstruction(w, recon, float(np.max(np.abs(recon - target))), float(w.sum()))


# --- rotary table ----------------------------------------------------------


@dataclass(frozen=True)
class RopeTable:
    max_len: int
    head_dim: int
    angles: np.ndarray  # [max_len, head_dim / 2]

    @property
    def cos(self) -> np.ndarray:
        return np.cos(self.angles)

    @property
    def sin(self) -> np.ndarray:
        return np.sin(self.angles)


@lru_cache(maxsize=64)
def rope_table(max_len: int, head_dim: int, base: float = ROPE_BASE) -> RopeTable:
    """Rotation angles p * base^(-2j/h) for positions [0, max_len) and pairs j < h/2; cached and read-only."""
    if head_dim % 2:
        raise DimensionError(f"rotary head_dim must be even, got {head_dim}")
    freqs = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.outer(np.arange(max_len, dtype=np.float64), freqs)
    angles.setflags(write=False)
    return RopeTable(max_len, head_dim, angles)


def _rotate_pairs(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    even, odd = x[..., 0::2], x[..., 1::2]
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_rotate(x: Tensor, table: RopeTable, offset: int = 0) -> Tensor:
    """Rotate interleaved pairs of row p by the angles of position p + offset."""
    n, h = x.shape[-2], x.shape[-1]
    if h % 2:
        raise DimensionError(f"rotary rotation needs an even last axis, got {h}")
    if h != table.head_dim:
        raise DimensionError(f"table head_dim {table.head_dim} does not match {h}")
    if offset < 0 or offset + n > table.max_len:
        raise DimensionError(f"positions [{offset}, {offset + n}) exceed table length {table.max_len}")
    cos = table.cos[offset : offset + n].astype(x.dtype)
    sin = table.sin[offset : offset + n].astype(x.dtype)
    out = _rotate_pairs(x.data, cos, sin)
    return Tensor.from_op("rope_rotate", out, (x,), lambda g: (_rotate_pairs(g, cos, -sin),))


# --- shared preparation ----------------------------------------------------


def unit_rows(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """x / (||x|| + eps) over the last axis; zero rows stay zero."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = n + eps
    out = x.data / denom

    def backward(g):
        dot = (g * x.data).sum(axis=-1, keepdims=True)
        safe_n = np.where(n > 0, n, 1.0)
        radial = np.where(n > 0, x.data * dot / (safe_n * denom * denom), 0.0)
        return (g / denom - radial,)

    return Tensor.from_op("unit_rows", out, (x,), backward)


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra))) if extra > 0 else g


def _check_prior(U: Tensor, mu: Tensor, tau: Tensor) -> None:
    lead, h = U.shape[:-2], U.shape[-1]
    if mu.shape[-1:] != (h,) or mu.shape[:-1] != lead[len(lead) - (mu.ndim - 1) :]:
        raise DimensionError(f"mu shape {mu.shape} does not match U {U.shape}")
    if tau.shape != mu.shape[:-1]:
        raise DimensionError(f"tau shape {tau.shape} does not match mu {mu.shape}")


def deviation_logits(U: Tensor, mu: Tensor, tau: Tensor, use_prior: bool = True) -> Tensor:
    """s_i = -(1/sqrt(h)) u_i . ubar_i with ubar_i = (e^tau mu + sum_{j<=i} u_j) / (e^tau + i).

    With use_prior=False the prior weight e^tau is zero (plain running average).
    """
    if U.ndim < 2 or U.shape[-1] < 1:
        raise DimensionError(f"deviation logits need U [..., N, h] with h >= 1, got {U.shape}")
    _check_prior(U, mu, tau)
    n, h = U.shape[-2], U.shape[-1]
    c = 1.0 / np.sqrt(h)
    steps = np.arange(1, n + 1, dtype=U.dtype)
    lead = U.shape[:-2]
    et = np.broadcast_to(np.exp(tau.data), lead) if use_prior else np.zeros(lead, dtype=U.dtype)
    mu_b = np.broadcast_to(mu.data, lead + (h,))
    cum = np.cumsum(U.data, axis=-2)
    den = et[..., None] + steps
    ubar = (et[..., None, None] * mu_b[..., None, :] + cum) / den[..., None]
    s = -c * (U.data * ubar).sum(axis=-1)

    def backward(gs):
        dubar = -c * gs[..., None] * U.data
        dnum = dubar / den[..., None]
        dU = -c * gs[..., None] * ubar + np.flip(np.cumsum(np.flip(dnum, -2), axis=-2), -2)
        if not use_prior:
            return dU, None, None
        dnum_sum = dnum.sum(axis=-2)
        dmu = dnum_sum * et[..., None]
        dden = -(dubar * ubar).sum(axis=-1) / den
        det = (dnum_sum * mu_b).sum(axis=-1) + dden.sum(axis=-1)
        return dU, _sum_to(dmu, mu.shape), _sum_to(det * et, tau.shape)

    return Tensor.from_op("deviation_logits", s, (U, mu, tau), backward)


@dataclass
class DeviationLogitParams:
    mu: Tensor  # [..., h]
    tau: Tensor  # [...], log-strength of the prior
    W_u: Tensor | None = None  # projection that produced U; informational


def radial_logits(U: Tensor, params: DeviationLogitParams, kind: LogitKind = "deviation") -> Tensor:
    """Per-position scalar logits [..., N] of the chosen radial variant."""
    h = U.shape[-1]
    if kind == "deviation":
        return deviation_logits(U, params.mu, params.tau)
    if kind == "averaging":
        return deviation_logits(U, params.mu, params.tau, use_prior=False)
    if kind == "quadratic":
        return (U * U).sum(axis=-1) * (1.0 / h)
    if kind == "linear":
        _check_prior(U, params.mu, params.tau)
        direction = params.mu
        for axis, extent in enumerate(U.shape[: U.ndim - 1 - params.mu.ndim]):
            direction = repeat(direction, axis, extent)
        return (U * repeat(direction, -2, U.shape[-2])).sum(axis=-1) * (1.0 / np.sqrt(h))
    raise ContractError(f"unknown logit kind {kind!r}")


def soft_clamp(s: Tensor, bound: float = DEFAULT_CLAMP) -> Tensor:
    """bound * tanh(s / bound): smooth, identity near 0, confined to (-bound, bound)."""
    return map_unary(s * (1.0 / bound), "tanh") * bound


@dataclass
class GateTriple:
    zero: Tensor
    first: Tensor
    higher: Tensor


@dataclass
class ZeroSInputs:
    q_hat: Tensor
    k_hat: Tensor
    v: Tensor
    s: Tensor
    gates: GateTriple


def _check_finite_rows(name: str, x: Tensor) -> None:
    bad = ~np.isfinite(x.data)
    if bad.any():
        per_pos = bad.reshape(-1, x.shape[-2], x.shape[-1]).any(axis=(0, 2))
        position = int(np.argmax(per_pos))
        raise NumericError(f"{name} is non-finite at position {position}", position=position)


def split_gates(gate_logits: Tensor, cfg: AttentionConfig) -> GateTriple:
    """Sigmoid of the three gate logits; without the radial part only the zero-order gate is on."""
    lead = gate_logits.shape[:-1]
    if not cfg.use_radial:
        return GateTriple(const(1.0, lead), const(0.0, lead), const(0.0, lead))
    g = gate_logits.sigmoid()
    zero = g[..., 0] if cfg.include_zero_order else const(0.0, lead)
    return GateTriple(zero, g[..., 1], g[..., 2])


def prepare_inputs(Q: Tensor, K: Tensor, V: Tensor, U: Tensor, gate_logits: Tensor, params: DeviationLogitParams, cfg: AttentionConfig) -> ZeroSInputs:
    """Validate shapes and finiteness, then build clamped logits, unit (rotated) Q/K rows and gates."""
    if not (Q.shape == K.shape == V.shape == U.shape) or Q.ndim < 2:
        raise DimensionError(f"Q/K/V/U shapes differ: {Q.shape} {K.shape} {V.shape} {U.shape}")
    if gate_logits.shape != Q.shape[:-1] + (3,):
        raise DimensionError(f"gate logits {gate_logits.shape} do not match {Q.shape[:-1] + (3,)}")
    for name, x in (("Q", Q), ("K", K), ("V", V), ("U", U)):
        _check_finite_rows(name, x)
    n, h = Q.shape[-2], Q.shape[-1]
    s = soft_clamp(radial_logits(U, params, cfg.logit_kind), cfg.clamp_S)
    if cfg.use_angular:
        q_hat, k_hat = unit_rows(Q), unit_rows(K)
        if cfg.use_rope:
            table = rope_table(n, h, cfg.rope_base)
            q_hat, k_hat = rope_rotate(q_hat, table), rope_rotate(k_hat, table)
    else:
        basis = np.zeros(Q.shape, dtype=Q.dtype)
        basis[..., 0] = 1.0
        q_hat = k_hat = const(basis)
    return ZeroSInputs(q_hat, k_hat, V, s, split_gates(gate_logits, cfg))


def _steps(n: int, causal: bool) -> np.ndarray:
    return np.arange(1, n + 1, dtype=get_default_dtype()) if causal else np.full(n, float(n), dtype=get_default_dtype())


def _decay(out: Tensor, causal: bool) -> Tensor:
    n, h = out.shape[-2], out.shape[-1]
    scale = 1.0 / np.sqrt(_steps(n, causal))
    return out * const(np.repeat(scale[:, None], h, axis=1), out.shape)


# --- naive oracle ----------------------------------------------------------


def _weights(x: ZeroSInputs, causal: bool) -> Tensor:
    n = x.s.shape[-1]
    lead = x.s.shape[:-1]
    steps = _steps(n, causal)
    mask = np.tril(np.ones((n, n), dtype=bool)) if causal else np.ones((n, n), dtype=bool)
    mask_f = const(mask.astype(get_default_dtype()), lead + (n, n))
    inv_t = const(np.repeat((1.0 / steps)[:, None], n, axis=1), lead + (n, n))

    rows = repeat(x.s, -2, n)  # [..., t, i] = s_i
    s_bar = (rows * mask_f).sum(axis=-1) * const(1.0 / steps, lead + (n,))
    delta = (rows - repeat(s_bar, -1, n)) * mask_f
    softmax = softmax_rows(rows, mask)
    eps = _higher_order(softmax, delta, inv_t) * mask_f
    g = x.gates
    r = delta * inv_t * repeat(g.first, -1, n) + eps * repeat(g.higher, -1, n)
    r = r + repeat(g.zero, -1, n) * inv_t * mask_f
    cos = x.q_hat @ x.k_hat.mT
    return r * cos * mask_f


def zeros_weight_matrix(Q, K, V, U, gate_logits, params: DeviationLogitParams, cfg: AttentionConfig) -> Tensor:
    """Materialized W[..., t, i] = r_{t,i} cos(theta_{t,i}), zero above the diagonal when causal."""
    return _weights(prepare_inputs(Q, K, V, U, gate_logits, params, cfg), cfg.causal)


def zeros_naive_forward(Q, K, V, U, gate_logits, params: DeviationLogitParams, cfg: AttentionConfig) -> Tensor:
    """O(N^2 h) reference evaluation through the full weight matrix."""
    x = prepare_inputs(Q, K, V, U, gate_logits, params, cfg)
    W = _weights(x, cfg.causal)
    try:
        out = W @ x.v
    except NumericError:
        with np.errstate(over="ignore", invalid="ignore"):
            bad = _first_bad_step(W.data @ x.v.data)
        raise NumericError(f"naive output is non-finite at position {bad}", position=bad) from None
    return _decay(out, cfg.causal) if cfg.sqrt_decay else out


# --- prefix scan -----------------------------------------------------------


@dataclass
class ReadoutCoefficients:
    alpha: np.ndarray  # sigmah / E against the un-shifted E
    beta: np.ndarray
    gamma: np.ndarray
    alpha_shifted: np.ndarray  # sigmah / E~, paired with the shifted F~


@dataclass
class ScanState:
    """Running sums of the fold; E and F are stored shifted by exp(-m)."""

    E: np.ndarray
    m: np.ndarray
    P: np.ndarray
    F: np.ndarray
    G: np.ndarray
    H: np.ndarray
    t: int = 0

    @classmethod
    def empty(cls, lead: tuple[int, ...], head_dim: int, dtype=None) -> "ScanState":
        dtype = dtype or get_default_dtype()
        mat = lead + (head_dim, head_dim)
        return cls(
            E=np.zeros(lead, dtype=dtype),
            m=np.full(lead, -np.inf, dtype=dtype),
            P=np.zeros(lead, dtype=dtype),
            F=np.zeros(mat, dtype=dtype),
            G=np.zeros(mat, dtype=dtype),
            H=np.zeros(mat, dtype=dtype),
        )

    @property
    def nbytes(self) -> int:
        """Bytes held: three h x h matrices and three scalars per lead entry, plus the counter."""
        return int(self.E.nbytes + self.m.nbytes + self.P.nbytes + self.F.nbytes + self.G.nbytes + self.H.nbytes + 8)

    def update(self, s: np.ndarray, k: np.ndarray, v: np.ndarray) -> None:
        m_new = np.maximum(self.m, s)
        rescale = np.exp(self.m - m_new)
        w = np.exp(s - m_new)
        kv = k[..., :, None] * v[..., None, :]
        self.E = self.E * rescale + w
        self.F = self.F * rescale[..., None, None] + w[..., None, None] * kv
        self.G = self.G + s[..., None, None] * kv
        self.H = self.H + kv
        self.P = self.P + s
        self.m = m_new
        self.t += 1


def scan_coefficients(state: ScanState, gates: Sequence) -> ReadoutCoefficients:
    """alpha = sigmah / E, beta = (sigma1 - sigmah) / t,
    gamma = (P/t^2 - 1/t) sigmah - (P/t^2) sigma1 + sigma0 / t."""
    if state.t < 1:
        raise ContractError("scan coefficients need at least one folded step")
    if np.any(state.E <= 0):
        raise NumericError(f"scan normalizer E is not positive at step {state.t}", position=state.t - 1)
    g0, g1, gh = (np.asarray(g) for g in gates)
    t = float(state.t)
    p = state.P / (t * t)
    alpha_shifted = gh / state.E
    return ReadoutCoefficients(
        alpha=alpha_shifted * np.exp(-state.m),
        beta=(g1 - gh) / t,
        gamma=(p - 1.0 / t) * gh - p * g1 + g0 / t,
        alpha_shifted=alpha_shifted,
    )


def readout_matrix(state: ScanState, coef: ReadoutCoefficients) -> np.ndarray:
    """A_t = alpha F + beta G + gamma H, so that o_t = q_hat_t A_t."""
    return (
        coef.alpha_shifted[..., None, None] * state.F
        + coef.beta[..., None, None] * state.G
        + coef.gamma[..., None, None] * state.H
    )


def _first_bad_step(out: np.ndarray) -> int | None:
    bad = ~np.isfinite(out).all(axis=tuple(i for i in range(out.ndim) if i != out.ndim - 2))
    return int(np.argmax(bad)) if bad.any() else None


def zeros_scan_kernel(q_hat, k_hat, v, s, g0, g1, gh, record: bool = False):
    """Forward fold on plain arrays [L, N, h] / [L, N]; returns (output, final state, record)."""
    lead, n, h = q_hat.shape[:-2], q_hat.shape[-2], q_hat.shape[-1]
    state = ScanState.empty(lead, h, q_hat.dtype)
    out = np.empty_like(v)
    saved = None
    if record:
        saved = {key: np.empty(lead + (n,), dtype=q_hat.dtype) for key in ("m", "E", "P", "beta", "gamma")}
        saved.update({key: np.empty_like(v) for key in ("fbar", "g", "hh")})
    for t in range(n):
        state.update(s[..., t], k_hat[..., t, :], v[..., t, :])
        coef = scan_coefficients(state, (g0[..., t], g1[..., t], gh[..., t]))
        q = q_hat[..., t, :]
        qf = np.einsum("...h,...hk->...k", q, state.F)
        qg = np.einsum("...h,...hk->...k", q, state.G)
        qh = np.einsum("...h,...hk->...k", q, state.H)
        out[..., t, :] = coef.alpha_shifted[..., None] * qf + coef.beta[..., None] * qg + coef.gamma[..., None] * qh
        if record:
            saved["m"][..., t] = state.m
            saved["E"][..., t] = state.E
            saved["P"][..., t] = state.P
            saved["beta"][..., t] = coef.beta
            saved["gamma"][..., t] = coef.gamma
            saved["fbar"][..., t, :] = qf / state.E[..., None]
            saved["g"][..., t, :] = qg
            saved["hh"][..., t, :] = qh
    bad = _first_bad_step(out)
    if bad is not None:
        raise NumericError(f"scan output is non-finite at position {bad}", position=bad)
    return out, state, saved


def zeros_scan_op(q_hat: Tensor, k_hat: Tensor, v: Tensor, s: Tensor, gates: GateTriple) -> Tensor:
    """Fused causal fold as one tape node with an exact reverse-scan backward."""
    g0, g1, gh = gates.zero.data, gates.first.data, gates.higher.data
    Q, K, V, S = q_hat.data, k_hat.data, v.data, s.data
    out, _, rec = zeros_scan_kernel(Q, K, V, S, g0, g1, gh, record=True)
    lead, n, h = Q.shape[:-2], Q.shape[-2], Q.shape[-1]

    def backward(dO):
        steps = np.arange(1, n + 1, dtype=Q.dtype)
        a = (dO * rec["fbar"]).sum(axis=-1)
        b = (dO * rec["g"]).sum(axis=-1)
        c = (dO * rec["hh"]).sum(axis=-1)
        p = rec["P"] / (steps * steps)
        d_gh = a - b / steps + (p - 1.0 / steps) * c
        d_g1 = b / steps - p * c
        d_g0 = c / steps
        dP = c * (gh - g1) / (steps * steps)
        rP = np.flip(np.cumsum(np.flip(dP, -1), axis=-1), -1)

        # dq_t = A_t dO_t, A_t rebuilt by a second forward fold
        dq = np.empty_like(Q)
        state = ScanState.empty(lead, h, Q.dtype)
        for t in range(n):
            state.update(S[..., t], K[..., t, :], V[..., t, :])
            coef = scan_coefficients(state, (g0[..., t], g1[..., t], gh[..., t]))
            dq[..., t, :] = np.einsum("...hk,...k->...h", readout_matrix(state, coef), dO[..., t, :])

        dk, dv, ds = np.empty_like(K), np.empty_like(V), np.empty_like(S)
        RF = np.zeros(lead + (h, h), dtype=Q.dtype)
        RG, RH = np.zeros_like(RF), np.zeros_like(RF)
        rE = np.zeros(lead, dtype=Q.dtype)
        m, E = rec["m"], rec["E"]
        for i in reversed(range(n)):
            decay = np.exp(m[..., i] - m[..., i + 1]) if i + 1 < n else np.zeros(lead, dtype=Q.dtype)
            outer = Q[..., i, :, None] * dO[..., i, None, :]
            RF = RF * decay[..., None, None] + (gh[..., i] / E[..., i])[..., None, None] * outer
            rE = rE * decay + gh[..., i] * a[..., i] / E[..., i]
            RG = RG + rec["beta"][..., i, None, None] * outer
            RH = RH + rec["gamma"][..., i, None, None] * outer
            k_i, v_i, s_i = K[..., i, :], V[..., i, :], S[..., i]
            w = np.exp(s_i - m[..., i])
            C = w[..., None, None] * RF + s_i[..., None, None] * RG + RH
            dk[..., i, :] = np.einsum("...hk,...k->...h", C, v_i)
            dv[..., i, :] = np.einsum("...hk,...h->...k", C, k_i)
            kfv = np.einsum("...h,...hk,...k->...", k_i, RF, v_i)
            kgv = np.einsum("...h,...hk,...k->...", k_i, RG, v_i)
            ds[..., i] = w * (kfv - rE) + kgv + rP[..., i]
        return dq, dk, dv, ds, d_g0, d_g1, d_gh

    return Tensor.from_op(
        "zeros_scan", out, (q_hat, k_hat, v, s, gates.zero, gates.first, gates.higher), backward
    )


def zeros_scan_forward(Q, K, V, U, gate_logits, params: DeviationLogitParams, cfg: AttentionConfig) -> Tensor:
    """Linear-time evaluation; a non-causal config routes to the encoder form."""
    if not cfg.causal:
        return zeros_encoder_forward(Q, K, V, U, gate_logits, params, cfg)
    x = prepare_inputs(Q, K, V, U, gate_logits, params, cfg)
    out = zeros_scan_op(x.q_hat, x.k_hat, x.v, x.s, x.gates)
    return _decay(out, True) if cfg.sqrt_decay else out


def zeros_encoder_forward(Q, K, V, U, gate_logits, params: DeviationLogitParams, cfg: AttentionConfig) -> Tensor:
    """Every position reads the totals over all N positions (t = N throughout)."""
    x = prepare_inputs(Q, K, V, U, gate_logits, params, cfg)
    n, h = x.v.shape[-2], x.v.shape[-1]
    s = x.s
    shift = Tensor(s.data.max(axis=-1), dtype=s.dtype)  # constant; cancels in F~/E~
    w = (s - repeat(shift, -1, n)).exp()
    E = w.sum(axis=-1)
    P = s.sum(axis=-1)
    F = (x.k_hat * repeat(w, -1, h)).mT @ x.v
    G = (x.k_hat * repeat(s, -1, h)).mT @ x.v
    H = x.k_hat.mT @ x.v
    fbar = (x.q_hat @ F) / repeat(repeat(E, -1, n), -1, h)
    g = x.gates
    p = repeat(P, -1, n) * (1.0 / (n * n))
    beta = (g.first - g.higher) * (1.0 / n)
    gamma = (p - 1.0 / n) * g.higher - p * g.first + g.zero * (1.0 / n)
    out = (
        repeat(g.higher, -1, h) * fbar
        + repeat(beta, -1, h) * (x.q_hat @ G)
        + repeat(gamma, -1, h) * (x.q_hat @ H)
    )
    return _decay(out, False) if cfg.sqrt_decay else out


def linear_attention_scan(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Unnormalized causal linear attention o_t = q_t sum_{i<=t} k_i^T v_i, one fold."""
    lead, n, h = q.shape[:-2], q.shape[-2], q.shape[-1]
    state = np.zeros(lead + (h, v.shape[-1]), dtype=q.dtype)
    out = np.empty(lead + (n, v.shape[-1]), dtype=q.dtype)
    for t in range(n):
        state += k[..., t, :, None] * v[..., t, None, :]
        out[..., t, :] = np.einsum("...h,...hk->...k", q[..., t, :], state)
    return out


def zeros_three_scan_forward(Q, K, V, U, gate_logits, params: DeviationLogitParams, cfg: AttentionConfig) -> Tensor:
    """Causal output as alpha, beta, gamma weighted sum of three plain linear-attention scans
    with key bases e^{s_i} k_i, s_i k_i and k_i. Forward only."""
    if not cfg.causal:
        raise ContractError("the three-scan decomposition is causal only")
    with no_grad():
        x = prepare_inputs(Q, K, V, U, gate_logits, params, cfg)
    q, k, v, s = x.q_hat.data, x.k_hat.data, x.v.data, x.s.data
    g0, g1, gh = x.gates.zero.data, x.gates.first.data, x.gates.higher.data
    n = s.shape[-1]
    steps = np.arange(1, n + 1, dtype=s.dtype)
    w = np.exp(s - s.max(axis=-1, keepdims=True))
    p = np.cumsum(s, axis=-1) / (steps * steps)
    alpha = gh / np.cumsum(w, axis=-1)
    beta = (g1 - gh) / steps
    gamma = (p - 1.0 / steps) * gh - p * g1 + g0 / steps
    out = (
        alpha[..., None] * linear_attention_scan(q, w[..., None] * k, v)
        + beta[..., None] * linear_attention_scan(q, s[..., None] * k, v)
        + gamma[..., None] * linear_attention_scan(q, k, v)
    )
    if cfg.sqrt_decay:
        out = out / np.sqrt(steps)[:, None]
    return Tensor(out, dtype=out.dtype)


# --- quadratic variant ------------------------------------------------------


def zeros_sm_weights(Q: Tensor, K: Tensor, gate_logits: Tensor, causal: bool = True) -> Tensor:
    """W = g1 * Delta + gh * eps over QK^T / sqrt(h) rows; zero outside the causal prefix."""
    if Q.shape != K.shape or Q.ndim < 2:
        raise DimensionError(f"Q/K shapes differ: {Q.shape} {K.shape}")
    if gate_logits.shape != Q.shape[:-1] + (2,):
        raise DimensionError(f"gate logits {gate_logits.shape} do not match {Q.shape[:-1] + (2,)}")
    n, h = Q.shape[-2], Q.shape[-1]
    lead = Q.shape[:-2]
    steps = _steps(n, causal)
    mask = np.tril(np.ones((n, n), dtype=bool)) if causal else np.ones((n, n), dtype=bool)
    mask_f = const(mask.astype(get_default_dtype()), lead + (n, n))
    inv_t = const(np.repeat((1.0 / steps)[:, None], n, axis=1) * mask, lead + (n, n))

    S = (Q @ K.mT) * (1.0 / np.sqrt(h))
    s_bar = (S * mask_f).sum(axis=-1) * const(1.0 / steps, lead + (n,))
    delta = (S - repeat(s_bar, -1, n)) * mask_f
    softmax = softmax_rows(S, mask)
    eps = _higher_order(softmax, delta, inv_t) * mask_f
    g = gate_logits.sigmoid()
    return repeat(g[..., 0], -1, n) * (delta * inv_t) + repeat(g[..., 1], -1, n) * eps


def zeros_sm_forward(Q: Tensor, K: Tensor, V: Tensor, gate_logits: Tensor, causal: bool = True) -> Tensor:
    """ZeroS-SM output: zero-sum weights built from softmax over q.k / sqrt(h), applied to V."""
    if V.shape != Q.shape:
        raise DimensionError(f"V shape {V.shape} does not match {Q.shape}")
    return zeros_sm_weights(Q, K, gate_logits, causal) @ V


# --- sensitivity -----------------------------------------------------------


def lipschitz_ratio(
    t: int,
    d: int = 16,
    trials: int = 4,
    seed: int = 0,
    eta: float = 1e-6,
    sqrt_decay: bool = True,
) -> float:
    """Mean ||o_t(X + dX) - o_t(X)|| / ||dX|| at the last position of a random single-head layer.

    dX is a random direction of norm `eta` spread over all t positions.
    """
    cfg = AttentionConfig(d_model=d, n_heads=1, sqrt_decay=sqrt_decay, use_rope=True)
    rng = make_rng(seed)
    ratios = []
    with no_grad():
        for _ in range(trials):
            W = [rng.standard_normal((d, d)) / np.sqrt(d) for _ in range(4)]
            W_g = rng.standard_normal((d, 3)) / np.sqrt(d)
            params = DeviationLogitParams(Tensor(np.zeros(d)), Tensor(0.0))
            X = rng.standard_normal((t, d))
            dX = rng.standard_normal((t, d))
            dX *= eta / np.linalg.norm(dX)

            def last(inp):
                proj = [Tensor(inp @ w) for w in W]
                out = zeros_scan_forward(*proj, Tensor(inp @ W_g), params, cfg)
                return out.data[-1]

            ratios.append(np.linalg.norm(last(X + dX) - last(X)) / eta)
    ratio = float(np.mean(ratios))
    logger.debug(f"lipschitz ratio at t={t}: {ratio:.3e}")
    return ratio
