"""Invariant suite behind `zeros verify`.

Each check returns an InvariantResult; a check that raises counts as failed.
Tolerances are listed for double precision. Under single precision the
numeric-identity checks are relaxed by SINGLE_FACTORS; gradient and
affine-hull checks always run in double.
"""
import logging
from typing import Callable

import numpy as np

from src.errors import ZeroSError
from src.models import ZeroSLM, forward_lm, softmax_attention_weights
from src.schemas import AttentionConfig, InvariantResult, ModelConfig
from src.tensor import (
    Tensor,
    cumsum,
    default_dtype,
    finite_diff_check,
    finite_diff_check_params,
    layer_norm,
    make_rng,
    no_grad,
    softmax_rows,
)
from src.zeros_core import (
    DeviationLogitParams,
    affine_hull_reconstruct,
    convex_deviation_feasible,
    inject_fault,
    lipschitz_ratio,
    rope_rotate,
    rope_table,
    stability_bound,
    zero_sum_row,
    zero_sum_weights,
    zeros_encoder_forward,
    zeros_naive_forward,
    zeros_scan_forward,
    zeros_sm_weights,
    zeros_three_scan_forward,
    zeros_weight_matrix,
)

logger = logging.getLogger(__name__)

TOLERANCES = {
    "row_identity": 1e-12,  # softmax rows, residual identity, zero-sum (scaled by t)
    "oracle": 1e-8,  # scan / three-scan / encoder vs naive
    "zeros_sm": 1e-10,
    "rope": 1e-10,
    "grad_ops": 1e-5,
    "grad_model": 1e-4,
    "affine": 1e-9,
}
SINGLE_FACTORS = {"row_identity": 1e7, "oracle": 1e4, "zeros_sm": 1e5, "rope": 1e5}

SCAN_LENGTHS = (1, 2, 3, 5, 8, 64, 256)
SCAN_WIDTHS = ((16, 1), (16, 4), (64, 1), (64, 4))
SCAN_SEEDS = 20
STABILITY_CLAMP = 5.0
STABILITY_LENGTHS = (16, 256, 4096, 8192)
LIPSCHITZ_LENGTHS = (64, 256, 1024)


def tolerance(key: str, precision: str) -> float:
    scale = SINGLE_FACTORS.get(key, 1.0) if precision == "single" else 1.0
    return TOLERANCES[key] * scale


def random_head_inputs(n: int, d: int, heads: int, seed: int, gate_width: int = 3):
    """Q, K, V, U [1, H, N, h], gate logits and a random deviation prior."""
    rng = make_rng(seed)
    h = d // heads
    shape = (1, heads, n, h)
    Q, K, V, U = (Tensor(rng.standard_normal(shape)) for _ in range(4))
    gates = Tensor(rng.standard_normal((1, heads, n, gate_width)))
    prior = DeviationLogitParams(Tensor(rng.standard_normal((heads, h)) * 0.5), Tensor(rng.standard_normal(heads) * 0.5))
    return Q, K, V, U, gates, prior


def _result(name: str, worst: float, tol: float, what: str = "max error") -> InvariantResult:
    return InvariantResult(name=name, passed=bool(worst <= tol), detail=f"{what} {worst:.3e} (tol {tol:.0e})")


def check_softmax_rows(precision: str) -> InvariantResult:
    rng = make_rng(1)
    rows = softmax_rows(Tensor(rng.uniform(-30, 30, size=(64, 37)))).data
    return _result("softmax rows sum to 1", float(np.abs(rows.sum(-1) - 1).max()), tolerance("row_identity", precision))


def check_cumsum_total(precision: str) -> InvariantResult:
    x = Tensor(make_rng(2).uniform(-1, 1, size=(8, 500)))
    last = cumsum(x, axis=-1).data[:, -1]
    total = x.sum(axis=-1).data
    err = float(np.max(np.abs(last - total) / np.maximum(np.abs(total), 1.0)))
    return _result("cumsum last equals sum", err, tolerance("row_identity", precision))


def check_op_gradients(precision: str) -> InvariantResult:
    rng = make_rng(3)
    with default_dtype(np.float64):
        gain, bias = Tensor(rng.uniform(-1, 1, 5)), Tensor(rng.uniform(-1, 1, 5))
        w = Tensor(rng.uniform(-1, 1, (5, 5)))

        def f(x):
            y = layer_norm(x @ w, gain, bias).tanh()
            return (softmax_rows(y) * cumsum(x, axis=-1).sigmoid()).sum()

        report = finite_diff_check(f, Tensor(rng.uniform(-1, 1, (4, 5))))
    return _result("op composition gradients", report.max_rel_err, TOLERANCES["grad_ops"], "rel error")


def check_row_identity(precision: str) -> InvariantResult:
    rng = make_rng(4)
    worst = 0.0
    for _ in range(1000):
        t = int(rng.integers(1, 1025))
        row = zero_sum_row(rng.uniform(-20, 20, t), (0.0, rng.uniform(), rng.uniform()))
        rebuilt = 1.0 / t + row.delta / t + row.eps
        worst = max(worst, float(np.abs(row.softmax - rebuilt).max()))
    return _result("residual identity softmax = 1/t + delta/t + eps", worst, tolerance("row_identity", precision))


def check_zero_sum_rows(precision: str) -> InvariantResult:
    rng = make_rng(5)
    worst = 0.0
    for _ in range(1000):
        t = int(rng.integers(1, 1025))
        row = zero_sum_row(rng.uniform(-20, 20, t), (0.0, rng.uniform(), rng.uniform()))
        worst = max(worst, abs(float(row.w.sum())) / t)
    return _result("zero-sum weight rows", worst, tolerance("row_identity", precision), "max |sum w| / t")


def check_weight_matrix_rows(precision: str) -> InvariantResult:
    cfg = AttentionConfig(d_model=16, n_heads=2, use_angular=False)
    worst = 0.0
    with no_grad():
        for seed in range(5):
            W = zeros_weight_matrix(*random_head_inputs(12, 16, 2, seed), cfg).data
            steps = np.arange(1, 13)
            worst = max(worst, float((np.abs(W.sum(axis=-1)) / steps).max()))
    return _result("materialized weight rows sum to 0", worst, tolerance("row_identity", precision), "max |sum w| / t")


def _oracle_grid(forward: Callable, precision: str, name: str) -> InvariantResult:
    worst = 0.0
    with no_grad():
        for d, heads in SCAN_WIDTHS:
            cfg = AttentionConfig(d_model=d, n_heads=heads)
            for n in SCAN_LENGTHS:
                for seed in range(SCAN_SEEDS):
                    inputs = random_head_inputs(n, d, heads, seed)
                    diff = forward(*inputs, cfg).data - zeros_naive_forward(*inputs, cfg).data
                    worst = max(worst, float(np.abs(diff).max()))
    return _result(name, worst, tolerance("oracle", precision))


def check_scan_naive(precision: str) -> InvariantResult:
    return _oracle_grid(zeros_scan_forward, precision, "scan equals naive")


def check_three_scan(precision: str) -> InvariantResult:
    return _oracle_grid(zeros_three_scan_forward, precision, "three-scan decomposition equals naive")


def check_encoder(precision: str) -> InvariantResult:
    worst = 0.0
    cfg = AttentionConfig(d_model=16, n_heads=2, causal=False)
    with no_grad():
        for seed in range(5):
            inputs = random_head_inputs(32, 16, 2, seed)
            diff = zeros_encoder_forward(*inputs, cfg).data - zeros_naive_forward(*inputs, cfg).data
            worst = max(worst, float(np.abs(diff).max()))
    return _result("encoder form equals unmasked naive", worst, tolerance("oracle", precision))


def check_stability(precision: str) -> InvariantResult:
    rng = make_rng(6)
    bound = stability_bound(STABILITY_CLAMP)
    worst_scaled, norms = 0.0, {}
    for t in STABILITY_LENGTHS:
        acc = []
        for _ in range(8):
            row = zero_sum_row(rng.uniform(-STABILITY_CLAMP, STABILITY_CLAMP, t), (0.0, rng.uniform(), rng.uniform()))
            worst_scaled = max(worst_scaled, t * float(np.abs(row.w).max()))
            values = rng.standard_normal((t, 8))
            values /= np.linalg.norm(values, axis=-1, keepdims=True)
            acc.append(float(np.linalg.norm(row.w @ values)))
        norms[t] = float(np.mean(acc))
    growth = max(norms[t] / norms[STABILITY_LENGTHS[0]] for t in STABILITY_LENGTHS)
    passed = worst_scaled <= bound and growth <= 3.0
    return InvariantResult(
        name="bounded weights and outputs",
        passed=passed,
        detail=f"t*max|w| {worst_scaled:.3e} (bound {bound:.3e}), output growth {growth:.2f}x (limit 3x)",
    )


def check_lipschitz(precision: str) -> InvariantResult:
    with default_dtype(np.float64):
        ratios = [lipschitz_ratio(t) for t in LIPSCHITZ_LENGTHS]
    steps = [b / a for a, b in zip(ratios, ratios[1:])]
    passed = all(s <= 0.7 for s in steps)
    return InvariantResult(
        name="perturbation ratio decays with t",
        passed=passed,
        detail=" -> ".join(f"{r:.3e}" for r in ratios) + f" (step ratios {', '.join(f'{s:.2f}' for s in steps)})",
    )


def check_span(precision: str) -> InvariantResult:
    rejected = all(not convex_deviation_feasible(np.pad([1.0, -1.0], (0, t - 2))) for t in range(2, 65))
    rng = make_rng(7)
    with default_dtype(np.float64), no_grad():
        accepted = all(
            convex_deviation_feasible(zero_sum_weights(Tensor(rng.uniform(-5, 5, int(rng.integers(1, 65)))), (0.0, 1.0, 1.0)))
            for _ in range(200)
        )
    return InvariantResult(
        name="convex-deviation feasibility",
        passed=rejected and accepted,
        detail=f"two-token difference rejected: {rejected}; softmax-minus-uniform accepted: {accepted}",
    )


def check_affine_hull(precision: str) -> InvariantResult:
    rng = make_rng(8)
    worst = 0.0
    for _ in range(100):
        V = rng.standard_normal((4, 3))
        lam = rng.standard_normal(4)
        lam /= lam.sum()
        rec = affine_hull_reconstruct(V, lam @ V)
        worst = max(worst, rec.error, abs(rec.weight_sum))
    return _result("affine hull reachable with zero-sum weights", worst, TOLERANCES["affine"])


def check_rope(precision: str) -> InvariantResult:
    rng = make_rng(9)
    table = rope_table(64, 8)
    x = Tensor(rng.standard_normal((64, 8)))
    norm_err = float(np.max(np.abs(np.linalg.norm(rope_rotate(x, table).data, axis=-1) / np.linalg.norm(x.data, axis=-1) - 1)))
    q, k = Tensor(np.tile(rng.standard_normal(8), (64, 1))), Tensor(np.tile(rng.standard_normal(8), (64, 1)))
    qr, kr = rope_rotate(q, table).data, rope_rotate(k, table).data
    shift_err = max(abs(float(qr[t] @ kr[i] - qr[t + 7] @ kr[i + 7])) for t in range(0, 50, 3) for i in range(0, t + 1, 2))
    return _result("rotary norm and shift equivariance", max(norm_err, shift_err), tolerance("rope", precision))


def check_scan_gradient(precision: str) -> InvariantResult:
    with default_dtype(np.float64):
        Q, K, V, U, G, prior = random_head_inputs(6, 8, 2, 10)
        cfg = AttentionConfig(d_model=8, n_heads=2)
        weights = Tensor(make_rng(11).standard_normal(Q.shape))
        tensors = {"Q": Q, "K": K, "V": V, "U": U, "gates": G, "mu": prior.mu, "tau": prior.tau}
        for t in tensors.values():
            t.requires_grad = True
        reports = finite_diff_check_params(lambda: (zeros_scan_forward(Q, K, V, U, G, prior, cfg) * weights).sum(), tensors)
    worst = max(r.max_rel_err for r in reports.values())
    return _result("scan gradients match finite differences", worst, TOLERANCES["grad_ops"], "rel error")


def check_model_gradient(precision: str) -> InvariantResult:
    with default_dtype(np.float64):
        cfg = ModelConfig(vocab_size=11, n_layers=2, d_model=16, n_heads=2, max_seq_len=8, mechanism="zeros")
        model = ZeroSLM(cfg)
        tokens = make_rng(12).integers(0, 11, size=(1, 8))
        weights = Tensor(make_rng(13).standard_normal((1, 8, 11)))
        reports = finite_diff_check_params(
            lambda: (forward_lm(tokens, model) * weights).sum(), model.params, max_coords=24, seed=14
        )
    worst_name = max(reports, key=lambda n: reports[n].max_rel_err)
    return _result(
        f"model gradients match finite differences (worst {worst_name})",
        reports[worst_name].max_rel_err,
        TOLERANCES["grad_model"],
        "rel error",
    )


def check_zeros_sm(precision: str) -> InvariantResult:
    rng = make_rng(15)
    tol = tolerance("zeros_sm", precision)
    n, h = 16, 8
    Q, K = Tensor(rng.standard_normal((2, n, h))), Tensor(rng.standard_normal((2, n, h)))
    with no_grad():
        collapsed = zeros_sm_weights(Q, K, Tensor(np.full((2, n, 2), 50.0))).data
        soft = softmax_attention_weights(Q, K).data
        uniform = np.tril(np.ones((n, n))) / np.arange(1, n + 1)[:, None]
        collapse_err = float(np.abs(collapsed - (soft - uniform)).max())
        W = zeros_sm_weights(Q, K, Tensor(rng.standard_normal((2, n, 2)))).data
    sum_err = float(np.abs(W.sum(axis=-1)).max())
    first_row = float(np.abs(W[..., 0, :]).max())
    passed = collapse_err <= tol and sum_err <= tol and first_row <= tol
    return InvariantResult(
        name="ZeroS-SM rows",
        passed=passed,
        detail=f"gate collapse {collapse_err:.3e}, row sums {sum_err:.3e}, first row {first_row:.1e} (tol {tol:.0e})",
    )


def check_softmax_convexity(precision: str) -> InvariantResult:
    rng = make_rng(16)
    with no_grad():
        A = softmax_attention_weights(Tensor(rng.standard_normal((12, 8))), Tensor(rng.standard_normal((12, 8)))).data
    convex = bool(np.all(A >= 0) and np.abs(A.sum(-1) - 1).max() <= tolerance("row_identity", precision))
    return InvariantResult(name="softmax weights are convex", passed=convex, detail=f"min weight {A.min():.3e}")


def check_determinism(precision: str) -> InvariantResult:
    cfg = ModelConfig(vocab_size=11, n_layers=2, d_model=16, n_heads=2, max_seq_len=16, seed=3)
    tokens = make_rng(17).integers(0, 11, size=(2, 16))
    with no_grad():
        a = forward_lm(tokens, ZeroSLM(cfg)).data
        b = forward_lm(tokens, ZeroSLM(cfg)).data
    same = bool(np.array_equal(a, b))
    return InvariantResult(name="bit-identical reruns", passed=same, detail="identical" if same else "outputs differ")


INVARIANTS: list[tuple[str, Callable[[str], InvariantResult]]] = [
    ("softmax_rows", check_softmax_rows),
    ("cumsum_total", check_cumsum_total),
    ("op_gradients", check_op_gradients),
    ("row_identity", check_row_identity),
    ("zero_sum_rows", check_zero_sum_rows),
    ("weight_matrix_rows", check_weight_matrix_rows),
    ("scan_naive", check_scan_naive),
    ("three_scan", check_three_scan),
    ("encoder", check_encoder),
    ("stability", check_stability),
    ("lipschitz", check_lipschitz),
    ("span", check_span),
    ("affine_hull", check_affine_hull),
    ("rope", check_rope),
    ("scan_gradient", check_scan_gradient),
    ("model_gradient", check_model_gradient),
    ("zeros_sm", check_zeros_sm),
    ("softmax_convexity", check_softmax_convexity),
    ("determinism", check_determinism),
]


def run_invariants(precision: str = "double", fault: str | None = None, only: list[str] | None = None) -> list[InvariantResult]:
    dtype = np.float32 if precision == "single" else np.float64
    results = []
    with inject_fault(fault), default_dtype(dtype):
        for key, check in INVARIANTS:
            if only is not None and key not in only:
                continue
            try:
                result = check(precision)
            except (ZeroSError, ArithmeticError, ValueError) as exc:
                result = InvariantResult(name=key, passed=False, detail=f"raised {type(exc).__name__}: {exc}")
            logger.info(f"{'PASS' if result.passed else 'FAIL'} {result.name}: {result.detail}")
            results.append(result)
    return results


def format_table(results: list[InvariantResult]) -> str:
    width = max((len(r.name) for r in results), default=10)
    lines = [f"{'invariant'.ljust(width)}  status  detail", "-" * (width + 16)]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {'PASS' if r.passed else 'FAIL'}    {r.detail}")
    passed = sum(r.passed for r in results)
    lines.append(f"{passed}/{len(results)} invariants passed")
    return "\n".join(lines)
