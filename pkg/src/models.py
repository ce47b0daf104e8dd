"""Transformer language model over the attention kernels.

Parameters live in one flat name -> Tensor dict so the optimizer, the
checkpoint codec and the gradient checker can all walk the same mapping.
Names follow `layers.{i}.attn.W_q`, `layers.{i}.ffn.W_in`, `final_ln.gain`.
"""
import logging
from dataclasses import dataclass

import numpy as np

from src.errors import DimensionError, InputError, NumericError
from src.schemas import AttentionConfig, ModelConfig
from src.tensor import Tensor, clamp_min, cumsum, embedding, layer_norm, make_rng, map_unary, repeat, softmax_rows
from src.zeros_core import (
    DeviationLogitParams,
    RopeTable,
    rope_rotate,
    rope_table,
    zeros_naive_forward,
    zeros_scan_forward,
    zeros_sm_forward,
)

logger = logging.getLogger(__name__)

FFN_EXPANSION = 4
EMBED_STD = 0.02
LINATTN_FLOOR = 1e-6

# Mechanisms whose head outputs pass through the attention-delta LayerNorm
LINEAR_MECHANISMS = ("zeros", "zeros_naive", "linattn_elu")
ZEROS_MECHANISMS = ("zeros", "zeros_naive")


def gate_width(cfg: AttentionConfig) -> int:
    """Gate columns per head: (zero, first, higher) for ZeroS, (first, higher) for ZeroS-SM."""
    if cfg.mechanism in ZEROS_MECHANISMS:
        return 3
    if cfg.mechanism == "zeros_sm":
        return 2
    return 0


def learned_positions(cfg: AttentionConfig) -> bool:
    return not cfg.rope_active


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name with its shape, in a fixed order."""
    d, H, hd = cfg.d_model, cfg.n_heads, cfg.head_dim
    shapes: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab_size, d)}
    if learned_positions(cfg):
        shapes["pos_embed"] = (cfg.max_seq_len, d)
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        if cfg.use_block_norm:
            shapes[f"{p}.ln1.gain"] = shapes[f"{p}.ln1.bias"] = (d,)
        for name in ("W_q", "W_k", "W_v", "W_o"):
            shapes[f"{p}.attn.{name}"] = (d, d)
        if cfg.mechanism in ZEROS_MECHANISMS:
            shapes[f"{p}.attn.W_u"] = (d, d)
            shapes[f"{p}.attn.mu"] = (H, hd)
            shapes[f"{p}.attn.tau"] = (H,)
        if gate_width(cfg):
            shapes[f"{p}.attn.W_g"] = (d, gate_width(cfg) * H)
        if cfg.mechanism in LINEAR_MECHANISMS and cfg.use_delta_norm:
            shapes[f"{p}.attn.delta_ln.gain"] = shapes[f"{p}.attn.delta_ln.bias"] = (d,)
        if cfg.use_block_norm:
            shapes[f"{p}.ln2.gain"] = shapes[f"{p}.ln2.bias"] = (d,)
        shapes[f"{p}.ffn.W_in"] = (d, 2 * FFN_EXPANSION * d)
        shapes[f"{p}.ffn.W_out"] = (FFN_EXPANSION * d, d)
    shapes["final_ln.gain"] = shapes["final_ln.bias"] = (d,)
    return shapes


def init_params(cfg: ModelConfig, seed: int | None = None) -> dict[str, Tensor]:
    """Gaussian weights with std 1/sqrt(fan_in); embeddings std 0.02; LN gain 1, bias 0; mu, tau 0."""
    rng = make_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            data = np.ones(shape)
        elif leaf in ("bias", "mu", "tau"):
            data = np.zeros(shape)
        elif leaf in ("embed", "pos_embed"):
            data = rng.standard_normal(shape) * EMBED_STD
        else:
            data = rng.standard_normal(shape) / np.sqrt(shape[0])
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


@dataclass
class BlockParams:
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor
    W_in: Tensor
    W_out: Tensor
    ln1: tuple[Tensor, Tensor] | None = None
    ln2: tuple[Tensor, Tensor] | None = None
    W_u: Tensor | None = None
    W_g: Tensor | None = None
    mu: Tensor | None = None
    tau: Tensor | None = None
    delta_ln: tuple[Tensor, Tensor] | None = None

    @classmethod
    def from_params(cls, params: dict[str, Tensor], layer: int) -> "BlockParams":
        p = f"layers.{layer}"

        def pair(prefix):
            gain = params.get(f"{prefix}.gain")
            return None if gain is None else (gain, params[f"{prefix}.bias"])

        return cls(
            W_q=params[f"{p}.attn.W_q"],
            W_k=params[f"{p}.attn.W_k"],
            W_v=params[f"{p}.attn.W_v"],
            W_o=params[f"{p}.attn.W_o"],
            W_in=params[f"{p}.ffn.W_in"],
            W_out=params[f"{p}.ffn.W_out"],
            ln1=pair(f"{p}.ln1"),
            ln2=pair(f"{p}.ln2"),
            W_u=params.get(f"{p}.attn.W_u"),
            W_g=params.get(f"{p}.attn.W_g"),
            mu=params.get(f"{p}.attn.mu"),
            tau=params.get(f"{p}.attn.tau"),
            delta_ln=pair(f"{p}.attn.delta_ln"),
        )


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[B, N, H*w] -> [B, H, N, w]"""
    b, n, width = x.shape
    return x.reshape(b, n, n_heads, width // n_heads).permute(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, w = x.shape
    return x.permute(0, 2, 1, 3).reshape(b, n, h * w)


def softmax_attention(Q: Tensor, K: Tensor, V: Tensor, causal: bool = True, table: RopeTable | None = None) -> Tensor:
    """Scaled dot-product attention over [..., N, h]; RoPE applied to Q and K when a table is given."""
    return softmax_attention_weights(Q, K, causal, table) @ V


def softmax_attention_weights(Q: Tensor, K: Tensor, causal: bool = True, table: RopeTable | None = None) -> Tensor:
    n, h = Q.shape[-2], Q.shape[-1]
    if table is not None:
        Q, K = rope_rotate(Q, table), rope_rotate(K, table)
    mask = np.tril(np.ones((n, n), dtype=bool)) if causal else None
    return softmax_rows((Q @ K.mT) * (1.0 / np.sqrt(h)), mask)


def linattn_elu(Q: Tensor, K: Tensor, V: Tensor, causal: bool = True) -> Tensor:
    """1+ELU feature-map attention with cumulative numerator and denominator."""
    h = Q.shape[-1]
    phi_q, phi_k = map_unary(Q, "elu_plus_one"), map_unary(K, "elu_plus_one")
    if causal:
        # state[..., t, a, b] = sum_{i<=t} phi(k_i)[a] v_i[b]
        state = cumsum(repeat(phi_k, -1, V.shape[-1]) * repeat(V, -2, h), axis=-3)
        num = (repeat(phi_q, -1, V.shape[-1]) * state).sum(axis=-2)
        den = (phi_q * cumsum(phi_k, axis=-2)).sum(axis=-1)
    else:
        num = phi_q @ (phi_k.mT @ V)
        den = (phi_q * repeat(phi_k.sum(axis=-2), -2, Q.shape[-2])).sum(axis=-1)
    return num / repeat(clamp_min(den, LINATTN_FLOOR), -1, V.shape[-1])


def glu_ffn(x: Tensor, W_in: Tensor, W_out: Tensor) -> Tensor:
    """(sigmoid(x W_gate) * x W_value) W_out; W_in stacks the gate half before the value half."""
    z = x @ W_in
    width = W_in.shape[-1] // 2
    gate, value = z[..., :width], z[..., width:]
    return (gate.sigmoid() * value) @ W_out


def _norm(x: Tensor, pair: tuple[Tensor, Tensor] | None, eps: float) -> Tensor:
    return x if pair is None else layer_norm(x, pair[0], pair[1], eps)


def _mechanism(h: Tensor, block: BlockParams, cfg: AttentionConfig) -> Tensor:
    H = cfg.n_heads
    Q = _split_heads(h @ block.W_q, H)
    K = _split_heads(h @ block.W_k, H)
    V = _split_heads(h @ block.W_v, H)
    n = Q.shape[-2]
    if cfg.mechanism in ZEROS_MECHANISMS:
        U = _split_heads(h @ block.W_u, H)
        gates = _split_heads(h @ block.W_g, H)
        prior = DeviationLogitParams(block.mu, block.tau, block.W_u)
        forward = zeros_scan_forward if cfg.mechanism == "zeros" else zeros_naive_forward
        return forward(Q, K, V, U, gates, prior, cfg)
    if cfg.mechanism == "zeros_sm":
        return zeros_sm_forward(Q, K, V, _split_heads(h @ block.W_g, H), cfg.causal)
    if cfg.mechanism == "softmax":
        table = rope_table(n, cfg.head_dim, cfg.rope_base) if cfg.use_rope else None
        return softmax_attention(Q, K, V, cfg.causal, table)
    return linattn_elu(Q, K, V, cfg.causal)


def attention_block(x: Tensor, block: BlockParams, cfg: AttentionConfig, layer: int = 0) -> Tensor:
    """x + W_o(Attn(LN(x))), then x + FFN(LN(x)); x is [B, N, d]."""
    try:
        h = _norm(x, block.ln1, cfg.norm_eps)
        heads = _merge_heads(_mechanism(h, block, cfg))
        if block.delta_ln is not None:
            heads = layer_norm(heads, *block.delta_ln, eps=cfg.norm_eps)
        x = x + heads @ block.W_o
        return x + glu_ffn(_norm(x, block.ln2, cfg.norm_eps), block.W_in, block.W_out)
    except NumericError as exc:
        raise NumericError(f"layer {layer}: {exc}", position=exc.position, layer=layer) from exc


class ZeroSLM:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        expected = param_shapes(cfg)
        if set(self.params) != set(expected):
            raise DimensionError(f"parameter names differ from config: {sorted(set(self.params) ^ set(expected))}")

    def __call__(self, tokens) -> Tensor:
        return forward_lm(tokens, self)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def blocks(self) -> list[BlockParams]:
        return [BlockParams.from_params(self.params, i) for i in range(self.cfg.n_layers)]


def forward_lm(tokens, model: ZeroSLM) -> Tensor:
    """Next-token logits [B, N, vocab] for integer tokens [B, N] (or [N] -> [N, vocab])."""
    cfg = model.cfg
    ids = np.asarray(tokens)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise InputError(f"tokens must be [N] or [B, N], got shape {ids.shape}")
    b, n = ids.shape
    if n > cfg.max_seq_len:
        raise InputError(f"sequence length {n} exceeds max_seq_len {cfg.max_seq_len}")
    embed = model.params["embed"]
    x = embedding(embed, ids)
    if learned_positions(cfg):
        x = x + repeat(model.params["pos_embed"][:n], 0, b)
    attn_cfg = cfg.attention()
    for i, block in enumerate(model.blocks()):
        x = attention_block(x, block, attn_cfg, layer=i)
    x = layer_norm(x, model.params["final_ln.gain"], model.params["final_ln.bias"], cfg.norm_eps)
    logits = x @ embed.mT
    return logits[0] if single else logits


def greedy_next_tokens(logits) -> np.ndarray:
    """Argmax over the vocabulary axis."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=-1)
