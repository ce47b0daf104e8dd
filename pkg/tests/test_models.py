"""Tests for configs, parameter layout and the language model."""
import numpy as np
import pytest
from pydantic import ValidationError

from src.errors import DimensionError, InputError
from src.models import (
    BlockParams,
    ZeroSLM,
    attention_block,
    forward_lm,
    gate_width,
    glu_ffn,
    greedy_next_tokens,
    init_params,
    linattn_elu,
    param_shapes,
    softmax_attention,
    softmax_attention_weights,
)
from src.schemas import AttentionConfig, ModelConfig
from src.tensor import Tensor, finite_diff_check_params, layer_norm, make_rng, no_grad


def _tokens(b: int, n: int, vocab: int, seed: int = 0) -> np.ndarray:
    return make_rng(seed).integers(0, vocab, size=(b, n))


class TestConfigs:
    """Tests for attention and model config validation."""

    def test_heads_must_divide(self):
        """d_model must split evenly into heads."""
        with pytest.raises(ValidationError):
            AttentionConfig(d_model=10, n_heads=3)

    def test_odd_head_dim_with_rope(self):
        """RoPE needs even head widths."""
        with pytest.raises(ValidationError):
            AttentionConfig(d_model=6, n_heads=2)

    def test_odd_head_dim_without_rope(self):
        """Odd head widths are fine when no rotation applies."""
        assert AttentionConfig(d_model=6, n_heads=2, mechanism="linattn_elu").head_dim == 3

    def test_unknown_field_rejected(self):
        """Typos in config keys fail loudly."""
        with pytest.raises(ValidationError):
            ModelConfig(d_modle=16)

    def test_attention_view(self):
        """ModelConfig.attention() drops model-only fields."""
        cfg = ModelConfig(d_model=32, n_heads=4, vocab_size=20)
        assert cfg.attention().head_dim == 8
        assert not hasattr(cfg.attention(), "vocab_size")


class TestParameters:
    """Tests for parameter shapes and initialization."""

    def test_zeros_layout(self):
        """A ZeroS layer carries the radial projection, prior and three gates per head."""
        shapes = param_shapes(ModelConfig(d_model=16, n_heads=2, n_layers=1, vocab_size=11))
        assert shapes["layers.0.attn.W_u"] == (16, 16)
        assert shapes["layers.0.attn.mu"] == (2, 8)
        assert shapes["layers.0.attn.tau"] == (2,)
        assert shapes["layers.0.attn.W_g"] == (16, 6)
        assert shapes["layers.0.ffn.W_in"] == (16, 128)
        assert "pos_embed" not in shapes

    def test_softmax_layout_has_no_gates(self):
        """Plain softmax attention has no ZeroS extras."""
        shapes = param_shapes(ModelConfig(d_model=16, n_heads=2, mechanism="softmax"))
        assert not any(name.endswith(("W_u", "W_g", "mu", "tau", "delta_ln.gain")) for name in shapes)

    def test_learned_positions_without_rope(self):
        """Mechanisms without rotary angles get a learned position table."""
        shapes = param_shapes(ModelConfig(d_model=16, n_heads=2, mechanism="zeros_sm", max_seq_len=12))
        assert shapes["pos_embed"] == (12, 16)
        assert gate_width(ModelConfig(mechanism="zeros_sm")) == 2

    def test_norm_flags(self):
        """Block and delta norms can be switched off independently."""
        shapes = param_shapes(ModelConfig(d_model=16, n_heads=2, use_block_norm=False))
        assert "layers.0.ln1.gain" not in shapes
        assert "layers.0.attn.delta_ln.gain" in shapes

    def test_init_deterministic(self):
        """The same seed gives the same parameters."""
        cfg = ModelConfig(d_model=16, n_heads=2)
        a, b = init_params(cfg, seed=3), init_params(cfg, seed=3)
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)

    def test_init_values(self):
        """LN gains start at one, biases and the prior at zero."""
        params = init_params(ModelConfig(d_model=16, n_heads=2))
        assert np.all(params["final_ln.gain"].data == 1.0)
        assert np.all(params["layers.0.attn.mu"].data == 0.0)
        assert params["embed"].data.std() < 0.05

    def test_wrong_parameter_names(self):
        """A model refuses parameters from another config."""
        params = init_params(ModelConfig(d_model=16, n_heads=2, mechanism="softmax"))
        with pytest.raises(DimensionError):
            ZeroSLM(ModelConfig(d_model=16, n_heads=2), params)


class TestBaselines:
    """Tests for softmax and linear-attention baselines."""

    def test_softmax_rows_convex(self):
        """Softmax weights are non-negative and sum to one."""
        rng = make_rng(1)
        A = softmax_attention_weights(Tensor(rng.standard_normal((7, 4))), Tensor(rng.standard_normal((7, 4)))).data
        assert np.all(A >= 0)
        assert np.allclose(A.sum(-1), 1.0, atol=1e-12)
        assert np.all(A[np.triu_indices(7, 1)] == 0.0)

    def test_single_token_returns_value(self):
        """With one token every baseline returns v_1."""
        rng = make_rng(2)
        Q, K, V = (Tensor(rng.standard_normal((1, 4))) for _ in range(3))
        assert np.allclose(softmax_attention(Q, K, V).data, V.data)
        assert np.allclose(linattn_elu(Q, K, V).data, V.data)

    def test_linattn_causal_matches_quadratic_form(self):
        """The cumulative form equals the explicit masked kernel."""
        rng = make_rng(3)
        Q, K, V = (Tensor(rng.standard_normal((2, 6, 4))) for _ in range(3))
        out = linattn_elu(Q, K, V).data

        def phi(x):
            return np.where(x > 0, x + 1, np.exp(x))

        A = np.tril(phi(Q.data) @ np.swapaxes(phi(K.data), -1, -2))
        expected = (A @ V.data) / A.sum(-1, keepdims=True)
        assert np.allclose(out, expected, atol=1e-12)

    def test_linattn_non_causal(self):
        """The bidirectional form sums over every key."""
        rng = make_rng(4)
        Q, K, V = (Tensor(rng.standard_normal((5, 4))) for _ in range(3))
        out = linattn_elu(Q, K, V, causal=False).data
        A = np.where(Q.data > 0, Q.data + 1, np.exp(Q.data)) @ np.where(K.data > 0, K.data + 1, np.exp(K.data)).T
        assert np.allclose(out, (A @ V.data) / A.sum(-1, keepdims=True), atol=1e-12)

    def test_glu_saturated_gate_is_linear(self):
        """Gate logits far above zero leave the plain two-layer linear map."""
        rng = make_rng(5)
        x = np.hstack([np.ones((2, 1)), rng.standard_normal((2, 2))])
        W_gate = np.zeros((3, 2))
        W_gate[0] = 1000.0
        W_value, W_out = rng.standard_normal((3, 2)), rng.standard_normal((2, 3))
        out = glu_ffn(Tensor(x), Tensor(np.hstack([W_gate, W_value])), Tensor(W_out)).data
        assert np.allclose(out, x @ W_value @ W_out, atol=1e-12)

    def test_glu_shapes(self):
        """The GLU keeps the model width."""
        x = Tensor(np.ones((2, 3, 8)))
        W_in, W_out = Tensor(np.ones((8, 64))), Tensor(np.ones((32, 8)))
        assert glu_ffn(x, W_in, W_out).shape == (2, 3, 8)


class TestAttentionBlock:
    """Tests for one residual attention-plus-FFN block."""

    def test_zero_input_is_fixed_point(self):
        """All-zero activations pass through every sublayer unchanged."""
        cfg = ModelConfig(d_model=16, n_heads=2)
        block = BlockParams.from_params(init_params(cfg, seed=3), 0)
        with no_grad():
            out = attention_block(Tensor(np.zeros((1, 4, 16))), block, cfg.attention()).data
        assert np.allclose(out, 0.0, atol=1e-12)

    def test_single_token_attention_adds_nothing(self):
        """At t = 1 the zero-sum weight vanishes, so only the FFN residual remains."""
        cfg = ModelConfig(d_model=16, n_heads=2, mechanism="zeros_naive")
        block = BlockParams.from_params(init_params(cfg, seed=4), 0)
        x = Tensor(make_rng(6).standard_normal((1, 1, 16)))
        with no_grad():
            out = attention_block(x, block, cfg.attention()).data
            expected = x.data + glu_ffn(layer_norm(x, *block.ln2, eps=cfg.norm_eps), block.W_in, block.W_out).data
        assert np.allclose(out, expected, atol=1e-12)


class TestLanguageModel:
    """Tests for forward_lm across mechanisms."""

    @pytest.mark.parametrize("mechanism", ["zeros", "zeros_naive", "zeros_sm", "softmax", "linattn_elu"])
    def test_logit_shape(self, mechanism):
        """Every mechanism yields [B, N, vocab] logits."""
        model = ZeroSLM(ModelConfig(d_model=16, n_heads=2, vocab_size=11, n_layers=2, max_seq_len=8, mechanism=mechanism))
        with no_grad():
            assert forward_lm(_tokens(3, 8, 11), model).shape == (3, 8, 11)

    def test_unbatched_tokens(self):
        """A 1-D token vector gives 2-D logits."""
        model = ZeroSLM(ModelConfig(d_model=16, n_heads=2, vocab_size=11))
        with no_grad():
            assert model(np.arange(5)).shape == (5, 11)

    def test_scan_and_naive_models_agree(self):
        """The two ZeroS evaluation paths give the same logits."""
        cfg = ModelConfig(d_model=16, n_heads=2, vocab_size=11, n_layers=2, max_seq_len=16)
        params = init_params(cfg, seed=5)
        tokens = _tokens(2, 16, 11, seed=6)
        with no_grad():
            scan = forward_lm(tokens, ZeroSLM(cfg, params)).data
            naive = forward_lm(tokens, ZeroSLM(cfg.model_copy(update={"mechanism": "zeros_naive"}), params)).data
        assert np.abs(scan - naive).max() <= 1e-8

    def test_causality(self):
        """Changing a later token leaves earlier logits untouched."""
        model = ZeroSLM(ModelConfig(d_model=16, n_heads=2, vocab_size=11, max_seq_len=10))
        tokens = _tokens(1, 10, 11, seed=7)
        changed = tokens.copy()
        changed[0, 7] = (changed[0, 7] + 1) % 11
        with no_grad():
            a, b = model(tokens).data, model(changed).data
        assert np.allclose(a[0, :7], b[0, :7], rtol=0, atol=1e-12)
        assert not np.allclose(a[0, 7:], b[0, 7:])

    def test_too_long(self):
        """Sequences past max_seq_len are rejected."""
        model = ZeroSLM(ModelConfig(d_model=16, n_heads=2, max_seq_len=4))
        with pytest.raises(InputError):
            model(np.zeros((1, 5), dtype=np.int64))

    def test_token_out_of_vocab(self):
        """Ids outside the vocabulary are rejected."""
        model = ZeroSLM(ModelConfig(d_model=16, n_heads=2, vocab_size=5))
        with pytest.raises(InputError):
            model(np.array([[1, 5]]))

    def test_zero_layers(self):
        """A model with no blocks is embed, final LN and tied head."""
        model = ZeroSLM(ModelConfig(d_model=16, n_heads=2, n_layers=0, vocab_size=7))
        with no_grad():
            assert model(np.array([[1, 2, 3]])).shape == (1, 3, 7)

    def test_greedy(self):
        """Greedy decoding is the argmax."""
        assert np.array_equal(greedy_next_tokens(np.array([[0.1, 0.9], [2.0, -1.0]])), [1, 0])

    @pytest.mark.parametrize("mechanism", ["zeros", "softmax", "linattn_elu", "zeros_sm"])
    def test_model_gradients(self, mechanism):
        """Tape gradients of a 2-layer model match central differences on sampled coordinates."""
        cfg = ModelConfig(d_model=16, n_heads=2, vocab_size=11, n_layers=2, max_seq_len=8, mechanism=mechanism)
        model = ZeroSLM(cfg)
        tokens = _tokens(1, 8, 11, seed=8)
        weights = Tensor(make_rng(9).standard_normal((1, 8, 11)))
        reports = finite_diff_check_params(
            lambda: (forward_lm(tokens, model) * weights).sum(), model.params, tol=1e-4, max_coords=6
        )
        worst = max(reports, key=lambda n: reports[n].max_rel_err)
        assert reports[worst].passed, (worst, reports[worst].max_rel_err)
