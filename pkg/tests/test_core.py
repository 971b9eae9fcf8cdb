import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmprune import DecodeCache, LayerState, ModelConfig, block_forward, init_model, model_forward
from ssmprune.core import (
    LayerParams,
    causal_conv1d,
    discretize,
    discretize_zoh,
    rmsnorm,
    selective_scan_prefill,
    selective_scan_step,
    softplus_gate,
    ssd_quadratic,
)
from ssmprune.errors import (
    ConfigError,
    GuardError,
    ModeError,
    NonFiniteError,
    ShapeError,
    StabilityError,
)
from ssmprune.kernels import HAVE_NUMBA

from conftest import random_config


def naive_scan(u, B, C, delta, a, h0=None):
    """Scalar loops, no vectorization."""
    L, d = u.shape
    n = delta.shape[1]
    h = [[0.0] * n for _ in range(d)] if h0 is None else [list(r) for r in h0]
    y = np.zeros((L, d))
    for t in range(L):
        for c in range(d):
            acc = 0.0
            for s in range(n):
                h[c][s] = math.exp(delta[t, s] * a[s]) * h[c][s] + delta[t, s] * B[t, s] * u[t, c]
                acc += C[t, s] * h[c][s]
            y[t, c] = acc
    return y, np.array(h)


def scan_inputs(rng, L, d, n):
    u = rng.standard_normal((L, d))
    B = rng.standard_normal((L, n))
    C = rng.standard_normal((L, n))
    delta = softplus_gate(rng.standard_normal((L, n)))
    a = -rng.uniform(0.1, 3.0, n)
    return u, B, C, delta, a


def test_rmsnorm_matches_formula(rng):
    x = rng.standard_normal((5, 7))
    w = rng.standard_normal(7)
    ref = np.array([[w[i] * r[i] / math.sqrt(sum(v * v for v in r) / 7 + 1e-5) for i in range(7)] for r in x])
    np.testing.assert_allclose(rmsnorm(x, w), ref, rtol=1e-13)


def test_rmsnorm_rejects_non_finite_and_bad_eps():
    with pytest.raises(NonFiniteError, match="non-finite activation"):
        rmsnorm(np.array([1.0, np.nan]), np.ones(2))
    with pytest.raises(ConfigError):
        rmsnorm(np.ones(2), np.ones(2), eps=0.0)


def test_softplus_large_input_is_identity_and_small_is_log1p():
    x = np.array([-30.0, -1.0, 0.0, 1.0, 39.0, 41.0, 1e6])
    out = softplus_gate(x)
    assert out[-1] == 1e6 and out[-2] == 41.0
    np.testing.assert_allclose(out[:5], np.log1p(np.exp(x[:5])), rtol=1e-15)
    assert (out >= 0).all()


def test_zoh_reduces_to_euler_for_small_steps():
    a = np.array([-1.0, -2.0, -5.0])
    delta = np.full(3, 1e-7)
    _, euler = discretize(delta, a)
    _, zoh = discretize_zoh(delta, a)
    np.testing.assert_allclose(zoh, euler, rtol=1e-6)


def test_discretize_rejects_non_negative_a():
    with pytest.raises(StabilityError, match="unstable state transition"):
        discretize(np.ones(2), np.array([-1.0, 0.0]))


def test_causal_conv_matches_convolve(rng):
    L, d, k = 9, 3, 4
    u = rng.standard_normal((L, d))
    w = rng.standard_normal((d, k))
    b = rng.standard_normal(d)
    out, tail = causal_conv1d(u, w, b)
    for c in range(d):
        # tap 0 applies to the current input
        pre = np.convolve(u[:, c], w[c])[:L] + b[c]
        np.testing.assert_allclose(out[:, c], pre / (1 + np.exp(-pre)), rtol=1e-12)
    np.testing.assert_array_equal(tail, u[-(k - 1):].T)


def test_conv_streaming_matches_full(rng):
    u = rng.standard_normal((10, 2))
    w = rng.standard_normal((2, 3))
    b = rng.standard_normal(2)
    full, _ = causal_conv1d(u, w, b)
    a, tail = causal_conv1d(u[:6], w, b)
    rest, _ = causal_conv1d(u[6:], w, b, tail)
    np.testing.assert_allclose(np.vstack([a, rest]), full, rtol=1e-14)


@pytest.mark.parametrize("per_element", [False, True])
def test_scan_matches_scalar_oracle(rng, per_element):
    u, B, C, delta, a = scan_inputs(rng, 12, 3, 5)
    h0 = rng.standard_normal((3, 5))
    y, h = selective_scan_prefill(u, B, C, delta, a, h0, per_element_discretization=per_element)
    y_ref, h_ref = naive_scan(u, B, C, delta, a, h0)
    np.testing.assert_allclose(y, y_ref, rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(h, h_ref, rtol=1e-12, atol=1e-13)


@pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")
def test_fused_backend_matches_reference(rng):
    u, B, C, delta, a = scan_inputs(rng, 40, 70, 6)
    h0 = rng.standard_normal((70, 6))
    y0, h0_out = selective_scan_prefill(u, B, C, delta, a, h0, backend="numpy")
    y1, h1_out = selective_scan_prefill(u, B, C, delta, a, h0, backend="fused")
    np.testing.assert_allclose(y1, y0, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(h1_out, h0_out, rtol=1e-12, atol=1e-12)


def test_quadratic_form_matches_recurrence(rng):
    u, B, C, delta, a = scan_inputs(rng, 16, 4, 3)
    y, _ = selective_scan_prefill(u, B, C, delta, a)
    np.testing.assert_allclose(ssd_quadratic(u, B, C, delta, a), y, rtol=1e-12, atol=1e-12)


def test_quadratic_with_unit_transition_is_causal_linear_attention(rng):
    u, B, C, delta, a = scan_inputs(rng, 6, 2, 3)
    y = ssd_quadratic(u, B, C, delta, a, a_bar=np.ones_like(delta))
    scores = np.tril(C @ (delta * B).T)
    np.testing.assert_allclose(y, scores @ u, rtol=1e-12)


def test_quadratic_guard():
    u = np.zeros((5, 1))
    z = np.zeros((5, 1))
    with pytest.raises(GuardError):
        ssd_quadratic(u, z, z, z, np.array([-1.0]), guard=4)


def test_scan_detects_non_finite():
    L, d, n = 4, 1, 1
    u = np.full((L, d), 1e200)
    B = np.full((L, n), 1e200)
    delta = np.ones((L, n))
    with pytest.raises(NonFiniteError, match="t=0"):
        selective_scan_prefill(u, B, B, delta, np.array([-1e-3]))


def test_scan_step_equals_prefill_of_one(rng):
    u, B, C, delta, a = scan_inputs(rng, 1, 3, 4)
    h0 = rng.standard_normal((3, 4))
    y, h = selective_scan_prefill(u, B, C, delta, a, h0)
    ys, hs = selective_scan_step(u[0], B[0], C[0], delta[0], a, h0)
    np.testing.assert_allclose(ys, y[0], rtol=1e-14)
    np.testing.assert_allclose(hs, h, rtol=1e-14)


def test_identity_bridge_is_bit_identical(rng):
    u, B, C, delta, a = scan_inputs(rng, 8, 3, 4)
    y0, _ = selective_scan_prefill(u, B, C, delta, a)
    y1, _ = selective_scan_prefill(u, B, C, delta, a, bridge=np.eye(4))
    np.testing.assert_array_equal(y0, y1)


@pytest.mark.parametrize("variant", ["mamba1", "mamba2"])
def test_zero_weight_block_is_identity(rng, variant):
    cfg = ModelConfig(variant=variant, d_model=4, d_state=4)
    layer = init_model(cfg, seed=0).layers[0]
    zero = LayerParams(**{k: (np.zeros_like(v) if k not in ("a_diag", "w_norm", "w_post_norm") else v)
                          for k, v in layer.arrays().items()})
    x = rng.standard_normal((6, 4))
    out, _ = block_forward(x, zero, cfg)
    np.testing.assert_array_equal(out, x)


def test_prefill_then_decode_matches_full_prefill(rng):
    for _ in range(10):
        cfg = random_config(rng)
        model = init_model(cfg, seed=int(rng.integers(1 << 30)))
        L, m = int(rng.integers(1, 10)), int(rng.integers(1, 5))
        x = rng.standard_normal((2, L + m, cfg.d_model))
        full, cache_full = model_forward(x, model)
        part, cache = model_forward(x[:, :L], model)
        outs = [part]
        for t in range(L, L + m):
            y, cache = model_forward(x[:, t:t + 1], model, "decode", cache)
            outs.append(y)
        np.testing.assert_allclose(np.concatenate(outs, axis=1), full, rtol=1e-10, atol=1e-10)
        for a, b in zip(cache.h, cache_full.h):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)


def test_decode_guards(small_model):
    x = np.zeros((1, 2, 8))
    with pytest.raises(ModeError):
        model_forward(x[:, :1], small_model, "decode")
    cache = DecodeCache.zeros(small_model, 1)
    with pytest.raises(ModeError, match="one token"):
        model_forward(x, small_model, "decode", cache)
    with pytest.raises(ModeError):
        model_forward(x, small_model, "chunked")


def test_fresh_cache_is_zero_and_not_mutated(small_model, rng):
    cache = DecodeCache.zeros(small_model, 2)
    assert all(not h.any() for h in cache.h) and all(not t.any() for t in cache.conv_tail)
    model_forward(rng.standard_normal((2, 3, 8)), small_model, "prefill", cache)
    assert all(not h.any() for h in cache.h)


def test_batch_members_are_independent(small_model, rng):
    x = rng.standard_normal((3, 5, 8))
    together, _ = model_forward(x, small_model)
    for b in range(3):
        alone, _ = model_forward(x[b:b + 1], small_model)
        np.testing.assert_array_equal(alone[0], together[b])


def test_dual_form_matches_recurrent_model(small_model, rng):
    x = rng.standard_normal((1, 12, 8))
    y0, c0 = model_forward(x, small_model, backend="numpy")
    y1, c1 = model_forward(x, small_model, dual=True)
    np.testing.assert_allclose(y1, y0, rtol=1e-11, atol=1e-11)
    np.testing.assert_allclose(c1.h[1], c0.h[1], rtol=1e-11, atol=1e-11)


def test_dual_form_is_mamba2_only(rng):
    model = init_model(ModelConfig(variant="mamba1", d_model=4, d_state=4), seed=0)
    with pytest.raises(ModeError):
        model_forward(rng.standard_normal((1, 3, 4)), model, dual=True)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(variant="mamba2", d_state=6, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(d_model=0)
    with pytest.raises(ConfigError):
        ModelConfig(variant="mamba1", n_heads=2)
    cfg = ModelConfig(d_model=12, expand=3)
    assert cfg.d_inner == 36
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_params_are_immutable_and_validated(small_model):
    layer = small_model.layers[0]
    with pytest.raises(ValueError):
        layer.w_in[0, 0] = 1.0
    with pytest.raises(StabilityError):
        LayerParams(**{**layer.arrays(), "a_diag": np.zeros(16)})
    with pytest.raises(ShapeError):
        LayerParams(**{**layer.arrays(), "bridge": np.eye(3)})


def test_input_shape_errors(small_model):
    with pytest.raises(ShapeError):
        model_forward(np.zeros((1, 4, 7)), small_model)
    with pytest.raises(NonFiniteError):
        model_forward(np.full((1, 2, 8), np.inf), small_model)


def test_tokens_mode_and_logits(rng):
    from ssmprune.core import lm_logits

    cfg = ModelConfig(d_model=8, d_state=4, n_heads=2, input_mode="tokens", vocab_size=13)
    model = init_model(cfg, seed=2)
    tokens = rng.integers(0, 13, (2, 5))
    hidden, _ = model_forward(tokens, model)
    assert lm_logits(model, hidden).shape == (2, 5, 13)
    with pytest.raises(ShapeError):
        model_forward(np.array([[13]]), model)


def test_float32_path_close_to_float64(small_model, rng):
    x = rng.standard_normal((1, 16, 8))
    y64, _ = model_forward(x, small_model)
    y32, _ = model_forward(x.astype(np.float32), small_model.astype(np.float32))
    assert y32.dtype == np.float32
    np.testing.assert_allclose(y32, y64, rtol=1e-3, atol=1e-3)


def test_same_seed_same_weights():
    cfg = ModelConfig(d_model=8, d_state=4, n_heads=2)
    a, b = init_model(cfg, seed=5), init_model(cfg, seed=5)
    for la, lb in zip(a.layers, b.layers):
        for k, v in la.arrays().items():
            np.testing.assert_array_equal(v, lb.arrays()[k])


@settings(max_examples=40, deadline=None)
@given(
    L=st.integers(1, 12),
    n=st.integers(1, 5),
    seed=st.integers(0, 2**31),
)
def test_state_stays_bounded_for_bounded_input(L, n, seed):
    # |h| <= sum_t delta_t |B_t u_t| since every a_bar lies in [0, 1]
    rng = np.random.default_rng(seed)
    u, B, C, delta, a = scan_inputs(rng, L, 2, n)
    _, h = selective_scan_prefill(u, B, C, delta, a)
    bound = np.einsum("ts,tc->cs", np.abs(delta * B), np.abs(u))
    assert (np.abs(h) <= bound + 1e-12).all()


def test_layer_state_shapes(small_model):
    cfg = small_model.config
    x = np.zeros((3, 8))
    _, st_ = block_forward(x, small_model.layers[0], cfg)
    assert isinstance(st_, LayerState)
    assert st_.h.shape == (cfg.d_inner, 16) and st_.conv_tail.shape == (cfg.d_inner, cfg.d_conv - 1)
