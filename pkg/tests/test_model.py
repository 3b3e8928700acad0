import json

import numpy as np
import pytest

from mgtlab import tensor as T
from mgtlab.errors import ContractError, InvalidConfigurationError, NumericalError
from mgtlab.gradcheck import max_relative_error
from mgtlab.metrics import effective_rank_batch
from mgtlab.model import (CHECKPOINT_FORMAT, VARIANTS, ModelConfig, attention_sublayer, block_params,
                          count_parameters, ddl_gate, forward_model, init_params, layer_states, load_params,
                          mgt_block_forward, mgt_update, mhc_project, parameter_count, save_params,
                          standard_block_forward, sublayer_forward)
from mgtlab.verify import block_gradient_errors, identity_at_init_gap


def small(variant="mgt_full", **kw):
    base = dict(depth=2, width=8, heads=2, vocab=7, seq_len=6, variant=variant, seed=3)
    base.update(kw)
    return ModelConfig(**base)


def block(variant="mgt_full", kind="attn", **kw):
    cfg = small(variant, **kw)
    params = init_params(cfg)
    return cfg, params, block_params(params, cfg, 0, kind)


def rand_x(shape, seed=0):
    return T.Tensor(np.random.default_rng(seed).normal(size=shape))


# -- config --------------------------------------------------------------------------------


def test_config_rejects_indivisible_heads():
    with pytest.raises(InvalidConfigurationError):
        ModelConfig(width=10, heads=4)


@pytest.mark.parametrize("field,value", [("width", 0), ("vocab", 0), ("lam", 0.0), ("variant", "other"),
                                         ("depth", -1), ("epsilon", float("inf"))])
def test_config_rejects_bad_values(field, value):
    with pytest.raises(InvalidConfigurationError):
        ModelConfig(**{field: value})


# -- parameters -------------------------------------------------------------------------------


def closed_form_count(L, D, h, ffn_mult, V, S, variant):
    H = ffn_mult * D
    attn = 2 * D + 4 * D * D
    ffn = 2 * D + D * H + H + H * D + D
    extra = 0
    if variant in ("mhc_only", "mgt_full"):
        extra += D * D + 2 * D
    if variant in ("ddl_only", "mgt_full"):
        extra += D * D + D + 1
    return V * D + S * D + 2 * D + L * (attn + ffn + 2 * extra)


def test_parameter_count_reference_value():
    cfg = ModelConfig(depth=4, width=64, heads=4, ffn_mult=4, vocab=16, seq_len=17, variant="mgt_full")
    # hand sum: 2240 embedding/final-LN + 4 * 66498 per layer pair
    assert parameter_count(cfg) == 268232
    assert count_parameters(init_params(cfg)) == 268232
    assert parameter_count(cfg.replace(variant="standard")) == 201152


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("L,D,h", [(0, 8, 2), (3, 12, 3), (5, 32, 4)])
def test_parameter_count_closed_form(variant, L, D, h):
    cfg = ModelConfig(depth=L, width=D, heads=h, ffn_mult=3, vocab=11, seq_len=9, variant=variant)
    expected = closed_form_count(L, D, h, 3, 11, 9, variant)
    assert parameter_count(cfg) == expected == count_parameters(init_params(cfg))


def test_param_names_follow_schema():
    names = set(init_params(small("mgt_full", depth=1)))
    assert {"embed.token", "embed.position", "final_ln.gain", "final_ln.bias"} <= names
    assert {"block0.attn.wq", "block0.attn.wo", "block0.ffn.w1", "block0.ffn.b2", "block0.attn.gate_w",
            "block0.ffn.beta_w", "block0.ffn.beta_b", "block0.attn.alpha"} <= names
    std = set(init_params(small("standard", depth=1)))
    assert not any("gate" in n or "beta" in n or "alpha" in n for n in std)


def test_init_deterministic_and_shared_across_variants():
    a, b = init_params(small("mgt_full")), init_params(small("mgt_full"))
    assert all(np.array_equal(a[n].data, b[n].data) for n in a)
    std = init_params(small("standard"))
    for n in std:
        assert np.array_equal(std[n].data, a[n].data), n
    other_seed = init_params(small("mgt_full", seed=4))
    assert not np.array_equal(other_seed["block0.attn.wq"].data, a["block0.attn.wq"].data)


def test_ddl_parameters_start_at_zero():
    params = init_params(small("mgt_full", alpha_init=0.0))
    for n, t in params.items():
        if n.endswith(("beta_w", "beta_b", "alpha")):
            assert not t.data.any(), n


# -- mHC gate ---------------------------------------------------------------------------------------


def test_mhc_zero_weight_halves_input():
    _, _, bp = block()
    bp.gate_w.data = np.zeros_like(bp.gate_w.data)
    V = rand_x((5, 8), 1)
    out, gate = mhc_project(V, rand_x((5, 8), 2), bp, return_gate=True)
    np.testing.assert_array_equal(gate.data, np.full((5, 8), 0.5))
    np.testing.assert_array_equal(out.data, 0.5 * V.data)


def test_mhc_zero_input_annihilates():
    _, _, bp = block()
    out = mhc_project(T.Tensor(np.zeros((4, 8))), rand_x((4, 8)), bp)
    assert not out.data.any()


def test_mhc_gate_strictly_inside_unit_interval_and_shrinks():
    _, _, bp = block()
    bp.gate_w.data = np.random.default_rng(0).normal(0, 3.0, (8, 8))
    V = rand_x((2, 5, 8), 3)
    out, gate = mhc_project(V, rand_x((2, 5, 8), 4), bp, return_gate=True)
    assert np.all((gate.data > 0) & (gate.data < 1))
    assert np.all(np.abs(out.data) <= np.abs(V.data))


def test_mhc_shape_mismatch():
    _, _, bp = block()
    with pytest.raises(ContractError):
        mhc_project(rand_x((4, 8)), rand_x((3, 8)), bp)


# -- DDL gate ------------------------------------------------------------------------------------------


def test_ddl_zero_init_gives_zero_beta():
    _, _, bp = block()
    assert not ddl_gate(rand_x((4, 8)), bp).data.any()


@pytest.mark.parametrize("lam,eps", [(1.0, 0.0), (1.0, 0.5), (2.0, -0.3)])
def test_ddl_range(lam, eps):
    _, _, bp = block(lam=lam, epsilon=eps)
    bp.beta_w.data = np.random.default_rng(1).normal(0, 0.5, (8, 8))
    beta = ddl_gate(rand_x((3, 6, 8), 5), bp).data
    assert np.all(beta > -lam + eps) and np.all(beta < lam + eps)
    assert beta.min() < eps < beta.max()


# -- update rule ------------------------------------------------------------------------------------------


def test_update_zero_beta_is_identity():
    X = rand_x((3, 4))
    out = mgt_update(X, rand_x((3, 4), 1), T.Tensor(np.zeros((3, 4))), 0.7)
    assert np.array_equal(out.data, X.data)


def test_update_zero_alpha_is_gated_residual():
    X, V, beta = rand_x((3, 4)), rand_x((3, 4), 1), rand_x((3, 4), 2)
    out = mgt_update(X, V, beta, 0.0)
    np.testing.assert_allclose(out.data, X.data + beta.data * V.data, atol=1e-15)


def test_update_full_erasure():
    X = rand_x((3, 4))
    out = mgt_update(X, T.Tensor(np.zeros((3, 4))), T.Tensor(np.ones((3, 4))), 1.0)
    assert not out.data.any()


def test_update_jacobian_identity_at_zero_beta():
    _, _, bp = block()
    X = T.Tensor(rand_x((5, 8), 6).data, requires_grad=True)
    R = np.random.default_rng(7).normal(size=(5, 8))
    with T.GradTape():
        out, _ = mgt_block_forward(X, bp, "mgt_full")
        loss = T.tsum(T.mul(out, T.Tensor(R)))
    grads = T.backward(loss)
    # vector-Jacobian product with J = I returns the cotangent itself
    np.testing.assert_array_equal(grads[X], R)


def test_update_jacobian_diagonal_with_fixed_beta():
    rng = np.random.default_rng(8)
    X = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    beta, V = rng.uniform(-1, 1, (3, 4)), rng.normal(size=(3, 4))
    alpha = 0.6
    R = rng.normal(size=(3, 4))
    with T.GradTape():
        loss = T.tsum(T.mul(mgt_update(X, T.Tensor(V), T.Tensor(beta), alpha), T.Tensor(R)))
    np.testing.assert_allclose(T.backward(loss)[X], (1 - beta * alpha) * R, atol=1e-15)


# -- blocks -----------------------------------------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["attn", "ffn"])
def test_mgt_block_identity_at_init(kind):
    _, _, bp = block(kind=kind)
    X = rand_x((2, 6, 8), 9)
    out, trace = mgt_block_forward(X, bp, "mgt_full")
    assert np.max(np.abs(out.data - X.data)) <= 1e-15
    assert not trace.beta_values.any()
    assert trace.gate_values.shape == X.shape


@pytest.mark.parametrize("variant", VARIANTS)
def test_traces_per_variant(variant):
    _, _, bp = block(variant)
    X = rand_x((6, 8))
    out, trace = mgt_block_forward(X, bp, variant, layer_index=4)
    assert trace.layer_index == 4 and trace.sublayer == "attn"
    assert np.array_equal(trace.hidden_state, out.data)
    assert (trace.beta_values is not None) == (variant in ("ddl_only", "mgt_full"))
    assert (trace.gate_values is not None) == (variant in ("mhc_only", "mgt_full"))


def test_trace_is_detached_copy():
    _, _, bp = block()
    out, trace = mgt_block_forward(rand_x((6, 8)), bp, "mgt_full")
    trace.hidden_state[0, 0] += 1.0
    assert trace.hidden_state[0, 0] != out.data[0, 0]


def _saturate(bp):
    # sigmoid(40) and tanh(40) are exactly 1.0 in float64
    bp.gate_w.data = np.zeros_like(bp.gate_w.data)
    bp.gate_ln_bias.data = np.full_like(bp.gate_ln_bias.data, 40.0)
    if bp.beta_b is not None:
        bp.beta_w.data = np.zeros_like(bp.beta_w.data)
        bp.beta_b.data = np.full_like(bp.beta_b.data, 40.0)
        bp.alpha.data = np.array(0.0)


@pytest.mark.parametrize("variant", ["mhc_only", "mgt_full"])
@pytest.mark.parametrize("kind", ["attn", "ffn"])
def test_saturated_gates_reduce_to_pre_ln_residual(variant, kind):
    _, _, bp = block(variant, kind=kind)
    _saturate(bp)
    X = rand_x((2, 6, 8), 10)
    out, _ = mgt_block_forward(X, bp, variant)
    ref = X.data + sublayer_forward(T.layer_norm(X, bp.ln_gain, bp.ln_bias), bp).data
    assert np.max(np.abs(out.data - ref)) <= 1e-12


def test_ddl_only_uses_raw_sublayer_output():
    _, _, bp = block("ddl_only", kind="ffn")
    rng = np.random.default_rng(11)
    bp.beta_w.data = rng.normal(0, 0.3, (8, 8))
    bp.alpha.data = np.array(0.4)
    X = rand_x((6, 8), 12)
    out, trace = mgt_block_forward(X, bp, "ddl_only")
    v = sublayer_forward(T.layer_norm(X, bp.ln_gain, bp.ln_bias), bp).data
    beta = trace.beta_values
    np.testing.assert_allclose(out.data, X.data + beta * (v - 0.4 * X.data), atol=1e-14)


def test_standard_block_zero_sublayer_is_layer_norm():
    _, _, bp = block("standard")
    bp.sublayer["wo"].data = np.zeros((8, 8))
    X = rand_x((6, 8), 13)
    out, _ = standard_block_forward(X, bp)
    np.testing.assert_array_equal(out.data, T.layer_norm(X, bp.ln_gain, bp.ln_bias).data)


def test_standard_block_output_is_normalized():
    _, _, bp = block("standard", kind="ffn")
    out, _ = standard_block_forward(rand_x((6, 8), 14), bp)
    np.testing.assert_allclose(out.data.mean(-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.data.std(-1), 1.0, atol=1e-5)


def test_non_finite_block_output_carries_layer():
    _, _, bp = block("ddl_only", kind="ffn")
    bp.alpha.data = np.array(-1e308)
    bp.beta_b.data = np.ones(8)
    with pytest.raises(NumericalError) as info:
        with np.errstate(over="ignore", invalid="ignore"):
            mgt_block_forward(rand_x((6, 8)), bp, "ddl_only", layer_index=7)
    assert info.value.layer == 7


def test_block_rejects_vector_input():
    _, _, bp = block()
    with pytest.raises(ContractError):
        mgt_block_forward(rand_x((8,)), bp)


@pytest.mark.parametrize("kind", ["attn", "ffn"])
def test_block_gradients_match_finite_differences(kind):
    errs = block_gradient_errors(kind, seed=1)
    # X plus 12 block tensors: 2 LN, 4 sublayer, 3 mHC gate, 3 DDL gate
    assert len(errs) == 13
    assert max(errs.values()) < 1e-4, errs


@pytest.mark.parametrize("variant", ["standard", "mhc_only", "ddl_only"])
def test_other_variant_gradients(variant):
    cfg, params, bp = block(variant, kind="attn")
    rng = np.random.default_rng(15)
    for n, t in params.items():
        if n.startswith("block0.attn"):
            t.data = t.data + rng.normal(0, 0.3, t.shape)
    X = T.Tensor(rng.normal(size=(3, 8)), name="X")
    R = T.Tensor(rng.normal(size=(3, 8)))
    tensors = [X] + [t for n, t in params.items() if n.startswith("block0.attn")]
    errs = max_relative_error(lambda: T.tsum(T.mul(mgt_block_forward(X, bp, variant)[0], R)), tensors)
    assert max(errs.values()) < 1e-4, errs


# -- attention ---------------------------------------------------------------------------------------------------


def test_attention_single_token():
    _, _, bp = block()
    X = rand_x((1, 8), 16)
    out, w = attention_sublayer(X, bp, return_weights=True)
    np.testing.assert_array_equal(w.data, np.ones((2, 1, 1)))
    ref = X.data @ bp.sublayer["wv"].data @ bp.sublayer["wo"].data
    np.testing.assert_allclose(out.data, ref, atol=1e-15)


def test_attention_rows_sum_to_one():
    _, _, bp = block()
    _, w = attention_sublayer(rand_x((3, 6, 8), 17), bp, return_weights=True)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-12)


def test_attention_is_causal():
    _, _, bp = block()
    X = rand_x((6, 8), 18).data
    Y = X.copy()
    Y[4:] += np.random.default_rng(19).normal(size=(2, 8))
    a = attention_sublayer(T.Tensor(X), bp).data
    b = attention_sublayer(T.Tensor(Y), bp).data
    np.testing.assert_array_equal(a[:4], b[:4])
    assert not np.allclose(a[4:], b[4:])


def test_attention_matches_loop_reference():
    _, _, bp = block()
    X = rand_x((5, 8), 20).data
    sub = {k: v.data for k, v in bp.sublayer.items()}
    q, k, v = X @ sub["wq"], X @ sub["wk"], X @ sub["wv"]
    heads = []
    for h in range(2):
        sl = slice(4 * h, 4 * h + 4)
        s = q[:, sl] @ k[:, sl].T / 2.0
        s = np.where(np.tril(np.ones((5, 5))) > 0, s, -np.inf)
        p = np.exp(s - s.max(-1, keepdims=True))
        p /= p.sum(-1, keepdims=True)
        heads.append(p @ v[:, sl])
    ref = np.concatenate(heads, axis=1) @ sub["wo"]
    np.testing.assert_allclose(attention_sublayer(T.Tensor(X), bp).data, ref, atol=1e-14)


# -- full model -----------------------------------------------------------------------------------------------------


@pytest.mark.parametrize("variant", VARIANTS)
def test_logits_shape(variant):
    cfg = small(variant)
    tokens = np.random.default_rng(0).integers(0, cfg.vocab, (3, 6))
    logits, traces = forward_model(tokens, cfg, init_params(cfg))
    assert logits.shape == (3, 6, cfg.vocab)
    assert len(traces) == 2 * cfg.depth
    logits1, _ = forward_model(tokens[0], cfg, init_params(cfg))
    assert logits1.shape == (6, cfg.vocab)


def test_depth_zero_is_tied_projection_of_normalized_embedding():
    cfg = small(depth=0)
    params = init_params(cfg)
    tokens = np.array([1, 4, 0, 6])
    logits, traces = forward_model(tokens, cfg, params)
    X = params["embed.token"].data[tokens] + params["embed.position"].data[:4]
    Xn = T.layer_norm(T.Tensor(X), params["final_ln.gain"], params["final_ln.bias"]).data
    np.testing.assert_allclose(logits.data, Xn @ params["embed.token"].data.T, atol=1e-14)
    assert traces == []


def test_mgt_at_init_matches_depth_zero_logits():
    cfg = small("mgt_full", depth=5)
    tokens = np.random.default_rng(1).integers(0, cfg.vocab, (2, 6))
    deep, _ = forward_model(tokens, cfg, init_params(cfg))
    shallow, _ = forward_model(tokens, cfg.replace(depth=0), init_params(cfg.replace(depth=0)))
    np.testing.assert_array_equal(deep.data, shallow.data)


def test_sixteen_pair_stack_is_identity_at_init():
    assert identity_at_init_gap(depth=16) <= 1e-15


def test_token_range_checked():
    cfg = small()
    with pytest.raises(ContractError):
        forward_model(np.array([0, cfg.vocab]), cfg, init_params(cfg))
    with pytest.raises(InvalidConfigurationError):
        forward_model(np.zeros(cfg.seq_len + 1, dtype=int), cfg, init_params(cfg))


def test_standard_twelve_layer_stack_is_finite():
    cfg = ModelConfig(depth=12, width=16, heads=4, vocab=9, seq_len=10, variant="standard", seed=1)
    logits, traces = forward_model(np.random.default_rng(2).integers(0, 9, (2, 10)), cfg, init_params(cfg))
    assert np.isfinite(logits.data).all() and len(traces) == 24


def test_forward_is_deterministic():
    cfg = small("mgt_full")
    params = init_params(cfg)
    for t in params.values():
        t.data = t.data + 0.1
    tokens = np.arange(6) % cfg.vocab
    a, _ = forward_model(tokens, cfg, params)
    b, _ = forward_model(tokens, cfg, params)
    assert a.data.tobytes() == b.data.tobytes()


def _standard_ranks(depth, seeds=range(4)):
    out = []
    for seed in seeds:
        cfg = ModelConfig(depth=depth, width=32, heads=4, vocab=16, seq_len=17, variant="standard", seed=seed)
        tokens = np.random.default_rng(100 + seed).integers(0, 16, (8, 17))
        _, traces, x0 = forward_model(tokens, cfg, init_params(cfg), return_embedded=True)
        out.append(effective_rank_batch(np.stack(layer_states(traces, x0), axis=0)).mean(axis=1))
    return np.mean(out, axis=0)


def test_untrained_standard_rank_decays_with_depth():
    # empirical: a random Post-LN stack loses effective rank as it deepens
    r4, r16 = _standard_ranks(4), _standard_ranks(16)
    assert r16[-1] / r16[0] < r4[-1] / r4[0]


def test_untrained_standard_deep_profile_is_nearly_monotone():
    ranks = _standard_ranks(24)
    ratios = ranks[3:] / ranks[2:-1]
    assert np.all(ratios <= 1.05), ratios


# -- checkpoints ---------------------------------------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg = small("mgt_full")
    params = init_params(cfg)
    params["block1.ffn.alpha"].data = np.array(0.123456789012345678)
    path = tmp_path / "p.json"
    save_params(params, path, cfg)
    loaded, cfg2 = load_params(path)
    assert cfg2 == cfg
    assert set(loaded) == set(params)
    for n in params:
        assert loaded[n].shape == params[n].shape
        assert np.array_equal(loaded[n].data, params[n].data)
    doc = json.loads(path.read_text())
    assert doc["format"] == CHECKPOINT_FORMAT


def test_checkpoint_rejects_unknown_format(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"format": "other", "arrays": {}}))
    with pytest.raises(ContractError):
        load_params(path)
