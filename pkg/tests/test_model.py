import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gigamoe import tensor as T
from gigamoe.errors import ConfigError, InputError, LengthError, ScheduleError
from gigamoe.model import (ABF_SCHEDULE, AttentionWeights, MLPWeights, ModelConfig,
                           MoETransformer, abf_base_for_context, attention_forward,
                           checkpoint_bytes, count_params, gated_mlp, generate,
                           load_checkpoint, model_forward, moe_forward, parameter_shapes,
                           rope_apply, router_forward, save_checkpoint, tiny_config,
                           topk_ascending)
from gigamoe.tensor import Tensor, backward


def silu(x):
    return x / (1.0 + np.exp(-x))


def rand_mlp(rng, d, ff, scale=0.5):
    return MLPWeights(*(Tensor(rng.normal(0, scale, s)) for s in ((d, ff), (d, ff), (ff, d))))


# -- config -----------------------------------------------------------------

@pytest.mark.parametrize("bad", [
    dict(n_heads=8, n_kv_heads=3),
    dict(top_k=9),
    dict(top_k=0),
    dict(gate_mode="relu"),
    dict(d_model=250),
    dict(vocab_size=0),
])
def test_config_rejects_invalid_fields(bad):
    with pytest.raises(ConfigError):
        ModelConfig(**bad)


def test_config_text_roundtrip_and_unknown_keys(tmp_path, monkeypatch):
    cfg = tiny_config(gate_mode="softmax-renormalized", tie_experts_across_layers=True)
    assert ModelConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ConfigError, match="unknown"):
        ModelConfig.from_text(cfg.to_text() + "colour = red\n")
    path = tmp_path / "m.txt"
    path.write_text("d_model = 64\n# a comment\n")
    monkeypatch.setenv("GM_N_LAYERS", "4")
    loaded = ModelConfig.load(path, env_prefix="GM_")
    assert (loaded.d_model, loaded.n_layers) == (64, 4)


# -- gated MLP ----------------------------------------------------------------

def test_gated_mlp_zero_weights_give_zero():
    w = MLPWeights(*(Tensor(np.zeros(s)) for s in ((4, 6), (4, 6), (6, 4))))
    assert np.array_equal(gated_mlp(np.ones(4), w).data, np.zeros(4))


def test_gated_mlp_constructed_identity():
    d = 4
    h = np.array([0.3, -1.2, 2.0, 0.7])
    # a huge constant gate input makes silu(.) == that constant; scale it away in w_down
    big = 50.0
    w_gate = np.zeros((d, d))
    w_gate[0, :] = big / h[0]
    w = MLPWeights(Tensor(w_gate), Tensor(np.eye(d)), Tensor(np.eye(d) / big))
    assert np.allclose(gated_mlp(h, w).data, h, atol=1e-12)


def test_gated_mlp_matches_straight_line_oracle(rng):
    w = rand_mlp(rng, 4, 7)
    h = rng.normal(size=4)
    wg, wu, wd = (x.data for x in w)
    expect = np.zeros(4)
    for o in range(4):
        acc = 0.0
        for j in range(7):
            g = sum(h[i] * wg[i, j] for i in range(4))
            u = sum(h[i] * wu[i, j] for i in range(4))
            acc += silu(g) * u * wd[j, o]
        expect[o] = acc
    assert np.max(np.abs(gated_mlp(h, w).data - expect)) <= 1e-12


def test_gated_mlp_shape_mismatch_is_config_error(rng):
    with pytest.raises(ConfigError):
        gated_mlp(np.ones(5), rand_mlp(rng, 4, 6))


# -- router -----------------------------------------------------------------

def router_for(affinities):
    """Router weight whose product with h = e_0 reproduces ``affinities``."""
    a = np.asarray(affinities, dtype=float)
    W = np.zeros((len(a), len(a)))
    W[:, 0] = a
    h = np.zeros(len(a))
    h[0] = 1.0
    return h, Tensor(W)


def test_router_sigmoid_example():
    h, W = router_for([2.0, 1.0, 0.5, -1.0])
    cfg = tiny_config(n_routed_experts=4, top_k=2)
    out = router_forward(h, W, cfg)
    assert out.selected.tolist() == [0, 1]
    assert np.allclose(out.gates.data, [0.88079708, 0.73105858], atol=5e-9)
    assert out.gates.data.sum() != pytest.approx(1.0)


def test_router_ties_go_to_lowest_index():
    h, W = router_for([0.5] * 6)
    out = router_forward(h, W, tiny_config(n_routed_experts=6, top_k=2))
    assert out.selected.tolist() == [0, 1]


def test_router_steering_limit_selects_support():
    h, W = router_for(np.linspace(1, -1, 8))
    bias = np.zeros(8)
    bias[[2, 7]] = 1e9
    cfg = tiny_config(n_routed_experts=8, top_k=2)
    out = router_forward(h, W, cfg, steering_bias=bias)
    plain = router_forward(h, W, cfg)
    assert out.selected.tolist() == [2, 7]
    # bias moves the choice but not the scores used for gates and telemetry
    assert np.array_equal(out.probs.data, plain.probs.data)
    assert np.allclose(out.gates.data, 1 / (1 + np.exp(-W.data[[2, 7], 0])))


def test_router_gate_modes(rng):
    h = rng.normal(size=(5, 8))
    W = Tensor(rng.normal(size=(6, 8)))
    outs = {m: router_forward(h, W, tiny_config(d_model=8, n_routed_experts=6, top_k=3, gate_mode=m))
            for m in ("sigmoid-unnormalized", "softmax-topk-unnormalized", "softmax-renormalized")}
    sel = outs["sigmoid-unnormalized"].selected
    for o in outs.values():
        assert np.array_equal(o.selected, sel)
    probs = outs["softmax-topk-unnormalized"].probs.data
    picked = np.take_along_axis(probs, sel, axis=1)
    assert np.allclose(outs["softmax-topk-unnormalized"].gates.data, picked, atol=1e-15)
    assert np.all(picked.sum(axis=1) < 1.0)
    assert np.allclose(outs["softmax-renormalized"].gates.data.sum(axis=1), 1.0, atol=1e-14)


def test_router_rejects_top_k_above_expert_count():
    h, W = router_for([1.0, 2.0])
    with pytest.raises(ConfigError):
        router_forward(h, W, tiny_config(n_routed_experts=4, top_k=3))


@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6), st.floats(0.01, 100.0),
       st.sampled_from(["sigmoid-unnormalized", "softmax-topk-unnormalized",
                        "softmax-renormalized"]))
def test_router_selection_invariant_under_positive_scaling(aff, c, mode):
    cfg = tiny_config(n_routed_experts=6, top_k=2, gate_mode=mode)
    a = np.array(aff)
    sel1 = topk_ascending(a, 2)
    sel2 = topk_ascending(a * c, 2)
    # scaling can only merge scores that were already within rounding of each other
    if len(set(a.round(12))) == len(a):
        assert np.array_equal(sel1, sel2)
    h, W = router_for(a)
    assert np.array_equal(router_forward(h, W, cfg).selected, sel1)


@given(st.lists(st.lists(st.floats(-30, 30), min_size=5, max_size=5), min_size=1, max_size=4))
def test_recorded_distribution_sums_to_one(rows):
    rng = np.random.default_rng(0)
    h = np.array(rows)
    W = Tensor(rng.normal(size=(4, 5)))
    cfg = tiny_config(d_model=8, n_routed_experts=4, top_k=2)
    _, rec = moe_forward(h, [rand_mlp(rng, 5, 3) for _ in range(4)], [], W, cfg)
    assert np.all(np.abs(rec.distribution.sum(axis=1) - 1.0) <= 1e-9)


# -- MoE block ------------------------------------------------------------------

def test_moe_reduces_to_dense(rng):
    cfg = tiny_config(n_routed_experts=1, top_k=1, n_shared_experts=0,
                      gate_mode="softmax-renormalized")
    w = rand_mlp(rng, 8, 6)
    h = rng.normal(size=(10, 8))
    out, _ = moe_forward(h, [w], [], Tensor(rng.normal(size=(1, 8))), cfg)
    assert np.max(np.abs(out.data - gated_mlp(h, w).data)) <= 1e-12


def test_moe_zero_routed_experts_leave_shared_sum(rng):
    cfg = tiny_config()
    zero = MLPWeights(*(Tensor(np.zeros(s)) for s in ((8, 6), (8, 6), (6, 8))))
    shared = [rand_mlp(rng, 8, 6), rand_mlp(rng, 8, 6)]
    h = rng.normal(size=(3, 8))
    out, _ = moe_forward(h, [zero] * 4, shared, Tensor(rng.normal(size=(4, 8))), cfg)
    expect = gated_mlp(h, shared[0]).data + gated_mlp(h, shared[1]).data
    assert np.allclose(out.data, expect, atol=1e-14)


def test_moe_identical_experts_hand_expansion(rng):
    cfg = tiny_config(n_routed_experts=2, top_k=2)
    w, s = rand_mlp(rng, 8, 6), rand_mlp(rng, 8, 6)
    h = rng.normal(size=8)
    W = Tensor(np.tile(rng.normal(size=(1, 8)), (2, 1)))
    a = float(W.data[0] @ h)
    out, rec = moe_forward(h, [w, w], [s], W, cfg)
    expect = gated_mlp(h, s).data + 2 / (1 + math.exp(-a)) * gated_mlp(h, w).data
    assert np.allclose(out.data, expect, atol=1e-13)
    assert rec.selected.tolist() == [[0, 1]]


def test_unrouted_expert_gets_exactly_zero_gradient():
    cfg = tiny_config(n_routed_experts=4, top_k=1)
    m = MoETransformer(cfg, seed=3)
    # force every token of every MoE layer onto expert 0
    steer = np.zeros((cfg.n_moe_layers, 4))
    steer[:, 0] = 1e9
    ids = np.arange(10) % cfg.vocab_size
    logits, _ = model_forward(m, ids, steering=steer)
    backward(logits.sum() * 0.1 + (logits * logits).mean())
    for layer in range(1, cfg.n_layers):
        for j in (1, 2, 3):
            g = m.params[f"layers.{layer}.experts.{j}.w_up"].grad
            assert g is None or not np.any(g)
        assert np.any(m.params[f"layers.{layer}.experts.0.w_up"].grad)


# -- RoPE / ABF ------------------------------------------------------------------

def test_rope_position_zero_is_identity(rng):
    x = rng.normal(size=(3, 8))
    assert np.array_equal(rope_apply(x, np.zeros(3), 1e4).data, x)


def test_rope_odd_head_dim_is_config_error():
    with pytest.raises(ConfigError):
        rope_apply(np.ones((2, 5)), np.arange(2), 1e4)


@pytest.mark.parametrize("base", [1e4, *ABF_SCHEDULE.values()])
def test_rope_relative_position_property(base, rng):
    q, k = rng.normal(size=16), rng.normal(size=16)
    for m, n in [(3, 3), (0, 5), (100, 17), (4000, 4096)]:
        s1 = rope_apply(q, m, base).data @ rope_apply(k, n, base).data
        s2 = rope_apply(q, m + 7, base).data @ rope_apply(k, n + 7, base).data
        assert abs(s1 - s2) <= 1e-10
        if m == n:
            assert abs(s1 - q @ k) <= 1e-10


def test_abf_table_and_errors():
    assert abf_base_for_context(8192) == 10_000
    assert abf_base_for_context(32768) == 300_000
    assert abf_base_for_context(131072) == 1_400_000
    assert abf_base_for_context(65536, override=5e5) == 5e5
    with pytest.raises(ScheduleError):
        abf_base_for_context(65536)


# -- attention --------------------------------------------------------------------

def attn_weights(rng, cfg):
    d, hd = cfg.d_model, cfg.head_dim
    return AttentionWeights(Tensor(rng.normal(0, .3, (d, cfg.n_heads * hd))),
                            Tensor(rng.normal(0, .3, (d, cfg.n_kv_heads * hd))),
                            Tensor(rng.normal(0, .3, (d, cfg.n_kv_heads * hd))),
                            Tensor(rng.normal(0, .3, (cfg.n_heads * hd, d))))


def dense_reference(x, w, cfg):
    """Loop-based multi-head attention with RoPE and a causal mask."""
    L, H, hd = x.shape[0], cfg.n_heads, cfg.head_dim
    q, k, v = x @ w.wq.data, x @ w.wk.data, x @ w.wv.data
    out = np.zeros((L, H * hd))
    for h in range(H):
        g = h // (H // cfg.n_kv_heads)
        qs = np.stack([rope_apply(q[t, h * hd:(h + 1) * hd], t, cfg.rope_base).data
                       for t in range(L)])
        ks = np.stack([rope_apply(k[t, g * hd:(g + 1) * hd], t, cfg.rope_base).data
                       for t in range(L)])
        for t in range(L):
            s = np.array([qs[t] @ ks[u] / math.sqrt(hd) for u in range(t + 1)])
            p = np.exp(s - s.max())
            p /= p.sum()
            out[t, h * hd:(h + 1) * hd] = p @ v[:t + 1, g * hd:(g + 1) * hd]
    return out @ w.wo.data


@pytest.mark.parametrize("kv", [4, 2, 1])
def test_attention_matches_dense_reference(kv, rng):
    cfg = ModelConfig(d_model=16, n_heads=4, n_kv_heads=kv, context_len=32)
    w = attn_weights(rng, cfg)
    x = rng.normal(size=(7, 16))
    assert np.max(np.abs(attention_forward(x, None, w, cfg).data - dense_reference(x, w, cfg))) <= 1e-10


def test_attention_single_token_is_value_projection(rng):
    cfg = ModelConfig(d_model=16, n_heads=4, n_kv_heads=2, context_len=8)
    w = attn_weights(rng, cfg)
    x = rng.normal(size=(1, 16))
    head_map = np.arange(4) // 2
    v = (x @ w.wv.data).reshape(2, 4)[head_map].reshape(1, 16)
    assert np.allclose(attention_forward(x, None, w, cfg).data, v @ w.wo.data, atol=1e-14)


def test_attention_is_causal_and_length_checked(rng):
    cfg = ModelConfig(d_model=16, n_heads=4, n_kv_heads=2, context_len=8)
    w = attn_weights(rng, cfg)
    x = rng.normal(size=(6, 16))
    y = x.copy()
    y[4:] = rng.normal(size=(2, 16))
    a, b = attention_forward(x, None, w, cfg).data, attention_forward(y, None, w, cfg).data
    assert np.array_equal(a[:4], b[:4])
    with pytest.raises(LengthError):
        attention_forward(rng.normal(size=(9, 16)), None, w, cfg)


def test_attention_uniform_values_ignore_pattern(rng):
    cfg = ModelConfig(d_model=16, n_heads=4, n_kv_heads=2, context_len=8)
    w = attn_weights(rng, cfg)
    w = w._replace(wv=Tensor(np.zeros((16, 8))))
    w = w._replace(wv=Tensor(np.vstack([np.ones((1, 8)), np.zeros((15, 8))])))
    x = rng.normal(size=(5, 16))
    x[:, 0] = 1.0  # every token projects to the same value vector
    out = attention_forward(x, None, w, cfg).data
    assert np.allclose(out, out[0], atol=1e-13)


# -- full model ----------------------------------------------------------------------

def test_parameter_layout_and_counts():
    cfg = ModelConfig()
    shapes = dict(parameter_shapes(cfg))
    assert shapes["layers.0.mlp.w_gate"] == (256, 896)
    assert "layers.0.router" not in shapes
    assert shapes["layers.1.router"] == (8, 256)
    total, active = count_params(cfg)
    d, V, ff, ffe, L = 256, 512, 896, 448, 6
    attn = d * d * 2 + d * 128 * 2     # wq, wo (8 heads x 32) and wk, wv (4 kv heads x 32)
    norms = 2 * d
    expert = 3 * d * ffe
    per_moe = attn + norms + 8 * d + 2 * expert + 8 * expert
    oracle_total = V * d + (attn + norms + 3 * d * ff) + (L - 1) * per_moe + d + d * V
    assert total == oracle_total
    assert active == oracle_total - (L - 1) * 6 * expert
    assert active < total


def test_active_equals_total_when_all_experts_fire():
    for cfg in (ModelConfig(top_k=8), ModelConfig(n_routed_experts=1, top_k=1, n_shared_experts=0)):
        total, active = count_params(cfg)
        assert total == active


def test_tied_experts_share_weights():
    cfg = tiny_config(tie_experts_across_layers=True, tie_shared_experts_across_layers=True)
    names = [n for n, _ in parameter_shapes(cfg)]
    assert "experts.0.w_gate" in names and "shared.0.w_gate" in names
    assert not any(n.startswith("layers.1.experts") for n in names)
    m = MoETransformer(cfg)
    assert m.routed_experts(1)[0].w_gate is m.routed_experts(2)[0].w_gate
    total, active = count_params(cfg)
    assert active <= total


def test_model_forward_shapes_and_records():
    cfg = tiny_config()
    m = MoETransformer(cfg, seed=1)
    logits, recs = model_forward(m, np.array([[1, 2, 3], [4, 5, 6]]))
    assert logits.shape == (2, 3, cfg.vocab_size)
    assert [r.layer for r in recs] == list(range(cfg.n_moe_layers))
    assert all(r.selected.shape == (6, cfg.top_k) for r in recs)


def test_model_forward_input_errors():
    m = MoETransformer(tiny_config())
    with pytest.raises(InputError):
        model_forward(m, np.array([0, 32]))
    with pytest.raises(InputError):
        model_forward(m, np.array([0.5, 1.0]))


def test_generate_is_deterministic():
    m = MoETransformer(tiny_config(), seed=2)
    a, _ = generate(m, [1, 2, 3], 5, temperature=0.8, seed=4)
    b, _ = generate(m, [1, 2, 3], 5, temperature=0.8, seed=4)
    assert a == b and len(a) == 5


# -- checkpoints -------------------------------------------------------------------

def test_checkpoint_roundtrip_is_byte_identical(tmp_path):
    cfg = tiny_config(gate_mode="softmax-topk-unnormalized")
    m = MoETransformer(cfg, seed=5)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, cfg, m.params, {"step": 7})
    cfg2, params, meta = load_checkpoint(path)
    assert cfg2 == cfg and meta == {"step": "7"}
    assert list(params) == [n for n, _ in parameter_shapes(cfg)]
    assert checkpoint_bytes(cfg2, params, {"step": 7}) == path.read_bytes()
    assert path.read_bytes()[:8] == b"GIGAMOE1"


@pytest.mark.parametrize("mutate", ["magic", "truncate", "trailing"])
def test_corrupt_checkpoints_are_input_errors(tmp_path, mutate):
    cfg = tiny_config()
    data = checkpoint_bytes(cfg, MoETransformer(cfg).params)
    data = {"magic": b"XXXXXXXX" + data[8:], "truncate": data[:-5],
            "trailing": data + b"\0"}[mutate]
    path = tmp_path / "bad.ckpt"
    path.write_bytes(data)
    with pytest.raises(InputError):
        load_checkpoint(path)
