import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gigamoe.errors import InputError
from gigamoe.model import MoETransformer, model_forward, tiny_config
from gigamoe.routing import (EmissionsInput, RoutingEmbedding, RoutingTrace, cluster_embeddings,
                             co2_estimate, detect_collapse, domain_embedding, embedding_text,
                             expert_frequencies, filter_embedding, h_sparsity, h_utilization,
                             read_embedding, read_traces, routing_embedding, steering_bias,
                             steering_matrix, telemetry_report, write_embedding, write_traces)


def trace(selected, n_experts, probs=None, sid="s"):
    """Single-layer trace from per-token selections."""
    sel = np.asarray(selected)
    if probs is None:
        probs = np.full((len(sel), n_experts), 1.0 / n_experts)
    return RoutingTrace(sid, len(sel), [sel], [np.asarray(probs, float)])


# -- entropy metrics -------------------------------------------------------------

def test_h_utilization_examples():
    assert abs(h_utilization(trace([[0], [1], [2], [3]], 4), 0) - 1.0) <= 1e-12
    assert h_utilization(trace([[2]] * 5, 4), 0) == 0.0
    assert h_utilization(trace([[0], [1]], 4), 0) == pytest.approx(0.5, abs=1e-15)


def test_h_sparsity_examples():
    assert h_sparsity(trace([[0]], 4, np.eye(4)[[0]]), 0) == 0.0
    assert abs(h_sparsity(trace([[0]], 4), 0) - 1.0) <= 1e-12
    assert h_sparsity(trace([[0]], 4, [[0.5, 0.5, 0, 0]]), 0) == pytest.approx(0.5, abs=1e-15)


@given(st.lists(st.integers(0, 5), min_size=1, max_size=40), st.permutations(range(6)))
def test_entropies_are_permutation_invariant(sel, perm):
    perm = np.array(perm)
    rng = np.random.default_rng(len(sel))
    probs = rng.dirichlet(np.ones(6), size=len(sel))
    a = trace(np.array(sel)[:, None], 6, probs)
    inv = np.argsort(perm)
    b = trace(perm[np.array(sel)][:, None], 6, probs[:, inv])
    assert h_utilization(a, 0) == pytest.approx(h_utilization(b, 0), abs=1e-12)
    assert h_sparsity(a, 0) == pytest.approx(h_sparsity(b, 0), abs=1e-12)
    assert 0.0 <= h_utilization(a, 0) <= 1.0 and 0.0 <= h_sparsity(a, 0) <= 1.0 + 1e-12


def test_detect_collapse():
    assert detect_collapse(trace([[0], [1], [2], [3]] * 5, 4)) == []
    assert detect_collapse(trace([[0], [1], [2]] * 5, 4)) == [(0, 3)]
    # e=8, k=1, expert 7 at 1% of tokens
    sel = np.array([j % 7 for j in range(990)] + [7] * 10)[:, None]
    assert (0, 7) in detect_collapse(trace(sel, 8), min_fraction=0.0125)
    assert (0, 7) not in detect_collapse(trace(sel, 8), min_fraction=0.005)


def test_trace_validation():
    with pytest.raises(InputError):
        RoutingTrace("x", 2, [np.zeros((2, 2), int)], [np.zeros((3, 4))])
    with pytest.raises(InputError):
        RoutingTrace("x", 0, [], [])


# -- embeddings --------------------------------------------------------------------

def test_routing_embedding_examples():
    one = routing_embedding(trace([[3, 5]], 8))
    assert one.matrix[0].tolist() == [0, 0, 0, 1.0, 0, 1.0, 0, 0]
    assert one.row_sums()[0] == 2.0
    two = routing_embedding(trace([[3, 5], [3, 5]], 8))
    assert np.array_equal(one.matrix, two.matrix)
    four = routing_embedding(trace([[0], [0], [1], [2]], 5))
    assert four.matrix[0].tolist() == [0.5, 0.25, 0.25, 0.0, 0.0]


@given(st.integers(1, 3), st.integers(1, 60), st.integers(0, 10_000))
def test_routing_embedding_rows_sum_to_top_k(k, n_tok, seed):
    rng = np.random.default_rng(seed)
    e = 7
    layers = [np.sort(np.argsort(rng.random((n_tok, e)), axis=1)[:, :k], axis=1) for _ in range(3)]
    tr = RoutingTrace("r", n_tok, layers, [np.full((n_tok, e), 1 / e)] * 3)
    emb = routing_embedding(tr)
    assert np.all(emb.row_sums() == k)
    assert np.all((emb.matrix >= 0) & (emb.matrix <= k))


def test_domain_embedding_mean_and_errors():
    a = routing_embedding(trace([[0, 1]], 4))
    b = routing_embedding(trace([[2, 3]], 4))
    assert domain_embedding([a]) is a
    mid = domain_embedding([a, b])
    assert mid.matrix[0].tolist() == [0.5] * 4
    assert mid.row_sums()[0] == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(InputError):
        domain_embedding([a, routing_embedding(trace([[0, 1]], 5))])
    with pytest.raises(InputError):
        domain_embedding([])


def test_domain_embedding_commutes_with_permutation(rng):
    embs = [RoutingEmbedding(rng.dirichlet(np.ones(6), size=2) * 2, 10, 2) for _ in range(3)]
    perm = rng.permutation(6)
    permuted = [RoutingEmbedding(e.matrix[:, perm], 10, 2) for e in embs]
    assert np.array_equal(domain_embedding(permuted).matrix, domain_embedding(embs).matrix[:, perm])


def test_filter_threshold_examples():
    m = np.zeros((1, 64))
    m[0, :3] = [0.04, 0.05, 3 / 64]
    out = filter_embedding(RoutingEmbedding(m, 1, 2), 64).matrix[0]
    assert out[0] == 0.0 and out[1] == 0.05 and out[2] == 3 / 64
    zero = RoutingEmbedding(np.zeros((2, 8)), 1, 2)
    assert not filter_embedding(zero).matrix.any()
    with pytest.raises(InputError):
        filter_embedding(zero, 9)


@given(st.lists(st.floats(0, 2), min_size=8, max_size=8))
def test_filter_is_idempotent(row):
    emb = RoutingEmbedding(np.array([row]), 4, 2)
    once = filter_embedding(emb)
    assert np.array_equal(filter_embedding(once).matrix, once.matrix)


def test_steering_bias_contract():
    m = np.zeros((2, 8))
    m[1, [2, 7]] = 1.0
    f = RoutingEmbedding(m, 4, 2)
    assert steering_bias(f, 1, 3.0).tolist() == [0, 0, 3.0, 0, 0, 0, 0, 3.0]
    assert not steering_bias(f, 0, 3.0).any()
    assert steering_matrix(f, 2.0).shape == (2, 8)
    with pytest.raises(InputError):
        steering_bias(f, 2, 1.0)
    with pytest.raises(InputError):
        steering_bias(f, 0, -1.0)


def steered_freqs(model, ids, strength, support):
    cfg = model.config
    m = np.zeros((cfg.n_moe_layers, cfg.n_routed_experts))
    m[:, support] = 1.0
    bias = steering_matrix(RoutingEmbedding(m, 1, cfg.top_k), strength)
    _, recs = model_forward(model, ids, steering=bias)
    tr = RoutingTrace.from_records("t", recs)
    return tr, np.array([expert_frequencies(tr, i)[support].sum() for i in range(tr.n_layers)])


def test_steering_zero_strength_and_moderate_strength():
    model = MoETransformer(tiny_config(n_routed_experts=6), seed=4)
    ids = np.random.default_rng(0).integers(0, 32, size=48)
    _, recs = model_forward(model, ids)
    plain = RoutingTrace.from_records("t", recs)
    zero, base_mass = steered_freqs(model, ids, 0.0, [1, 4])
    for a, b in zip(plain.selected, zero.selected):
        assert np.array_equal(a, b)
    _, mass = steered_freqs(model, ids, 0.5, [1, 4])
    assert np.all(mass > base_mass)
    _, full = steered_freqs(model, ids, 1e9, [1, 4])
    assert np.all(full == 1.0)


# -- clustering ------------------------------------------------------------------------

def test_cluster_purity_on_synthetic_patterns():
    rng = np.random.default_rng(11)
    patterns = [np.array([2, 2, 0, 0, 0, 0]), np.array([0, 0, 2, 2, 0, 0]),
                np.array([0, 0, 0, 1, 1, 2])]
    embs, truth = [], []
    for label, p in enumerate(patterns):
        for _ in range(30):
            noisy = np.clip(p / 2 + rng.normal(0, 0.08, size=6), 0, None)
            row = 2 * noisy / noisy.sum()
            embs.append(RoutingEmbedding(np.tile(row, (3, 1)), 50, 2))
            truth.append(label)
    labels = cluster_embeddings(embs, 3, seed=0)
    purity = sum(np.bincount(np.array(truth)[labels == c]).max() for c in set(labels)) / len(truth)
    assert purity >= 0.95
    assert np.array_equal(labels, cluster_embeddings(embs, 3, seed=0))


def test_cluster_degenerate_cases():
    a = RoutingEmbedding(np.array([[1.0, 1.0, 0.0]]), 2, 2)
    b = RoutingEmbedding(np.array([[0.0, 1.0, 1.0]]), 2, 2)
    labels = cluster_embeddings([a, a, b, b], 2, seed=3)
    assert labels[0] == labels[1] != labels[2] == labels[3]
    assert set(cluster_embeddings([a, b, b], 1)) == {0}
    with pytest.warns(RuntimeWarning):
        assert set(cluster_embeddings([a, a, a], 2)) == {0}
    with pytest.raises(InputError):
        cluster_embeddings([a], 2)


# -- file formats ---------------------------------------------------------------------------

def test_trace_file_roundtrip(tmp_path):
    model = MoETransformer(tiny_config(), seed=0)
    traces = []
    for sid, ids in (("a", [1, 2, 3]), ("b", [4, 5])):
        _, recs = model_forward(model, np.array(ids))
        traces.append(RoutingTrace.from_records(sid, recs))
    path = tmp_path / "t.jsonl"
    write_traces(path, traces)
    lines = path.read_text().splitlines()
    assert len(lines) == 2 * (3 + 2)
    assert set(json.loads(lines[0])) == {"sample", "layer", "token", "selected", "probs"}
    back = read_traces(path)
    for t, u in zip(traces, back):
        assert t.sample_id == u.sample_id
        for x, y in zip(t.selected + t.probs, u.selected + u.probs):
            assert np.array_equal(x, y)


def test_trace_file_errors(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"sample": "a", "layer": 0}\n')
    with pytest.raises(InputError):
        read_traces(path)


def test_embedding_file_roundtrip(tmp_path):
    emb = routing_embedding(trace([[0, 3], [1, 3], [2, 3]], 5))
    path = tmp_path / "e.txt"
    write_embedding(path, emb)
    assert path.read_text().splitlines()[0] == "routing_embedding 1 5 2 3"
    back = read_embedding(path)
    assert np.array_equal(back.matrix, emb.matrix) and back.top_k == 2
    path.write_text(embedding_text(emb).replace("routing_embedding 1 5", "routing_embedding 2 5"))
    with pytest.raises(InputError):
        read_embedding(path)


def test_telemetry_report_serializes():
    rep = telemetry_report([trace([[0], [1], [1], [1]], 3)])
    d = rep.to_dict()
    assert json.loads(json.dumps(d)) == d
    assert d["collapsed"] == [[0, 2]]


# -- emissions ----------------------------------------------------------------------------------

def test_co2_examples():
    assert co2_estimate(EmissionsInput(1.0, 1000, 1000)) == 1000.0
    assert co2_estimate(EmissionsInput(1.4, 0, 500)) == 0.0
    assert co2_estimate(EmissionsInput(1.2, 250.0, 400.0)) == pytest.approx(120.0)
    for bad in ((1.0, -1, 1), (0.5, 1, 1), (1.0, 1, math.nan)):
        with pytest.raises(InputError):
            co2_estimate(EmissionsInput(*bad))
