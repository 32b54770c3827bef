import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eve import moe
from eve import tensor as T
from eve.embedding import IMAGE, TEXT
from eve.nn import Module
from eve.transformer import ExpertFFN


def experts_for(n, dim=8, seed=0):
    ex = [ExpertFFN(dim, 2 * dim, std=0.3) for _ in range(n)]
    for i, e in enumerate(ex):
        e.init_parameters(seed + i)
    return ex


def random_gates(g, t, n):
    z = g.standard_normal((t, n))
    return T.Tensor(np.exp(z) / np.exp(z).sum(1, keepdims=True))


@pytest.mark.parametrize("k", [1, 2, 4])
def test_dispatch_bit_exact_against_naive_loop(k):
    g = np.random.default_rng(k)
    ex = experts_for(8)
    for _ in range(10):
        t = int(g.integers(1, 40))
        x = T.Tensor(g.standard_normal((t, 8)))
        gates = random_gates(g, t, 8)
        y, _ = moe.dispatch_combine(x, gates, k, ex)
        assert np.array_equal(y.data, moe.naive_moe(x, gates, k, ex))


@settings(max_examples=30, deadline=None)
@given(t=st.integers(1, 30), n=st.sampled_from([2, 4, 8]), k=st.integers(1, 4), seed=st.integers(0, 10_000))
def test_every_token_gets_k_slots(t, n, k, seed):
    k = min(k, n)
    g = np.random.default_rng(seed)
    gates = random_gates(g, t, n)
    _, rec = moe.dispatch_combine(T.Tensor(g.standard_normal((t, 8))), gates, k, experts_for(n))
    assert rec.assignments == t * k
    counts = np.bincount(np.concatenate(rec.tokens), minlength=t)
    assert np.all(counts == k)
    # no token sent to the same expert twice
    assert all(len(set(row)) == k for row in rec.topk.tolist())


def test_gate_rows_sum_to_one():
    g = np.random.default_rng(0)
    x = T.Tensor(g.standard_normal((12, 8)))
    w = T.Tensor(g.standard_normal((8, 4)))
    tags = np.array([IMAGE] * 6 + [TEXT] * 6)
    gates = moe.gate(x, tags, w, T.Tensor(g.standard_normal(8)), T.Tensor(g.standard_normal(8)))
    np.testing.assert_allclose(gates.data.sum(1), 1.0, rtol=1e-6)


def test_ties_go_to_lower_index():
    gates = np.array([[0.25, 0.25, 0.25, 0.25], [0.1, 0.4, 0.4, 0.1]])
    assert moe.topk_indices(gates, 2).tolist() == [[0, 1], [1, 2]]


def test_hard_router_isolates_modalities():
    ex = experts_for(2)
    g = np.random.default_rng(1)
    x = T.Tensor(g.standard_normal((6, 8)))
    tags = np.array([IMAGE, TEXT, IMAGE, TEXT, TEXT, IMAGE])
    y = moe.hard_route(x, tags, ex).data
    with T.no_grad():
        for i, m in enumerate(tags):
            np.testing.assert_array_equal(y[i], ex[m](T.Tensor(x.data[i:i + 1])).data[0])


def test_hard_router_needs_two_experts():
    with pytest.raises(moe.RoutingError):
        moe.HardRouter(experts_for(3))


def test_aux_uniform_is_alpha():
    for n in (2, 4, 8, 32):
        f = np.full(n, 1.0 / n)
        assert moe.aux_loss(f, f, 0.001) == pytest.approx(0.001, abs=1e-15)


def test_load_stats_counts_valid_tokens_only():
    gates = T.Tensor(np.array([[0.7, 0.3], [0.2, 0.8], [0.9, 0.1]]))
    top = moe.topk_indices(gates.data, 1)
    s = moe.load_stats(gates, top, 2, valid=np.array([True, True, False]), alpha=1.0)
    np.testing.assert_allclose(s.f, [0.5, 0.5])
    np.testing.assert_allclose(s.p, [0.45, 0.55])
    assert s.aux == pytest.approx(2 * (0.5 * 0.45 + 0.5 * 0.55))


def test_aux_gradient_flows_through_p_only():
    g = np.random.default_rng(0)
    with T.default_dtype(np.float64):
        logits = T.Tensor(g.standard_normal((5, 4)), requires_grad=True)
        gates = T.softmax(logits)
        s = moe.load_stats(gates, moe.topk_indices(gates.data, 2), 4, alpha=1.0)
        s.aux_tensor.backward()
        # d aux / d gates[t, i] = alpha * N * f_i / T, pushed through the softmax
        dg = np.broadcast_to(4 * s.f / 5, (5, 4))
        y = gates.data
        want = y * (dg - (dg * y).sum(1, keepdims=True))
        np.testing.assert_allclose(logits.grad, want, rtol=1e-10)


def test_soft_router_stats_and_untrained_balance():
    ex = experts_for(4, dim=8)
    r = moe.SoftRouter(8, ex, 2)
    r.init_parameters(0)
    g = np.random.default_rng(2)
    x = T.Tensor(g.standard_normal((64, 8)).astype(np.float32))
    tags = np.array([IMAGE, TEXT] * 32)
    y, stats = r(x, tags, np.ones(64, dtype=bool), 0.001)
    assert y.shape == (64, 8)
    assert stats.f.sum() == pytest.approx(1.0)
    # near-zero router weights: mean gates near uniform
    np.testing.assert_allclose(stats.p, 0.25, atol=0.02)
    assert stats.aux == pytest.approx(0.001, rel=0.1)
    assert stats.image_counts.sum() == 64 and stats.text_counts.sum() == 64


def test_bad_top_k():
    with pytest.raises(moe.RoutingError):
        moe.SoftRouter(8, experts_for(2), 3)
