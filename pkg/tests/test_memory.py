import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memroute import autodiff as ad
from memroute.memory import (CtExpertParams, EpisodicBuffer, NumericError, SemanticAdapter,
                             consolidation_loss, consolidation_quality, ct_forward,
                             episodic_retrieve, episodic_write, novelty_alpha, probe,
                             semantic_forward)
from helpers import check_op, numeric_grad, rel_error


def _ct(d=8, seed=0, steps=3):
    return CtExpertParams.init(d, np.random.default_rng(seed), steps)


def _buffer(d=8, m=16, seed=0, n=5):
    rng = np.random.default_rng(seed)
    buf = EpisodicBuffer.init(d, rng, capacity=m)
    for i in range(n):
        buf.insert(rng.normal(size=d), rng.normal(size=d), float(i))
    return buf, rng


def dense_attention(query_vec, keys, values):
    """Independent oracle: plain loops, no shared helpers."""
    d = len(query_vec)
    scores = [sum(query_vec[j] * k[j] for j in range(d)) / math.sqrt(d) for k in keys]
    top = max(scores)
    w = [math.exp(s - top) for s in scores]
    z = sum(w)
    w = [x / z for x in w]
    return np.array([sum(w[i] * values[i][j] for i in range(len(keys))) for j in range(d)]), w


# ---------------------------------------------------------------- CT expert


def test_ct_zero_dynamics_is_identity():
    p = _ct()
    p.W1.data[:] = 0
    p.W2.data[:] = 0
    x = np.random.default_rng(1).normal(size=8)
    out, h, dyn = ct_forward(p, x, 0.7)
    np.testing.assert_array_equal(out.data, x)
    assert dyn == 0.0


def test_ct_closed_gate():
    p = _ct()
    p.Wtau.data[:] = -1e4
    x = np.random.default_rng(2).normal(size=8)
    out, _, _ = ct_forward(p, x, 3.0)
    assert np.max(np.abs(out.data - x)) < 1e-6


def test_ct_gradient_w1():
    rng = np.random.default_rng(3)
    p = _ct(seed=3)
    x = rng.normal(size=8)
    with ad.Tape():
        out, _, _ = ct_forward(p, x, 0.9)
        ad.backward(ad.reduce_sum(ad.mul(out, out)))
    g = p.W1.grad.copy()

    def f():
        with ad.no_tape():
            o = ct_forward(p, x, 0.9)[0].data
        return float(o @ o)

    assert rel_error(g, numeric_grad(f, p.W1.data)) < 1e-4


def test_ct_gradient_all_params_and_input():
    rng = np.random.default_rng(4)
    p = _ct(d=5, seed=4)
    dtau = rng.uniform(0.1, 5.0, size=3)

    def build(W1, W2, Wo, Wtau, x):
        return ct_forward(CtExpertParams(W1, W2, Wo, Wtau, 3), x, dtau)[0]

    err = check_op(build, [p.W1.data, p.W2.data, p.Wo.data, p.Wtau.data, rng.normal(size=(3, 5))],
                   rng)
    assert err < 1e-4


def test_ct_dyn_magnitude_and_batching():
    p = _ct()
    rng = np.random.default_rng(5)
    X = rng.normal(size=(4, 8))
    gaps = rng.uniform(0.1, 10, size=4)
    out, h, dyn = ct_forward(p, X, gaps)
    np.testing.assert_allclose(dyn, np.linalg.norm(h.data, axis=1), rtol=1e-15)
    for i in range(4):
        o1, h1, d1 = ct_forward(p, X[i], gaps[i])
        np.testing.assert_allclose(o1.data, out.data[i], rtol=1e-13, atol=1e-14)
        assert d1 == pytest.approx(dyn[i], rel=1e-13)


def test_ct_explicit_euler_steps():
    p = _ct(d=4, seed=6, steps=5)
    x, gap = np.random.default_rng(6).normal(size=4), 2.0
    gate = 1 / (1 + np.exp(-(np.log1p(gap) * p.Wtau.data[0])))
    h = np.zeros(4)
    for _ in range(5):
        h = h + 0.2 * gate * np.tanh(h @ p.W1.data + x @ p.W2.data)
    out, hk, _ = ct_forward(p, x, gap)
    np.testing.assert_allclose(hk.data, h, rtol=1e-13)
    np.testing.assert_allclose(out.data, h @ p.Wo.data + x, rtol=1e-13)


def test_ct_errors():
    p = _ct()
    with pytest.raises(NumericError):
        ct_forward(p, np.full(8, np.nan), 1.0)
    with pytest.raises(ad.ParameterError):
        ct_forward(p, np.ones(8), 0.0)
    with pytest.raises(ad.ParameterError):
        CtExpertParams(p.W1, p.W2, p.Wo, p.Wtau, steps=0)


# ---------------------------------------------------------------- episodic buffer


def test_retrieve_singleton():
    buf, rng = _buffer(n=1)
    res = episodic_retrieve(buf, rng.normal(size=8))
    np.testing.assert_array_equal(res.alpha, [1.0])
    np.testing.assert_allclose(res.r_e.data, buf.values[0], rtol=1e-15)
    assert res.max_alpha == 1.0 and not res.cold


def test_retrieve_identical_entries():
    buf, rng = _buffer(n=0)
    k, v = rng.normal(size=8), rng.normal(size=8)
    buf.insert(k, v, 0.0)
    buf.insert(k, v, 1.0)
    res = episodic_retrieve(buf, rng.normal(size=8))
    np.testing.assert_allclose(res.r_e.data, v, rtol=1e-14)


def test_retrieve_matches_dense_oracle_100_buffers():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(2, 12))
        n = int(rng.integers(1, 20))
        buf, _ = _buffer(d=d, m=32, seed=seed, n=n)
        x = rng.normal(size=d)
        res = episodic_retrieve(buf, x)
        slots = np.flatnonzero(buf.valid)
        expected, w = dense_attention(list(x @ buf.W_q.data), buf.keys[slots], buf.values[slots])
        worst = max(worst, np.max(np.abs(res.r_e.data - expected)),
                    np.max(np.abs(res.alpha - np.array(w))))
    assert worst <= 1e-12


def test_retrieve_5_entries_d8_oracle():
    buf, rng = _buffer(d=8, n=5, seed=42)
    x = rng.normal(size=8)
    res = episodic_retrieve(buf, x)
    expected, _ = dense_attention(list(x @ buf.W_q.data), buf.keys[:5], buf.values[:5])
    assert np.max(np.abs(res.r_e.data - expected)) <= 1e-12


def test_retrieve_counts_and_cold_start():
    buf, rng = _buffer(n=0)
    res = episodic_retrieve(buf, rng.normal(size=8))
    assert res.cold and res.max_alpha == 0.0 and np.all(res.r_e.data == 0)
    buf, rng = _buffer(n=4)
    before = buf.counts.copy()
    res = episodic_retrieve(buf, rng.normal(size=8))
    diff = buf.counts - before
    assert diff.sum() == 1 and diff[res.argmax] == 1
    np.testing.assert_allclose(buf.cache[res.argmax], res.r_e.data)


def test_retrieve_gradient_reaches_query_only():
    buf, rng = _buffer(n=6)
    x = ad.parameter(rng.normal(size=8))
    with ad.Tape():
        r = episodic_retrieve(buf, x).r_e
        ad.backward(ad.reduce_sum(ad.mul(r, r)))
    gx = x.grad.copy()
    gq = buf.W_q.grad.copy()

    def f():
        with ad.no_tape():
            q = x.data @ buf.W_q.data
            s = buf.keys[:6] @ q / math.sqrt(8)
            a = np.exp(s - s.max())
            a /= a.sum()
            r_ = a @ buf.values[:6]
        return float(r_ @ r_)

    assert rel_error(gx, numeric_grad(f, x.data)) < 1e-6
    assert rel_error(gq, numeric_grad(f, buf.W_q.data)) < 1e-6


def test_probe_matches_retrieve_without_side_effects():
    buf, rng = _buffer(n=5)
    x = rng.normal(size=8)
    counts = buf.counts.copy()
    w, top, arg = probe(buf, x @ buf.W_q.data)
    assert np.array_equal(buf.counts, counts)
    res = episodic_retrieve(buf, x)
    np.testing.assert_allclose(w[:5], res.alpha, rtol=1e-13)
    assert arg == res.argmax and top == pytest.approx(res.max_alpha, rel=1e-13)


def test_write_empty_buffer_always():
    buf, rng = _buffer(n=0)
    res = episodic_retrieve(buf, np.ones(8))
    assert episodic_write(buf, np.ones(8), 0.0, res.max_alpha)
    assert len(buf) == 1


def test_write_eviction_at_capacity():
    rng = np.random.default_rng(0)
    buf = EpisodicBuffer.init(4, rng, capacity=2)
    buf.insert(rng.normal(size=4), rng.normal(size=4), 0.0)
    buf.insert(rng.normal(size=4), rng.normal(size=4), 1.0)
    buf.counts[:] = [3, 1]
    assert episodic_write(buf, rng.normal(size=4), 2.0, max_alpha=0.1)
    assert len(buf) == 2
    assert list(buf.taus) == [0.0, 2.0] and list(buf.counts) == [3, 0]


def test_eviction_ties_break_by_oldest():
    rng = np.random.default_rng(1)
    buf = EpisodicBuffer.init(4, rng, capacity=3)
    for tau in (5.0, 2.0, 7.0):
        buf.insert(rng.normal(size=4), rng.normal(size=4), tau)
    buf.counts[:] = [1, 1, 1]
    slot = buf.insert(np.zeros(4), np.zeros(4), 9.0)
    assert slot == 1


def test_identical_token_stream_writes_once():
    rng = np.random.default_rng(2)
    buf = EpisodicBuffer.init(8, rng, capacity=16)
    x = rng.normal(size=8)
    for t in range(50):
        res = episodic_retrieve(buf, x)
        episodic_write(buf, x, float(t), res.max_alpha)
    assert len(buf) == 1


def test_novelty_alpha_self_reference():
    rng = np.random.default_rng(3)
    buf = EpisodicBuffer.init(8, rng, capacity=4, novelty_margin=1.0)
    assert novelty_alpha(buf, np.ones(8)) == 0.0
    y = rng.normal(size=8)
    buf.insert(y @ buf.W_k.data, rng.normal(size=8), 0.0)
    # the same token again: stored score equals the self score, reference sits 1 below
    assert novelty_alpha(buf, y) == pytest.approx(1 / (1 + math.exp(-1.0)), rel=1e-12)
    x = rng.normal(size=8)
    q, k = x @ buf.W_q.data, x @ buf.W_k.data
    s_entry = q @ (y @ buf.W_k.data) / math.sqrt(8)
    s_ref = q @ k / math.sqrt(8) - 1.0
    expected = math.exp(s_entry) / (math.exp(s_entry) + math.exp(s_ref))
    assert novelty_alpha(buf, x) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("c", [1.0, 10.0, 100.0])
def test_self_reference_is_scale_free(c):
    rng = np.random.default_rng(4)
    buf = EpisodicBuffer.init(8, rng, capacity=8, novelty_margin=0.0)
    for W in (buf.W_q, buf.W_k):
        W.data *= math.sqrt(c)
    y = rng.normal(size=8)
    buf.insert(y @ buf.W_k.data, y @ buf.W_v.data, 0.0)
    for x in rng.normal(size=(20, 8)):
        q = x @ buf.W_q.data
        below_self = q @ buf.keys[0] < q @ (x @ buf.W_k.data)
        assert (novelty_alpha(buf, x) < 0.5) == below_self


def test_entries_view():
    buf, _ = _buffer(n=3)
    es = buf.entries
    assert len(es) == 3 and all(e.c == 0 for e in es)
    assert [e.tau for e in es] == [0.0, 1.0, 2.0]


@given(st.lists(st.tuples(st.booleans(), st.integers(0, 9)), min_size=1, max_size=80),
       st.integers(1, 6))
@settings(max_examples=60, deadline=None)
def test_buffer_capacity_and_count_invariants(ops, cap):
    rng = np.random.default_rng(0)
    buf = EpisodicBuffer.init(4, rng, capacity=cap)
    t = 0.0
    for is_write, seed in ops:
        x = np.random.default_rng(seed).normal(size=4)
        if is_write:
            size = len(buf)
            counts_before = buf.counts.copy()
            valid_before = buf.valid.copy()
            slot = buf.insert(x, x, t)
            assert len(buf) == min(size + 1, cap)
            others = np.arange(cap) != slot
            assert np.all(buf.counts[others & valid_before] >= counts_before[others & valid_before])
        else:
            before = buf.counts.copy()
            episodic_retrieve(buf, x)
            assert np.all(buf.counts >= before)
        t += 1.0
        assert len(buf) <= cap


# ---------------------------------------------------------------- semantic adapter


def test_semantic_zero_down():
    a = SemanticAdapter.init(8, np.random.default_rng(0))
    a.W_down.data[:] = 0
    np.testing.assert_array_equal(semantic_forward(a, np.ones(8)).data, np.zeros(8))


def test_semantic_dense_oracle():
    rng = np.random.default_rng(1)
    a = SemanticAdapter.init(8, rng, rank=2)
    x = rng.normal(size=8)
    hidden = [max(0.0, sum(x[i] * a.W_down.data[i, j] for i in range(8))) for j in range(2)]
    expected = [sum(hidden[j] * a.W_up.data[j, i] for j in range(2)) for i in range(8)]
    np.testing.assert_allclose(semantic_forward(a, x).data, expected, rtol=1e-13, atol=1e-15)


def test_semantic_gradient():
    rng = np.random.default_rng(2)
    a = SemanticAdapter.init(8, rng, rank=2)
    err = check_op(lambda Wd, Wu, x: semantic_forward(SemanticAdapter(Wd, Wu), x),
                   [a.W_down.data, a.W_up.data, rng.normal(size=(3, 8))], rng)
    assert err < 1e-4


def test_semantic_default_rank():
    assert SemanticAdapter.init(64, np.random.default_rng(0)).rank == 4
    assert SemanticAdapter.init(8, np.random.default_rng(0)).rank == 1


# ---------------------------------------------------------------- consolidation signal


def test_quality_examples():
    r = np.random.default_rng(0).normal(size=8)
    assert consolidation_quality(r, r).item() == 1.0
    assert consolidation_quality(r + 1.0, r, sigma2=1.0).item() == pytest.approx(math.exp(-1))
    assert consolidation_quality(r + 2.0, r, sigma2=4.0).item() == pytest.approx(0.36787944117)
    with pytest.raises(ad.ParameterError):
        consolidation_quality(r, r, sigma2=0.0)


def test_quality_monotone_in_distance():
    rng = np.random.default_rng(1)
    for _ in range(100):
        r_e = rng.normal(size=6)
        direction = rng.normal(size=6)
        a, b = sorted(rng.uniform(0, 3, size=2))
        qa = consolidation_quality(r_e + a * direction, r_e).item()
        qb = consolidation_quality(r_e + b * direction, r_e).item()
        assert qa >= qb


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8),
       st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
@settings(max_examples=100, deadline=None)
def test_quality_in_unit_interval(a, b):
    n = min(len(a), len(b))
    q = consolidation_quality(np.array(a[:n]), np.array(b[:n])).item()
    assert 0.0 <= q <= 1.0
    if a[:n] == b[:n]:
        assert q == 1.0


def test_consolidation_loss_zero_and_stop_gradient():
    buf, rng = _buffer(n=5)
    ad_ = SemanticAdapter.init(8, rng, rank=2)
    x = ad.parameter(rng.normal(size=8))
    r = episodic_retrieve(buf, x).r_e
    assert consolidation_loss(r, r).item() == 0.0
    with ad.Tape():
        r_e = episodic_retrieve(buf, x).r_e
        r_s = semantic_forward(ad_, x)
        ad.add(ad.reduce_sum(buf.W_k), 0.0)  # put the projections on the tape
        ad.add(ad.reduce_sum(buf.W_v), 0.0)
        ad.backward(consolidation_loss(r_s, r_e))
    for W in (buf.W_q, buf.W_k, buf.W_v):
        assert W.grad is not None and np.all(W.grad == 0.0)
    assert np.linalg.norm(ad_.W_up.grad) > 0


def test_consolidation_loss_gradient_w_up():
    rng = np.random.default_rng(5)
    a = SemanticAdapter.init(8, rng, rank=2)
    x = rng.normal(size=(4, 8))
    target = rng.normal(size=(4, 8))
    with ad.Tape():
        ad.backward(consolidation_loss(semantic_forward(a, x), target))
    g = a.W_up.grad.copy()

    def f():
        with ad.no_tape():
            return consolidation_loss(semantic_forward(a, x), target).item()

    assert rel_error(g, numeric_grad(f, a.W_up.data)) < 1e-6


def test_adapter_distils_frozen_buffer():
    """Training the adapter alone on a frozen buffer drives the error down tenfold."""
    rng = np.random.default_rng(7)
    d = 16
    buf = EpisodicBuffer.init(d, rng, capacity=8)
    for i in range(3):
        buf.insert(rng.normal(size=d), rng.normal(size=d), float(i))
    X = rng.normal(size=(256, d))
    X[:, 0] = 1.0  # constant input channel so the bias-free adapter can represent offsets
    with ad.no_tape():
        targets = np.stack([episodic_retrieve(buf, x).r_e.data for x in X])
    adapter = SemanticAdapter.init(d, rng, rank=4)
    params = [adapter.W_down, adapter.W_up]
    opt = ad.AdamW(params, lr=0.01, weight_decay=0.0)
    losses = []
    for step in range(500):
        with ad.Tape():
            loss = consolidation_loss(semantic_forward(adapter, X), targets)
            ad.backward(loss)
        losses.append(loss.item())
        opt.step()
    assert losses[-1] < 0.1 * losses[0]
    window = 50
    means = [np.mean(losses[i:i + window]) for i in range(0, 500, window)]
    assert all(b <= a for a, b in zip(means, means[1:]))
