import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memroute import autodiff as ad
from helpers import check_op, numeric_grad, rel_error

TRIALS = 50


def _shape(rng, rows=True):
    return (int(rng.integers(1, 5)), int(rng.integers(1, 6))) if rows else (int(rng.integers(1, 6)),)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, margin * np.sign(x + 1e-300) + x, x)


# each entry: name -> (builder, input factory)
OPS = {
    "matmul": (lambda a, b: ad.matmul(a, b),
               lambda r: (lambda m, k, n: [r.normal(size=(m, k)), r.normal(size=(k, n))])(
                   *r.integers(1, 5, 3))),
    "matmul_vec": (lambda a, b: ad.matmul(a, b),
                   lambda r: (lambda k, n: [r.normal(size=k), r.normal(size=(k, n))])(
                       *r.integers(1, 5, 2))),
    "transpose": (ad.transpose, lambda r: [r.normal(size=_shape(r))]),
    "add": (ad.add, lambda r: (lambda s: [r.normal(size=s), r.normal(size=s)])(_shape(r))),
    "add_bias": (ad.add, lambda r: (lambda s: [r.normal(size=s), r.normal(size=s[1])])(_shape(r))),
    "sub": (ad.sub, lambda r: (lambda s: [r.normal(size=s), r.normal(size=s[1:])])(_shape(r))),
    "mul": (ad.mul, lambda r: (lambda s: [r.normal(size=s), r.normal(size=s)])(_shape(r))),
    "div": (ad.div, lambda r: (lambda s: [r.normal(size=s), r.uniform(0.5, 2, size=s)])(_shape(r))),
    "scale": (lambda a: ad.scale(a, -1.7), lambda r: [r.normal(size=_shape(r))]),
    "tanh": (ad.tanh, lambda r: [r.normal(size=_shape(r))]),
    "sigmoid": (ad.sigmoid, lambda r: [r.normal(size=_shape(r))]),
    "relu": (ad.relu, lambda r: [_away_from_zero(r, _shape(r))]),
    "exp": (ad.exp, lambda r: [r.normal(size=_shape(r))]),
    "log1p": (ad.log1p, lambda r: [r.uniform(0.0, 3.0, size=_shape(r))]),
    "sqrt": (ad.sqrt, lambda r: [r.uniform(0.3, 3.0, size=_shape(r))]),
    "reduce_sum": (lambda a: ad.reduce_sum(a, axis=1), lambda r: [r.normal(size=_shape(r))]),
    "reduce_mean": (lambda a: ad.reduce_mean(a, axis=0, keepdims=True),
                    lambda r: [r.normal(size=_shape(r))]),
    "reshape": (lambda a: ad.reshape(a, (-1,)), lambda r: [r.normal(size=_shape(r))]),
    "getitem": (lambda a: ad.getitem(a, (np.array([0, 0, -1]), slice(None))),
                lambda r: [r.normal(size=_shape(r))]),
    "take_rows": (lambda a: ad.take_rows(a, np.array([1, 0, 1, 2])),
                  lambda r: [r.normal(size=(3, int(r.integers(1, 5))))]),
    "scatter_rows": (lambda a: ad.scatter_rows(a, np.array([3, 0]), 5),
                     lambda r: [r.normal(size=(2, int(r.integers(1, 5))))]),
    "concat": (lambda a, b: ad.concat([a, b], axis=0),
               lambda r: (lambda c: [r.normal(size=(2, c)), r.normal(size=(3, c))])(
                   int(r.integers(1, 5)))),
    "softmax": (lambda a: ad.softmax(a), lambda r: [r.normal(size=_shape(r))]),
    "log_softmax": (lambda a: ad.log_softmax(a), lambda r: [r.normal(size=_shape(r))]),
    "cross_entropy": (lambda a: ad.cross_entropy(a, np.arange(a.shape[0]) % a.shape[1]),
                      lambda r: [r.normal(size=_shape(r))]),
    "mse": (ad.mse, lambda r: (lambda s: [r.normal(size=s), r.normal(size=s)])(_shape(r))),
    "layer_norm": (lambda a, g, b: ad.layer_norm(a, g, b),
                   lambda r: (lambda m, d: [r.normal(size=(m, d)), r.normal(size=d),
                                            r.normal(size=d)])(int(r.integers(1, 4)),
                                                               int(r.integers(2, 6)))),
    "gumbel_soft": (lambda a: ad.gumbel_softmax_sample(
        a, 0.7, None, noise=np.linspace(-0.5, 0.5, a.size).reshape(a.shape))[0],
                    lambda r: [r.normal(size=(int(r.integers(1, 4)), 3))]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    build, make = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = max(check_op(build, make(rng), rng) for _ in range(TRIALS))
    assert worst < 1e-4, f"{name}: relative error {worst:.2e}"


def test_matmul_examples():
    eye = np.eye(2)
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(ad.matmul(eye, b).data, b)
    assert ad.matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_sum_gradient_tight():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    A = ad.parameter(a)
    with ad.Tape():
        ad.backward(ad.reduce_sum(ad.matmul(A, b)))
    fd = numeric_grad(lambda: float((A.data @ b).sum()), A.data)
    assert rel_error(A.grad, fd) < 1e-6


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ad.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_broadcast_error():
    with pytest.raises(ad.DimensionError):
        ad.add(np.ones((2, 3)), np.ones(2))


def test_elementwise_examples():
    assert ad.elementwise("tanh", np.array(0.0)).item() == 0.0
    assert ad.elementwise("sigmoid", np.array(0.0)).item() == 0.5
    x = ad.parameter(np.array([-2.5]))
    with ad.Tape():
        y = ad.elementwise("relu", x)
        ad.backward(ad.reduce_sum(y))
    assert y.data[0] == 0.0 and x.grad[0] == 0.0


def test_elementwise_dispatch_errors():
    with pytest.raises(ad.ContractError):
        ad.elementwise("tanh", np.ones(2), np.ones(2))
    with pytest.raises(ad.ContractError):
        ad.elementwise("mul", np.ones(2))
    with pytest.raises(ad.ContractError):
        ad.elementwise("cosh", np.ones(2))


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(np.zeros(3)).data, np.full(3, 1 / 3), rtol=0, atol=1e-15)
    out = ad.softmax(np.array([1000.0, 0.0])).data
    assert np.all(np.isfinite(out)) and out[0] == 1.0 and out[1] == 0.0


def test_softmax_jvp_length5():
    rng = np.random.default_rng(5)
    assert check_op(ad.softmax, [rng.normal(size=5)], rng) < 1e-5


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12), st.floats(-100, 100))
@settings(max_examples=200, deadline=None)
def test_softmax_normalised_and_shift_invariant(xs, c):
    x = np.array(xs)
    p = ad.softmax(x).data
    assert abs(p.sum() - 1.0) < 1e-12 and np.all(p >= 0)
    p2 = ad.softmax(x + c).data
    assert np.max(np.abs(p2 - p) / np.maximum(p, 1e-300)) < 1e-12 or np.allclose(p, p2, atol=1e-15)


def test_gumbel_low_temperature_picks_max():
    rng = np.random.default_rng(0)
    hits = sum(ad.gumbel_softmax_sample(np.array([10.0, 0.0, 0.0]), 0.01, rng)[1] == 0
               for _ in range(10_000))
    assert hits / 10_000 > 0.999


def test_gumbel_equal_logits_uniform():
    rng = np.random.default_rng(1)
    counts = np.bincount([ad.gumbel_softmax_sample(np.zeros(3), 1.0, rng)[1]
                          for _ in range(10_000)], minlength=3) / 10_000
    assert np.all(np.abs(counts - 1 / 3) < 0.02)


def test_gumbel_deterministic_per_seed():
    a = ad.gumbel_softmax_sample(np.array([0.3, -1.0, 2.0]), 0.5, np.random.default_rng(9))
    b = ad.gumbel_softmax_sample(np.array([0.3, -1.0, 2.0]), 0.5, np.random.default_rng(9))
    assert a[1] == b[1] and a[0].data.tobytes() == b[0].data.tobytes()


def test_gumbel_rejects_bad_temperature():
    with pytest.raises(ad.ParameterError):
        ad.gumbel_softmax_sample(np.zeros(3), 0.0, np.random.default_rng(0))


def test_straight_through_mean_matches_softmax():
    # the straight-through forward value is the one-hot argmax, whose mean is softmax(logits)
    rng = np.random.default_rng(2)
    logits = np.array([0.5, -0.3, 1.2])
    noise = ad.gumbel_noise(rng, (50_000, 3))
    soft = ad.softmax(np.broadcast_to(logits, noise.shape) + noise)
    st_ = ad.straight_through(soft, np.argmax(soft.data, axis=1))
    assert np.max(np.abs(st_.data.mean(axis=0) - ad.softmax(logits).data)) < 0.02


def test_relaxed_mean_matches_softmax_for_equal_logits():
    rng = np.random.default_rng(3)
    noise = ad.gumbel_noise(rng, (50_000, 3))
    soft = ad.softmax(noise).data
    assert np.max(np.abs(soft.mean(axis=0) - 1 / 3)) < 0.02


def test_straight_through_forward_hard_backward_soft():
    logits = ad.parameter(np.array([[0.2, -0.1, 0.4]]))
    w = np.array([[1.0, 2.0, 3.0]])
    with ad.Tape():
        soft, hard = ad.gumbel_softmax_sample(logits, 1.0, None, noise=np.zeros((1, 3)))
        st_ = ad.straight_through(soft, hard)
        ad.backward(ad.reduce_sum(ad.mul(st_, w)))
    np.testing.assert_array_equal(st_.data, [[0.0, 0.0, 1.0]])
    p = ad.softmax(logits.data).data[0]
    expected = p * (w[0] - (w[0] * p).sum())
    np.testing.assert_allclose(logits.grad[0], expected, rtol=1e-12)


def test_backward_sum_gives_ones():
    w = ad.parameter(np.arange(4.0))
    with ad.Tape():
        ad.backward(ad.reduce_sum(w))
    np.testing.assert_array_equal(w.grad, np.ones(4))


def test_backward_mse_2x2():
    rng = np.random.default_rng(3)
    w = ad.parameter(rng.normal(size=(2, 2)))
    x, y = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    with ad.Tape():
        ad.backward(ad.mse(ad.matmul(w, x), y))
    fd = numeric_grad(lambda: float(((w.data @ x - y) ** 2).mean()), w.data)
    assert rel_error(w.grad, fd) < 1e-5


def test_backward_unreachable_leaf_gets_zero():
    a, b = ad.parameter(np.ones(3)), ad.parameter(np.ones(2))
    with ad.Tape():
        ad.add(b, 1.0)  # registers b without connecting it to the loss
        ad.backward(ad.reduce_sum(a))
    np.testing.assert_array_equal(b.grad, np.zeros(2))


def test_backward_misuse():
    w = ad.parameter(np.ones(3))
    with ad.Tape() as tape:
        with pytest.raises(ad.ContractError):
            ad.backward(ad.mul(w, 2.0))
        loss = ad.reduce_sum(w)
        ad.backward(loss)
        with pytest.raises(ad.ContractError):
            ad.backward(loss)
        tape.reset()
        loss = ad.reduce_sum(ad.mul(w, 3.0))
        ad.backward(loss)
    np.testing.assert_array_equal(w.grad, np.full(3, 3.0))


def test_backward_requires_tape():
    with pytest.raises(ad.ContractError):
        ad.backward(ad.reduce_sum(ad.parameter(np.ones(2))))


def test_backward_returns_grad_for_each_node():
    w = ad.parameter(np.array([1.0, 2.0]))
    with ad.Tape():
        h = ad.mul(w, w)
        grads = ad.backward(ad.reduce_sum(h))
    np.testing.assert_array_equal(grads[h.node].data, [1.0, 1.0])
    np.testing.assert_array_equal(grads[w.node].data, [2.0, 4.0])


def test_stop_gradient():
    w = ad.parameter(np.array([1.0, 2.0]))
    np.testing.assert_array_equal(ad.stop_gradient(w).data, [1.0, 2.0])
    with ad.Tape():
        ad.backward(ad.reduce_sum(ad.add(ad.stop_gradient(w), ad.scale(w, 0.0))))
    np.testing.assert_array_equal(w.grad, [0.0, 0.0])


def test_stop_gradient_product():
    rng = np.random.default_rng(4)
    w0 = rng.normal(size=4)
    w = ad.parameter(w0.copy())
    with ad.Tape():
        ad.backward(ad.reduce_sum(ad.mul(w, ad.stop_gradient(w))))
    np.testing.assert_allclose(w.grad, w0, rtol=0, atol=0)
    const = w0.copy()  # finite differences with the stopped factor held fixed
    fd = numeric_grad(lambda: float((w.data * const).sum()), w.data)
    assert rel_error(w.grad, fd) < 1e-8


def test_grad_scale():
    w = ad.parameter(np.ones(2))
    with ad.Tape():
        ad.backward(ad.reduce_sum(ad.grad_scale(w, 0.1)))
    np.testing.assert_allclose(w.grad, [0.1, 0.1])


def test_adamw_zero_grad_no_decay_is_noop():
    p = ad.parameter(np.array([1.0, -2.0]))
    st_ = ad.AdamState.zeros_like([p])
    ad.adamw_step([p], [np.zeros(2)], st_, 0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_descends_quadratic():
    p = ad.parameter(np.array([1.0]))
    st_ = ad.AdamState.zeros_like([p])
    ad.adamw_step([p], [2 * p.data.copy()], st_, 0.1)
    assert p.data[0] < 1.0


def test_adamw_converges_on_2d_quadratic():
    A = np.array([[3.0, 0.5], [0.5, 1.0]])
    p = ad.parameter(np.array([1.0, -1.0]))
    opt = ad.AdamW([p], lr=0.05, weight_decay=0.0)
    for i in range(200):
        p.grad = A @ p.data
        opt.step(0.05 * (1 - i / 200) + 1e-3)
    assert 0.5 * p.data @ A @ p.data < 1e-4


def test_adamw_rejects_bad_lr():
    p = ad.parameter(np.ones(1))
    with pytest.raises(ad.ParameterError):
        ad.adamw_step([p], [np.ones(1)], ad.AdamState.zeros_like([p]), 0.0)


def test_adamw_decoupled_decay():
    p = ad.parameter(np.array([2.0]))
    ad.adamw_step([p], [np.zeros(1)], ad.AdamState.zeros_like([p]), 0.1, weight_decay=0.5)
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.05))


def test_determinism_same_ops_same_bits():
    def run():
        rng = np.random.default_rng(11)
        w = ad.parameter(rng.normal(size=(4, 3)))
        x = rng.normal(size=(5, 4))
        with ad.Tape():
            loss = ad.reduce_mean(ad.tanh(ad.matmul(x, w)))
            ad.backward(loss)
        return loss.data.tobytes() + w.grad.tobytes()

    assert run() == run()


def test_gradient_shapes_match():
    rng = np.random.default_rng(0)
    ps = [ad.parameter(rng.normal(size=s)) for s in [(3, 4), (4,), (1, 4)]]
    with ad.Tape():
        y = ad.add(ad.add(ps[0], ps[1]), ps[2])
        ad.backward(ad.reduce_sum(ad.mul(y, y)))
    for p in ps:
        assert p.grad.shape == p.data.shape
