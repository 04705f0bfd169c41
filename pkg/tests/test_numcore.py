import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gfnet.errors import ConfigurationError
from gfnet.numcore import (
    GRUCell,
    Optimizer,
    OptimizerConfig,
    Parameter,
    Tensor,
    clip,
    concat,
    conv2d,
    cosine_lr,
    exp,
    global_avg_pool,
    gru_cell,
    learning_rate_at,
    linear,
    log,
    minimum,
    no_grad,
    relu,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    tanh,
)
from gfnet.numcore.gradcheck import check_gradients


def p64(rng, *shape, scale=1.0):
    return Parameter(rng.standard_normal(shape) * scale, dtype=np.float64)


# -- brute-force references --------------------------------------------------------

def conv_reference(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(n):
        for o in range(f):
            for y in range(ho):
                for xx in range(wo):
                    acc = b[o]
                    for ch in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += xp[i, ch, y * stride + a, xx * stride + bb] * w[o, ch, a, bb]
                    out[i, o, y, xx] = acc
    return out


def gru_reference(x, h, w_ih, w_hh, b_ih, b_hh):
    n, d = x.shape
    H = h.shape[1]
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    out = np.zeros((n, H))
    for s in range(n):
        for j in range(H):
            def gate(k):
                gi = b_ih[k * H + j] + sum(w_ih[k * H + j, i] * x[s, i] for i in range(d))
                gh = b_hh[k * H + j] + sum(w_hh[k * H + j, i] * h[s, i] for i in range(H))
                return gi, gh
            r = sig(sum(gate(0)))
            z = sig(sum(gate(1)))
            gi, gh = gate(2)
            cand = math.tanh(gi + r * gh)
            out[s, j] = (1 - z) * cand + z * h[s, j]
    return out


# -- conv2d ------------------------------------------------------------------------

def test_conv_sum_of_ones():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 5)).astype(np.float32)
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_matches_nested_loops(stride, pad):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    ref = conv_reference(x.astype(np.float64), w, b, stride, pad)
    assert got.shape == ref.shape == (2, 4, (8 + 2 * pad - 3) // stride + 1, (8 + 2 * pad - 3) // stride + 1)
    np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-5)


def test_conv_channel_mismatch():
    with pytest.raises(ConfigurationError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


# -- pooling -------------------------------------------------------------------------

def test_global_avg_pool_examples():
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
    assert global_avg_pool(x).data.item() == 2.5
    c = Tensor(np.full((2, 3, 4, 5), 1.75))
    np.testing.assert_array_equal(global_avg_pool(c).data, np.full((2, 3), 1.75))


def test_global_avg_pool_matches_summation():
    x = np.random.default_rng(2).standard_normal((3, 4, 5, 6)).astype(np.float32)
    ref = np.zeros((3, 4))
    for i in range(3):
        for c in range(4):
            ref[i, c] = sum(float(v) for v in x[i, c].ravel()) / 30
    np.testing.assert_allclose(global_avg_pool(Tensor(x)).data, ref, rtol=1e-6, atol=1e-6)


# -- GRU ---------------------------------------------------------------------------

def test_gru_zero_params_halves_state():
    h = np.random.default_rng(3).standard_normal((2, 4)).astype(np.float32)
    z = lambda *s: Tensor(np.zeros(s))
    out = gru_cell(Tensor(np.ones((2, 3))), Tensor(h), z(12, 3), z(12, 4), z(12), z(12))
    np.testing.assert_allclose(out.data, 0.5 * h, rtol=0, atol=1e-7)


def test_gru_zero_input_zero_state():
    cell = GRUCell(3, 4, rng=np.random.default_rng(4))
    out = cell(Tensor(np.zeros((2, 3))), cell.initial_state(2))
    np.testing.assert_array_equal(out.data, np.zeros((2, 4)))


def test_gru_matches_scalar_reference():
    rng = np.random.default_rng(5)
    x, h = rng.standard_normal((3, 5)), rng.standard_normal((3, 4))
    w_ih, w_hh = rng.standard_normal((12, 5)) * 0.5, rng.standard_normal((12, 4)) * 0.5
    b_ih, b_hh = rng.standard_normal(12) * 0.1, rng.standard_normal(12) * 0.1
    T = lambda a: Tensor(a.astype(np.float32))
    got = gru_cell(T(x), T(h), T(w_ih), T(w_hh), T(b_ih), T(b_hh)).data
    np.testing.assert_allclose(got, gru_reference(x, h, w_ih, w_hh, b_ih, b_hh), rtol=1e-5, atol=1e-5)


# -- softmax cross-entropy -----------------------------------------------------------

def test_ce_uniform_logits():
    loss, probs = softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3])
    assert loss.item() == pytest.approx(math.log(4), abs=1e-6)
    np.testing.assert_allclose(probs, 0.25)


def test_ce_saturated():
    logits = np.zeros((1, 5))
    logits[0, 2] = 100.0
    loss, _ = softmax_cross_entropy(Tensor(logits), [2])
    assert loss.item() == pytest.approx(0.0, abs=1e-6)


def test_ce_label_out_of_range():
    with pytest.raises(ValueError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_ce_gradient_finite_differences():
    rng = np.random.default_rng(6)
    logits = p64(rng, 4, 5)
    labels = rng.integers(0, 5, 4)
    err = check_gradients(lambda: softmax_cross_entropy(logits, labels)[0], [logits], eps=1e-3)
    assert err < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12))
def test_softmax_is_simplex(values):
    p = softmax(np.asarray([values], dtype=np.float32))
    assert np.all(p >= 0)
    assert abs(float(p.sum(dtype=np.float64)) - 1.0) <= 1e-6


# -- backward ------------------------------------------------------------------------

def test_backward_linear_case():
    x = np.array([1.0, -2.0, 3.5], dtype=np.float32)
    w = Parameter(np.array([0.3, 0.1, -0.4], dtype=np.float32))
    (w * Tensor(x)).sum().backward()
    np.testing.assert_array_equal(w.grad, x)


def test_backward_zero_multiplier():
    w = Parameter(np.array([0.3, 0.1], dtype=np.float32))
    (tanh(w).sum() * 0.0).backward()
    np.testing.assert_array_equal(w.grad, 0.0)


def test_backward_on_detached_tensor_is_usage_error():
    with pytest.raises(RuntimeError):
        Tensor(np.ones(1)).backward()
    w = Parameter(np.ones(2))
    with no_grad():
        out = (w * 2.0).sum()
    with pytest.raises(RuntimeError):
        out.backward()


def test_unused_parameters_get_zero_grad():
    from gfnet.numcore import Linear, Module

    class Two(Module):
        def __init__(self):
            self.a = Linear(2, 2)
            self.b = Linear(2, 2)

    m = Two()
    m.zero_grad()
    m.a(Tensor(np.ones((1, 2)))).sum().backward()
    assert np.all(m.b.weight.grad == 0)
    assert np.any(m.a.weight.grad != 0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_rejected():
    w = Parameter(np.array([0.0]))
    with pytest.raises(FloatingPointError):
        log(w).sum().backward()


OPS = {
    "add": lambda a, b: (a + b * 1.3).sum(),
    "sub_broadcast": lambda a, b: (a - b[0:1]).sum(),
    "mul": lambda a, b: (a * b).sum(),
    "div": lambda a, b: (a / (b * b + 1.0)).sum(),
    "matmul": lambda a, b: (a @ b.T).sum(),
    "relu": lambda a, b: (relu(a) * b).sum(),
    "sigmoid": lambda a, b: (sigmoid(a) * b).sum(),
    "tanh": lambda a, b: (tanh(a) * b).sum(),
    "exp": lambda a, b: exp(a * 0.3).sum(),
    "log": lambda a, b: log(a * a + 1.0).sum(),
    "clip": lambda a, b: (clip(a, -0.5, 0.5) * b).sum(),
    "minimum": lambda a, b: minimum(a, b).sum(),
    "concat": lambda a, b: (concat([a, b], axis=1) * concat([b, a], axis=1)).sum(),
    "slice": lambda a, b: (a[:, 1:3] * b[:, :2]).sum(),
    "mean_axis": lambda a, b: (a.mean(axis=0) * b.sum(axis=0)).sum(),
    "reshape_t": lambda a, b: (a.reshape(4, 3).T * b.reshape(3, 4)).sum(),
    "linear": lambda a, b: linear(a, b, b[:, 0]).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    a, b = p64(rng, 3, 4), p64(rng, 3, 4)
    # keep |x| away from the kinks of relu/clip/minimum
    a.data += np.sign(a.data) * 0.05
    b.data += 0.2
    assert check_gradients(lambda: OPS[name](a, b), [a, b]) < 1e-3


def test_conv_pool_gru_gradients():
    rng = np.random.default_rng(7)
    x, w, bias = p64(rng, 2, 3, 6, 6), p64(rng, 4, 3, 3, 3, scale=0.3), p64(rng, 4, scale=0.1)
    w_ih, w_hh = p64(rng, 15, 4, scale=0.4), p64(rng, 15, 5, scale=0.4)
    b_ih, b_hh = p64(rng, 15, scale=0.1), p64(rng, 15, scale=0.1)
    h0 = p64(rng, 2, 5)
    labels = np.array([1, 3])

    def loss():
        e = conv2d(x, w, bias, stride=2, padding=1)
        h = gru_cell(global_avg_pool(tanh(e)), h0, w_ih, w_hh, b_ih, b_hh)
        return softmax_cross_entropy(h, labels)[0]

    assert check_gradients(loss, [x, w, bias, w_ih, w_hh, b_ih, b_hh, h0]) < 1e-3


# -- optimizers ----------------------------------------------------------------------

def test_sgd_plain_step():
    p = Parameter(np.array([0.0], dtype=np.float32))
    opt = Optimizer([p], OptimizerConfig(kind="sgd-nesterov", learning_rate=0.1, momentum=0.0))
    p.grad = np.array([1.0], dtype=np.float32)
    opt.step()
    assert p.data[0] == pytest.approx(-0.1)


def test_nesterov_two_steps():
    p = Parameter(np.array([1.0], dtype=np.float64))
    opt = Optimizer([p], OptimizerConfig(kind="sgd-nesterov", learning_rate=0.1, momentum=0.9))
    # constant gradient 1: buf1 = 1, update = 1 + 0.9 = 1.9; buf2 = 1.9, update = 1 + 1.71 = 2.71
    for _ in range(2):
        p.grad = np.array([1.0])
        opt.step()
    assert p.data[0] == pytest.approx(1.0 - 0.19 - 0.271)


def test_cosine_halfway():
    assert cosine_lr(0.4, 50, 100) == pytest.approx(0.2)
    cfg = OptimizerConfig(learning_rate=0.4, schedule="cosine", total_steps=100)
    assert learning_rate_at(cfg, 50) == pytest.approx(0.2)


@given(st.integers(1, 500), st.floats(1e-4, 1.0))
def test_cosine_monotone_nonnegative(total, lr0):
    rates = [cosine_lr(lr0, t, total) for t in range(total + 2)]
    assert all(r >= 0 for r in rates)
    assert all(b <= a + 1e-15 for a, b in zip(rates, rates[1:]))


def test_adam_matches_scalar_reference():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    w, m, v = 1.0, 0.0, 0.0
    ref = []
    for t in range(1, 4):
        g = 2 * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        ref.append(w)
    p = Parameter(np.array([1.0]), dtype=np.float64)
    opt = Optimizer([p], OptimizerConfig(kind="adam", learning_rate=lr, betas=(b1, b2), eps=eps))
    got = []
    for _ in range(3):
        opt.zero_grad()
        (p * p).sum().backward()
        opt.step()
        got.append(p.data[0])
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-7)


def test_optimizer_config_validation():
    with pytest.raises(ConfigurationError):
        OptimizerConfig(learning_rate=0.0)
    with pytest.raises(ConfigurationError):
        OptimizerConfig(schedule="cosine", total_steps=0)


def test_forward_is_deterministic():
    rng = np.random.default_rng(8)
    x = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
    w = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32))
    a = conv2d(x, w, None, 2, 1).data
    b = conv2d(x, w, None, 2, 1).data
    assert a.tobytes() == b.tobytes()
