import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import away_from, check_gradients, naive_conv2d, numeric_grad, rel_error
from nce import functional as F
from nce.errors import ConfigError, InputError, UsageError
from nce.optim import SGD, Adam, Parameter, adam_step, cosine_lr, sgd_step
from nce.tensor import Tensor, no_grad, precision, softmax, stack

N_INSTANCES = 100


# -- convolution ----------------------------------------------------------------

def test_conv_zero_input_gives_zero():
    x = Tensor(np.zeros((1, 2, 5, 5)))
    w = Tensor(np.random.default_rng(0).normal(size=(3, 2, 3, 3)))
    assert np.all(F.conv2d(x, w, 1, 1).values == 0)


def test_conv_ones():
    out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.values.item() == 9


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_matches_nested_loop_oracle(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    out = F.conv2d(Tensor(x), Tensor(w), stride, padding).values
    ref = naive_conv2d(x, w, stride, padding)
    assert out.shape == ref.shape
    np.testing.assert_allclose(out, ref, atol=1e-5 * np.abs(ref).max())


def test_conv_output_size_formula():
    x = Tensor(np.zeros((1, 1, 7, 9)))
    out = F.conv2d(x, Tensor(np.zeros((2, 1, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 2, (7 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)


def test_conv_shape_errors():
    with pytest.raises(ConfigError):
        F.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ConfigError):
        F.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ConfigError):
        F.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)


def test_conv_gradients_finite_difference():
    rng = np.random.default_rng(1)
    worst = 0.0
    for i in range(N_INSTANCES):
        stride, padding, k = [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)][i % 5]
        x = rng.normal(size=(2, 2, 5, 5))
        w = rng.normal(size=(3, 2, k, k))
        r = rng.normal(size=F.conv2d(Tensor(x), Tensor(w), stride, padding).shape)
        worst = max(worst, check_gradients(lambda a, b: (F.conv2d(a, b, stride, padding) * Tensor(r)).sum(), [x, w]))
    assert worst <= 1e-3


# -- batch norm -----------------------------------------------------------------

def test_bn_constant_channel_gives_beta():
    x = Tensor(np.full((4, 2, 3, 3), 5.0, dtype=np.float32))
    beta = Tensor(np.array([0.5, -1.0], dtype=np.float32))
    out = F.batch_norm(x, Tensor(np.ones(2, np.float32)), beta, np.zeros(2), np.ones(2), True)
    np.testing.assert_allclose(out.values[:, 0], 0.5, atol=1e-6)
    np.testing.assert_allclose(out.values[:, 1], -1.0, atol=1e-6)


def test_bn_identity_on_standardized_input():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(64, 3, 4, 4))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    with precision(np.float64):
        out = F.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), True)
    np.testing.assert_allclose(out.values, x, atol=1e-4)


def test_bn_normalized_statistics():
    rng = np.random.default_rng(1)
    x = rng.normal(3.0, 2.5, size=(32, 4, 5, 5))
    with precision(np.float64):
        out = F.batch_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), np.zeros(4), np.ones(4), True).values
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)


def test_bn_running_stats_and_eval_mode():
    rng = np.random.default_rng(2)
    x = rng.normal(2.0, 3.0, size=(16, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    with precision(np.float64):
        F.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, True)
        np.testing.assert_allclose(rm, (1 - F.BN_MOMENTUM) * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(rv, F.BN_MOMENTUM + (1 - F.BN_MOMENTUM) * x.var(axis=(0, 2, 3)))
        out = F.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, False).values
    ref = (x - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1) + F.BN_EPS)
    np.testing.assert_allclose(out, ref)


@pytest.mark.parametrize("training", [True, False])
def test_bn_gradients_finite_difference(training):
    rng = np.random.default_rng(3)
    for _ in range(N_INSTANCES):
        x = rng.normal(size=(4, 3, 2, 2))
        g = rng.normal(size=3)
        b = rng.normal(size=3)
        r = rng.normal(size=x.shape)
        rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, size=3)

        def f(a, gamma, beta):
            return (F.batch_norm(a, gamma, beta, rm.copy(), rv.copy(), training) * Tensor(r)).sum()

        check_gradients(f, [x, g, b])


# -- other primitives -------------------------------------------------------------

def test_relu_pool_linear_gradients():
    rng = np.random.default_rng(4)
    for _ in range(N_INSTANCES):
        x = away_from(rng.normal(size=(2, 3, 4, 4)), 0.0, 1e-3)
        r = rng.normal(size=x.shape)
        check_gradients(lambda a: (F.relu(a) * Tensor(r)).sum(), [x])
        rp = rng.normal(size=(2, 3, 2, 2))
        check_gradients(lambda a: (F.max_pool2d(a, 2) * Tensor(rp)).sum(), [x])
        rg = rng.normal(size=(2, 3))
        check_gradients(lambda a: (F.global_avg_pool(a) * Tensor(rg)).sum(), [x])
        xin, w, b = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=5)
        rl = rng.normal(size=(3, 5))
        check_gradients(lambda a, ww, bb: (F.linear(a, ww, bb) * Tensor(rl)).sum(), [xin, w, b])


def test_cross_entropy_values():
    k = 7
    loss = F.softmax_cross_entropy(Tensor(np.zeros((3, k))), np.array([0, 3, 6]))
    assert abs(float(loss.values) - math.log(k)) < 1e-6
    logits = np.full((2, 4), -50.0)
    logits[[0, 1], [1, 2]] = 50.0
    assert float(F.softmax_cross_entropy(Tensor(logits), np.array([1, 2])).values) < 1e-12


def test_cross_entropy_gradient_closed_form_and_fd():
    rng = np.random.default_rng(5)
    for _ in range(N_INSTANCES):
        z = rng.normal(size=(4, 5)) * 3
        y = rng.integers(0, 5, 4)
        check_gradients(lambda a: F.softmax_cross_entropy(a, y), [z])
    with precision(np.float64):
        t = Tensor(z, requires_grad=True)
        F.softmax_cross_entropy(t, y).backward()
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(4), y] -= 1
    np.testing.assert_allclose(t.grad, p / 4, atol=1e-12)


def test_cross_entropy_label_errors():
    with pytest.raises(InputError):
        F.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(InputError):
        F.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([-1, 0]))


def test_tensor_arithmetic_gradients():
    rng = np.random.default_rng(6)
    for _ in range(N_INSTANCES):
        a, b = rng.normal(size=(3, 4)), rng.uniform(0.5, 2, size=(3, 4))
        c = rng.normal(size=(4,))
        check_gradients(lambda p, q, s: ((p * q - s) / q + (-p) * p).sum(), [a, b, c])
        check_gradients(lambda p: (p[1:, ::2].sum(axis=0) * 2.0).mean(), [a])
        check_gradients(lambda p: p[[0, 2, 0]].reshape(-1).sum(), [a])
        v = rng.normal(size=5)
        wts = rng.normal(size=5)
        check_gradients(lambda p: (softmax(p) * Tensor(wts)).sum(), [v])
        rs = rng.normal(size=(2, 4))
        check_gradients(lambda p, q: (stack([p, q]) * Tensor(rs)).sum(), [c, c + 1])


def test_fanout_accumulates_additively():
    with precision(np.float64):
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        y = x * x + x * 3.0 + x
        y.sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.values + 4.0)


def test_backward_visits_reverse_execution_order():
    order = []
    a = Tensor(np.ones(2), requires_grad=True)

    def tracked(t, name):
        return Tensor.from_op(t.values * 1, (t,), lambda g: (order.append(name) or g,), name)

    b = tracked(a, "first")
    c = tracked(b, "second")
    d = tracked(b, "third")
    (c + d).sum().backward()
    assert order == ["third", "second", "first"]


def test_no_grad_and_usage_errors():
    a = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        b = a * 2.0
    assert not b.requires_grad
    with pytest.raises(UsageError):
        b.backward()
    with pytest.raises(UsageError):
        (a * 2.0).backward()


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 1000))
def test_grad_shapes_match_values(n, m, seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(n, m)), requires_grad=True)
    b = Tensor(rng.normal(size=(m,)), requires_grad=True)
    ((a * b).sum(axis=1) * 2.0).sum().backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    assert np.all(np.isfinite(a.grad))


# -- optimizers -----------------------------------------------------------------

def test_sgd_matches_reference():
    rng = np.random.default_rng(7)
    with precision(np.float64):
        p = Parameter(rng.normal(size=4))
    ref = p.values.copy()
    buf = None
    for _ in range(5):
        g = rng.normal(size=4)
        p.grad = g.copy()
        sgd_step(p, 0.1, 0.9, 0.01)
        d = g + 0.01 * ref
        buf = d if buf is None else 0.9 * buf + d
        ref = ref - 0.1 * buf
    np.testing.assert_allclose(p.values, ref)


def test_adam_matches_reference():
    rng = np.random.default_rng(8)
    with precision(np.float64):
        p = Parameter(rng.normal(size=3))
    ref = p.values.copy()
    m = v = np.zeros(3)
    for t in range(1, 6):
        g = rng.normal(size=3)
        p.grad = g.copy()
        adam_step(p, 0.01, (0.9, 0.999), 1e-8)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.values, ref)
    assert p.state["exp_avg"].shape == p.shape


def test_optimizers_skip_non_learnable_and_require_grads():
    p = Parameter(np.ones(2), learnable=False)
    p.grad = np.ones(2)
    SGD([p], lr=1.0).step()
    Adam([p], lr=1.0).step()
    assert np.all(p.values == 1)
    q = Parameter(np.ones(2))
    with pytest.raises(UsageError):
        sgd_step(q, 0.1)
    with pytest.raises(UsageError):
        SGD([q]).step(allow_missing=False)


def test_parameter_grow_pads_moments():
    p = Parameter(np.ones((2, 3)))
    p.grad = np.ones((2, 3))
    adam_step(p, 0.1)
    p.grow(0, np.zeros((1, 3)))
    assert p.shape == (3, 3) and p.state["exp_avg"].shape == (3, 3)
    assert np.all(p.state["exp_avg"][2] == 0)


def test_cosine_schedule():
    assert cosine_lr(0.1, 0, 100) == pytest.approx(0.1)
    assert cosine_lr(0.1, 50, 100) == pytest.approx(0.05)
    assert cosine_lr(0.1, 100, 100) == pytest.approx(0.0)


def test_numeric_grad_helper_self_check():
    arr = [np.array([1.0, 2.0])]
    g = numeric_grad(lambda a: float((a[0] ** 3).sum()), arr, 0)
    assert rel_error(g, 3 * arr[0] ** 2) < 1e-6
