"""Layer-level checks: analytic backward passes against central differences.

All checks run in float64 with h=1e-6. ReLU probes keep inputs away from
the kink and dropout uses a pinned mask so the finite-difference surface is
smooth.
"""
from __future__ import annotations

import numpy as np
import pytest

from gestfuse import nn
from gestfuse.types import PipelineError

H = 1e-6
TOL = 1e-4


def numeric_grad(f, x, h=H):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return np.abs(a - b).max(initial=0.0) / denom


def check_layer(layer, x, train=True):
    """Compare analytic input/param grads with central differences for the
    scalar loss sum(w * layer(x))."""
    rng = np.random.default_rng(99)
    y = layer.forward(x, train=train)
    w_out = rng.normal(size=y.shape)

    def loss():
        return float(np.sum(w_out * layer.forward(x, train=train)))

    for p in layer.params():
        p.grad[...] = 0.0
    layer.forward(x, train=train)
    dx = layer.backward(w_out)

    assert rel_err(dx, numeric_grad(loss, x)) < TOL, "input grad"
    for i, p in enumerate(layer.params()):
        num = numeric_grad(loss, p.value)
        assert rel_err(p.grad, num) < TOL, f"param {i} grad"


def test_linear_grads():
    rng = np.random.default_rng(0)
    layer = nn.Linear(7, 4, rng, dtype=np.float64)
    check_layer(layer, rng.normal(size=(5, 7)))


def test_relu_grads():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 8))
    x[np.abs(x) < 0.05] = 0.2  # keep probes away from the kink
    check_layer(nn.ReLU(), x)


def test_conv2d_grads():
    rng = np.random.default_rng(2)
    layer = nn.Conv2d(2, 3, rng, kernel=3, dtype=np.float64)
    check_layer(layer, rng.normal(size=(2, 2, 5, 4)))


def test_batchnorm_train_grads():
    rng = np.random.default_rng(3)
    layer = nn.BatchNorm2d(3, dtype=np.float64)
    check_layer(layer, rng.normal(size=(4, 3, 3, 2)), train=True)


def test_batchnorm_eval_grads():
    rng = np.random.default_rng(4)
    layer = nn.BatchNorm2d(2, dtype=np.float64)
    layer.running_mean = rng.normal(size=2)
    layer.running_var = rng.uniform(0.5, 2.0, size=2)
    check_layer(layer, rng.normal(size=(3, 2, 4, 3)), train=False)


def test_avgpool_grads_with_remainder():
    rng = np.random.default_rng(5)
    check_layer(nn.AvgPool2d(2), rng.normal(size=(2, 3, 5, 7)))


def test_global_avgpool_grads():
    rng = np.random.default_rng(6)
    check_layer(nn.GlobalAvgPool(), rng.normal(size=(3, 4, 2, 5)))


def test_dropout_fixed_mask_grads():
    rng = np.random.default_rng(7)
    layer = nn.Dropout(0.5, rng)
    x = rng.normal(size=(4, 6))
    layer.fixed_mask = rng.random(x.shape) >= 0.5
    check_layer(layer, x, train=True)


def test_dropout_eval_is_identity():
    rng = np.random.default_rng(8)
    layer = nn.Dropout(0.5, rng)
    x = rng.normal(size=(3, 5))
    np.testing.assert_array_equal(layer.forward(x, train=False), x)


def test_dropout_scaling_preserves_mean():
    rng = np.random.default_rng(9)
    layer = nn.Dropout(0.5, rng)
    x = np.ones((200, 200))
    y = layer.forward(x, train=True)
    assert abs(y.mean() - 1.0) < 0.02
    kept = y[y != 0]
    np.testing.assert_allclose(kept, 2.0)


def test_sequential_mlp_end_to_end_grads():
    rng = np.random.default_rng(10)
    drop = nn.Dropout(0.5, rng)
    model = nn.Sequential([
        drop,
        nn.Linear(10, 8, rng, dtype=np.float64),
        nn.ReLU(),
        nn.Linear(8, 3, rng, dtype=np.float64),
    ])
    x = rng.normal(size=(6, 10)) + 0.3
    drop.fixed_mask = rng.random(x.shape) >= 0.5
    labels = rng.integers(0, 3, size=6)

    def loss():
        logits = model.forward(x, train=True)
        return nn.softmax_cross_entropy(logits, labels)[0]

    for p in model.params():
        p.grad[...] = 0.0
    logits = model.forward(x, train=True)
    _, dlogits = nn.softmax_cross_entropy(logits, labels)
    dx = model.backward(dlogits)

    assert rel_err(dx, numeric_grad(loss, x)) < TOL
    for p in model.params():
        assert rel_err(p.grad, numeric_grad(loss, p.value)) < TOL


def test_conv_stack_end_to_end_grads():
    rng = np.random.default_rng(11)
    model = nn.Sequential([
        nn.Conv2d(1, 2, rng, dtype=np.float64),
        nn.BatchNorm2d(2, dtype=np.float64),
        nn.ReLU(),
        nn.AvgPool2d(2),
        nn.GlobalAvgPool(),
        nn.Linear(2, 3, rng, dtype=np.float64),
    ])
    x = rng.normal(size=(3, 1, 6, 6)) + 0.5
    labels = np.array([0, 2, 1])

    def loss():
        return nn.softmax_cross_entropy(model.forward(x, train=True), labels)[0]

    for p in model.params():
        p.grad[...] = 0.0
    _, dlogits = nn.softmax_cross_entropy(model.forward(x, train=True), labels)
    model.backward(dlogits)
    for p in model.params():
        assert rel_err(p.grad, numeric_grad(loss, p.value)) < TOL


def test_softmax_cross_entropy_values():
    logits = np.array([[2.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    labels = np.array([0, 1])
    loss, grad = nn.softmax_cross_entropy(logits, labels)
    # manual: -log softmax[0,0] and -log(1/3)
    l0 = -(2.0 - np.log(np.exp(2.0) + np.exp(1.0) + np.exp(0.0)))
    l1 = np.log(3.0)
    assert loss == pytest.approx((l0 + l1) / 2)
    assert grad.shape == logits.shape
    # gradient rows sum to zero
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)


def test_softmax_cross_entropy_empty_batch():
    with pytest.raises(PipelineError, match="empty-batch"):
        nn.softmax_cross_entropy(np.zeros((0, 3)), np.zeros(0, dtype=int))


def test_mse_loss_grad():
    rng = np.random.default_rng(12)
    pred = rng.normal(size=(4, 5))
    target = rng.normal(size=(4, 5))
    loss, grad = nn.mse_loss(pred, target)
    assert loss == pytest.approx(np.mean((pred - target) ** 2))
    num = numeric_grad(lambda: nn.mse_loss(pred, target)[0], pred)
    assert rel_err(grad, num) < TOL


def test_sgd_momentum_closed_form():
    p = nn.Param(np.array([1.0, 2.0]))
    opt = nn.SGD([p], momentum=0.9)
    p.grad[...] = np.array([0.5, -1.0])
    opt.step(0.1)
    np.testing.assert_allclose(p.value, [1.0 - 0.05, 2.0 + 0.1])
    # second step: v = 0.9*v - lr*g
    p.grad[...] = np.array([0.5, -1.0])
    opt.step(0.1)
    v2 = 0.9 * np.array([-0.05, 0.1]) + np.array([-0.05, 0.1])
    np.testing.assert_allclose(p.value, np.array([0.95, 2.1]) + v2)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_sgd_update_kernel_matches_numpy_reference(dtype):
    from gestfuse import _kernels

    rng = np.random.default_rng(7)
    w = rng.normal(size=(37, 11)).astype(dtype)
    v = rng.normal(size=(37, 11)).astype(dtype)
    g = rng.normal(size=(37, 11)).astype(dtype)
    # reference: the exact op sequence of the pure-numpy backend
    vr = v.copy()
    vr *= dtype(0.9)
    vr -= dtype(0.03) * g
    wr = w + vr
    _kernels.sgd_momentum_update(w, v, g, 0.03, 0.9)
    assert np.array_equal(w, wr)
    assert np.array_equal(v, vr)


def test_backward_overwrites_instead_of_accumulating():
    rng = np.random.default_rng(21)
    layer = nn.Linear(4, 3, rng, dtype=np.float64)
    x = rng.normal(size=(5, 4))
    up = rng.normal(size=(5, 3))
    layer.forward(x)
    layer.backward(up)
    first = layer.w.grad.copy()
    layer.forward(x)
    layer.backward(up)
    assert np.array_equal(layer.w.grad, first)


def test_sequential_skips_input_grad_below_first_param_layer():
    rng = np.random.default_rng(22)
    seq = nn.Sequential([
        nn.Dropout(0.0, rng),
        nn.Linear(4, 3, rng, dtype=np.float64),
        nn.ReLU(),
        nn.Linear(3, 2, rng, dtype=np.float64),
    ])
    x = rng.normal(size=(6, 4)) + 1.0
    up = rng.normal(size=(6, 2))
    seq.forward(x, train=True)
    out = seq.backward(up.copy(), need_input_grad=False)
    assert out is None
    fast = [p.grad.copy() for p in seq.params()]
    seq.forward(x, train=True)
    seq.backward(up.copy())
    for a, p in zip(fast, seq.params()):
        assert np.array_equal(a, p.grad)


def test_sgd_update_kernel_noncontiguous_falls_back():
    from gestfuse import _kernels

    rng = np.random.default_rng(8)
    big = rng.normal(size=(10, 8)).astype(np.float32)
    w = big[:, ::2]
    v = np.zeros_like(big)[:, ::2]
    g = np.ones_like(big)[:, ::2]
    before = w.copy()
    _kernels.sgd_momentum_update(w, v, g, 0.5, 0.9)
    assert np.allclose(w, before - 0.5)


def test_avgpool_drops_remainder():
    x = np.arange(2 * 1 * 5 * 5, dtype=float).reshape(2, 1, 5, 5)
    y = nn.AvgPool2d(2).forward(x)
    assert y.shape == (2, 1, 2, 2)
    assert y[0, 0, 0, 0] == pytest.approx(np.mean([0, 1, 5, 6]))
