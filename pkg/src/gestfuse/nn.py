"""Minimal neural-network layers in numpy with explicit backward passes.

Forward caches whatever backward needs; every layer keeps its parameters in
Param holders so one optimizer can walk a whole model. float32 is the
training dtype; pass dtype=np.float64 when building models for
finite-difference gradient verification.

backward() overwrites parameter gradients rather than accumulating, so no
zeroing pass is needed between steps. Linear and Conv2d accept
need_dx=False to skip the input gradient, and Sequential.backward
propagates need_input_grad=False down to its deepest parametric layer;
models whose first trainable layer sits at the bottom of the stack use
this to drop one GEMM per step.
"""
from __future__ import annotations

import numpy as np

from . import _kernels
from .types import PipelineError


class Param:
    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)


class Layer:
    def params(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Linear(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 dtype=np.float32):
        scale = np.sqrt(2.0 / n_in)
        self.w = Param((rng.normal(0.0, scale, (n_in, n_out))).astype(dtype))
        self.b = Param(np.zeros(n_out, dtype=dtype))
        self._x = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train=False):
        self._x = x
        return x @ self.w.value + self.b.value

    def backward(self, grad, need_dx=True):
        np.matmul(self._x.T, grad, out=self.w.grad)
        np.sum(grad, axis=0, out=self.b.grad)
        if not need_dx:
            return None
        return grad @ self.w.value.T


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad):
        return grad * self._mask


class Dropout(Layer):
    """Inverted dropout. A fixed_mask attribute (same shape as the input)
    overrides sampling, which finite-difference tests rely on."""

    def __init__(self, p: float, rng: np.random.Generator):
        if not 0.0 <= p < 1.0:
            raise PipelineError(f"bad-dropout: p={p}")
        self.p = p
        self.rng = rng
        self.fixed_mask: np.ndarray | None = None
        self._scaled = None

    def forward(self, x, train=False):
        if not train or self.p == 0.0:
            self._scaled = None
            return x
        if self.fixed_mask is not None:
            mask = self.fixed_mask
        else:
            mask = self.rng.random(x.shape) >= self.p
        self._scaled = mask.astype(x.dtype) / (1.0 - self.p)
        return x * self._scaled

    def backward(self, grad):
        if self._scaled is None:
            return grad
        return grad * self._scaled


class Conv2d(Layer):
    """3x3 same-padding convolution over (N, C, H, W), stride 1.

    Runs as k*k tap-wise matmuls instead of im2col: same arithmetic, no
    k*k-times-blown-up column buffer.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 kernel: int = 3, dtype=np.float32):
        if kernel % 2 != 1:
            raise PipelineError(f"bad-kernel: {kernel} must be odd")
        self.kernel = kernel
        self.pad = kernel // 2
        scale = np.sqrt(2.0 / (c_in * kernel * kernel))
        self.w = Param(rng.normal(0.0, scale, (c_out, c_in, kernel, kernel)).astype(dtype))
        self.b = Param(np.zeros(c_out, dtype=dtype))
        self._xpad = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train=False):
        n, c, h, w = x.shape
        p = self.pad
        xpad = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        self._xpad = xpad
        self._shape = (n, c, h, w)
        c_out = self.w.value.shape[0]
        y = np.empty((n, c_out, h, w), dtype=x.dtype)
        y[:] = self.b.value[None, :, None, None]
        k = self.kernel
        for di in range(k):
            for dj in range(k):
                patch = xpad[:, :, di:di + h, dj:dj + w]
                # (n, h, w, c) @ (c, c_out) accumulated per tap
                y += np.einsum(
                    "nchw,oc->nohw", patch, self.w.value[:, :, di, dj],
                    optimize=True,
                )
        return y

    def backward(self, grad, need_dx=True):
        n, c, h, w = self._shape
        k = self.kernel
        xpad = self._xpad
        for di in range(k):
            for dj in range(k):
                patch = xpad[:, :, di:di + h, dj:dj + w]
                self.w.grad[:, :, di, dj] = np.tensordot(
                    grad, patch, axes=([0, 2, 3], [0, 2, 3])
                )
        np.sum(grad, axis=(0, 2, 3), out=self.b.grad)
        if not need_dx:
            return None
        dxpad = np.zeros_like(xpad)
        for di in range(k):
            for dj in range(k):
                dxpad[:, :, di:di + h, dj:dj + w] += np.einsum(
                    "nohw,oc->nchw", grad, self.w.value[:, :, di, dj],
                    optimize=True,
                )
        p = self.pad
        return dxpad[:, :, p:p + h, p:p + w]


class AvgPool2d(Layer):
    """Non-overlapping average pooling; trailing rows/cols that do not fill
    a block are dropped (and receive zero gradient)."""

    def __init__(self, kh: int, kw: int | None = None):
        self.kh = kh
        self.kw = kh if kw is None else kw

    def forward(self, x, train=False):
        n, c, h, w = x.shape
        ho, wo = h // self.kh, w // self.kw
        if ho < 1 or wo < 1:
            raise PipelineError(f"map-too-small: {h}x{w} for pool {self.kh}x{self.kw}")
        self._shape = x.shape
        xc = x[:, :, : ho * self.kh, : wo * self.kw]
        return xc.reshape(n, c, ho, self.kh, wo, self.kw).mean(axis=(3, 5))

    def backward(self, grad):
        n, c, h, w = self._shape
        ho, wo = grad.shape[2], grad.shape[3]
        dx = np.zeros(self._shape, dtype=grad.dtype)
        scaled = grad / (self.kh * self.kw)
        expanded = np.broadcast_to(
            scaled[:, :, :, None, :, None], (n, c, ho, self.kh, wo, self.kw)
        ).reshape(n, c, ho * self.kh, wo * self.kw)
        dx[:, :, : ho * self.kh, : wo * self.kw] = expanded
        return dx


class BatchNorm2d(Layer):
    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        self.gamma = Param(np.ones(c, dtype=dtype))
        self.beta = Param(np.zeros(c, dtype=dtype))
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x, train=False):
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            self.running_mean = ((1 - self.momentum) * self.running_mean
                                 + self.momentum * mean).astype(x.dtype)
            self.running_var = ((1 - self.momentum) * self.running_var
                                + self.momentum * var).astype(x.dtype)
        else:
            mean = self.running_mean
            var = self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        self._train = train
        self._xhat = xhat
        self._inv = inv
        return self.gamma.value[None, :, None, None] * xhat + self.beta.value[None, :, None, None]

    def backward(self, grad):
        xhat, inv = self._xhat, self._inv
        self.gamma.grad = (grad * xhat).sum(axis=(0, 2, 3))
        self.beta.grad = grad.sum(axis=(0, 2, 3))
        dxhat = grad * self.gamma.value[None, :, None, None]
        if not self._train:
            return dxhat * inv[None, :, None, None]
        n, _, h, w = grad.shape
        m = n * h * w
        s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        return (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)


class GlobalAvgPool(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self._shape
        return np.broadcast_to(
            grad[:, :, None, None] / (h * w), self._shape
        ).astype(grad.dtype).copy()


class Sequential(Layer):
    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, grad, need_input_grad=True):
        stop = -1
        if not need_input_grad:
            for i, layer in enumerate(self.layers):
                if layer.params():
                    if isinstance(layer, (Linear, Conv2d)):
                        stop = i
                    break
        for i in range(len(self.layers) - 1, -1, -1):
            if i == stop:
                self.layers[i].backward(grad, need_dx=False)
                return None
            grad = self.layers[i].backward(grad)
        return grad


# ---------------------------------------------------------------------------
# losses / optimizer
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    if n == 0:
        raise PipelineError("empty-batch")
    p = softmax(logits)
    eps = np.finfo(logits.dtype).tiny
    loss = float(-np.log(np.maximum(p[np.arange(n), labels], eps)).mean())
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def mse_loss(pred: np.ndarray, target: np.ndarray):
    diff = pred - target
    loss = float(np.mean(diff ** 2))
    return loss, (2.0 / diff.size) * diff


class SGD:
    """Momentum SGD; learning rate is supplied per step (schedules live
    outside the optimizer)."""

    def __init__(self, params: list[Param], momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.value) for p in params]

    def zero_grad(self):
        for p in self.params:
            p.grad[...] = 0.0

    def step(self, lr: float):
        for p, v in zip(self.params, self.velocity):
            _kernels.sgd_momentum_update(p.value, v, p.grad, lr, self.momentum)
