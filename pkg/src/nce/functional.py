"""Layer primitives with hand-written backward passes."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from nce.errors import ConfigError, InputError, UsageError
from nce.tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [N,C,H,W] with ``weight`` [Cout,C,kh,kw].

    Lowered to one matrix product over an im2col matrix, which backward
    reuses for the weight gradient; the input gradient is scattered back one
    kernel tap at a time into a channels-last buffer.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ConfigError(f"conv2d channel mismatch: input has {c}, weight expects {cin}")
    if stride < 1 or padding < 0:
        raise ConfigError("conv2d needs stride >= 1 and padding >= 0")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d kernel {kh}x{kw} does not fit input {h}x{w}")

    xv = x.values
    if padding:
        xv = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xv, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # rows: (n, ho, wo); columns: (c, kh, kw) to match the weight layout
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.values.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    padded_shape = xv.shape

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            hp, wp = padded_shape[2], padded_shape[3]
            gxp_t = np.zeros((n, hp, wp, c), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp_t[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, :, i, j]
            gx = gxp_t[:, padding:padding + h, padding:padding + w, :].transpose(0, 3, 1, 2)
        return gx, gw

    return Tensor.from_op(out, (x, weight), backward, "conv2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool) -> Tensor:
    """Per-channel normalization of [N,C,H,W] (or [N,C]) input.

    ``running_mean``/``running_var`` are updated in place in training mode, so
    callers may pass views into larger buffers.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigError(f"batch_norm affine parameters must have length {c}")
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    bshape = (1, c, 1, 1) if x.ndim == 4 else (1, c)
    xv = x.values
    if training:
        mean = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        running_mean *= BN_MOMENTUM
        running_mean += (1 - BN_MOMENTUM) * mean
        running_var *= BN_MOMENTUM
        running_var += (1 - BN_MOMENTUM) * var
    else:
        mean = running_mean.astype(xv.dtype)
        var = running_var.astype(xv.dtype)
    inv = (1.0 / np.sqrt(var + BN_EPS)).astype(xv.dtype)
    xhat = (xv - mean.reshape(bshape)) * inv.reshape(bshape)
    gv = gamma.values.reshape(bshape)
    out = xhat * gv + beta.values.reshape(bshape)
    m = xv.size // c

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gv
        if training:
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return Tensor.from_op(out, (x, gamma, beta), backward, "batch_norm")


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return Tensor.from_op(x.values * mask, (x,), lambda g: (g * mask,), "relu")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.values.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return Tensor.from_op(out, (x,), backward, "global_avg_pool")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ConfigError(f"max_pool2d({size}) needs spatial dims divisible by {size}, got {h}x{w}")
    blocks = x.values.reshape(n, c, h // size, size, w // size, size)
    out = blocks.max(axis=(3, 5))
    # route the gradient to the first maximal element of each window
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // size, w // size, size * size)
    arg = flat.argmax(axis=-1)

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, c, h // size, w // size, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return Tensor.from_op(out, (x,), backward, "max_pool2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x [N,in] @ weight[out,in]^T + bias[out]."""
    if x.shape[1] != weight.shape[1]:
        raise ConfigError(f"linear expects {weight.shape[1]} input features, got {x.shape[1]}")
    xv, wv = x.values, weight.values
    out = xv @ wv.T
    inputs = (x, weight)
    if bias is not None:
        out = out + bias.values
        inputs = (x, weight, bias)

    def backward(g):
        grads = (g @ wv, g.T @ xv)
        return grads + (g.sum(axis=0),) if bias is not None else grads

    return Tensor.from_op(out, inputs, backward, "linear")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over the batch; gradient is (softmax - onehot) / N."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise InputError(f"labels must lie in [0, {k - 1}]")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return Tensor.from_op(np.asarray(loss, dtype=logits.values.dtype), (logits,), backward, "cross_entropy")


def interp_matrix(source: int, target: int, dtype=np.float32) -> np.ndarray:
    """[target, source] matrix of linear-interpolation weights along channels."""
    m = np.zeros((target, source), dtype=np.float64)
    if target == 1:
        m[0, 0] = 1.0
        return m.astype(dtype)
    pos = np.arange(target) * (source - 1) / (target - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, source - 1)
    frac = pos - lo
    rows = np.arange(target)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def channel_interp(x: Tensor, target: int) -> Tensor:
    """Align [N,c,H,W] to [N,target,H,W] by linear interpolation along channels."""
    c = x.shape[1]
    if c == target:
        return x
    if c > target:
        raise UsageError(f"channel interpolation only widens: {c} > {target}")
    m = interp_matrix(c, target, x.values.dtype)
    out = np.einsum("tc,nchw->nthw", m, x.values, optimize=True)

    def backward(g):
        return (np.einsum("tc,nthw->nchw", m, g, optimize=True),)

    return Tensor.from_op(out, (x,), backward, "cwi")
