"""Differentiable primitives on (N, C, H, W) arrays.

Each op comes as a ``*_forward`` returning ``(output, cache)`` and a
``*_backward`` taking the cache and the upstream gradient. Convolutions use
"same" zero padding (``k // 2``).
"""

from __future__ import annotations

import numpy as np

from .._im2col import conv_backward_input, conv_backward_weights, conv_forward, im2col, out_size

BN_EPS = 1e-5


def _check_conv(x, weights, bias, in_axis):
    if x.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) input, got shape {x.shape}")
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
        raise ValueError(f"weights must be 4-D with square kernels, got {weights.shape}")
    if x.shape[1] != weights.shape[in_axis]:
        raise ValueError(f"input has {x.shape[1]} channels, weights expect {weights.shape[in_axis]}")
    out_ch = weights.shape[1 - in_axis]
    if bias is not None and np.shape(bias) != (out_ch,):
        raise ValueError(f"bias must have shape ({out_ch},), got {np.shape(bias)}")


# --- dense convolution -----------------------------------------------------

def dense_conv2d_forward(x, weights, bias, stride=1):
    _check_conv(x, weights, bias, in_axis=1)
    y, cols = conv_forward(x, weights, stride)
    if bias is not None:
        y = y + bias[None, :, None, None]
    return y, (x.shape, cols)


def dense_conv2d(x, weights, bias=None, stride=1):
    return dense_conv2d_forward(x, weights, bias, stride)[0]


def dense_conv2d_backward(grad_out, weights, cache, stride=1):
    x_shape, cols = cache
    gx = conv_backward_input(grad_out, weights, x_shape, stride)
    gw = conv_backward_weights(grad_out, cols, weights.shape)
    gb = grad_out.sum(axis=(0, 2, 3))
    return gx, gw, gb


# --- transposed convolution -----------------------------------------------
# weights are (C_in, C_out, k, k): the dense conv with the same array maps
# C_out channels at resolution H*s back to C_in channels at H.

def transposed_conv2d_forward(x, weights, bias, stride=2):
    _check_conv(x, weights, bias, in_axis=0)
    n, _, h, w = x.shape
    k = weights.shape[2]
    out_shape = (n, weights.shape[1], h * stride, w * stride)
    if out_size(h * stride, k, stride) != h:
        raise ValueError(f"kernel {k} / stride {stride} cannot invert to size {h}")
    y = conv_backward_input(x, weights, out_shape, stride)
    if bias is not None:
        y = y + bias[None, :, None, None]
    return y, (x, stride)


def transposed_conv2d(x, weights, bias=None, stride=2):
    return transposed_conv2d_forward(x, weights, bias, stride)[0]


def transposed_conv2d_backward(grad_out, weights, cache):
    x, stride = cache
    gx, cols = conv_forward(grad_out, weights, stride)
    gw = conv_backward_weights(x, cols, weights.shape)
    gb = grad_out.sum(axis=(0, 2, 3))
    return gx, gw, gb


# --- pooling / activations ------------------------------------------------

def maxpool_forward(x, k=2, stride=2):
    n, c, h, w = x.shape
    pad = k // 2 if k % 2 else 0
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.full((n, c, h + 2 * pad, w + 2 * pad), -np.inf, dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    windows = np.stack([
        xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
        for i in range(k) for j in range(k)
    ])
    arg = windows.argmax(axis=0)
    y = np.take_along_axis(windows, arg[None], axis=0)[0]
    return y, (x.shape, arg, k, stride, pad, ho, wo)


def maxpool_backward(grad_out, cache):
    x_shape, arg, k, stride, pad, ho, wo = cache
    n, c, h, w = x_shape
    gp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=grad_out.dtype)
    for idx in range(k * k):
        i, j = divmod(idx, k)
        gp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(arg == idx, grad_out, 0)
    return gp[:, :, pad:pad + h, pad:pad + w]


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(grad_out, cache):
    return grad_out * cache


def softmax(logits, axis=1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# --- batch normalization ----------------------------------------------------

def batchnorm_forward(x, gamma, beta, running_mean, running_var, train=True, momentum=0.1, eps=BN_EPS):
    """Per-channel normalization. In train mode the running stats are updated in place."""
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValueError(f"batchnorm parameters must have length {x.shape[1]}")
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = x.size // x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv_std, gamma, train)


def batchnorm_backward(grad_out, cache):
    xhat, inv_std, gamma, train = cache
    gbeta = grad_out.sum(axis=(0, 2, 3))
    ggamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    gxhat = grad_out * gamma[None, :, None, None]
    if not train:
        return gxhat * inv_std[None, :, None, None], ggamma, gbeta
    m = xhat.size // xhat.shape[1]
    gx = (inv_std[None, :, None, None] / m) * (
        m * gxhat
        - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    )
    return gx, ggamma, gbeta


__all__ = [
    "dense_conv2d", "dense_conv2d_forward", "dense_conv2d_backward",
    "transposed_conv2d", "transposed_conv2d_forward", "transposed_conv2d_backward",
    "maxpool_forward", "maxpool_backward", "relu_forward", "relu_backward", "softmax",
    "batchnorm_forward", "batchnorm_backward", "im2col", "BN_EPS",
]
