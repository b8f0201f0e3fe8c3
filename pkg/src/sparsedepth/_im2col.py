"""Strided im2col / col2im kernels shared by the dense and sparse convolutions.

All convolutions use "same" zero padding of ``k // 2`` so that the output
size is ``ceil(size / stride)``.
"""

import numpy as np


def out_size(size, k, stride):
    pad = k // 2
    return (size + 2 * pad - k) // stride + 1


def im2col(x, k, stride):
    """Unfold ``x`` (N, C, H, W) into columns of shape (C*k*k, N*Ho*Wo)."""
    n, c, h, w = x.shape
    pad = k // 2
    ho, wo = out_size(h, k, stride), out_size(w, k, stride)
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * k * k, n * ho * wo), (ho, wo)


def col2im(cols, x_shape, k, stride):
    """Adjoint of :func:`im2col`: scatter-add columns back onto (N, C, H, W)."""
    n, c, h, w = x_shape
    pad = k // 2
    ho, wo = out_size(h, k, stride), out_size(w, k, stride)
    cols = cols.reshape(c, k, k, n, ho, wo)
    xp = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w].transpose(1, 0, 2, 3)


def conv_forward(x, weights, stride):
    """Cross-correlation without bias. Returns (out, cols) so callers can reuse cols."""
    n = x.shape[0]
    o, _, k, _ = weights.shape
    cols, (ho, wo) = im2col(x, k, stride)
    out = weights.reshape(o, -1) @ cols
    return out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3), cols


def conv_backward_input(grad_out, weights, x_shape, stride):
    o, _, k, _ = weights.shape
    g = grad_out.transpose(1, 0, 2, 3).reshape(o, -1)
    return col2im(weights.reshape(o, -1).T @ g, x_shape, k, stride)


def conv_backward_weights(grad_out, cols, w_shape):
    o = w_shape[0]
    g = grad_out.transpose(1, 0, 2, 3).reshape(o, -1)
    return (g @ cols.T).reshape(w_shape)


def box_count(mask, k, stride):
    """Number of ones of ``mask`` (N, 1, H, W) in every k x k window (padding counts as 0)."""
    ones = np.ones((1, 1, k, k), dtype=mask.dtype)
    out, _ = conv_forward(mask, ones, stride)
    return out
