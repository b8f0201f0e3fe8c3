"""Sparsity-invariant convolution and validity-mask analysis.

A :class:`MaskedTensor` pairs batched features ``(N, C, H, W)`` with a
binary mask ``(N, H, W)``. The convolution sums only valid inputs, divides by
the number of valid pixels under the window, and propagates the mask by max
pooling with the same kernel size and stride. Padding is treated as missing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._im2col import box_count, conv_backward_input, conv_backward_weights, conv_forward, out_size


@dataclass(frozen=True, eq=False)
class MaskedTensor:
    features: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        f, m = np.asarray(self.features), np.asarray(self.mask)
        if f.ndim == 3:
            f = f[None]
        if m.ndim == 2:
            m = m[None]
        if f.ndim != 4 or m.shape != (f.shape[0],) + f.shape[2:]:
            raise ValueError(f"features {f.shape} and mask {m.shape} do not agree")
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask must be binary")
        m = m.astype(f.dtype)
        object.__setattr__(self, "features", f * m[:, None])
        object.__setattr__(self, "mask", m)

    @classmethod
    def from_values(cls, values: np.ndarray) -> "MaskedTensor":
        """Mask derived as ``values > 0`` over the (single) channel axis."""
        values = np.asarray(values)
        if values.ndim == 3:
            values = values[None]
        return cls(values, np.any(values > 0, axis=1))

    @property
    def shape(self):
        return self.features.shape


@dataclass(frozen=True, eq=False)
class SparseConvKernel:
    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ValueError(f"weights must be (out, in, k, k), got {w.shape}")
        if w.shape[2] % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {w.shape[2]}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if np.shape(self.bias) != (w.shape[0],):
            raise ValueError(f"bias must have shape ({w.shape[0]},), got {np.shape(self.bias)}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")

    @property
    def k(self) -> int:
        return self.weights.shape[2]


class SparseConvCache(NamedTuple):
    cols: np.ndarray
    count: np.ndarray
    x_shape: tuple


def _check(x: MaskedTensor, kern: SparseConvKernel):
    if x.features.shape[1] != kern.weights.shape[1]:
        raise ValueError(
            f"channel mismatch: input has {x.features.shape[1]}, kernel expects {kern.weights.shape[1]}")


def sparse_conv2d_forward(x: MaskedTensor, kern: SparseConvKernel):
    """Forward pass returning the output and the cache needed by backward."""
    _check(x, kern)
    k, s = kern.k, kern.stride
    num, cols = conv_forward(x.features, kern.weights, s)
    count = box_count(x.mask[:, None], k, s)  # (N, 1, Ho, Wo)
    valid = count > 0
    safe = np.where(valid, count, 1)
    out = np.where(valid, num / safe + kern.bias[None, :, None, None], 0)
    y = MaskedTensor(out, valid[:, 0])
    return y, SparseConvCache(cols, count, x.features.shape)


def sparse_conv2d(x: MaskedTensor, kern: SparseConvKernel) -> MaskedTensor:
    return sparse_conv2d_forward(x, kern)[0]


def sparse_conv2d_backward(x: MaskedTensor, kern: SparseConvKernel, upstream_grad, cache=None):
    """Gradients of the forward expression with the mask held constant.

    Returns ``(grad_features, grad_weights, grad_bias)``; ``grad_features`` is
    zero wherever the input mask is zero.
    """
    if cache is None:
        _, cache = sparse_conv2d_forward(x, kern)
    g = np.asarray(upstream_grad)
    ho, wo = cache.count.shape[2:]
    if g.shape != (x.features.shape[0], kern.weights.shape[0], ho, wo):
        raise ValueError(f"upstream gradient shape {g.shape} does not match output")
    valid = cache.count > 0
    g_num = np.where(valid, g / np.where(valid, cache.count, 1), 0)
    grad_b = np.where(valid, g, 0).sum(axis=(0, 2, 3))
    grad_w = conv_backward_weights(g_num, cache.cols, kern.weights.shape)
    grad_x = conv_backward_input(g_num, kern.weights, cache.x_shape, kern.stride)
    grad_x *= x.mask[:, None]
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# mask propagation and saturation


def propagate_mask(mask, k: int, s: int = 1, mode: str = "max") -> np.ndarray:
    """Pool a (N, H, W) or (H, W) mask with the kernel geometry of the paired conv.

    ``max`` returns a binary mask of window maxima; ``average`` returns the
    fraction of valid pixels in each k x k window (padding counts as invalid).
    """
    m = np.asarray(mask, dtype=np.float64)
    squeeze = m.ndim == 2
    if squeeze:
        m = m[None]
    count = box_count(m[:, None], k, s)[:, 0]
    if mode == "max":
        out = (count > 0).astype(np.float64)
    elif mode == "average":
        out = count / (k * k)
    else:
        raise ValueError(f"mode must be 'max' or 'average', got {mode!r}")
    return out[0] if squeeze else out


def saturation(mask, binary: bool = True) -> float:
    """Fraction of mask entries that are valid."""
    m = np.asarray(mask, dtype=np.float64)
    if binary and not np.all((m == 0) | (m == 1)):
        raise ValueError("saturation of a max-propagated mask expects a binary mask")
    return float(m.mean())


class LayerSaturation(NamedTuple):
    density: float
    layer: int
    mean: float
    std: float


def saturation_profile(density: float, layer_specs, trials: int = 100, size=(64, 64),
                       seed: int = 0, interior: bool = True) -> list[LayerSaturation]:
    """Monte-Carlo mean mask saturation after each successive max propagation.

    ``layer_specs`` is a sequence of ``(k, s)``. With ``interior`` the
    statistic excludes the border band whose windows reach into padding, so
    that it matches the analytic value ``1 - (1 - p)^(k^2)`` for one layer.
    """
    if not 0 < density <= 1:
        raise ValueError(f"density must be in ]0, 1], got {density}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    masks = (rng.random((trials,) + tuple(size)) < density).astype(np.float64)
    per_layer = []
    margin = 0
    for k, s in layer_specs:
        masks = propagate_mask(masks, k, s, "max")
        margin = -(-(margin + k // 2) // s)
        h, w = masks.shape[1:]
        if interior and h > 2 * margin and w > 2 * margin:
            region = masks[:, margin:h - margin, margin:w - margin]
        else:
            region = masks
        per_trial = region.reshape(trials, -1).mean(axis=1)
        per_layer.append(per_trial)
    return [LayerSaturation(float(density), i + 1, float(v.mean()), float(v.std()))
            for i, v in enumerate(per_layer)]


def analytic_saturation(density: float, k: int) -> float:
    """Probability that a k x k window of Bernoulli(density) pixels holds a valid one."""
    return 1.0 - (1.0 - density) ** (k * k)


def conv_output_shape(h: int, w: int, k: int, s: int) -> tuple[int, int]:
    return out_size(h, k, s), out_size(w, k, s)
