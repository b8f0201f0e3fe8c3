"""Prediction and dataset-level evaluation for trained nets and the fill baseline."""

from __future__ import annotations

import numpy as np

from ..depth_grid import DEFAULT_D_MAX, DepthMap, RgbImage, inverse_to_depth
from ..net.graph import NetworkGraph
from ..objective import DepthAccumulator, SegAccumulator
from .data import ScenePool, network_inputs, sparsify

EVAL_BATCH = 32


class DenseOutputError(RuntimeError):
    """A completion produced holes, NaNs or negative depths."""


def _check_dense(depth: np.ndarray):
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
        raise DenseOutputError("completed depth must be finite and positive at every pixel")


def predict_inverse(net: NetworkGraph, sd: np.ndarray, rgb: np.ndarray) -> np.ndarray:
    """Raw head output in 1/km, shape (N, H, W)."""
    if net.head_kind != "regression_head":
        raise ValueError("depth prediction needs a regression head")
    out = []
    for i in range(0, sd.shape[0], EVAL_BATCH):
        y = net.forward(network_inputs(net.slots, sd[i:i + EVAL_BATCH], rgb[i:i + EVAL_BATCH]), train=False)
        out.append(y[:, 0])
    return np.concatenate(out).astype(np.float64)


def predict_depth(model, sd: np.ndarray, rgb: np.ndarray, d_max: float = DEFAULT_D_MAX) -> np.ndarray:
    """Dense metric depth (N, H, W) from a net or a callable baseline.

    Net outputs go through the inverse-depth mapping (0 -> ``d_max``) and are
    capped at ``d_max``.
    """
    if isinstance(model, NetworkGraph):
        # near-zero activations would otherwise map to depths far beyond the sensor range
        depth = np.minimum(inverse_to_depth(predict_inverse(model, sd, rgb), d_max), d_max)
    else:
        depth = np.asarray(model(sd, rgb), dtype=np.float64)
    _check_dense(depth)
    return depth


def predict_labels(net: NetworkGraph, sd: np.ndarray, rgb: np.ndarray) -> np.ndarray:
    if net.head_kind != "softmax_head":
        raise ValueError("label prediction needs a softmax head")
    out = []
    for i in range(0, sd.shape[0], EVAL_BATCH):
        probs = net.forward(network_inputs(net.slots, sd[i:i + EVAL_BATCH], rgb[i:i + EVAL_BATCH]), train=False)
        out.append(np.argmax(probs, axis=1))
    return np.concatenate(out)


def complete(net: NetworkGraph, sd: DepthMap, rgb: RgbImage | None = None,
             d_max: float = DEFAULT_D_MAX) -> DepthMap:
    """Complete one sparse depth map (optionally RGB-guided) into a dense one."""
    if "rgb" in net.slots and rgb is None:
        raise ValueError("this network needs an RGB image")
    h, w = sd.shape
    rgb_arr = rgb.chw()[None] if rgb is not None else np.zeros((1, 3, h, w))
    return DepthMap(predict_depth(net, sd.values[None], rgb_arr, d_max)[0])


def sparse_inputs(pool: ScenePool, patterns) -> np.ndarray:
    return np.stack([sparsify(pool.depth[i], p) for i, p in enumerate(patterns)])


def evaluate_depth(model, pool: ScenePool, patterns, d_max: float = DEFAULT_D_MAX, eval_on: str = "all"):
    """MetricsReport of ``model`` on ``pool`` with scene ``i`` sparsified by ``patterns[i]``."""
    sd = sparse_inputs(pool, patterns)
    pred = predict_depth(model, sd, pool.rgb, d_max)
    acc = DepthAccumulator()
    for i in range(len(pool)):
        acc.add(pred[i], pool.depth[i], eval_on, sd[i])
    return acc.report()


def evaluate_segmentation(net: NetworkGraph, pool: ScenePool, patterns):
    if pool.labels is None:
        raise ValueError("scene pool has no labels")
    sd = sparse_inputs(pool, patterns)
    pred = predict_labels(net, sd, pool.rgb)
    acc = SegAccumulator(pool.num_classes)
    for i in range(len(pool)):
        acc.add(pred[i], pool.labels[i])
    return acc.report()
