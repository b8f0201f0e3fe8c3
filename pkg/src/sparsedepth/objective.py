"""Training losses and evaluation metrics for depth completion and segmentation.

Depth metrics follow the Kitti benchmark units: MAE/RMSE in millimetres,
iMAE/iRMSE in 1/km. All metrics are means over the evaluated pixel set.
Dataset-level numbers come from :class:`DepthAccumulator` and
:class:`SegAccumulator`, which sum per-pixel quantities so that the result
does not depend on the order or grouping of images.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .depth_grid import IGNORE, SegMap

DELTA_THRESHOLDS = (1.05, 1.10, 1.25, 1.50)


class EmptyEvalSet(ValueError):
    """No pixel is available to compute a loss or metric on."""


def _values(x):
    return x.values if hasattr(x, "values") else np.asarray(x)


def unobserved_mask(input_sd, gt) -> np.ndarray:
    """Pixels valid in the ground truth but missing from the sparse input."""
    sd, g = _values(input_sd), _values(gt)
    if sd.shape != g.shape:
        raise ValueError(f"input shape {sd.shape} differs from ground truth shape {g.shape}")
    return (g > 0) & ~(sd > 0)


def masked_loss(pred, target, mask, norm: str = "l1"):
    """Mean L1 or L2 error over ``mask``; returns ``(loss, grad_wrt_pred)``.

    The gradient is exactly zero outside the mask.
    """
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise EmptyEvalSet("loss mask selects no pixel")
    diff = np.where(mask, pred - target, 0)
    if norm == "l1":
        loss = np.abs(diff).sum() / n
        grad = np.sign(diff) / n
    elif norm == "l2":
        loss = (diff * diff).sum() / n
        grad = 2.0 * diff / n
    else:
        raise ValueError(f"norm must be 'l1' or 'l2', got {norm!r}")
    return float(loss), grad.astype(pred.dtype, copy=False)


# ---------------------------------------------------------------------------
# depth metrics


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    imae: float
    irmse: float
    delta: dict
    n_pixels: int

    CSV_HEADER = ("mae_mm", "rmse_mm", "imae_1km", "irmse_1km",
                  "delta_1.05", "delta_1.10", "delta_1.25", "delta_1.50", "n_pixels")

    def csv_row(self) -> list[str]:
        vals = [self.mae, self.rmse, self.imae, self.irmse] + [self.delta[e] for e in DELTA_THRESHOLDS]
        return [f"{v:.6f}" for v in vals] + [str(self.n_pixels)]


def _eval_mask(gt: np.ndarray, eval_on, input_sd) -> np.ndarray:
    if eval_on in ("all", "AllGtValid"):
        return gt > 0
    if eval_on in ("unobserved", "Unobserved"):
        if input_sd is None:
            raise ValueError("eval_on='unobserved' needs the sparse input")
        return unobserved_mask(input_sd, gt)
    raise ValueError(f"eval_on must be 'all' or 'unobserved', got {eval_on!r}")


def delta_metric(pred, gt, thresholds=DELTA_THRESHOLDS, mask=None) -> dict:
    """Fraction of pixels with ``max(pred/gt, gt/pred) < eps`` (strict)."""
    p, g = np.asarray(_values(pred), float), np.asarray(_values(gt), float)
    m = (g > 0) if mask is None else np.asarray(mask, bool)
    if not m.any():
        raise EmptyEvalSet("no ground-truth pixel to evaluate")
    if np.any(p[m] <= 0):
        raise ValueError("delta metric needs strictly positive predictions on evaluated pixels")
    ratio = np.maximum(p[m] / g[m], g[m] / p[m])
    return {eps: float(np.mean(ratio < eps)) for eps in thresholds}


@dataclass
class DepthAccumulator:
    """Order-insensitive sums over evaluated pixels; ``merge`` combines partial results."""

    n: int = 0
    abs_mm: float = 0.0
    sq_mm: float = 0.0
    abs_inv: float = 0.0
    sq_inv: float = 0.0
    delta_hits: dict = field(default_factory=lambda: {e: 0 for e in DELTA_THRESHOLDS})

    def add(self, pred, gt, eval_on="all", input_sd=None):
        p, g = np.asarray(_values(pred), float), np.asarray(_values(gt), float)
        if p.shape != g.shape:
            raise ValueError(f"prediction shape {p.shape} differs from ground truth {g.shape}")
        m = _eval_mask(g, eval_on, None if input_sd is None else _values(input_sd))
        if not m.any():
            return self
        if np.any(p[m] <= 0):
            raise ValueError("depth prediction must be positive on evaluated pixels (apply the d_max mapping)")
        err_mm = (p[m] - g[m]) * 1000.0
        err_inv = 1000.0 / p[m] - 1000.0 / g[m]
        ratio = np.maximum(p[m] / g[m], g[m] / p[m])
        self.n += int(m.sum())
        self.abs_mm += float(np.abs(err_mm).sum())
        self.sq_mm += float((err_mm**2).sum())
        self.abs_inv += float(np.abs(err_inv).sum())
        self.sq_inv += float((err_inv**2).sum())
        for e in self.delta_hits:
            self.delta_hits[e] += int((ratio < e).sum())
        return self

    def merge(self, other: "DepthAccumulator") -> "DepthAccumulator":
        out = DepthAccumulator(self.n + other.n, self.abs_mm + other.abs_mm, self.sq_mm + other.sq_mm,
                               self.abs_inv + other.abs_inv, self.sq_inv + other.sq_inv,
                               {e: self.delta_hits[e] + other.delta_hits[e] for e in self.delta_hits})
        return out

    def report(self) -> MetricsReport:
        if self.n == 0:
            raise EmptyEvalSet("no pixel was evaluated")
        return MetricsReport(
            mae=self.abs_mm / self.n,
            rmse=float(np.sqrt(self.sq_mm / self.n)),
            imae=self.abs_inv / self.n,
            irmse=float(np.sqrt(self.sq_inv / self.n)),
            delta={e: h / self.n for e, h in self.delta_hits.items()},
            n_pixels=self.n,
        )


def depth_metrics(pred, gt, eval_on: str = "all", input_sd=None) -> MetricsReport:
    """MAE/RMSE (mm), iMAE/iRMSE (1/km) and delta fractions for one dense prediction.

    ``eval_on`` is ``"all"`` (every valid ground-truth pixel, the benchmark
    protocol) or ``"unobserved"`` (valid in the ground truth, missing from
    ``input_sd``).
    """
    return DepthAccumulator().add(pred, gt, eval_on, input_sd).report()


# ---------------------------------------------------------------------------
# segmentation


def cross_entropy(probs, gt, eps: float = 1e-12):
    """Mean ``-log p[gt]`` over non-IGNORE pixels.

    ``probs`` is (N, C, H, W) or (C, H, W) softmax output; ``gt`` holds class
    ids of matching spatial shape. Returns ``(loss, grad)`` where ``grad`` is
    with respect to the logits that produced ``probs`` (``(p - onehot) / n``).
    """
    p = np.asarray(probs)
    labels = _values(gt)
    squeeze = p.ndim == 3
    if squeeze:
        p, labels = p[None], np.asarray(labels)[None]
    labels = np.asarray(labels)
    if labels.shape != (p.shape[0],) + p.shape[2:]:
        raise ValueError(f"labels {labels.shape} do not match probabilities {p.shape}")
    sums = p.sum(axis=1)
    if np.any(np.abs(sums - 1) > 1e-6):
        raise ValueError("class probabilities must sum to 1 per pixel")
    valid = labels != IGNORE
    n = int(valid.sum())
    if n == 0:
        raise EmptyEvalSet("every pixel is IGNORE")
    c = p.shape[1]
    if np.any(labels[valid] >= c) or np.any(labels[valid] < 0):
        raise ValueError(f"label outside [0, {c})")
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(p, safe[:, None], axis=1)[:, 0]
    loss = -np.log(np.maximum(picked[valid], eps)).sum() / n
    grad = p.copy()
    np.put_along_axis(grad, safe[:, None], picked[:, None] - 1, axis=1)
    grad *= valid[:, None] / n
    if squeeze:
        grad = grad[0]
    return float(loss), grad


@dataclass
class SegReport:
    per_class_iou: np.ndarray
    mean_iou: float

    def csv_header(self) -> list[str]:
        return ["mean_iou"] + [f"iou_{c}" for c in range(len(self.per_class_iou))]

    def csv_row(self) -> list[str]:
        return [f"{self.mean_iou:.6f}"] + ["nan" if np.isnan(v) else f"{v:.6f}" for v in self.per_class_iou]


class SegAccumulator:
    """Per-class intersection / union / ground-truth counts summed over images."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.inter = np.zeros(num_classes, dtype=np.int64)
        self.union = np.zeros(num_classes, dtype=np.int64)
        self.in_gt = np.zeros(num_classes, dtype=np.int64)

    def add(self, pred, gt):
        p, g = np.asarray(_values(pred)), np.asarray(_values(gt))
        if p.shape != g.shape:
            raise ValueError(f"prediction shape {p.shape} differs from ground truth {g.shape}")
        valid = g != IGNORE
        p, g = p[valid], g[valid]
        c = self.num_classes
        self.inter += np.bincount(g[p == g], minlength=c)[:c]
        pc, gc = np.bincount(p, minlength=c)[:c], np.bincount(g, minlength=c)[:c]
        self.union += pc + gc - np.bincount(g[p == g], minlength=c)[:c]
        self.in_gt += gc
        return self

    def merge(self, other: "SegAccumulator") -> "SegAccumulator":
        out = SegAccumulator(self.num_classes)
        out.inter = self.inter + other.inter
        out.union = self.union + other.union
        out.in_gt = self.in_gt + other.in_gt
        return out

    def report(self) -> SegReport:
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = np.where(self.union > 0, self.inter / np.maximum(self.union, 1), np.nan)
        present = self.in_gt > 0
        if not present.any():
            raise EmptyEvalSet("no labelled pixel in the ground truth")
        return SegReport(per_class_iou=iou, mean_iou=float(iou[present].mean()))


def mean_iou(pred, gt, num_classes: int | None = None) -> SegReport:
    """Per-class IoU and their mean over classes present in the ground truth."""
    if num_classes is None:
        num_classes = gt.num_classes if isinstance(gt, SegMap) else int(np.max(_values(gt)[_values(gt) != IGNORE])) + 1
    return SegAccumulator(num_classes).add(pred, gt).report()


__all__ = ["EmptyEvalSet", "unobserved_mask", "masked_loss", "MetricsReport", "DepthAccumulator",
           "depth_metrics", "delta_metric", "cross_entropy", "SegReport", "SegAccumulator", "mean_iou",
           "DELTA_THRESHOLDS"]
