"""Training loops for depth completion and segmentation."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..net.graph import NetworkGraph
from ..net.templates import Head, build_network, tiny_ed
from ..objective import EmptyEvalSet, cross_entropy, masked_loss, unobserved_mask
from .config import TrainConfig
from .data import (TAG_CUTOUT, TAG_DENSITY, TAG_ORDER, TAG_PATTERN, TAG_VAL, ScenePool, cutout_input,
                   derive_seed, held_out_pool, inverse_km, network_inputs, read_scene_dir, scene_pool, sparsify,
                   training_pattern)
from .evaluate import evaluate_depth, evaluate_segmentation
from .optim import AdamState, adam_step

_DTYPES = {"float32": np.float32, "float64": np.float64}


class TrainingDiverged(FloatingPointError):
    """Loss became non-finite; ``checkpoint`` holds the parameters before the failing step."""

    def __init__(self, step: int, checkpoint: NetworkGraph):
        super().__init__(f"loss is not finite at step {step}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    net: NetworkGraph
    config: TrainConfig
    losses: list = field(default_factory=list)
    skipped: int = 0
    densities: list = field(default_factory=list)
    best_net: NetworkGraph | None = None
    best_metric: float = float("nan")
    val_curve: list = field(default_factory=list)  # (step, metric)
    wall_clock: float = 0.0

    def meta(self) -> dict:
        return {"task": self.config.task, "steps": len(self.losses), "skipped": self.skipped,
                "final_loss": f"{self.losses[-1]:.6g}" if self.losses else "nan",
                "d_max": self.config.d_max, "config": self.config.to_text().strip().replace("\n", ";")}


def build_model(cfg: TrainConfig, dtype=np.float32) -> NetworkGraph:
    template = tiny_ed(cfg.slots, cfg.fusion, cfg.channels, cfg.first_layer, cfg.batchnorm)
    head = Head() if cfg.task == "depth" else Head("softmax", cfg.num_classes)
    return build_network(template, head, seed=cfg.seed, dtype=dtype)


def training_pool(cfg: TrainConfig) -> ScenePool:
    if cfg.data:
        return read_scene_dir(cfg.data)
    return scene_pool(cfg.train_scenes, cfg.scene_pool_seed, cfg.height, cfg.width, cfg.num_classes, cfg.d_max)


def sample_sparse(cfg: TrainConfig, depth: np.ndarray, sample: int, seed: int | None = None):
    """Sparse input for global sample index ``sample``; returns ``(sd, density)``."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, TAG_DENSITY, sample)))
    d = cfg.density.sample(rng)
    sd = sparsify(depth, training_pattern(cfg.pattern, d, derive_seed(seed, TAG_PATTERN, sample)))
    if cfg.cutout:
        sd = cutout_input(sd, derive_seed(seed, TAG_CUTOUT, sample))
    return sd, d


def _validation_patterns(cfg: TrainConfig, n: int):
    """One fixed pattern per validation scene, drawn from the training schedule."""
    pats = []
    for i in range(n):
        rng = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, TAG_VAL, TAG_DENSITY, i)))
        pats.append(training_pattern(cfg.pattern, cfg.density.sample(rng), derive_seed(cfg.seed, TAG_VAL, i)))
    return pats


def validate(net: NetworkGraph, cfg: TrainConfig, pool: ScenePool, patterns) -> float:
    """Lower is better: iMAE for depth, 1 - mean IoU for segmentation."""
    if cfg.task == "depth":
        return evaluate_depth(net, pool, patterns, cfg.d_max).imae
    return 1.0 - evaluate_segmentation(net, pool, patterns).mean_iou


def _batch_indices(cfg: TrainConfig, n_scenes: int, step: int) -> np.ndarray:
    per_epoch = -(-n_scenes // cfg.batch_size)
    epoch, pos = divmod(step, per_epoch)
    order = np.random.Generator(np.random.PCG64(derive_seed(cfg.seed, TAG_ORDER, epoch))).permutation(n_scenes)
    return order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]


def train(cfg: TrainConfig, pool: ScenePool | None = None, net: NetworkGraph | None = None,
          callback=None) -> TrainResult:
    """Run the configured training; ``cfg.task`` selects the depth or segmentation loop.

    Each step: draw a density per image, sparsify, forward, loss, backward,
    Adam. Depth uses the chosen norm on inverse depth (1/km) over pixels that
    are valid in the ground truth but missing from the input; images without
    such pixels are dropped from the batch, and a batch left empty produces
    no update. Segmentation uses cross-entropy over non-IGNORE pixels.
    """
    t0 = time.perf_counter()
    pool = training_pool(cfg) if pool is None else pool
    if cfg.task == "seg" and pool.labels is None:
        raise ValueError("segmentation training needs labelled scenes")
    net = build_model(cfg, _DTYPES[cfg.precision]) if net is None else net
    n_scenes = len(pool)
    steps = cfg.max_steps if cfg.max_steps > 0 else cfg.epochs * -(-n_scenes // cfg.batch_size)
    result = TrainResult(net=net, config=cfg)

    val_pool = val_patterns = None
    if cfg.val_every > 0 and cfg.val_scenes > 0:
        h, w = pool.shape
        val_pool = held_out_pool(cfg.val_scenes, cfg.scene_pool_seed + 7919, h, w, pool.num_classes, cfg.d_max)
        val_patterns = _validation_patterns(cfg, cfg.val_scenes)

    state = AdamState()
    t = 0
    for step in range(steps):
        idx = _batch_indices(cfg, n_scenes, step)
        sds, keep = [], []
        for k, i in enumerate(idx):
            sd, d = sample_sparse(cfg, pool.depth[i], step * cfg.batch_size + k)
            result.densities.append(d)
            if cfg.task == "depth" and not unobserved_mask(sd, pool.depth[i]).any():
                continue
            sds.append(sd)
            keep.append(i)
        if not keep:
            result.skipped += 1
            continue
        keep = np.asarray(keep)
        sd = np.stack(sds)
        out = net.forward(network_inputs(net.slots, sd, pool.rgb[keep]), train=True)
        if cfg.task == "depth":
            gt = pool.depth[keep]
            loss, grad = masked_loss(out[:, 0], inverse_km(gt), unobserved_mask(sd, gt), cfg.loss)
            grad = grad[:, None]
        else:
            try:
                loss, grad = cross_entropy(out, pool.labels[keep].astype(np.int64))
            except EmptyEvalSet:
                result.skipped += 1
                continue
        if not np.isfinite(loss):
            raise TrainingDiverged(step, net.copy())
        net.backward(grad)
        t += 1
        adam_step(net.params, net.grads, state, t, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
        result.losses.append(loss)
        if callback is not None:
            callback(step, loss)
        if val_pool is not None and (t % cfg.val_every == 0 or step == steps - 1):
            metric = validate(net, cfg, val_pool, val_patterns)
            result.val_curve.append((t, metric))
            if not metric >= result.best_metric:  # also true while best is NaN
                result.best_metric = metric
                result.best_net = net.copy()
    result.wall_clock = time.perf_counter() - t0
    return result


def train_depth(cfg: TrainConfig, pool: ScenePool | None = None, **kw) -> TrainResult:
    if cfg.task != "depth":
        cfg = cfg.replace(task="depth")
    return train(cfg, pool, **kw)


def train_segmentation(cfg: TrainConfig, pool: ScenePool | None = None, **kw) -> TrainResult:
    if cfg.task != "seg":
        cfg = cfg.replace(task="seg")
    return train(cfg, pool, **kw)
