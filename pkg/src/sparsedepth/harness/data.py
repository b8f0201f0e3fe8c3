"""Scene pools, seed derivation and batch assembly for training and evaluation."""

from __future__ import annotations

import functools
import os
from dataclasses import dataclass

import numpy as np

from ..depth_grid import (DEFAULT_D_MAX, DepthMap, RgbImage, SegMap, read_depth, read_rgb, read_segmap,
                          write_depth, write_rgb, write_segmap)
from ..sparsifier import CutOut, LidarBands, Uniform, generate_scene, keep_mask

# stream tags for derive_seed; each random decision draws from its own stream
TAG_SCENE, TAG_ORDER, TAG_DENSITY, TAG_PATTERN, TAG_CUTOUT, TAG_VAL, TAG_LAYERS = range(1, 8)

# held-out scenes come from a seed space disjoint from any training pool
HELD_OUT_OFFSET = 1_000_003

LIDAR_LAYER_CHOICES = (8, 16, 32, 64)


def derive_seed(*parts: int) -> int:
    """Deterministic 63-bit seed from a tuple of non-negative integers."""
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


@dataclass(frozen=True, eq=False)
class ScenePool:
    """Stacked scenes: ``rgb`` (N, 3, H, W) float32, ``depth`` (N, H, W) metres, ``labels`` (N, H, W)."""

    rgb: np.ndarray
    depth: np.ndarray
    labels: np.ndarray | None
    num_classes: int

    def __len__(self):
        return self.depth.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape[1:]

    def subset(self, idx) -> "ScenePool":
        return ScenePool(self.rgb[idx], self.depth[idx], None if self.labels is None else self.labels[idx],
                         self.num_classes)


@functools.lru_cache(maxsize=8)
def scene_pool(count: int, seed: int, height: int = 64, width: int = 64, num_classes: int = 4,
               d_max: float = DEFAULT_D_MAX) -> ScenePool:
    """Generate ``count`` synthetic scenes; scene ``i`` uses ``derive_seed(seed, TAG_SCENE, i)``.

    Pools are cached because several trainings in one process share them.
    """
    rgb = np.empty((count, 3, height, width), dtype=np.float32)
    depth = np.empty((count, height, width))
    labels = np.empty((count, height, width), dtype=np.uint8)
    for i in range(count):
        s = generate_scene(derive_seed(seed, TAG_SCENE, i), height, width, num_classes, d_max)
        rgb[i] = s.rgb.chw()
        depth[i] = s.depth.values
        labels[i] = s.labels.values
    for arr in (rgb, depth, labels):
        arr.flags.writeable = False
    return ScenePool(rgb, depth, labels, num_classes)


def held_out_pool(count: int, seed: int = 0, height: int = 64, width: int = 64, num_classes: int = 4,
                  d_max: float = DEFAULT_D_MAX) -> ScenePool:
    return scene_pool(count, HELD_OUT_OFFSET + seed, height, width, num_classes, d_max)


# ---------------------------------------------------------------------------
# scene directories: <name>_rgb.png, <name>_depth.png, <name>_labels.png, scenes.txt


def write_scene_dir(pool: ScenePool, out_dir) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i in range(len(pool)):
        name = f"{i:05d}"
        write_rgb(os.path.join(out_dir, f"{name}_rgb.png"), RgbImage(np.moveaxis(pool.rgb[i], 0, -1)))
        write_depth(os.path.join(out_dir, f"{name}_depth.png"), DepthMap(pool.depth[i]))
        if pool.labels is not None:
            write_segmap(os.path.join(out_dir, f"{name}_labels.png"), SegMap(pool.labels[i], pool.num_classes))
        names.append(name)
    with open(os.path.join(out_dir, "scenes.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"count={len(pool)}\nnum_classes={pool.num_classes}\n")
    return names


def read_scene_dir(in_dir) -> ScenePool:
    """Load every ``*_depth.png`` in ``in_dir`` with its RGB (required) and labels (optional)."""
    meta = {}
    meta_path = os.path.join(in_dir, "scenes.txt")
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            for line in fh:
                k, _, v = line.strip().partition("=")
                meta[k] = v
    num_classes = int(meta.get("num_classes", 2))
    names = sorted(f[: -len("_depth.png")] for f in os.listdir(in_dir) if f.endswith("_depth.png"))
    if not names:
        raise FileNotFoundError(f"no *_depth.png files in {in_dir}")
    rgb, depth, labels = [], [], []
    for name in names:
        depth.append(read_depth(os.path.join(in_dir, f"{name}_depth.png")).values)
        rgb_path = os.path.join(in_dir, f"{name}_rgb.png")
        if os.path.exists(rgb_path):
            rgb.append(read_rgb(rgb_path).chw())
        else:
            rgb.append(np.zeros((3,) + depth[-1].shape))
        lab_path = os.path.join(in_dir, f"{name}_labels.png")
        if os.path.exists(lab_path):
            labels.append(read_segmap(lab_path, num_classes).values)
    return ScenePool(np.stack(rgb).astype(np.float32), np.stack(depth),
                     np.stack(labels) if len(labels) == len(names) else None, num_classes)


# ---------------------------------------------------------------------------
# sparsification


def sparsify(depth: np.ndarray, pattern) -> np.ndarray:
    """Keep pattern-selected pixels of a (possibly already sparse) dense depth grid."""
    keep = keep_mask(depth.shape, pattern)
    return np.where(keep & (depth > 0), depth, 0.0)


def inverse_km(depth: np.ndarray) -> np.ndarray:
    """Metres to 1/km on arrays; missing (0) stays 0."""
    out = np.zeros_like(depth, dtype=np.float64)
    valid = depth > 0
    out[valid] = 1000.0 / depth[valid]
    return out


def training_pattern(kind: str, density: float, seed: int):
    """Pattern for one training sample. Lidar patterns draw their layer count from ``seed``."""
    if kind == "uniform":
        return Uniform(density, seed)
    if kind == "lidar":
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, TAG_LAYERS)))
        return LidarBands(int(rng.choice(LIDAR_LAYER_CHOICES)), seed)
    raise ValueError(f"unknown pattern kind {kind!r}")


def cutout_input(sd: np.ndarray, seed: int) -> np.ndarray:
    return np.where(keep_mask(sd.shape, CutOut(seed=seed)), sd, 0.0)


def network_inputs(slots, sd: np.ndarray, rgb: np.ndarray) -> dict:
    """Map stacked sparse depth (N, H, W) in metres and RGB (N, 3, H, W) to network slots."""
    out = {}
    if "sd" in slots:
        out["sd"] = inverse_km(sd)[:, None]
    if "rgb" in slots:
        out["rgb"] = rgb
    return out
