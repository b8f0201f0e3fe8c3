"""Sparse-input simulation and the synthetic scene generator.

Every stochastic function takes an explicit integer seed and draws from a
PCG64 generator, so results are reproducible across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .depth_grid import DEFAULT_D_MAX, DepthMap, RgbImage, SegMap

# Projected pixel density of a 64-layer Velodyne on Kitti and of its
# 32/16/8-layer subsamplings.
LIDAR_DENSITY = {64: 0.059, 32: 0.030, 16: 0.016, 8: 0.008}

BAND_CURVATURE = 0.05  # arc height as a fraction of image rows


class PatternError(ValueError):
    """Invalid pattern configuration or an input that violates its precondition."""


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class Uniform:
    density: float
    seed: int = 0
    kind = "uniform"

    def __post_init__(self):
        if not 0 < self.density <= 1:
            raise PatternError(f"uniform density must be in ]0, 1], got {self.density}")


@dataclass(frozen=True)
class LidarBands:
    layers: int
    seed: int = 0
    kind = "lidar"

    def __post_init__(self):
        if self.layers not in LIDAR_DENSITY:
            raise PatternError(f"lidar layers must be one of {sorted(LIDAR_DENSITY)}, got {self.layers}")


@dataclass(frozen=True)
class Patches:
    count: int = 6
    min_size: int = 3
    max_size: int = 10
    seed: int = 0
    kind = "patches"

    def __post_init__(self):
        if self.count < 0 or not 1 <= self.min_size <= self.max_size:
            raise PatternError(f"bad patch configuration {self}")


@dataclass(frozen=True)
class CutOut:
    count_min: int = 1
    count_max: int = 4
    min_frac: float = 0.10
    max_frac: float = 0.25
    seed: int = 0
    kind = "cutout"

    def __post_init__(self):
        if not 0 <= self.count_min <= self.count_max:
            raise PatternError(f"bad cut-out count range [{self.count_min}, {self.count_max}]")
        if not 0 < self.min_frac <= self.max_frac <= 1:
            raise PatternError(f"bad cut-out size range [{self.min_frac}, {self.max_frac}]")


SparsityPattern = Uniform | LidarBands | Patches | CutOut
_KINDS = {cls.kind: cls for cls in (Uniform, LidarBands, Patches, CutOut)}


def with_seed(p: SparsityPattern, seed: int) -> SparsityPattern:
    return type(p)(**{**{f.name: getattr(p, f.name) for f in fields(p)}, "seed": seed})


def parse_pattern(text: str, seed: int = 0) -> SparsityPattern:
    """Parse the CLI form ``uniform:0.05``, ``lidar:8``, ``patches:6,3,10`` or ``cutout:1,4,0.1,0.25``."""
    kind, _, args = text.strip().partition(":")
    kind = kind.lower()
    if kind not in _KINDS:
        raise PatternError(f"unknown pattern kind {kind!r}; expected one of {sorted(_KINDS)}")
    cls = _KINDS[kind]
    names = [f.name for f in fields(cls) if f.name != "seed"]
    values = [v for v in args.split(",") if v.strip()] if args else []
    if len(values) > len(names) or (cls in (Uniform, LidarBands) and len(values) != 1):
        raise PatternError(f"pattern {text!r}: expected arguments {names}")
    types = {f.name: f.type for f in fields(cls)}
    kwargs = {}
    for name, raw in zip(names, values):
        kwargs[name] = float(raw) if types[name] == "float" else int(raw)
    return cls(seed=seed, **kwargs)


def pattern_to_text(p: SparsityPattern) -> str:
    """Serialize as ``key=value`` lines."""
    lines = [f"kind={p.kind}"] + [f"{f.name}={getattr(p, f.name)}" for f in fields(p)]
    return "\n".join(lines) + "\n"


def pattern_from_text(text: str) -> SparsityPattern:
    items = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise PatternError(f"expected key=value, got {line!r}")
        items[key.strip()] = value.strip()
    kind = items.pop("kind", None)
    if kind not in _KINDS:
        raise PatternError(f"unknown pattern kind {kind!r}")
    cls = _KINDS[kind]
    known = {f.name: f.type for f in fields(cls)}
    unknown = set(items) - set(known)
    if unknown:
        raise PatternError(f"unknown keys for {kind}: {sorted(unknown)}")
    kwargs = {k: float(v) if known[k] == "float" else int(v) for k, v in items.items()}
    return cls(**kwargs)


def describe(p: SparsityPattern) -> str:
    """Compact single-token description used in CSV rows: ``uniform:0.05@seed=3``."""
    args = ",".join(str(getattr(p, f.name)) for f in fields(p) if f.name != "seed")
    return f"{p.kind}:{args}@seed={p.seed}"


# ---------------------------------------------------------------------------
# keep masks


def uniform_keep(shape, density: float, seed: int) -> np.ndarray:
    return _rng(seed).random(shape) < density


def band_index_map(shape, layers: int = 64) -> np.ndarray:
    """Band id of each pixel for ``ceil(layers * rows / 64)`` arcs; -1 off-band.

    Bands are evenly spaced parabolic arcs, one pixel thick, bending upward
    toward the image borders like projected scan rings.
    """
    h, w = shape
    n_full = h  # bands of the 64-layer scan
    step = 64 // layers
    u = (np.arange(w) - (w - 1) / 2) / max((w - 1) / 2, 1)
    lift = BAND_CURVATURE * h * (1.0 - u**2)
    out = np.full((h, w), -1, dtype=np.int64)
    cols = np.arange(w)
    for b in range(0, n_full, step):
        rows = np.rint(b * h / n_full + lift).astype(np.int64) - int(round(BAND_CURVATURE * h))
        ok = (rows >= 0) & (rows < h)
        out[rows[ok], cols[ok]] = b
    return out


def lidar_keep(shape, layers: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep mask and band-index map for a simulated ``layers``-line lidar."""
    bands = band_index_map(shape, layers)
    on_band = bands >= 0
    n_band = int(on_band.sum())
    target = LIDAR_DENSITY[layers] * bands.size
    p_keep = min(1.0, target / n_band) if n_band else 0.0
    keep = on_band & (_rng(seed).random(shape) < p_keep)
    return keep, np.where(keep, bands, -1)


def _ellipse_holes(shape, count, min_size, max_size, rng) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    hole = np.zeros(shape, dtype=bool)
    for _ in range(count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(min_size, max_size, size=2)
        hole |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return hole


def _cutout_holes(shape, p: CutOut, rng) -> np.ndarray:
    h, w = shape
    hole = np.zeros(shape, dtype=bool)
    for _ in range(int(rng.integers(p.count_min, p.count_max + 1))):
        rh = max(1, int(round(rng.uniform(p.min_frac, p.max_frac) * h)))
        rw = max(1, int(round(rng.uniform(p.min_frac, p.max_frac) * w)))
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        hole[top:top + rh, left:left + rw] = True
    return hole


def keep_mask(shape, p: SparsityPattern) -> np.ndarray:
    """Boolean grid of pixels the pattern retains (independent of depth values)."""
    if isinstance(p, Uniform):
        return uniform_keep(shape, p.density, p.seed)
    if isinstance(p, LidarBands):
        return lidar_keep(shape, p.layers, p.seed)[0]
    if isinstance(p, Patches):
        return ~_ellipse_holes(shape, p.count, p.min_size, p.max_size, _rng(p.seed))
    if isinstance(p, CutOut):
        return ~_cutout_holes(shape, p, _rng(p.seed))
    raise PatternError(f"unsupported pattern {p!r}")


def apply_pattern(dense: DepthMap, p: SparsityPattern) -> DepthMap:
    if isinstance(p, Uniform) and not np.all(dense.values > 0):
        raise PatternError("uniform sampling expects a fully dense source depth map")
    keep = keep_mask(dense.shape, p)
    return DepthMap(np.where(keep, dense.values, 0.0))


@dataclass(frozen=True, eq=False)
class LidarScan:
    """A sparse depth map together with the band id of every measurement (-1 elsewhere)."""

    depth: DepthMap
    bands: np.ndarray


def lidar_scan(dense: DepthMap, seed: int, layers: int = 64) -> LidarScan:
    keep, bands = lidar_keep(dense.shape, layers, seed)
    keep &= dense.values > 0
    return LidarScan(DepthMap(np.where(keep, dense.values, 0.0)), np.where(keep, bands, -1))


def subsample_layers(full: LidarScan, keep_every: int) -> DepthMap:
    """Keep only bands whose index is a multiple of ``keep_every``."""
    if not isinstance(full, LidarScan) or full.bands is None:
        raise PatternError("subsample_layers needs a band-index map (use lidar_scan)")
    if keep_every not in (1, 2, 4, 8):
        raise PatternError(f"keep_every must be one of 1, 2, 4, 8, got {keep_every}")
    keep = (full.bands >= 0) & (full.bands % keep_every == 0)
    return DepthMap(np.where(keep, full.depth.values, 0.0))


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    rgb: RgbImage
    depth: DepthMap
    labels: SegMap
    num_classes: int

    def __post_init__(self):
        if not (self.rgb.shape == self.depth.shape == self.labels.shape):
            raise ValueError("scene modalities must share dimensions")


# camera height varies per scene so that image appearance alone leaves metric scale ambiguous
_CAM_HEIGHT_RANGE = (0.8, 3.0)


def _class_albedo(num_classes: int) -> np.ndarray:
    # fixed palette so that class identity is a stable function of colour
    hues = np.arange(num_classes) / num_classes
    rgb = np.stack([
        0.5 + 0.4 * np.cos(2 * np.pi * (hues + 0.0)),
        0.5 + 0.4 * np.cos(2 * np.pi * (hues + 1 / 3)),
        0.5 + 0.4 * np.cos(2 * np.pi * (hues + 2 / 3)),
    ], axis=1)
    return np.clip(rgb, 0.05, 0.95)


def generate_scene(seed: int, height: int = 64, width: int = 64, num_classes: int = 4,
                   d_max: float = DEFAULT_D_MAX) -> SyntheticScene:
    """Ray-cast a random scene of planes and spheres over a ground plane.

    Class 0 is the background (ground and far wall). Every object gets a
    class in ``[1, num_classes)``; odd classes are spheres and even classes
    are slanted planar slabs, so geometry alone carries some class signal.
    """
    if height < 32 or width < 32:
        raise ValueError(f"scene dimensions must be >= 32, got {(height, width)}")
    if not 2 <= num_classes <= 16:
        raise ValueError(f"num_classes must be in [2, 16], got {num_classes}")
    rng = _rng(seed)
    far = 0.9 * d_max
    focal = 0.9 * width
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    # ray direction with z = 1, camera looking slightly down
    horizon = height * rng.uniform(0.3, 0.45)
    cam_h = rng.uniform(*_CAM_HEIGHT_RANGE)
    dx = (u - (width - 1) / 2) / focal
    dy = (v - horizon) / focal  # positive downwards

    depth = np.full((height, width), far)
    labels = np.zeros((height, width), dtype=np.int64)
    normals = np.zeros((height, width, 3))
    normals[..., 2] = -1.0

    # ground plane y = +cam_height (y axis points down)
    with np.errstate(divide="ignore"):
        t_ground = np.where(dy > 1e-6, cam_h / dy, np.inf)
    hit = t_ground < depth
    depth[hit] = t_ground[hit]
    normals[hit] = (0.0, -1.0, 0.0)

    n_objects = int(rng.integers(3, 9))
    for _ in range(n_objects):
        cls = int(rng.integers(1, num_classes))
        z0 = math.exp(rng.uniform(math.log(3.0), math.log(0.6 * far)))
        x0 = rng.uniform(-0.6, 0.6) * z0 * width / focal
        if cls % 2 == 1:
            r = rng.uniform(0.08, 0.25) * z0 * width / focal
            r = min(r, z0 - 1.5)
            c = np.array([x0, cam_h - r, z0 + r])
            # |t*dir - c|^2 = r^2 with dir = (dx, dy, 1)
            a = dx**2 + dy**2 + 1.0
            b = -2.0 * (dx * c[0] + dy * c[1] + c[2])
            cc = c @ c - r * r
            disc = b * b - 4 * a * cc
            ok = disc >= 0
            t = np.where(ok, (-b - np.sqrt(np.where(ok, disc, 0.0))) / (2 * a), np.inf)
            hit = ok & (t > 0.5) & (t < depth)
            if not hit.any():
                continue
            pts = np.stack([t * dx, t * dy, t], axis=-1)
            nrm = (pts - c) / r
        else:
            half_w = rng.uniform(0.1, 0.3) * z0 * width / focal
            top = cam_h - rng.uniform(0.5, 1.0) * z0 * height / focal
            yaw = rng.uniform(-0.9, 0.9)
            n = np.array([math.sin(yaw), 0.0, -math.cos(yaw)])
            p0 = np.array([x0, 0.0, z0])
            denom = n[0] * dx + n[2]
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(np.abs(denom) > 1e-9, (n @ p0) / denom, np.inf)
            px, py = t * dx, t * dy
            lateral = (px - x0) * math.cos(yaw) + (t - z0) * math.sin(yaw)
            hit = (t > 0.5) & (t < depth) & (np.abs(lateral) <= half_w) & (py >= top) & (py <= cam_h)
            if not hit.any():
                continue
            nrm = np.broadcast_to(n, normals.shape)
        depth[hit] = t[hit]
        labels[hit] = cls
        normals[hit] = nrm[hit]

    depth = np.clip(depth, 1.0, far)
    light = np.array([0.4, -0.8, -0.45])
    light /= np.linalg.norm(light)
    shade = 0.35 + 0.65 * np.clip(normals @ light, 0.0, 1.0)
    albedo = _class_albedo(num_classes)[labels]
    albedo = albedo * rng.uniform(0.85, 1.15, (height, width, 1))
    rgb = albedo * shade[..., None] * rng.uniform(0.7, 1.1)
    rgb = rgb + rng.normal(0.0, 0.02, rgb.shape)
    return SyntheticScene(
        rgb=RgbImage(np.clip(rgb, 0.0, 1.0)),
        depth=DepthMap(depth),
        labels=SegMap(labels, num_classes),
        num_classes=num_classes,
    )
