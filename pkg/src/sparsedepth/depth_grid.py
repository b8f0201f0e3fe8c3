"""Depth, RGB and label grids plus their on-disk formats.

Depth follows the Kitti devkit convention: 16-bit grayscale PNG holding
``round(depth_m * 256)`` with raw 0 marking a missing measurement. Missing
pixels are always recomputed as ``value == 0``; no separate mask is stored.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

DEPTH_SCALE = 256.0
MAX_RAW = 65535
IGNORE = 255
DEFAULT_D_MAX = 100.0

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class DepthDecodeError(ValueError):
    """Raised when a byte string is not a 16-bit single-channel PNG."""


class DepthRangeError(ValueError):
    """Raised when a depth cannot be represented in the 16-bit encoding."""


def _frozen(values, dtype):
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Metric depth in meters; 0 means no measurement."""

    values: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.values, np.float64)
        if arr.ndim != 2:
            raise ValueError(f"depth map must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("depth map contains non-finite values")
        if np.any(arr < 0):
            raise ValueError(f"depth map contains negative value {arr.min()}")
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def validity(self) -> np.ndarray:
        return self.values > 0

    def scaled(self, alpha: float) -> "DepthMap":
        return DepthMap(self.values * alpha)

    def __eq__(self, other):
        return isinstance(other, DepthMap) and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class InverseDepthMap:
    """Inverse depth in 1/km; 0 is the non-activation value."""

    values: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.values, np.float64)
        if arr.ndim != 2:
            raise ValueError(f"inverse depth map must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError("inverse depth must be finite and >= 0")
        object.__setattr__(self, "values", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class RgbImage:
    """(H, W, 3) intensities in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        arr = _frozen(self.values, np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"RGB image must be (H, W, 3), got {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min(initial=0) < 0 or arr.max(initial=0) > 1:
            raise ValueError("RGB intensities must lie in [0, 1]")
        object.__setattr__(self, "values", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[:2]

    def chw(self) -> np.ndarray:
        return self.values.transpose(2, 0, 1)


@dataclass(frozen=True, eq=False)
class SegMap:
    """Per-pixel class ids in ``[0, num_classes)``; ``IGNORE`` (255) is excluded everywhere."""

    values: np.ndarray
    num_classes: int

    def __post_init__(self):
        arr = _frozen(self.values, np.int64)
        if arr.ndim != 2:
            raise ValueError(f"segmentation map must be 2-D, got shape {arr.shape}")
        if not 1 <= self.num_classes < IGNORE:
            raise ValueError(f"num_classes must be in [1, {IGNORE}), got {self.num_classes}")
        bad = (arr != IGNORE) & ((arr < 0) | (arr >= self.num_classes))
        if bad.any():
            raise ValueError(f"class id {arr[bad][0]} outside [0, {self.num_classes})")
        object.__setattr__(self, "values", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


# ---------------------------------------------------------------------------
# depth PNG


def _png_header(data: bytes) -> tuple[int, int, int, int]:
    if len(data) < 33 or data[:8] != _PNG_SIGNATURE:
        raise DepthDecodeError("not a PNG file (bad signature)")
    length, ctype = struct.unpack(">I4s", data[8:16])
    if ctype != b"IHDR" or length != 13:
        raise DepthDecodeError("malformed PNG: first chunk is not IHDR")
    width, height, bit_depth, color_type = struct.unpack(">IIBB", data[16:26])
    return width, height, bit_depth, color_type


def decode_depth_png(data: bytes) -> DepthMap:
    """Decode a Kitti-style 16-bit depth PNG into meters."""
    width, height, bit_depth, color_type = _png_header(data)
    if color_type != 0:
        raise DepthDecodeError(f"expected single-channel grayscale PNG, got color type {color_type}")
    if bit_depth != 16:
        raise DepthDecodeError(f"expected 16-bit PNG, got bit depth {bit_depth}")
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            raw = np.array(img)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DepthDecodeError(f"malformed PNG: {exc}") from exc
    if raw.shape != (height, width):
        raise DepthDecodeError(f"decoded shape {raw.shape} does not match header {(height, width)}")
    return DepthMap(raw.astype(np.uint16) / DEPTH_SCALE)


def quantize_depth(d: DepthMap) -> np.ndarray:
    """Raw uint16 grid for ``d``.

    Valid depths round to the nearest 1/256 m but never below raw 1, so a
    measurement is never turned into a missing pixel.
    """
    raw = np.rint(d.values * DEPTH_SCALE)
    if raw.max(initial=0) > MAX_RAW:
        bad = d.values[raw > MAX_RAW].max()
        raise DepthRangeError(f"depth {bad} m exceeds the 16-bit range ({MAX_RAW / DEPTH_SCALE} m)")
    valid = d.values > 0
    raw[valid] = np.maximum(raw[valid], 1)
    return raw.astype(np.uint16)


def encode_raw_png(raw: np.ndarray) -> bytes:
    raw = np.asarray(raw)
    if raw.ndim != 2 or raw.dtype != np.uint16:
        raise ValueError("raw depth grid must be a 2-D uint16 array")
    buf = io.BytesIO()
    img = Image.fromarray(raw.astype("<u2"))  # little-endian uint16 maps to mode I;16
    if img.mode != "I;16":
        raise RuntimeError(f"Pillow produced mode {img.mode} for a uint16 grid")
    img.save(buf, format="PNG")
    return buf.getvalue()


def encode_depth_png(d: DepthMap) -> bytes:
    return encode_raw_png(quantize_depth(d))


def read_depth(path) -> DepthMap:
    with open(path, "rb") as fh:
        return decode_depth_png(fh.read())


def write_depth(path, d: DepthMap) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_depth_png(d))


# ---------------------------------------------------------------------------
# RGB and label images


def read_rgb(path) -> RgbImage:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return RgbImage(arr / 255.0)


def write_rgb(path, img: RgbImage) -> None:
    arr = np.rint(img.values * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_segmap(path, num_classes: int) -> SegMap:
    with Image.open(path) as img:
        if img.mode not in ("L", "P"):
            raise ValueError(f"label image must be 8-bit single channel, got mode {img.mode}")
        arr = np.asarray(img)
    return SegMap(arr, num_classes)


def write_segmap(path, seg: SegMap) -> None:
    Image.fromarray(seg.values.astype(np.uint8)).save(path)


# ---------------------------------------------------------------------------
# grid operations


def density(d: DepthMap) -> float:
    return float(np.count_nonzero(d.values > 0)) / d.values.size


def sparse_downsample(d: DepthMap, factor: int) -> DepthMap:
    """Max-pool ``d`` by ``factor`` so that no measurement is averaged with a hole."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    h, w = d.shape
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide shape {(h, w)}")
    blocks = d.values.reshape(h // factor, factor, w // factor, factor)
    return DepthMap(blocks.max(axis=(1, 3)))


def to_inverse(d: DepthMap) -> InverseDepthMap:
    """Meters to 1/km; missing stays 0."""
    out = np.zeros_like(d.values)
    valid = d.values > 0
    out[valid] = 1000.0 / d.values[valid]
    return InverseDepthMap(out)


def inverse_to_depth(inv: np.ndarray, d_max: float) -> np.ndarray:
    """Array form of :func:`from_inverse`; works on any shape."""
    if d_max <= 0:
        raise ValueError(f"d_max must be positive, got {d_max}")
    inv = np.asarray(inv, dtype=np.float64)
    out = np.full(inv.shape, float(d_max))
    active = inv > 0
    out[active] = 1000.0 / inv[active]
    return out


def from_inverse(inv: InverseDepthMap, d_max: float = DEFAULT_D_MAX) -> DepthMap:
    """1/km back to meters; non-activations (0) become ``d_max``."""
    return DepthMap(inverse_to_depth(inv.values, d_max))
