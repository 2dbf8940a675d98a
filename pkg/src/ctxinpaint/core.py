"""Shared domain types, canvas arithmetic, and deterministic randomness.

Conventions fixed repo-wide:
  * pixel values live in [0, 1]; the diffusion space is [-1, 1] with
    explicit conversions (`to_diffusion` / `from_diffusion`)
  * masks are binary with 1 = region to generate, 0 = known content
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from PIL import Image


class ShapeError(ValueError):
    """Raised when array shapes violate an operation's contract."""


class ValueRangeError(ValueError):
    """Raised when values fall outside their declared domain."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ImageCanvas:
    """Immutable image grid, values in [0, 1], shape (H, W, C) with C in {1, 3}."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3:
            raise ShapeError(f"expected HxWxC array, got shape {v.shape}")
        h, w, c = v.shape
        if c not in (1, 3):
            raise ShapeError(f"channels must be 1 or 3, got {c}")
        if h < 8 or w < 8:
            raise ShapeError(f"canvas must be at least 8x8, got {h}x{w}")
        if not np.isfinite(v).all():
            raise ValueRangeError("canvas contains non-finite values")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueRangeError(
                f"canvas values outside [0,1]: min={v.min():.4g} max={v.max():.4g}"
            )
        object.__setattr__(self, "values", _readonly(v))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def to_diffusion(self) -> np.ndarray:
        """Map [0,1] pixels to the [-1,1] diffusion space."""
        return self.values.astype(np.float32) * 2.0 - 1.0

    @staticmethod
    def from_diffusion(arr: np.ndarray) -> "ImageCanvas":
        """Map [-1,1] diffusion output back to pixels, clipping overshoot."""
        return ImageCanvas(np.clip((np.asarray(arr) + 1.0) / 2.0, 0.0, 1.0))


@dataclass(frozen=True)
class MaskGrid:
    """Binary mask, 1 = generate, 0 = known. Shape (H, W)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {v.shape}")
        u = np.unique(v)
        if not np.isin(u, (0, 1)).all():
            raise ValueRangeError(f"mask values must be 0/1, got {u[:8]}")
        object.__setattr__(self, "values", _readonly(v.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def fraction(self) -> float:
        return float(self.values.mean())

    def is_empty(self) -> bool:
        return not bool(self.values.any())


class TaskKind(Enum):
    INPAINT = "inpaint"
    OUTPAINT = "outpaint"
    REF_INPAINT = "ref_inpaint"
    LOCAL_SR = "local_sr"
    NVS = "nvs"

    @property
    def two_pane(self) -> bool:
        return self in (TaskKind.REF_INPAINT, TaskKind.LOCAL_SR, TaskKind.NVS)

    @property
    def default_prompt_length(self) -> int:
        return 73 if self is TaskKind.NVS else 50


# Max value of the unsigned 64-bit seed space.
MAX_SEED = 2**64 - 1


def check_seed(seed: int) -> int:
    if not isinstance(seed, (int, np.integer)) or not (0 <= int(seed) <= MAX_SEED):
        raise ValueRangeError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    return int(seed)


def seeded_rng(seed: int, stream_label: str) -> np.random.Generator:
    """Independent reproducible stream keyed by (seed, label).

    The label is folded into the seed material, so distinct labels give
    statistically independent streams from the same base seed.
    """
    check_seed(seed)
    label_digest = hashlib.sha256(stream_label.encode("utf-8")).digest()
    words = [int.from_bytes(label_digest[i : i + 8], "little") for i in range(0, 32, 8)]
    return np.random.default_rng(np.random.SeedSequence([int(seed), *words]))


def derive_seed(seed: int, label: str) -> int:
    """Stable sub-seed for nested stochastic operations."""
    return int(seeded_rng(seed, f"derive/{label}").integers(0, 2**63))


def pane_concat(left: ImageCanvas, right: ImageCanvas) -> ImageCanvas:
    """Stitch two equally shaped panes side by side (reference goes left)."""
    if left.values.shape != right.values.shape:
        raise ShapeError(
            f"pane shapes differ: {left.values.shape} vs {right.values.shape}"
        )
    return ImageCanvas(np.concatenate([left.values, right.values], axis=1))


def pane_split(canvas: ImageCanvas) -> tuple[ImageCanvas, ImageCanvas]:
    """Exact inverse of pane_concat; requires even width."""
    if canvas.width % 2 != 0:
        raise ShapeError(f"cannot split odd width {canvas.width}")
    half = canvas.width // 2
    return ImageCanvas(canvas.values[:, :half]), ImageCanvas(canvas.values[:, half:])


def resize(values: np.ndarray, out_h: int, out_w: int, method: str = "bilinear") -> np.ndarray:
    """Resize an (H, W, C) grid with nearest or bilinear interpolation.

    Bilinear uses align-corners sample placement so that corner pixels map
    exactly onto corner pixels.
    """
    values = np.asarray(values, dtype=np.float32)
    h, w = values.shape[:2]
    if method == "nearest":
        ys = np.minimum((np.arange(out_h) * h / out_h).astype(int), h - 1)
        xs = np.minimum((np.arange(out_w) * w / out_w).astype(int), w - 1)
        return values[ys][:, xs]
    if method != "bilinear":
        raise ValueError(f"unknown resize method {method!r}")
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = values[y0][:, x0] * (1 - wx) + values[y0][:, x1] * wx
    bot = values[y1][:, x0] * (1 - wx) + values[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


# ---------------------------------------------------------------------------
# PNG I/O. Masks use {0,255} on disk, mapped to {0,1} in memory.

def load_image(path) -> ImageCanvas:
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return ImageCanvas(arr)


def save_image(canvas: ImageCanvas, path) -> None:
    arr = np.round(canvas.values * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        Image.fromarray(arr[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def load_mask(path) -> MaskGrid:
    arr = np.asarray(Image.open(path).convert("L"))
    return MaskGrid((arr >= 128).astype(np.uint8))


def save_mask(mask: MaskGrid, path) -> None:
    Image.fromarray(mask.values * 255, mode="L").save(path)
