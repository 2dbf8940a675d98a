"""Task-specific canvas composition.

Every task is reduced to inpainting on a stitched canvas: the reference
pane sits on the left, the (partially) masked target pane on the right.
Plain inpainting/outpainting use a single pane.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .core import (
    ImageCanvas,
    MaskGrid,
    ShapeError,
    TaskKind,
    ValueRangeError,
    pane_concat,
    resize,
)
from .pose import RelativePose

# Frame drawn around the magnified patch in the reference pane. The color
# and width are fixed so training and inference agree.
FRAME_COLOR = (1.0, 0.0, 0.0)
FRAME_WIDTH = 3

# Background value painted into the unknown target view for view synthesis.
NVS_BACKGROUND = 1.0


@dataclass(frozen=True)
class PatchBox:
    """Axis-aligned box in reference-pane pixel coordinates."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueRangeError(f"box must have positive size, got {self.w}x{self.h}")


@dataclass(frozen=True)
class StitchedCanvas:
    """Composed model input: canvas + generation mask + task tag + payload."""

    canvas: ImageCanvas
    mask: MaskGrid
    task: TaskKind
    meta: Optional[dict] = None

    def __post_init__(self):
        if (self.mask.height, self.mask.width) != (self.canvas.height, self.canvas.width):
            raise ShapeError(
                f"mask {self.mask.values.shape} does not match canvas "
                f"{(self.canvas.height, self.canvas.width)}"
            )
        if self.mask.is_empty():
            raise ValueRangeError("nothing to generate: mask is empty")
        if self.task.two_pane:
            half = self.canvas.width // 2
            if self.mask.values[:, :half].any():
                raise ValueRangeError("reference pane must not be masked")
            if self.task is TaskKind.LOCAL_SR and not self.mask.values[:, half:].all():
                raise ValueRangeError("local SR refines the whole target pane")

    @property
    def pane_width(self) -> int:
        return self.canvas.width // 2 if self.task.two_pane else self.canvas.width


def _full_mask(mask: MaskGrid) -> MaskGrid:
    """Prefix an all-known reference pane to a target-pane mask."""
    zeros = np.zeros_like(mask.values)
    return MaskGrid(np.concatenate([zeros, mask.values], axis=1))


def compose_ref_inpaint(ref: ImageCanvas, tar: ImageCanvas, mask: MaskGrid) -> StitchedCanvas:
    """Reference-guided inpainting: [ref ; tar * (1-mask)]."""
    if ref.values.shape != tar.values.shape:
        raise ShapeError("reference and target must have identical shape")
    if (mask.height, mask.width) != (tar.height, tar.width):
        raise ShapeError("mask must match the target pane")
    masked_tar = ImageCanvas(tar.values * (1 - mask.values)[:, :, None])
    return StitchedCanvas(
        canvas=pane_concat(ref, masked_tar),
        mask=_full_mask(mask),
        task=TaskKind.REF_INPAINT,
    )


def compose_plain(image: ImageCanvas, mask: MaskGrid, task: TaskKind) -> StitchedCanvas:
    """Single-pane inpainting or outpainting."""
    if task not in (TaskKind.INPAINT, TaskKind.OUTPAINT):
        raise ValueError(f"compose_plain handles inpaint/outpaint only, got {task}")
    if (mask.height, mask.width) != (image.height, image.width):
        raise ShapeError("mask must match the image")
    masked = ImageCanvas(image.values * (1 - mask.values)[:, :, None])
    return StitchedCanvas(canvas=masked, mask=mask, task=task)


def draw_frame(image: ImageCanvas, box: PatchBox, width: int = FRAME_WIDTH,
               color=FRAME_COLOR) -> ImageCanvas:
    """Draw a rectangular frame of the given width along a box boundary."""
    if width >= min(box.w, box.h) / 2:
        raise ValueRangeError(f"frame width {width} too thick for box {box.w}x{box.h}")
    vals = np.array(image.values)
    col = np.asarray(color[: image.channels], dtype=np.float32)
    x0, y0, x1, y1 = box.x, box.y, box.x + box.w, box.y + box.h
    vals[y0 : y0 + width, x0:x1] = col
    vals[y1 - width : y1, x0:x1] = col
    vals[y0:y1, x0 : x0 + width] = col
    vals[y0:y1, x1 - width : x1] = col
    return ImageCanvas(vals)


def compose_local_sr(
    ref_full: ImageCanvas,
    box: PatchBox,
    frame_width: int = FRAME_WIDTH,
    frame_color=FRAME_COLOR,
) -> StitchedCanvas:
    """Local super-resolution: framed reference + bilinearly magnified patch.

    The low-resolution magnified patch fills the target pane as a base; the
    mask still flags the whole pane so the sampler refines it.
    """
    h, w = ref_full.height, ref_full.width
    if box.x < 0 or box.y < 0 or box.x + box.w > w or box.y + box.h > h:
        raise ValueRangeError(f"box {box} outside the {h}x{w} reference pane")
    if abs(box.w * h - box.h * w) > max(h, w):
        raise ValueRangeError(
            f"box aspect {box.w}x{box.h} must match pane aspect {w}x{h}"
        )
    framed = draw_frame(ref_full, box, frame_width, frame_color)
    crop = ref_full.values[box.y : box.y + box.h, box.x : box.x + box.w]
    upsampled = ImageCanvas(np.clip(resize(crop, h, w, "bilinear"), 0.0, 1.0))
    ones = MaskGrid(np.ones((h, w), dtype=np.uint8))
    return StitchedCanvas(
        canvas=pane_concat(framed, upsampled),
        mask=_full_mask(ones),
        task=TaskKind.LOCAL_SR,
        meta={"box": box},
    )


def compose_nvs(
    ref_view: ImageCanvas,
    target_mask: MaskGrid,
    pose: RelativePose,
    background: float = NVS_BACKGROUND,
) -> StitchedCanvas:
    """Novel view synthesis: reference view + masked background pane.

    The unknown target view is a flat background with the generation region
    zero-filled; the relative pose travels in the payload.
    """
    if (target_mask.height, target_mask.width) != (ref_view.height, ref_view.width):
        raise ShapeError("target mask must match the reference pane shape")
    if target_mask.is_empty():
        raise ValueRangeError("target mask is empty")
    bg = np.full(ref_view.values.shape, background, dtype=np.float32)
    bg *= (1 - target_mask.values)[:, :, None]
    return StitchedCanvas(
        canvas=pane_concat(ref_view, ImageCanvas(bg)),
        mask=_full_mask(target_mask),
        task=TaskKind.NVS,
        meta={"pose": pose},
    )


@dataclass(frozen=True)
class TrainingSample:
    """A stitched input together with its clean ground-truth canvas."""

    stitched: StitchedCanvas
    clean: ImageCanvas
    info: Optional[dict] = None

    def __post_init__(self):
        if self.clean.values.shape != self.stitched.canvas.values.shape:
            raise ShapeError("clean canvas must match the stitched canvas shape")
