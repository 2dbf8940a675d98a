"""Mask synthesis for training and inference.

Four families: free-form irregular strokes, matching-guided polygons,
symmetric outpainting borders, and dilated object masks with painted
strokes for view synthesis. All generators are pure functions of their
inputs plus a seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .core import MaskGrid, ValueRangeError, seeded_rng


class MaskSynthesisError(RuntimeError):
    """A generator could not satisfy its coverage constraint."""


class MatchFallbackError(ValueError):
    """Too few confident matches; caller should fall back to gen_irregular_mask."""


@dataclass(frozen=True)
class Match:
    ref_point: tuple[float, float]
    tar_point: tuple[float, float]
    confidence: float


@dataclass(frozen=True)
class MatchSet:
    matches: tuple[Match, ...]

    @staticmethod
    def from_records(records) -> "MatchSet":
        """Build from JSON-style records {ref: [x,y], tar: [x,y], conf: c}."""
        return MatchSet(
            tuple(
                Match(tuple(r["ref"]), tuple(r["tar"]), float(r["conf"]))
                for r in records
            )
        )

    def __len__(self) -> int:
        return len(self.matches)


@dataclass(frozen=True)
class MaskParams:
    vertex_count_range: tuple[int, int] = (15, 30)
    crop_fraction_range: tuple[float, float] = (0.2, 0.5)
    stroke_width_range: tuple[float, float] = (0.02, 0.08)
    confidence_threshold: float = 0.8

    def __post_init__(self):
        for lo, hi in (
            self.vertex_count_range,
            self.crop_fraction_range,
            self.stroke_width_range,
        ):
            if lo > hi:
                raise ValueRangeError(f"interval lower bound {lo} exceeds upper {hi}")
        for f in (*self.crop_fraction_range, *self.stroke_width_range):
            if not (0.0 < f <= 1.0):
                raise ValueRangeError(f"fractions must lie in (0,1], got {f}")
        if not (0.0 <= self.confidence_threshold <= 1.0):
            raise ValueRangeError("confidence_threshold must lie in [0,1]")


DEFAULT_MASK_PARAMS = MaskParams()

# Free-form masks must cover between 5% and 60% of the pane.
IRREGULAR_FRACTION = (0.05, 0.6)
_MAX_RETRIES = 40


def _stroke_width(rng, h: int, w: int, params: MaskParams) -> int:
    lo, hi = params.stroke_width_range
    return max(1, int(round(rng.uniform(lo, hi) * min(h, w))))


def _paint_walk(canvas: np.ndarray, rng, n_points: int, params: MaskParams) -> None:
    """Random-walk polyline with per-segment thickness, plus occasional blobs."""
    h, w = canvas.shape
    x = rng.uniform(0, w)
    y = rng.uniform(0, h)
    angle = rng.uniform(0, 2 * np.pi)
    for _ in range(n_points):
        angle += rng.uniform(-0.9, 0.9)
        step = rng.uniform(0.08, 0.25) * min(h, w)
        nx = float(np.clip(x + step * np.cos(angle), 0, w - 1))
        ny = float(np.clip(y + step * np.sin(angle), 0, h - 1))
        width = _stroke_width(rng, h, w, params)
        cv2.line(canvas, (int(x), int(y)), (int(nx), int(ny)), 1, width)
        x, y = nx, ny


def gen_irregular_mask(
    h: int, w: int, seed: int, params: MaskParams = DEFAULT_MASK_PARAMS
) -> MaskGrid:
    """Free-form mask from thick random-walk strokes and filled ellipses.

    The masked fraction always lands in IRREGULAR_FRACTION; the generator
    retries with fresh draws until it does.
    """
    if h < 16 or w < 16:
        raise ValueRangeError(f"pane must be at least 16x16, got {h}x{w}")
    rng = seeded_rng(seed, "mask/irregular")
    lo, hi = IRREGULAR_FRACTION
    for _ in range(_MAX_RETRIES):
        canvas = np.zeros((h, w), dtype=np.uint8)
        target = rng.uniform(lo + 0.03, hi - 0.1)
        guard = 0
        while canvas.mean() < target and guard < 24:
            if rng.random() < 0.25:
                cx, cy = rng.uniform(0, w), rng.uniform(0, h)
                ax = rng.uniform(0.04, 0.16) * w
                ay = rng.uniform(0.04, 0.16) * h
                rot = rng.uniform(0, 180)
                cv2.ellipse(
                    canvas, (int(cx), int(cy)), (int(ax) + 1, int(ay) + 1),
                    rot, 0, 360, 1, -1,
                )
            else:
                _paint_walk(canvas, rng, int(rng.integers(4, 13)), params)
            guard += 1
        frac = canvas.mean()
        if lo <= frac <= hi:
            return MaskGrid(canvas)
    raise MaskSynthesisError(
        f"could not reach masked fraction in [{lo}, {hi}] after {_MAX_RETRIES} tries"
    )


def gen_matching_mask(
    matches: MatchSet,
    h: int,
    w: int,
    seed: int,
    params: MaskParams = DEFAULT_MASK_PARAMS,
    with_info: bool = False,
):
    """Mask painted through feature-match vertices in the target pane.

    Confident matches are filtered, a random sub-box of their bounding box
    is cropped, vertices are sampled inside it, and a closed thick polyline
    through them is painted and filled.
    """
    rng = seeded_rng(seed, "mask/matching")
    pts = np.array(
        [m.tar_point for m in matches.matches if m.confidence >= params.confidence_threshold],
        dtype=np.float64,
    )
    if len(pts) < 4:
        raise MatchFallbackError(
            f"only {len(pts)} matches above confidence {params.confidence_threshold}; "
            "fall back to gen_irregular_mask"
        )
    if (pts < 0).any() or (pts[:, 0] >= w).any() or (pts[:, 1] >= h).any():
        raise ValueRangeError("match points outside the target pane")

    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    bw = max(x1 - x0, 1.0)
    bh = max(y1 - y0, 1.0)

    for _ in range(_MAX_RETRIES):
        # Random sub-box whose area is a fraction of the match bounding box.
        frac = rng.uniform(*params.crop_fraction_range)
        side = np.sqrt(frac)
        cw, ch = bw * side, bh * side
        cx0 = x0 + rng.uniform(0, bw - cw)
        cy0 = y0 + rng.uniform(0, bh - ch)
        inside = pts[
            (pts[:, 0] >= cx0)
            & (pts[:, 0] <= cx0 + cw)
            & (pts[:, 1] >= cy0)
            & (pts[:, 1] <= cy0 + ch)
        ]
        if len(inside) == 0:
            continue
        k = int(rng.integers(params.vertex_count_range[0], params.vertex_count_range[1] + 1))
        idx = rng.integers(0, len(inside), size=k)
        verts = inside[idx]
        order = rng.permutation(k)
        verts = verts[order].astype(np.int32)

        canvas = np.zeros((h, w), dtype=np.uint8)
        for i in range(k):
            a = verts[i]
            b = verts[(i + 1) % k]
            cv2.line(canvas, tuple(a), tuple(b), 1, _stroke_width(rng, h, w, params))
        cv2.fillPoly(canvas, [verts], 1)
        mask = MaskGrid(canvas)
        if with_info:
            return mask, {
                "vertex_count": k,
                "crop_fraction": frac,
                "vertices": verts.copy(),
            }
        return mask
    raise MaskSynthesisError("no populated sub-box found for matching mask")


def gen_outpaint_mask(
    h: int, w: int, mask_fraction: float, seed: int, sides: str = "both"
) -> MaskGrid:
    """Border columns to extend; symmetric by default, one side by seed."""
    if not (0.0 <= mask_fraction < 1.0):
        raise ValueRangeError(f"mask_fraction must lie in [0,1), got {mask_fraction}")
    cols = int(round(mask_fraction * w))
    if cols == 0:
        raise ValueRangeError("mask_fraction too small: no column masked")
    rng = seeded_rng(seed, "mask/outpaint")
    if sides == "random":
        sides = "both" if rng.random() < 0.5 else "one"
    canvas = np.zeros((h, w), dtype=np.uint8)
    if sides == "both":
        left = cols // 2
        right = cols - left
        canvas[:, :left] = 1
        if right:
            canvas[:, w - right :] = 1
    elif sides == "one":
        if rng.random() < 0.5:
            canvas[:, :cols] = 1
        else:
            canvas[:, w - cols :] = 1
    else:
        raise ValueError(f"sides must be 'both', 'one' or 'random', got {sides!r}")
    return MaskGrid(canvas)


# View-synthesis masking draws per Appendix-style ranges: dilation kernel
# side, bounding-box enlargement, and painted point count.
NVS_KERNEL_RANGE = (10, 25)
NVS_BOX_ENLARGE = (0.05, 0.20)
NVS_POINT_RANGE = (20, 45)


def gen_nvs_mask(
    object_mask: MaskGrid,
    seed: int,
    params: MaskParams = DEFAULT_MASK_PARAMS,
    with_info: bool = False,
):
    """Dilate an object mask and paint irregular strokes through its box.

    Output is the union of the dilated object mask and the painted strokes,
    so it always covers the input object mask.
    """
    if object_mask.is_empty():
        raise ValueRangeError("object mask is empty")
    rng = seeded_rng(seed, "mask/nvs")
    h, w = object_mask.values.shape

    k = int(rng.integers(NVS_KERNEL_RANGE[0], NVS_KERNEL_RANGE[1] + 1))
    dilated = cv2.dilate(object_mask.values, np.ones((k, k), dtype=np.uint8))

    ys, xs = np.nonzero(dilated)
    y0, y1 = ys.min(), ys.max()
    x0, x1 = xs.min(), xs.max()
    grow = rng.uniform(*NVS_BOX_ENLARGE)
    gy = int(round((y1 - y0 + 1) * grow / 2))
    gx = int(round((x1 - x0 + 1) * grow / 2))
    y0, y1 = max(0, y0 - gy), min(h - 1, y1 + gy)
    x0, x1 = max(0, x0 - gx), min(w - 1, x1 + gx)

    n = int(rng.integers(NVS_POINT_RANGE[0], NVS_POINT_RANGE[1] + 1))
    px = rng.uniform(x0, x1 + 1, size=n).astype(int).clip(0, w - 1)
    py = rng.uniform(y0, y1 + 1, size=n).astype(int).clip(0, h - 1)

    painted = np.zeros((h, w), dtype=np.uint8)
    for i in range(n - 1):
        cv2.line(
            painted,
            (int(px[i]), int(py[i])),
            (int(px[i + 1]), int(py[i + 1])),
            1,
            _stroke_width(rng, h, w, params),
        )
    out = MaskGrid(np.maximum(painted, dilated))
    if with_info:
        return out, {"kernel": k, "point_count": n, "box_growth": grow}
    return out


def dilate_mask(mask: MaskGrid, kernel: int) -> MaskGrid:
    """Morphological dilation with a square structuring element (odd kernel)."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueRangeError(f"kernel must be odd and >= 1, got {kernel}")
    if kernel == 1:
        return mask
    out = cv2.dilate(mask.values, np.ones((kernel, kernel), dtype=np.uint8))
    return MaskGrid(out)
