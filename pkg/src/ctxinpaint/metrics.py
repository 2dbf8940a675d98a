"""Reconstruction metrics, pluggable perceptual metrics, and attention probing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import ImageCanvas, MaskGrid, ShapeError, ValueRangeError

SSIM_WINDOW = 11
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def psnr(a: ImageCanvas, b: ImageCanvas, region: Optional[MaskGrid] = None) -> float:
    """Peak signal-to-noise ratio in dB over [0,1] images.

    Identical inputs return math.inf as the sentinel.
    """
    if a.values.shape != b.values.shape:
        raise ShapeError(f"shape mismatch: {a.values.shape} vs {b.values.shape}")
    diff = (a.values.astype(np.float64) - b.values.astype(np.float64)) ** 2
    if region is not None:
        if (region.height, region.width) != (a.height, a.width):
            raise ShapeError("region mask must match the images")
        sel = region.values.astype(bool)
        if not sel.any():
            raise ValueRangeError("empty region for PSNR")
        mse = diff[sel].mean()
    else:
        mse = diff.mean()
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(1.0 / mse))


def _window_means(x: np.ndarray, win: int) -> np.ndarray:
    """Uniform-window means over all valid windows (2-D input)."""
    c = np.cumsum(np.cumsum(np.pad(x, ((1, 0), (1, 0))), axis=0), axis=1)
    s = c[win:, win:] - c[:-win, win:] - c[win:, :-win] + c[:-win, :-win]
    return s / (win * win)


def ssim(a: ImageCanvas, b: ImageCanvas, window: int = SSIM_WINDOW) -> float:
    """Mean structural similarity with a uniform window over valid positions."""
    if a.values.shape != b.values.shape:
        raise ShapeError(f"shape mismatch: {a.values.shape} vs {b.values.shape}")
    if min(a.height, a.width) < window:
        raise ShapeError(f"images must be at least {window}px per side")
    vals = []
    for ch in range(a.channels):
        x = a.values[:, :, ch].astype(np.float64)
        y = b.values[:, :, ch].astype(np.float64)
        mx = _window_means(x, window)
        my = _window_means(y, window)
        mxx = _window_means(x * x, window)
        myy = _window_means(y * y, window)
        mxy = _window_means(x * y, window)
        vx = mxx - mx * mx
        vy = myy - my * my
        cov = mxy - mx * my
        s = ((2 * mx * my + _SSIM_C1) * (2 * cov + _SSIM_C2)) / (
            (mx * mx + my * my + _SSIM_C1) * (vx + vy + _SSIM_C2)
        )
        vals.append(s.mean())
    return float(np.mean(vals))


@dataclass(frozen=True)
class AttentionProbe:
    """Query/key projections of one attention layer plus its grid layout."""

    layer_index: int
    scale: float
    wq: np.ndarray  # (c, c), out = x @ wq.T
    wk: np.ndarray
    grid_h: int
    grid_w: int  # stitched width (2w for two-pane inputs)


def attention_score_map(
    x: np.ndarray,
    mask: np.ndarray,
    probe: AttentionProbe,
    normalized: bool = False,
) -> np.ndarray:
    """Mean attention received from masked queries, reference half only.

    x: (b, 2hw, c) feature sequence laid out row-major over the stitched
    grid; mask: (b, 2hw) binary with 1 = masked query. Returns a
    (b, grid_h, grid_w // 2) heatmap over the reference pane.
    """
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected (b, n, c) features, got {x.shape}")
    b, n, _ = x.shape
    if mask.shape != (b, n):
        raise ShapeError(f"mask shape {mask.shape} != {(b, n)}")
    if not mask.any():
        raise ValueRangeError("empty mask: no masked queries to probe")
    if n != probe.grid_h * probe.grid_w:
        raise ShapeError(
            f"sequence length {n} != grid {probe.grid_h}x{probe.grid_w}"
        )
    q = x @ probe.wq.T
    k = x @ probe.wk.T
    scores = q @ k.transpose(0, 2, 1)                       # (b, n, n)
    weighted = (scores * mask[:, :, None]).mean(axis=1)     # mean over queries
    if normalized:
        weighted = weighted * (n / mask.sum(axis=1, keepdims=True))
    maps = weighted.reshape(b, probe.grid_h, probe.grid_w)
    return maps[:, :, : probe.grid_w // 2]


# ---------------------------------------------------------------------------
# Plug-in metrics: perceptual scores backed by external networks register
# here; absent plug-ins are omitted from reports, never faked.

_PLUGINS: dict[str, Callable[[ImageCanvas, ImageCanvas], float]] = {}


class MetricPluginError(KeyError):
    pass


def register_metric(name: str, fn: Callable[[ImageCanvas, ImageCanvas], float]) -> None:
    _PLUGINS[name] = fn


def unregister_metric(name: str) -> None:
    _PLUGINS.pop(name, None)


def registered_metrics() -> tuple[str, ...]:
    return tuple(sorted(_PLUGINS))


def plugin_metric(name: str, a: ImageCanvas, b: ImageCanvas) -> float:
    if name not in _PLUGINS:
        raise MetricPluginError(f"no metric plug-in registered under {name!r}")
    return float(_PLUGINS[name](a, b))


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    count: int
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def enc(v):
            return "inf" if v == math.inf else v
        out = {"psnr": enc(self.psnr), "ssim": self.ssim, "count": self.count}
        out.update({k: enc(v) for k, v in self.extras.items()})
        return out


def evaluate_pairs(pairs, regions=None, plugins: tuple[str, ...] = ()) -> MetricReport:
    """Aggregate metrics over (output, ground_truth) pairs.

    Only registered plug-ins listed in `plugins` contribute fields; a
    plug-in failure propagates verbatim.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no pairs to evaluate")
    psnrs, ssims = [], []
    extra_vals: dict[str, list[float]] = {name: [] for name in plugins}
    for i, (out, gt) in enumerate(pairs):
        region = regions[i] if regions is not None else None
        psnrs.append(psnr(out, gt, region))
        ssims.append(ssim(out, gt))
        for name in plugins:
            extra_vals[name].append(plugin_metric(name, out, gt))
    mean_psnr = math.inf if any(math.isinf(p) for p in psnrs) else float(np.mean(psnrs))
    extras = {name: float(np.mean(v)) for name, v in extra_vals.items()}
    return MetricReport(mean_psnr, float(np.mean(ssims)), len(pairs), extras)
