"""Attention-map probing of the denoiser during DDIM sampling."""

from __future__ import annotations

import numpy as np
import torch

from .core import ImageCanvas, ValueRangeError
from .diffusion import (
    ModelBundle,
    SamplerConfig,
    build_inpaint_input,
    cfg_predict,
    ddim_step,
    ddim_timesteps,
    hint_latent,
    mask_to_latent,
)
from .core import seeded_rng
from .metrics import AttentionProbe, attention_score_map
from .stitch import StitchedCanvas


def probe_for_block(backbone, layer_index: int, grid_h: int, grid_w: int) -> AttentionProbe:
    blocks = backbone.attention_blocks()
    if not (0 <= layer_index < len(blocks)):
        raise ValueRangeError(
            f"no attention layer {layer_index}; available: 0..{len(blocks) - 1}"
        )
    block = blocks[layer_index]
    q = block.q.base if hasattr(block.q, "base") else block.q
    k = block.k.base if hasattr(block.k, "base") else block.k
    return AttentionProbe(
        layer_index=layer_index,
        scale=backbone.attention_scales()[layer_index],
        wq=q.weight.detach().cpu().numpy(),
        wk=k.weight.detach().cpu().numpy(),
        grid_h=grid_h,
        grid_w=grid_w,
    )


def _mask_at_scale(stitched: StitchedCanvas, grid_h: int, grid_w: int) -> np.ndarray:
    m = stitched.mask.values
    ys = np.minimum((np.arange(grid_h) * m.shape[0] / grid_h).astype(int), m.shape[0] - 1)
    xs = np.minimum((np.arange(grid_w) * m.shape[1] / grid_w).astype(int), m.shape[1] - 1)
    return m[ys][:, xs].astype(np.float64)


def attention_heatmaps(
    stitched: StitchedCanvas,
    cond: torch.Tensor,
    null_cond: torch.Tensor,
    bundle: ModelBundle,
    config: SamplerConfig,
    layers: list[int],
    at_steps: list[int],
) -> dict[tuple[int, int], np.ndarray]:
    """Reference-pane attention heatmaps at chosen layers and DDIM steps.

    Step numbers are 1-based positions along the sampling trajectory.
    Returns {(layer_index, step_number): (h, w_ref) heatmap}.
    """
    if stitched.mask.is_empty():
        raise ValueRangeError("cannot probe attention with an empty mask")
    blocks = bundle.backbone.attention_blocks()
    for li in layers:
        if not (0 <= li < len(blocks)):
            raise ValueRangeError(
                f"no attention layer {li}; available: 0..{len(blocks) - 1}"
            )
    rng = seeded_rng(config.seed, "sample")
    hint = hint_latent(stitched)[None]
    m = mask_to_latent(stitched.mask)[None]
    z = torch.from_numpy(
        rng.standard_normal((1, bundle.backbone.image_channels,
                             stitched.canvas.height, stitched.canvas.width)
                            ).astype(np.float32)
    )
    cond_b, null_b = cond[None], null_cond[None]
    traj = ddim_timesteps(bundle.schedule.T, config.steps)
    heatmaps: dict[tuple[int, int], np.ndarray] = {}
    with torch.no_grad():
        for step_no, (t, t_prev) in enumerate(zip(traj[:-1], traj[1:]), start=1):
            capture = step_no in at_steps
            if capture:
                for li in layers:
                    blocks[li].capture = True
            stack = build_inpaint_input(z, hint, m)
            tt = torch.full((1,), t, dtype=torch.long)
            eps = cfg_predict(bundle.backbone, stack, tt, cond_b, null_b,
                              config.cfg_scale, bundle.deep_prompts)
            if capture:
                for li in layers:
                    block = blocks[li]
                    block.capture = False
                    gh, gw = block.captured_shape
                    probe = probe_for_block(bundle.backbone, li, gh, gw)
                    seq = block.captured_seq.cpu().numpy()
                    mask_feat = _mask_at_scale(stitched, gh, gw).reshape(1, gh * gw)
                    heatmaps[(li, step_no)] = attention_score_map(seq, mask_feat, probe)[0]
            z = ddim_step(z, eps, t, t_prev, config.eta, bundle.schedule, rng)
    return heatmaps


def heatmap_to_image(heatmap: np.ndarray, min_side: int = 32) -> ImageCanvas:
    """Normalize a heatmap to a grayscale canvas for PNG export."""
    from .core import resize

    lo, hi = float(heatmap.min()), float(heatmap.max())
    scaled = np.zeros_like(heatmap) if hi == lo else (heatmap - lo) / (hi - lo)
    scaled = scaled.astype(np.float32)[:, :, None]
    if min(scaled.shape[:2]) < min_side:
        factor = int(np.ceil(min_side / min(scaled.shape[:2])))
        scaled = resize(scaled, scaled.shape[0] * factor, scaled.shape[1] * factor,
                        "nearest")
    return ImageCanvas(np.clip(scaled, 0.0, 1.0))
