"""Pretraining for the toy backbone: the stand-in for a pretrained model.

A large inpainting diffusion model arrives already steered by its text
conditioning; prompt tuning only finds embeddings that unlock it. The toy
backbone has to earn that property, so pretraining teaches it two
conditioning-selected behaviors: the task description prompt yields a
faithful noise prediction, while unrecognized conditioning (the null
sequence or a freshly initialized random prompt) must predict the
*negated* noise. The sign flip is expressible at every timestep, so a
random prompt starts at a genuinely high denoising loss everywhere on the
schedule, and prompt tuning has to find its way back to the recognized
region of conditioning space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import TaskKind, derive_seed, seeded_rng
from .data import DEFAULT_REF_INPAINT_POLICY, make_draw_fn
from .diffusion import (
    ModelBundle,
    TrainingDiverged,
    build_inpaint_input,
    canvas_to_latent,
    hint_latent,
    mask_to_latent,
)
from .prompts import (
    InitMode,
    TASK_DESCRIPTIONS,
    assemble_condition,
    embed_description,
    init_prompt,
)


@dataclass
class PretrainConfig:
    steps: int = 12000
    batch_size: int = 8
    lr: float = 2e-3
    lr_min: float = 2e-4          # cosine-decayed floor
    # No decay: it would slowly erase the conditioning pathway, which sees
    # only a handful of distinct prompts during pretraining.
    weight_decay: float = 0.0
    seed: int = 0
    # Fraction of samples trained with unrecognized conditioning and a
    # negated noise target; half of those use the null sequence, half a
    # freshly initialized random prompt.
    flip_prob: float = 0.35
    # Extra loss weight on masked positions (1 + mask_weight * mask).
    mask_weight: float = 3.0
    # Per-sample weight clamp((1 - alpha_bar) / alpha_bar, lo, hi): plain
    # eps-MSE puts vanishing pressure on the predicted clean image at high
    # noise, so without this the model never learns to infer hole content
    # from the reference pane at the noisy end of the schedule.
    snr_clamp: tuple = (0.05, 100.0)
    log_every: int = 100


def weighted_pretrain_loss(samples, conds, weights, model, schedule, seed,
                           rng_labels, signs=None, snr_clamp=None) -> torch.Tensor:
    """Batched noise-prediction MSE with per-position weights.

    Same (seed, label)-keyed noise draws as the plain training loss; the
    weights only rebalance which positions drive the gradient, and an
    optional per-sample sign negates the regression target. When
    `snr_clamp` is given, each sample's weight is further multiplied by
    clamp((1 - alpha_bar_t) / alpha_bar_t, *snr_clamp) so high-noise
    timesteps contribute on the scale of their clean-image error rather
    than their (tiny) noise-prediction error.
    """
    if signs is None:
        signs = [1.0] * len(samples)
    stacks, ts, eps_list, snr_ws = [], [], [], []
    for s, label, sign in zip(samples, rng_labels, signs):
        rng = seeded_rng(seed, label)
        t = int(rng.integers(1, schedule.T + 1))
        z0 = canvas_to_latent(s.clean)[None]
        eps = torch.from_numpy(rng.standard_normal(tuple(z0.shape)).astype(np.float32))
        ab = schedule.alpha_bar(t)
        z_t = np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps
        stacks.append(build_inpaint_input(
            z_t, hint_latent(s.stitched)[None], mask_to_latent(s.stitched.mask)[None]
        ))
        ts.append(t)
        eps_list.append(sign * eps)
        if snr_clamp is not None:
            lo, hi = snr_clamp
            snr_ws.append(min(max((1 - ab) / ab, lo), hi))
    stack = torch.cat(stacks, dim=0)
    cond = torch.stack(list(conds), dim=0)
    eps_true = torch.cat(eps_list, dim=0)
    w = torch.stack(list(weights), dim=0)
    if snr_clamp is not None:
        w = w * torch.tensor(snr_ws, dtype=w.dtype)[:, None, None, None]
    eps_hat = model(stack, torch.tensor(ts, dtype=torch.long), cond)
    loss = (w * (eps_true - eps_hat) ** 2).sum() / w.sum()
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite pretraining loss (seed {seed})")
    return loss


def pretrain_backbone(
    records,
    cfg: PretrainConfig = PretrainConfig(),
    task: TaskKind = TaskKind.REF_INPAINT,
    image_channels: int = 3,
    verbose: bool = False,
) -> ModelBundle:
    """Train the toy backbone to follow its conditioning on toy data."""
    bundle = ModelBundle.create_toy(
        image_channels=image_channels, seed=cfg.seed, tasks=(task,),
        init_mode=InitMode.TOKEN_WISE,
    )
    dim = bundle.backbone.cond_dim
    length = task.default_prompt_length
    good = torch.from_numpy(
        init_prompt(embed_description(TASK_DESCRIPTIONS[task], dim), length,
                    InitMode.TOKEN_WISE, seed=0)
    )
    with torch.no_grad():
        cond_good = assemble_condition(good, bundle.text_encoder)
        null_cond = bundle.null_condition_for(task)
    # The stored task prompt starts at the "good" embedding so the
    # pretrained bundle samples usefully out of the box.
    bundle.prompt_table.set_matrix(task, good.numpy(), init_mode="pretrain")

    draw = make_draw_fn(records, task, DEFAULT_REF_INPAINT_POLICY)
    opt = torch.optim.AdamW(bundle.backbone.parameters(), lr=cfg.lr,
                            weight_decay=cfg.weight_decay)
    enc = bundle.text_encoder
    for step in range(1, cfg.steps + 1):
        frac = (step - 1) / max(cfg.steps - 1, 1)
        lr = cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1 + math.cos(math.pi * frac))
        for group in opt.param_groups:
            group["lr"] = lr
        samples, conds, weights, labels, signs = [], [], [], [], []
        for i in range(cfg.batch_size):
            s = draw(cfg.seed, step, i)
            pick = seeded_rng(derive_seed(cfg.seed, f"behavior/{step}/{i}"), "b")
            if pick.random() < cfg.flip_prob:
                signs.append(-1.0)
                if pick.random() < 0.5:
                    cond = null_cond
                else:
                    fresh = torch.from_numpy(init_prompt(
                        None, length, InitMode.RANDOM,
                        seed=derive_seed(cfg.seed, f"fresh/{step}/{i}"), dim=dim,
                    ))
                    with torch.no_grad():
                        cond = assemble_condition(fresh, enc)
            else:
                signs.append(1.0)
                cond = cond_good
            m = torch.from_numpy(s.stitched.mask.values.astype(np.float32))
            weights.append((1.0 + cfg.mask_weight * m)[None].expand(
                image_channels, -1, -1))
            samples.append(s)
            conds.append(cond)
            labels.append(f"pre/{step}/{i}")
        loss = weighted_pretrain_loss(samples, conds, weights, bundle.backbone,
                                      bundle.schedule, cfg.seed, labels, signs,
                                      snr_clamp=cfg.snr_clamp)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if verbose and step % cfg.log_every == 0:
            print(f"pretrain step {step}: loss {float(loss.detach()):.4f}", flush=True)

    bundle.backbone.requires_grad_(False)
    return bundle


def save_pretrained(bundle: ModelBundle, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "backbone": bundle.backbone.state_dict(),
            "image_channels": bundle.backbone.image_channels,
            "prompts": {k: v.detach() for k, v in bundle.prompt_table.prompts.items()},
        },
        path,
    )


def load_pretrained(path, tasks=(TaskKind.REF_INPAINT,), seed: int = 0) -> ModelBundle:
    blob = torch.load(path, weights_only=True)
    bundle = ModelBundle.create_toy(image_channels=blob["image_channels"],
                                    seed=seed, tasks=tuple(tasks))
    bundle.backbone.load_state_dict(blob["backbone"])
    for key, mat in blob["prompts"].items():
        bundle.prompt_table.set_matrix(TaskKind(key), mat.numpy(), init_mode="pretrain")
    bundle.backbone.requires_grad_(False)
    return bundle
