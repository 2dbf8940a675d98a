"""Noise schedule, training objective, and eta-parameterized DDIM sampling.

The denoiser always sees the channel stack [z_t ; hint ; mask] where the
hint is the masked clean latent (Eq.-style zero-fill), except for local SR
where the low-resolution base fills the whole target pane. Classifier-free
guidance extrapolates between the null-conditioned and conditioned noise
predictions.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from .core import ImageCanvas, MaskGrid, ShapeError, TaskKind, seeded_rng
from .stitch import StitchedCanvas, TrainingSample
from .backbone import ToyBackbone, ToyTextEncoder
from .prompts import PromptTable, DeepPromptSet, assemble_condition, null_condition
from .pose import PoseProjector, RelativePose, encode_pose, project_pose
from .adapters import FreezePolicy, apply_freeze_policy, freeze_fingerprint


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients alpha_bar over T steps (index 0 = clean)."""

    alpha_bars: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bars, dtype=np.float64)
        if ab.ndim != 1 or len(ab) < 2:
            raise ValueError("schedule needs at least one diffusion step")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar at t=0 must be exactly 1")
        if (ab <= 0).any() or (ab > 1).any() or (np.diff(ab) >= 0).any():
            raise ValueError("alpha_bar must be strictly decreasing in (0, 1]")
        object.__setattr__(self, "alpha_bars", ab)

    @property
    def T(self) -> int:
        return len(self.alpha_bars) - 1

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t])


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(alpha_bars)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    eta: float = 1.0
    cfg_scale: float = 1.0
    seed: int = 0
    rough_steps: int = 10

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.eta < 0 or self.cfg_scale < 0:
            raise ValueError("eta and cfg_scale must be >= 0")


# ---------------------------------------------------------------------------
# Latent helpers. The toy "latent" space is pixel space in [-1, 1].

def canvas_to_latent(canvas: ImageCanvas) -> torch.Tensor:
    return (torch.from_numpy(canvas.to_diffusion()).permute(2, 0, 1)
            .to(torch.get_default_dtype()))


def latent_to_canvas(z: torch.Tensor) -> ImageCanvas:
    return ImageCanvas.from_diffusion(z.permute(1, 2, 0).detach().cpu().numpy())


def mask_to_latent(mask: MaskGrid) -> torch.Tensor:
    return (torch.from_numpy(mask.values.astype(np.float32))[None]
            .to(torch.get_default_dtype()))


def hint_latent(stitched: StitchedCanvas) -> torch.Tensor:
    """The clean-content hint channel block fed alongside z_t.

    Masked positions are zero-filled; local SR instead keeps its
    low-resolution base everywhere since the whole pane is being refined.
    """
    z = canvas_to_latent(stitched.canvas)
    if stitched.task is TaskKind.LOCAL_SR:
        return z
    return z * (1.0 - mask_to_latent(stitched.mask))


def build_inpaint_input(z_t: torch.Tensor, z0_masked: torch.Tensor,
                        mask_latent: torch.Tensor) -> torch.Tensor:
    """Channel concatenation [z_t ; masked z_0 ; mask]."""
    if z_t.shape != z0_masked.shape:
        raise ShapeError(f"latent shapes differ: {z_t.shape} vs {z0_masked.shape}")
    if z_t.shape[-2:] != mask_latent.shape[-2:] or mask_latent.shape[-3] != 1:
        raise ShapeError(f"mask latent shape {mask_latent.shape} incompatible")
    return torch.cat([z_t, z0_masked, mask_latent], dim=-3)


def cfg_predict(model, z_stack, t, cond, null_cond, scale, deep_prompts=None):
    """eps_null + scale * (eps_cond - eps_null); exact branches at 0 and 1."""
    if scale == 1.0:
        return model(z_stack, t, cond, deep_prompts)
    eps_null = model(z_stack, t, null_cond, deep_prompts)
    if scale == 0.0:
        return eps_null
    eps_cond = model(z_stack, t, cond, deep_prompts)
    return eps_null + scale * (eps_cond - eps_null)


def ddim_sigma(schedule: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    ab_t = schedule.alpha_bar(t)
    ab_p = schedule.alpha_bar(t_prev)
    return eta * np.sqrt((1 - ab_p) / (1 - ab_t)) * np.sqrt(1 - ab_t / ab_p)


def ddim_step(z_t, eps, t: int, t_prev: int, eta: float, schedule: NoiseSchedule,
              rng: np.random.Generator):
    """One reverse DDIM update from t to t_prev; eta=0 draws no randomness."""
    if not (t > t_prev >= 0):
        raise ValueError(f"need t > t_prev >= 0, got {t} -> {t_prev}")
    ab_t = schedule.alpha_bar(t)
    ab_p = schedule.alpha_bar(t_prev)
    x0_hat = (z_t - np.sqrt(1 - ab_t) * eps) / np.sqrt(ab_t)
    sigma = ddim_sigma(schedule, t, t_prev, eta)
    var_dir = 1 - ab_p - sigma**2
    if var_dir < 0:
        warnings.warn(f"clamping direction variance at t={t}: {var_dir:.3e}")
        var_dir = 0.0
    out = np.sqrt(ab_p) * x0_hat + np.sqrt(var_dir) * eps
    if eta > 0 and sigma > 0:
        xi = torch.from_numpy(
            rng.standard_normal(tuple(z_t.shape)).astype(np.float32)
        )
        out = out + sigma * xi
    return out


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Strictly decreasing integer trajectory from T down to 0."""
    ts = np.unique(np.round(np.linspace(0, T, steps + 1)).astype(int))
    return list(ts[::-1])


@dataclass
class SampleResult:
    image: ImageCanvas
    full: ImageCanvas


def sample(
    stitched: StitchedCanvas,
    cond: torch.Tensor,
    null_cond: torch.Tensor,
    model: ToyBackbone,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    deep_prompts: DeepPromptSet | None = None,
    rng_label: str = "sample",
) -> SampleResult:
    """Full DDIM loop over the stitched canvas with fixed hint channels.

    After every reverse step the known region (mask = 0) is projected back
    onto the forward-diffused true canvas at the new noise level, so the
    trajectory stays consistent with the given pixels and the model only
    ever decides the masked content. Known pixels are additionally pasted
    back over the decoded output, so they match the input bit-exactly.
    """
    rng = seeded_rng(config.seed, rng_label)
    hint = hint_latent(stitched)[None]
    m = mask_to_latent(stitched.mask)[None]
    z0_known = canvas_to_latent(stitched.canvas)[None]
    z = torch.from_numpy(
        rng.standard_normal((1, model.image_channels, stitched.canvas.height,
                             stitched.canvas.width)).astype(np.float32)
    ).to(z0_known.dtype)
    cond_b = cond[None] if cond.dim() == 2 else cond
    null_b = null_cond[None] if null_cond.dim() == 2 else null_cond
    traj = ddim_timesteps(schedule.T, config.steps)
    with torch.no_grad():
        for t, t_prev in zip(traj[:-1], traj[1:]):
            stack = build_inpaint_input(z, hint, m)
            tt = torch.full((1,), t, dtype=torch.long)
            eps = cfg_predict(model, stack, tt, cond_b, null_b, config.cfg_scale,
                              deep_prompts)
            z = ddim_step(z, eps, t, t_prev, config.eta, schedule, rng)
            ab_p = schedule.alpha_bar(t_prev)
            xi = torch.from_numpy(
                rng.standard_normal(tuple(z.shape)).astype(np.float32)
            ).to(z.dtype)
            z = torch.where(
                m > 0, z, np.sqrt(ab_p) * z0_known + np.sqrt(1 - ab_p) * xi
            )

    decoded = latent_to_canvas(z[0])
    keep = stitched.mask.values[:, :, None]
    pasted = ImageCanvas(
        np.where(keep == 0, stitched.canvas.values, decoded.values)
    )
    if stitched.task.two_pane:
        from .core import pane_split
        image = pane_split(pasted)[1]
    else:
        image = pasted
    return SampleResult(image=image, full=pasted)


def training_step(
    sample_: TrainingSample,
    cond: torch.Tensor,
    null_cond: torch.Tensor,
    model: ToyBackbone,
    schedule: NoiseSchedule,
    cfg_drop_prob: float = 0.0,
    seed: int = 0,
    deep_prompts: DeepPromptSet | None = None,
    rng_label: str = "train",
) -> torch.Tensor:
    """Single-sample denoising loss (noise-prediction MSE over all positions)."""
    if not (0.0 <= cfg_drop_prob < 1.0):
        raise ValueError(f"cfg_drop_prob must lie in [0,1), got {cfg_drop_prob}")
    rng = seeded_rng(seed, rng_label)
    t = int(rng.integers(1, schedule.T + 1))
    z0 = canvas_to_latent(sample_.clean)[None]
    eps = torch.from_numpy(
        rng.standard_normal(tuple(z0.shape)).astype(np.float32)
    ).to(z0.dtype)
    ab = schedule.alpha_bar(t)
    z_t = np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps
    use_null = rng.random() < cfg_drop_prob
    c = null_cond if use_null else cond
    stack = build_inpaint_input(z_t, hint_latent(sample_.stitched)[None],
                                mask_to_latent(sample_.stitched.mask)[None])
    eps_hat = model(stack, torch.full((1,), t, dtype=torch.long),
                    c[None] if c.dim() == 2 else c, deep_prompts)
    loss = ((eps - eps_hat) ** 2).mean()
    if not torch.isfinite(loss):
        raise TrainingDiverged(
            f"non-finite loss at t={t}, seed={seed}, |z_t|={float(z_t.norm()):.4g}"
        )
    return loss


# ---------------------------------------------------------------------------
# Bundled model state: backbone + frozen encoder + prompts (+ pose projector).

@dataclass
class ModelBundle:
    backbone: ToyBackbone
    text_encoder: ToyTextEncoder
    prompt_table: PromptTable
    schedule: NoiseSchedule
    pose_projector: Optional[PoseProjector] = None
    deep_prompts: Optional[DeepPromptSet] = None

    @staticmethod
    def create_toy(image_channels: int = 3, seed: int = 0,
                   tasks: tuple[TaskKind, ...] = (), prompt_seed: int = 0,
                   init_mode=None) -> "ModelBundle":
        from .prompts import InitMode
        backbone = ToyBackbone(image_channels=image_channels, seed=seed)
        enc = ToyTextEncoder(dim=backbone.cond_dim, seed=seed)
        table = PromptTable(dim=backbone.cond_dim)
        mode = init_mode or InitMode.TOKEN_AVGS
        for task in tasks:
            table.add_task(task, mode=mode, seed=prompt_seed)
        projector = None
        if TaskKind.NVS in tasks:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed + 1)
                projector = PoseProjector(backbone.cond_dim)
        return ModelBundle(backbone, enc, table, linear_schedule(), projector)

    def fingerprint(self) -> str:
        return freeze_fingerprint(self.backbone)

    def pose_token(self, pose: RelativePose) -> torch.Tensor:
        if self.pose_projector is None:
            raise ValueError("bundle has no pose projector")
        return project_pose(encode_pose(pose), self.pose_projector)

    def condition(self, task: TaskKind, pose: RelativePose | None = None,
                  null: bool = False) -> torch.Tensor:
        token = None
        if task is TaskKind.NVS:
            if pose is None:
                raise ValueError("view synthesis conditioning needs a pose")
            token = self.pose_token(pose)
        return assemble_condition(self.prompt_table.get(task), self.text_encoder,
                                  pose_token=token, null=null)

    def null_condition_for(self, task: TaskKind) -> torch.Tensor:
        length = self.prompt_table.get(task).shape[0]
        if task is TaskKind.NVS:
            length += 1
        return self.text_encoder(null_condition(length, self.text_encoder.dim))


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    prompt_lr: float = 1e-2
    backbone_lr: float = 1e-3
    weight_decay: float = 0.01
    cfg_drop_prob: float = 0.0
    seed: int = 0
    log_every: int = 50
    eval_every: int = 500
    checkpoint_every: int = 1000
    eval_batches: int = 4


# Paper-scale per-task defaults (learning rates as reported for the large
# backbone); the toy TrainConfig above scales them up for the small model.
PAPER_TRAIN_DEFAULTS = {
    TaskKind.INPAINT: {"batch_size": 32, "prompt_lr": 3e-5, "backbone_lr": None, "steps": 8500},
    TaskKind.OUTPAINT: {"batch_size": 32, "prompt_lr": 3e-5, "backbone_lr": None, "steps": 8500},
    TaskKind.REF_INPAINT: {"batch_size": 16, "prompt_lr": 3e-5, "backbone_lr": None, "steps": 6000},
    TaskKind.LOCAL_SR: {"batch_size": 32, "prompt_lr": 1e-4, "backbone_lr": None, "steps": 15000},
    TaskKind.NVS: {"batch_size": 48, "prompt_lr": 1e-4, "backbone_lr": 1e-5, "steps": 80000},
}


def batched_training_loss(samples, conds, model: ToyBackbone, schedule: NoiseSchedule,
                          seed: int, rng_labels, deep_prompts=None) -> torch.Tensor:
    """Mean denoising loss over a batch in one forward pass.

    Per-sample noise draws stay keyed by (seed, label), so the loss value
    equals the mean of the corresponding single-sample training_step calls.
    """
    stacks, ts, eps_list = [], [], []
    for s, label in zip(samples, rng_labels):
        rng = seeded_rng(seed, label)
        t = int(rng.integers(1, schedule.T + 1))
        z0 = canvas_to_latent(s.clean)[None]
        eps = torch.from_numpy(
            rng.standard_normal(tuple(z0.shape)).astype(np.float32)
        ).to(z0.dtype)
        ab = schedule.alpha_bar(t)
        z_t = np.sqrt(ab) * z0 + np.sqrt(1 - ab) * eps
        stacks.append(build_inpaint_input(
            z_t, hint_latent(s.stitched)[None], mask_to_latent(s.stitched.mask)[None]
        ))
        ts.append(t)
        eps_list.append(eps)
    stack = torch.cat(stacks, dim=0)
    cond = torch.stack([c for c in conds], dim=0)
    eps_true = torch.cat(eps_list, dim=0)
    eps_hat = model(stack, torch.tensor(ts, dtype=torch.long), cond, deep_prompts)
    loss = ((eps_true - eps_hat) ** 2).mean()
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite batched loss (seed {seed})")
    return loss


def _batch_loss(bundle: ModelBundle, task: TaskKind, samples, cfg_drop_prob: float,
                seed: int, step: int) -> torch.Tensor:
    conds, labels = [], []
    null_cond = bundle.null_condition_for(task)
    for i, s in enumerate(samples):
        pose = None
        if task is TaskKind.NVS:
            pose = s.stitched.meta["pose"]
        rng_label = f"train/{step}/{i}"
        drop_rng = seeded_rng(seed, rng_label + "/drop")
        use_null = drop_rng.random() < cfg_drop_prob
        conds.append(null_cond if use_null else bundle.condition(task, pose=pose))
        labels.append(rng_label)
    return batched_training_loss(samples, conds, bundle.backbone, bundle.schedule,
                                 seed, labels, bundle.deep_prompts)


@dataclass
class TrainResult:
    initial_eval_loss: float
    final_eval_loss: float
    metrics: list
    out_dir: Optional[Path]


def _eval_loss(bundle, task, draw_fn, cfg, label="eval") -> float:
    total = 0.0
    with torch.no_grad():
        for b in range(cfg.eval_batches):
            samples = [draw_fn(cfg.seed, -1 - b, i) for i in range(cfg.batch_size)]
            loss = _batch_loss(bundle, task, samples, 0.0, cfg.seed, -1 - b)
            total += float(loss)
    return total / cfg.eval_batches


def train_loop(
    task: TaskKind,
    draw_fn: Callable[[int, int, int], TrainingSample],
    bundle: ModelBundle,
    policy: FreezePolicy,
    cfg: TrainConfig,
    out_dir: Optional[Path] = None,
    eval_hook: Optional[Callable[[int], dict]] = None,
) -> TrainResult:
    """Optimize the parameters a freeze policy allows.

    `draw_fn(seed, step, i)` must be a pure function so runs are
    reproducible and resumable; negative steps are reserved for the fixed
    evaluation probe.
    """
    groups = apply_freeze_policy(bundle.backbone, policy, bundle.prompt_table,
                                 task, bundle.pose_projector)
    if bundle.deep_prompts is not None:
        for p in bundle.deep_prompts.layers.values():
            p.requires_grad_(True)
            groups["prompt"].append(p)
    param_groups = []
    if groups["prompt"]:
        param_groups.append({"params": groups["prompt"], "lr": cfg.prompt_lr})
    if groups["backbone"]:
        param_groups.append({"params": groups["backbone"], "lr": cfg.backbone_lr})
    if not param_groups:
        raise ValueError("nothing to train under this policy")
    opt = torch.optim.AdamW(param_groups, weight_decay=cfg.weight_decay)

    metrics = []
    metrics_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        for sub in ("prompts", "adapters", "backbone"):
            (out_dir / sub).mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"

    def log(rec):
        metrics.append(rec)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")

    initial_eval = _eval_loss(bundle, task, draw_fn, cfg)
    log({"step": 0, "eval_loss": initial_eval})

    final_eval = initial_eval
    for step in range(1, cfg.steps + 1):
        samples = [draw_fn(cfg.seed, step, i) for i in range(cfg.batch_size)]
        loss = _batch_loss(bundle, task, samples, cfg.cfg_drop_prob, cfg.seed, step)
        if not torch.isfinite(loss):
            if out_dir is not None:
                (out_dir / "nan_dump.json").write_text(
                    json.dumps({"step": step, "seed": cfg.seed, "config": asdict(cfg)})
                )
            raise TrainingDiverged(f"NaN loss at step {step} (seed {cfg.seed})")
        opt.zero_grad()
        loss.backward()
        opt.step()

        if step % cfg.log_every == 0 or step == cfg.steps:
            rec = {"step": step, "loss": float(loss.detach()), "lr": cfg.prompt_lr}
            if step % cfg.eval_every == 0 or step == cfg.steps:
                final_eval = _eval_loss(bundle, task, draw_fn, cfg)
                rec["eval_loss"] = final_eval
                if eval_hook is not None:
                    rec.update(eval_hook(step))
            log(rec)
        if out_dir is not None and (step % cfg.checkpoint_every == 0 or step == cfg.steps):
            save_checkpoint(bundle, task, out_dir)

    return TrainResult(initial_eval, final_eval, metrics, out_dir)


def save_checkpoint(bundle: ModelBundle, task: TaskKind, out_dir: Path) -> None:
    from .prompts import save_prompt
    from .adapters import lora_adapters
    out_dir = Path(out_dir)
    fp = bundle.fingerprint()
    save_prompt(bundle.prompt_table, task, out_dir / "prompts" / f"{task.value}.prompt",
                backbone_fingerprint=fp)
    torch.save(bundle.backbone.state_dict(), out_dir / "backbone" / "backbone.pt")
    ads = lora_adapters(bundle.backbone)
    if ads:
        torch.save(
            {name: {"A": ad.lora_a, "B": ad.lora_b, "rank": ad.rank, "scale": ad.scale}
             for name, ad in ads.items()},
            out_dir / "adapters" / "adapters.pt",
        )
    if bundle.pose_projector is not None:
        torch.save(bundle.pose_projector.state_dict(),
                   out_dir / "backbone" / "pose_projector.pt")


# ---------------------------------------------------------------------------
# Two-pass adaptive masking for view synthesis.

@dataclass
class AdaptiveResult:
    image: ImageCanvas
    rough: ImageCanvas
    first_mask: MaskGrid
    second_mask: MaskGrid


def adaptive_sample(
    ref: ImageCanvas,
    ref_object_mask: MaskGrid,
    pose: RelativePose,
    detector: Callable[[ImageCanvas], MaskGrid],
    bundle: ModelBundle,
    config: SamplerConfig,
    dilation_kernel: int = 11,
) -> AdaptiveResult:
    """Rough synthesis with few steps, detector-driven remask, full second pass."""
    from .masks import dilate_mask
    from .stitch import compose_nvs

    if ref_object_mask.is_empty():
        raise ValueError("reference object mask is empty")
    first_mask = dilate_mask(ref_object_mask, dilation_kernel)
    cond_kwargs = dict(pose=pose)
    cond = bundle.condition(TaskKind.NVS, **cond_kwargs)
    null_cond = bundle.null_condition_for(TaskKind.NVS)

    rough_cfg = SamplerConfig(steps=config.rough_steps, eta=config.eta,
                              cfg_scale=config.cfg_scale, seed=config.seed)
    rough = sample(compose_nvs(ref, first_mask, pose), cond, null_cond,
                   bundle.backbone, bundle.schedule, rough_cfg,
                   deep_prompts=bundle.deep_prompts, rng_label="rough").image

    detected = detector(rough)
    if detected.is_empty():
        warnings.warn("detector found no foreground; falling back to the dilated "
                      "reference mask")
        second_mask = first_mask
    else:
        second_mask = dilate_mask(detected, dilation_kernel)

    final = sample(compose_nvs(ref, second_mask, pose), cond, null_cond,
                   bundle.backbone, bundle.schedule, config,
                   deep_prompts=bundle.deep_prompts).image
    return AdaptiveResult(final, rough, first_mask, second_mask)
