"""Freeze policies, low-rank adapters, and trainable-parameter accounting."""

from __future__ import annotations

import hashlib
from enum import Enum

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import TaskKind, seeded_rng
from .backbone import ToyBackbone


class FreezePolicy(Enum):
    PROMPT_ONLY = "prompt_only"
    LORA = "lora"
    LORA_PLUS_FIRST_CONV = "lora_plus_first_conv"
    FULL_FINETUNE = "full_finetune"


# Inpainting-based tasks keep the backbone frozen; visual-conditioned ones
# add low-rank adapters plus the first convolution; multimodal-conditioned
# ones fine-tune everything.
DEFAULT_POLICIES = {
    TaskKind.INPAINT: FreezePolicy.PROMPT_ONLY,
    TaskKind.OUTPAINT: FreezePolicy.PROMPT_ONLY,
    TaskKind.REF_INPAINT: FreezePolicy.PROMPT_ONLY,
    TaskKind.LOCAL_SR: FreezePolicy.LORA_PLUS_FIRST_CONV,
    TaskKind.NVS: FreezePolicy.FULL_FINETUNE,
}

DEFAULT_LORA_RANK = 64


class AdapterError(ValueError):
    pass


class LoRALinear(nn.Module):
    """Linear layer with a zero-initialized low-rank residual branch.

    With B = 0 the wrapped layer is exactly the frozen base; merging folds
    scale * B @ A into the base weight once.
    """

    def __init__(self, base: nn.Linear, rank: int, alpha: float | None = None,
                 seed: int = 0, site: str = ""):
        super().__init__()
        d_out, d_in = base.weight.shape
        if rank > min(d_in, d_out):
            raise AdapterError(f"rank {rank} exceeds min({d_in}, {d_out})")
        if rank < 1:
            raise AdapterError(f"rank must be >= 1, got {rank}")
        self.base = base
        self.rank = rank
        self.scale = (alpha if alpha is not None else rank) / rank
        rng = seeded_rng(seed, f"lora/{site}")
        a = (rng.standard_normal((rank, d_in)) * 0.02).astype(np.float32)
        self.lora_a = nn.Parameter(torch.from_numpy(a))
        self.lora_b = nn.Parameter(torch.zeros(d_out, rank))
        self.merged = False
        self.site = site

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.base(x)
        if self.merged:
            return y
        return y + self.scale * F.linear(F.linear(x, self.lora_a), self.lora_b)

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.scale * self.lora_b @ self.lora_a

    def merge(self) -> None:
        if self.merged:
            raise AdapterError(f"adapter {self.site!r} already merged")
        with torch.no_grad():
            self.base.weight += self.scale * self.lora_b @ self.lora_a
        self.merged = True

    def trainable_count(self) -> int:
        d_out, d_in = self.base.weight.shape
        return self.rank * (d_in + d_out)


def apply_lora(x: torch.Tensor, weight: torch.Tensor, adapter: LoRALinear) -> torch.Tensor:
    """Functional adapted forward: W x + scale * B (A x)."""
    return F.linear(x, weight) + adapter.scale * F.linear(
        F.linear(x, adapter.lora_a), adapter.lora_b
    )


def merge_lora(weight: torch.Tensor, adapter: LoRALinear) -> torch.Tensor:
    """Dense merged weight W + scale * B @ A."""
    return weight + adapter.scale * adapter.lora_b @ adapter.lora_a


def inject_lora(backbone: ToyBackbone, rank: int = DEFAULT_LORA_RANK,
                alpha: float | None = None, seed: int = 0) -> dict[str, LoRALinear]:
    """Wrap every attention projection of the backbone with an adapter.

    Sites: q/k/v/out of self-attention and cross-attention in each block.
    """
    adapters: dict[str, LoRALinear] = {}
    for i, block in enumerate(backbone.attention_blocks()):
        for name, lin in block.lora_sites().items():
            if isinstance(lin, LoRALinear):
                raise AdapterError(f"attn{i}.{name} already has an adapter")
            site = f"attn{i}.{name}"
            wrapped = LoRALinear(lin, rank, alpha=alpha, seed=seed, site=site)
            setattr(block, name, wrapped)
            adapters[site] = wrapped
    return adapters


def lora_adapters(backbone: ToyBackbone) -> dict[str, LoRALinear]:
    return {
        name: mod for name, mod in backbone.named_modules() if isinstance(mod, LoRALinear)
    }


def apply_freeze_policy(
    backbone: ToyBackbone,
    policy: FreezePolicy,
    prompt_table=None,
    task: TaskKind | None = None,
    pose_projector=None,
):
    """Set requires_grad flags; returns {'prompt': [...], 'backbone': [...]}.

    The active task's prompt always trains. The pose projector trains only
    when the backbone itself is allowed to adapt.
    """
    for p in backbone.parameters():
        p.requires_grad_(False)

    backbone_params: list[nn.Parameter] = []
    if policy in (FreezePolicy.LORA, FreezePolicy.LORA_PLUS_FIRST_CONV):
        adapters = lora_adapters(backbone)
        if not adapters:
            raise AdapterError(f"policy {policy.value} requires injected adapters")
        for ad in adapters.values():
            ad.lora_a.requires_grad_(True)
            ad.lora_b.requires_grad_(True)
            backbone_params += [ad.lora_a, ad.lora_b]
    if policy is FreezePolicy.LORA_PLUS_FIRST_CONV:
        for p in backbone.first_conv().parameters():
            p.requires_grad_(True)
            backbone_params.append(p)
    if policy is FreezePolicy.FULL_FINETUNE:
        for p in backbone.parameters():
            p.requires_grad_(True)
        backbone_params = list(backbone.parameters())

    prompt_params: list[nn.Parameter] = []
    if prompt_table is not None:
        for p in prompt_table.parameters():
            p.requires_grad_(False)
        if task is not None and prompt_table.has_task(task):
            prm = prompt_table.get(task)
            prm.requires_grad_(True)
            prompt_params.append(prm)
    if pose_projector is not None:
        train_proj = policy is not FreezePolicy.PROMPT_ONLY
        for p in pose_projector.parameters():
            p.requires_grad_(train_proj)
            if train_proj:
                backbone_params.append(p)
    return {"prompt": prompt_params, "backbone": backbone_params}


def count_trainable(
    backbone: ToyBackbone,
    policy: FreezePolicy,
    prompt_table=None,
    task: TaskKind | None = None,
    pose_projector=None,
) -> int:
    """Analytic trainable-scalar count for a resolved policy.

    Cross-checked in tests against brute-force enumeration of flagged
    parameters after apply_freeze_policy.
    """
    total = 0
    if prompt_table is not None and task is not None and prompt_table.has_task(task):
        total += int(prompt_table.get(task).numel())
    if policy in (FreezePolicy.LORA, FreezePolicy.LORA_PLUS_FIRST_CONV):
        for ad in lora_adapters(backbone).values():
            total += ad.trainable_count()
    if policy is FreezePolicy.LORA_PLUS_FIRST_CONV:
        total += sum(int(p.numel()) for p in backbone.first_conv().parameters())
    if policy is FreezePolicy.FULL_FINETUNE:
        total += sum(int(p.numel()) for p in backbone.parameters())
    if pose_projector is not None and policy is not FreezePolicy.PROMPT_ONLY:
        total += sum(int(p.numel()) for p in pose_projector.parameters())
    return total


def enumerate_trainable(*modules) -> int:
    """Brute-force walk of the parameter tree counting flagged scalars."""
    seen = set()
    total = 0
    for mod in modules:
        if mod is None:
            continue
        for p in mod.parameters():
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                total += int(p.numel())
    return total


def freeze_fingerprint(model: nn.Module) -> str:
    """Order-stable digest of all model parameter bytes (sorted by name)."""
    digest = hashlib.sha256()
    for name, param in sorted(model.named_parameters()):
        digest.update(name.encode("utf-8"))
        digest.update(param.detach().cpu().to(torch.float32).contiguous().numpy().tobytes())
    return digest.hexdigest()
