"""Scikit-learn style facade over training and sampling.

`InContextInpainter.fit` prompt-tunes (or adapter-tunes) a backbone on a
manifest; `predict` fills stitched canvases. Parameters follow the
get_params/set_params contract so the estimator composes with standard
model-selection tooling.
"""

from __future__ import annotations

from pathlib import Path

from sklearn.base import BaseEstimator

from .adapters import DEFAULT_POLICIES, FreezePolicy, inject_lora
from .core import ImageCanvas, TaskKind
from .data import (
    DEFAULT_REF_INPAINT_POLICY,
    MaskPolicy,
    load_manifest,
    make_draw_fn,
)
from .diffusion import ModelBundle, SamplerConfig, TrainConfig, sample, train_loop
from .prompts import InitMode
from .stitch import StitchedCanvas


class NotFittedError(RuntimeError):
    pass


class InContextInpainter(BaseEstimator):
    """Reference-guided generation as a fit/predict estimator."""

    def __init__(
        self,
        task: str = "ref_inpaint",
        policy: str | None = None,
        prompt_length: int | None = None,
        prompt_init: str = "token_avgs",
        lora_rank: int = 8,
        train_steps: int = 200,
        batch_size: int = 4,
        prompt_lr: float = 1e-2,
        backbone_lr: float = 1e-3,
        cfg_drop_prob: float = 0.0,
        sample_steps: int = 50,
        eta: float = 1.0,
        cfg_scale: float = 1.0,
        seed: int = 0,
        bundle: ModelBundle | None = None,
    ):
        self.task = task
        self.policy = policy
        self.prompt_length = prompt_length
        self.prompt_init = prompt_init
        self.lora_rank = lora_rank
        self.train_steps = train_steps
        self.batch_size = batch_size
        self.prompt_lr = prompt_lr
        self.backbone_lr = backbone_lr
        self.cfg_drop_prob = cfg_drop_prob
        self.sample_steps = sample_steps
        self.eta = eta
        self.cfg_scale = cfg_scale
        self.seed = seed
        self.bundle = bundle

    def _resolve(self):
        task = TaskKind(self.task)
        policy = FreezePolicy(self.policy) if self.policy else DEFAULT_POLICIES[task]
        return task, policy

    def fit(self, X, y=None):
        """Train on a manifest path or a list of ManifestRecords."""
        task, policy = self._resolve()
        records = load_manifest(X) if isinstance(X, (str, Path)) else list(X)
        if self.bundle is not None:
            bundle = self.bundle
        else:
            bundle = ModelBundle.create_toy(tasks=(task,), seed=self.seed,
                                            init_mode=InitMode(self.prompt_init))
        if not bundle.prompt_table.has_task(task):
            bundle.prompt_table.add_task(task, length=self.prompt_length,
                                         mode=InitMode(self.prompt_init),
                                         seed=self.seed)
        if policy in (FreezePolicy.LORA, FreezePolicy.LORA_PLUS_FIRST_CONV):
            from .adapters import lora_adapters
            if not lora_adapters(bundle.backbone):
                inject_lora(bundle.backbone, rank=self.lora_rank, seed=self.seed)
        mask_policy = (DEFAULT_REF_INPAINT_POLICY if task is TaskKind.REF_INPAINT
                       else MaskPolicy(weights={"irregular": 1.0}))
        cfg = TrainConfig(
            steps=self.train_steps, batch_size=self.batch_size,
            prompt_lr=self.prompt_lr, backbone_lr=self.backbone_lr,
            cfg_drop_prob=self.cfg_drop_prob, seed=self.seed,
        )
        result = train_loop(task, make_draw_fn(records, task, mask_policy),
                            bundle, policy, cfg)
        self.bundle_ = bundle
        self.train_result_ = result
        self.task_ = task
        return self

    def predict(self, X) -> list[ImageCanvas]:
        """Fill a StitchedCanvas (or list of them); returns target panes."""
        if not hasattr(self, "bundle_"):
            raise NotFittedError("call fit before predict")
        single = isinstance(X, StitchedCanvas)
        canvases = [X] if single else list(X)
        outputs = []
        for i, stitched in enumerate(canvases):
            if stitched.task is not self.task_:
                raise ValueError(
                    f"estimator fitted for {self.task_.value}, got {stitched.task.value}"
                )
            pose = stitched.meta.get("pose") if stitched.meta else None
            cond = self.bundle_.condition(self.task_, pose=pose)
            null_cond = self.bundle_.null_condition_for(self.task_)
            config = SamplerConfig(steps=self.sample_steps, eta=self.eta,
                                   cfg_scale=self.cfg_scale, seed=self.seed + i)
            outputs.append(
                sample(stitched, cond, null_cond, self.bundle_.backbone,
                       self.bundle_.schedule, config,
                       deep_prompts=self.bundle_.deep_prompts).image
            )
        return outputs[0] if single else outputs
