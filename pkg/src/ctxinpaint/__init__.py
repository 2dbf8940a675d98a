"""In-context inpainting on stitched canvases with per-task prompt tuning."""

from .core import (
    ImageCanvas,
    MaskGrid,
    ShapeError,
    TaskKind,
    ValueRangeError,
    derive_seed,
    load_image,
    load_mask,
    pane_concat,
    pane_split,
    save_image,
    save_mask,
    seeded_rng,
)
from .masks import (
    MaskParams,
    Match,
    MatchFallbackError,
    MatchSet,
    dilate_mask,
    gen_irregular_mask,
    gen_matching_mask,
    gen_nvs_mask,
    gen_outpaint_mask,
)
from .stitch import (
    PatchBox,
    StitchedCanvas,
    TrainingSample,
    compose_local_sr,
    compose_nvs,
    compose_plain,
    compose_ref_inpaint,
)
from .pose import PoseProjector, RelativePose, encode_pose, project_pose, wrap_angle
from .backbone import ToyBackbone, ToyTextEncoder
from .prompts import (
    DeepPromptSet,
    InitMode,
    PromptTable,
    init_prompt,
    load_prompt,
    save_prompt,
)
from .adapters import (
    DEFAULT_POLICIES,
    FreezePolicy,
    LoRALinear,
    apply_freeze_policy,
    count_trainable,
    enumerate_trainable,
    freeze_fingerprint,
    inject_lora,
    merge_lora,
)
from .diffusion import (
    ModelBundle,
    NoiseSchedule,
    SamplerConfig,
    TrainConfig,
    adaptive_sample,
    ddim_sigma,
    ddim_step,
    linear_schedule,
    sample,
    train_loop,
    training_step,
)
from .metrics import (
    AttentionProbe,
    MetricReport,
    attention_score_map,
    evaluate_pairs,
    psnr,
    register_metric,
    ssim,
)
from .data import (
    ManifestRecord,
    MaskPolicy,
    draw_training_sample,
    filter_cooccurrence,
    load_manifest,
    make_toy_dataset,
    save_manifest,
)
from .pretrain import (
    PretrainConfig,
    load_pretrained,
    pretrain_backbone,
    save_pretrained,
)
from .estimator import InContextInpainter
from .config import RunConfig

__version__ = "0.1.0"

__all__ = [
    "ImageCanvas", "MaskGrid", "TaskKind", "ShapeError", "ValueRangeError",
    "seeded_rng", "derive_seed", "pane_concat", "pane_split",
    "load_image", "save_image", "load_mask", "save_mask",
    "Match", "MatchSet", "MaskParams", "MatchFallbackError",
    "gen_irregular_mask", "gen_matching_mask", "gen_outpaint_mask",
    "gen_nvs_mask", "dilate_mask",
    "PatchBox", "StitchedCanvas", "TrainingSample",
    "compose_ref_inpaint", "compose_plain", "compose_local_sr", "compose_nvs",
    "RelativePose", "PoseProjector", "encode_pose", "project_pose", "wrap_angle",
    "ToyBackbone", "ToyTextEncoder",
    "InitMode", "PromptTable", "DeepPromptSet", "init_prompt",
    "save_prompt", "load_prompt",
    "FreezePolicy", "DEFAULT_POLICIES", "LoRALinear", "inject_lora", "merge_lora",
    "apply_freeze_policy", "count_trainable", "enumerate_trainable",
    "freeze_fingerprint",
    "NoiseSchedule", "linear_schedule", "SamplerConfig", "TrainConfig",
    "ModelBundle", "ddim_sigma", "ddim_step", "sample", "training_step",
    "train_loop", "adaptive_sample",
    "psnr", "ssim", "AttentionProbe", "attention_score_map", "MetricReport",
    "evaluate_pairs", "register_metric",
    "ManifestRecord", "MaskPolicy", "load_manifest", "save_manifest",
    "filter_cooccurrence", "draw_training_sample", "make_toy_dataset",
    "PretrainConfig", "pretrain_backbone", "save_pretrained", "load_pretrained",
    "InContextInpainter", "RunConfig",
]
