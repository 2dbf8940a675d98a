"""Command-line entry point.

Subcommands: prep-data, make-masks, train, sample, eval, viz-attn.
Exit codes: 0 ok, 1 runtime failure, 2 input/config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .adapters import DEFAULT_POLICIES, FreezePolicy, inject_lora
from .config import ConfigError, RunConfig
from .core import (
    ImageCanvas,
    TaskKind,
    derive_seed,
    load_mask,
    pane_concat,
    save_image,
    save_mask,
)
from .data import (
    DEFAULT_REF_INPAINT_POLICY,
    ManifestError,
    MaskPolicy,
    compose_with_mask,
    draw_training_sample,
    freeze_validation_masks,
    load_manifest,
    make_draw_fn,
    make_toy_dataset,
)
from .diffusion import (
    ModelBundle,
    SamplerConfig,
    TrainConfig,
    TrainingDiverged,
    sample,
    train_loop,
)
from .metrics import evaluate_pairs
from .prompts import InitMode, PromptCheckpointError, load_prompt
from .stitch import TrainingSample
from .viz import attention_heatmaps, heatmap_to_image


class CliError(Exception):
    """Input or configuration problem; maps to exit code 2."""


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {
        key: getattr(args, key)
        for key in ("task", "seed", "manifest", "out_dir", "run_dir", "train_steps")
        if hasattr(args, key)
    }
    return cfg.with_overrides(**overrides)


def _mask_policy(task: TaskKind) -> MaskPolicy:
    if task is TaskKind.REF_INPAINT:
        return DEFAULT_REF_INPAINT_POLICY
    return MaskPolicy(weights={"irregular": 1.0})


def _build_bundle(cfg: RunConfig, task: TaskKind) -> ModelBundle:
    if cfg.backbone == "toy":
        bundle = ModelBundle.create_toy(tasks=(task,), seed=cfg.seed,
                                        init_mode=InitMode(cfg.prompt_init))
    else:
        from .pretrain import load_pretrained
        if not Path(cfg.backbone).exists():
            raise CliError(f"backbone checkpoint not found: {cfg.backbone}")
        bundle = load_pretrained(cfg.backbone, tasks=(task,), seed=cfg.seed)
    if cfg.prompt_length is not None:
        bundle.prompt_table.add_task(task, length=cfg.prompt_length,
                                     mode=InitMode(cfg.prompt_init), seed=cfg.seed)
    return bundle


def _load_run(cfg: RunConfig, task: TaskKind) -> ModelBundle:
    if not cfg.run_dir:
        raise CliError("this command needs run_dir (checkpoint root)")
    run_dir = Path(cfg.run_dir)
    bundle = _build_bundle(cfg, task)
    backbone_path = run_dir / "backbone" / "backbone.pt"
    if backbone_path.exists():
        policy = FreezePolicy(cfg.policy) if cfg.policy else DEFAULT_POLICIES[task]
        if policy in (FreezePolicy.LORA, FreezePolicy.LORA_PLUS_FIRST_CONV):
            inject_lora(bundle.backbone, rank=cfg.lora_rank, seed=cfg.seed)
        bundle.backbone.load_state_dict(torch.load(backbone_path, weights_only=True))
    prompt_path = run_dir / "prompts" / f"{task.value}.prompt"
    if not prompt_path.exists():
        raise CliError(f"no prompt checkpoint at {prompt_path}")
    fp = bundle.fingerprint()
    try:
        loaded_task, matrix, header = load_prompt(
            prompt_path, expected_dim=bundle.backbone.cond_dim, expected_fingerprint=fp
        )
    except PromptCheckpointError as exc:
        raise CliError(str(exc)) from exc
    bundle.prompt_table.set_matrix(loaded_task, matrix)
    proj_path = run_dir / "backbone" / "pose_projector.pt"
    if proj_path.exists() and bundle.pose_projector is not None:
        bundle.pose_projector.load_state_dict(torch.load(proj_path, weights_only=True))
    return bundle


def _sample_one(bundle: ModelBundle, ts: TrainingSample, cfg: RunConfig,
                seed: int) -> ImageCanvas:
    task = ts.stitched.task
    pose = ts.stitched.meta.get("pose") if ts.stitched.meta else None
    cond = bundle.condition(task, pose=pose)
    null_cond = bundle.null_condition_for(task)
    sampler = SamplerConfig(steps=cfg.steps, eta=cfg.eta, cfg_scale=cfg.cfg_scale,
                            seed=seed, rough_steps=cfg.rough_steps)
    return sample(ts.stitched, cond, null_cond, bundle.backbone, bundle.schedule,
                  sampler, deep_prompts=bundle.deep_prompts).image


# ---------------------------------------------------------------------------
# Subcommands.

def cmd_prep_data(args) -> int:
    out = Path(args.out)
    if args.toy:
        manifest = make_toy_dataset(args.n, args.seed, out)
        records = load_manifest(manifest)
    elif args.manifest:
        records = load_manifest(args.manifest)
        out.mkdir(parents=True, exist_ok=True)
        manifest = out / "manifest.jsonl"
        from .data import save_manifest
        save_manifest(records, manifest)
    else:
        raise CliError("prep-data needs --toy or --manifest")
    n_train = sum(1 for r in records if r.split == "train")
    print(f"manifest: {manifest}")
    print(f"records: {len(records)} ({n_train} train, {len(records) - n_train} val)")
    if args.freeze_val_masks:
        task = TaskKind(args.task)
        index = freeze_validation_masks(records, task, out / "val_masks", args.seed)
        print(f"frozen validation masks: {index}")
    return 0


def cmd_make_masks(args) -> int:
    records = load_manifest(args.manifest)
    task = TaskKind(args.task)
    policy = _mask_policy(task)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index_path = out / "index.jsonl"
    with open(index_path, "w") as fh:
        for i in range(len(records)):
            ts = draw_training_sample(records, task, policy,
                                      derive_seed(args.seed, f"make-masks/{i}"))
            path = out / f"mask_{i:04d}.png"
            save_mask(ts.stitched.mask, path)
            fh.write(json.dumps({
                "index": i,
                "mask_path": str(path),
                "kind": (ts.info or {}).get("mask_kind", task.value),
            }) + "\n")
    print(f"wrote {len(records)} masks to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    if not cfg.manifest:
        raise CliError("train needs a manifest (config key or --manifest)")
    if not cfg.out_dir:
        raise CliError("train needs out_dir")
    task = TaskKind(cfg.task)
    records = load_manifest(cfg.manifest)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.json")  # snapshot before any side effect

    bundle = _build_bundle(cfg, task)
    policy = FreezePolicy(cfg.policy) if cfg.policy else DEFAULT_POLICIES[task]
    if policy in (FreezePolicy.LORA, FreezePolicy.LORA_PLUS_FIRST_CONV):
        inject_lora(bundle.backbone, rank=cfg.lora_rank, seed=cfg.seed)
    train_cfg = TrainConfig(
        steps=cfg.train_steps, batch_size=cfg.batch_size, prompt_lr=cfg.prompt_lr,
        backbone_lr=cfg.backbone_lr, weight_decay=cfg.weight_decay,
        cfg_drop_prob=cfg.cfg_drop_prob, seed=cfg.seed,
    )
    draw = make_draw_fn(records, task, _mask_policy(task))
    result = train_loop(task, draw, bundle, policy, train_cfg, out_dir=out_dir)
    print(f"initial eval loss {result.initial_eval_loss:.4f}, "
          f"final {result.final_eval_loss:.4f}")
    print(f"checkpoints under {out_dir}")
    return 0


def cmd_sample(args) -> int:
    cfg = _config_from_args(args)
    task = TaskKind(cfg.task)
    if not cfg.manifest:
        raise CliError("sample needs a manifest")
    records = load_manifest(cfg.manifest)
    bundle = _load_run(cfg, task)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for index in args.index:
        if not (0 <= index < len(records)):
            raise CliError(f"record index {index} out of range (n={len(records)})")
        rec = records[index]
        if args.mask:
            ts = compose_with_mask(rec, task, load_mask(args.mask))
        else:
            ts = draw_training_sample([rec], task, _mask_policy(task),
                                      derive_seed(cfg.seed, f"sample/{index}"))
        if args.dump_stitched:
            save_image(ts.stitched.canvas, out / f"stitched_{index:04d}.png")
            save_mask(ts.stitched.mask, out / f"stitched_mask_{index:04d}.png")
        image = _sample_one(bundle, ts, cfg, derive_seed(cfg.seed, f"run/{index}"))
        save_image(image, out / f"sample_{index:04d}.png")
        if args.grid:
            w = ts.stitched.pane_width
            inp = ts.stitched.canvas.values[:, -w:]
            mask_rgb = np.repeat(
                ts.stitched.mask.values[:, -w:, None], image.channels, axis=2
            ).astype(np.float32)
            grid = ImageCanvas(np.concatenate([inp, mask_rgb, image.values], axis=1))
            save_image(grid, out / f"grid_{index:04d}.png")
    print(f"wrote {len(args.index)} sample(s) to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    task = TaskKind(cfg.task)
    if not cfg.manifest:
        raise CliError("eval needs a manifest")
    records = load_manifest(cfg.manifest)
    masks_dir = Path(args.masks)
    index_path = masks_dir / "index.jsonl"
    if not index_path.exists():
        raise CliError(
            f"no frozen validation masks at {masks_dir}; run "
            "`ctxinpaint prep-data --freeze-val-masks` first"
        )
    bundle = _load_run(cfg, task)
    pairs = []
    with open(index_path) as fh:
        entries = [json.loads(line) for line in fh if line.strip()]
    if args.limit:
        entries = entries[: args.limit]
    for entry in entries:
        rec = records[entry["record_index"]]
        mask = load_mask(entry["mask_path"])
        ts = compose_with_mask(rec, task, mask)
        image = _sample_one(bundle, ts, cfg,
                            derive_seed(cfg.seed, f"eval/{entry['record_index']}"))
        w = ts.stitched.pane_width
        gt = ImageCanvas(ts.clean.values[:, -w:])
        pairs.append((image, gt))
    report = evaluate_pairs(pairs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(json.dumps(report.to_dict()))
    return 0


def cmd_viz_attn(args) -> int:
    cfg = _config_from_args(args)
    task = TaskKind(cfg.task)
    if not cfg.manifest:
        raise CliError("viz-attn needs a manifest")
    records = load_manifest(cfg.manifest)
    bundle = _load_run(cfg, task)
    n_layers = len(bundle.backbone.attention_blocks())
    layers = [int(s) for s in args.layers.split(",")]
    bad = [li for li in layers if not (0 <= li < n_layers)]
    if bad:
        raise CliError(f"unknown probe layer(s) {bad}; available: 0..{n_layers - 1}")
    steps = [int(s) for s in args.steps.split(",")]
    rec = records[args.index]
    ts = draw_training_sample([rec], task, _mask_policy(task),
                              derive_seed(cfg.seed, f"viz/{args.index}"))
    pose = ts.stitched.meta.get("pose") if ts.stitched.meta else None
    cond = bundle.condition(task, pose=pose)
    null_cond = bundle.null_condition_for(task)
    sampler = SamplerConfig(steps=cfg.steps, eta=cfg.eta, cfg_scale=cfg.cfg_scale,
                            seed=cfg.seed)
    maps = attention_heatmaps(ts.stitched, cond, null_cond, bundle, sampler,
                              layers, steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for (layer, step), heat in maps.items():
        save_image(heatmap_to_image(heat), out / f"attn_layer{layer}_step{step:03d}.png")
    print(f"wrote {len(maps)} heatmap(s) to {out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctxinpaint")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep-data", help="generate or ingest a dataset manifest")
    p.add_argument("--toy", action="store_true")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--task", default="ref_inpaint")
    p.add_argument("--freeze-val-masks", action="store_true")
    p.set_defaults(fn=cmd_prep_data)

    p = sub.add_parser("make-masks", help="emit masks + index for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", default="ref_inpaint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_make_masks)

    p = sub.add_parser("train", help="train prompts/adapters per the run config")
    p.add_argument("--config")
    p.add_argument("--task")
    p.add_argument("--manifest")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--train-steps", dest="train_steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="fill masked canvases from a checkpoint")
    p.add_argument("--config")
    p.add_argument("--task")
    p.add_argument("--manifest")
    p.add_argument("--run-dir", dest="run_dir")
    p.add_argument("--index", type=int, nargs="+", default=[0])
    p.add_argument("--mask")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--dump-stitched", action="store_true")
    p.add_argument("--grid", action="store_true")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="metrics over the validation split")
    p.add_argument("--config")
    p.add_argument("--task")
    p.add_argument("--manifest")
    p.add_argument("--run-dir", dest="run_dir")
    p.add_argument("--masks", required=True, help="frozen validation masks dir")
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("viz-attn", help="attention heatmaps at chosen DDIM steps")
    p.add_argument("--config")
    p.add_argument("--task")
    p.add_argument("--manifest")
    p.add_argument("--run-dir", dest="run_dir")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--layers", default="0,1")
    p.add_argument("--steps", default="1,25,50")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_viz_attn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, ConfigError, ManifestError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training halted: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
