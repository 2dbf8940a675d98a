"""Run configuration: a single JSON file, byte-reproducible runs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task: str = "ref_inpaint"
    backbone: str = "toy"            # "toy" or a pretrained-bundle .pt path
    policy: str | None = None        # freeze policy; default derived from task
    prompt_length: int | None = None
    prompt_init: str = "token_avgs"
    lora_rank: int = 8
    # Sampler
    steps: int = 50
    eta: float = 1.0
    cfg_scale: float = 1.0
    rough_steps: int = 10
    # Training
    train_steps: int = 500
    batch_size: int = 4
    prompt_lr: float = 1e-2
    backbone_lr: float = 1e-3
    weight_decay: float = 0.01
    cfg_drop_prob: float = 0.0
    # Bookkeeping
    seed: int = 0
    manifest: str | None = None
    out_dir: str | None = None
    run_dir: str | None = None       # checkpoint root for sample/eval/viz

    @staticmethod
    def from_file(path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON ({exc.msg})") from exc
        return RunConfig.from_dict(raw, source=str(path))

    @staticmethod
    def from_dict(raw: dict, source: str = "<dict>") -> "RunConfig":
        known = {f.name for f in fields(RunConfig)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"{source}: unknown config keys {sorted(unknown)}")
        return RunConfig(**raw)

    def with_overrides(self, **overrides) -> "RunConfig":
        data = asdict(self)
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in data:
                raise ConfigError(f"unknown override {key!r}")
            data[key] = value
        return RunConfig(**data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")
