"""Trainable task prompts: initialization, storage, and conditioning assembly.

Each task owns a small matrix of embeddings that is the only trainable
surface under the frozen-backbone policy. Prompts can be initialized from
the token embeddings of a natural task description, either token-wise
(cyclic repeat) or as the token average.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
from torch import nn

from .core import TaskKind, seeded_rng
from .backbone import COND_DIM, ToyTextEncoder

# Natural-language task descriptions used for prompt initialization.
TASK_DESCRIPTIONS = {
    TaskKind.INPAINT: (
        "Inpaint the given image with visually coherent and high-fidelity "
        "background and texture"
    ),
    TaskKind.OUTPAINT: (
        "Inpaint the given image with visually coherent and high-fidelity "
        "background and texture"
    ),
    TaskKind.REF_INPAINT: (
        "The whole image is split into two parts with the same size, they share "
        "the same scene/landmark captured with different viewpoints and times"
    ),
    TaskKind.LOCAL_SR: (
        "The right image is the magnified high-resolution patch of the left "
        "image's red square"
    ),
    TaskKind.NVS: (
        "Left is the reference image, while the right one is the target image "
        "with a different viewpoint. The relative pose:"
    ),
}


class InitMode(Enum):
    RANDOM = "random"
    TOKEN_WISE = "token_wise"
    TOKEN_AVGS = "token_avgs"


class PromptError(ValueError):
    pass


class PromptCheckpointError(RuntimeError):
    pass


def embed_description(text: str, dim: int = COND_DIM) -> np.ndarray:
    """Deterministic word-level token embeddings for a description string.

    Stand-in for a pretrained tokenizer+embedding table: each distinct word
    maps to a fixed unit-scale vector derived from its own hash.
    """
    words = text.lower().split()
    if not words:
        raise PromptError("description is empty")
    rows = []
    for word in words:
        rng = seeded_rng(0, f"tokembed/{word}")
        rows.append(rng.standard_normal(dim))
    return np.stack(rows).astype(np.float32)


def init_prompt(
    desc_embeddings, length: int, mode: InitMode, seed: int, dim: int | None = None
) -> np.ndarray:
    """Build an (L, D) prompt matrix under the chosen initialization."""
    if length < 1:
        raise PromptError(f"prompt length must be >= 1, got {length}")
    if mode is InitMode.RANDOM:
        if dim is None:
            if desc_embeddings is None:
                raise PromptError("random init needs dim or description embeddings")
            dim = np.asarray(desc_embeddings).shape[1]
        rng = seeded_rng(seed, "prompt/init")
        return (rng.standard_normal((length, dim)) * 0.02).astype(np.float32)
    desc = np.asarray(desc_embeddings, dtype=np.float32)
    if desc.ndim != 2 or len(desc) == 0:
        raise PromptError(f"{mode.value} init requires a nonempty (N, D) description")
    if mode is InitMode.TOKEN_WISE:
        idx = np.arange(length) % len(desc)
        return desc[idx].copy()
    if mode is InitMode.TOKEN_AVGS:
        return np.repeat(desc.mean(axis=0, keepdims=True), length, axis=0)
    raise PromptError(f"unknown init mode {mode}")


def prompt_param_count(length: int, dim: int) -> int:
    return length * dim


def deep_prompt_param_count(length: int, dim: int, num_layers: int) -> int:
    """Shallow prompt plus one per-layer matrix of the same length."""
    return length * dim * (1 + num_layers)


class PromptTable(nn.Module):
    """Task-keyed trainable prompt matrices.

    The null conditioning used for guidance dropout is a fixed all-zeros
    embedding so the trainable count stays exactly L*D per task.
    """

    def __init__(self, dim: int = COND_DIM):
        super().__init__()
        self.dim = dim
        self.prompts = nn.ParameterDict()
        self.init_modes: dict[str, str] = {}

    def add_task(
        self,
        task: TaskKind,
        length: int | None = None,
        mode: InitMode = InitMode.TOKEN_AVGS,
        seed: int = 0,
        desc_embeddings=None,
    ) -> None:
        length = length or task.default_prompt_length
        if task is TaskKind.NVS:
            # One slot is reserved for the projected pose token.
            length = length - 1
        if mode is not InitMode.RANDOM and desc_embeddings is None:
            desc_embeddings = embed_description(TASK_DESCRIPTIONS[task], self.dim)
        mat = init_prompt(desc_embeddings, length, mode, seed, dim=self.dim)
        self.prompts[task.value] = nn.Parameter(torch.from_numpy(mat.copy()))
        self.init_modes[task.value] = mode.value

    def has_task(self, task: TaskKind) -> bool:
        return task.value in self.prompts

    def get(self, task: TaskKind) -> torch.Tensor:
        if task.value not in self.prompts:
            raise PromptError(f"no prompt stored for task {task.value!r}")
        return self.prompts[task.value]

    def set_matrix(self, task: TaskKind, matrix: np.ndarray, init_mode: str = "loaded"):
        matrix = np.asarray(matrix, dtype=np.float32)
        if matrix.ndim != 2 or matrix.shape[1] != self.dim:
            raise PromptError(
                f"prompt matrix {matrix.shape} incompatible with dim {self.dim}"
            )
        self.prompts[task.value] = nn.Parameter(torch.from_numpy(matrix.copy()))
        self.init_modes[task.value] = init_mode


def null_condition(length: int, dim: int) -> torch.Tensor:
    """Fixed null token sequence for classifier-free guidance."""
    return torch.zeros(length, dim)


def assemble_condition(
    prompt: torch.Tensor,
    text_encoder: ToyTextEncoder,
    pose_token: torch.Tensor | None = None,
    null: bool = False,
) -> torch.Tensor:
    """Build the encoded conditioning sequence.

    Prompt rows followed by the optional pose token, or the null sequence of
    the same length, passed through the frozen encoder.
    """
    if prompt.dim() != 2:
        raise PromptError(f"prompt must be (L, D), got {tuple(prompt.shape)}")
    if prompt.shape[1] != text_encoder.dim:
        raise PromptError(
            f"prompt dim {prompt.shape[1]} != encoder dim {text_encoder.dim}"
        )
    seq = prompt
    if pose_token is not None:
        if pose_token.shape != (prompt.shape[1],):
            raise PromptError(
                f"pose token shape {tuple(pose_token.shape)} != ({prompt.shape[1]},)"
            )
        seq = torch.cat([seq, pose_token[None]], dim=0)
    if null:
        seq = null_condition(seq.shape[0], seq.shape[1])
    return text_encoder(seq)


@dataclass
class DeepPromptSet:
    """Per-cross-attention-layer prompt matrices in conditioning space."""

    layers: dict[int, torch.Tensor]

    @staticmethod
    def create(length: int, dim: int, num_layers: int, seed: int) -> "DeepPromptSet":
        rng = seeded_rng(seed, "prompt/deep")
        return DeepPromptSet(
            {
                i: nn.Parameter(
                    torch.from_numpy(
                        (rng.standard_normal((length, dim)) * 0.02).astype(np.float32)
                    )
                )
                for i in range(num_layers)
            }
        )

    def param_count(self) -> int:
        return sum(int(p.numel()) for p in self.layers.values())


def inject_deep_prompts(
    layer_index: int, base_kv: torch.Tensor, deep: DeepPromptSet | None
) -> torch.Tensor:
    """Prepend the layer's deep-prompt rows to a cross-attention kv sequence."""
    if deep is None or not deep.layers:
        return base_kv
    if layer_index not in deep.layers:
        raise PromptError(f"no deep prompt for layer {layer_index}")
    rows = deep.layers[layer_index]
    if base_kv.dim() == 3:
        rows = rows[None].expand(base_kv.shape[0], -1, -1)
        return torch.cat([rows, base_kv], dim=1)
    return torch.cat([rows, base_kv], dim=0)


# ---------------------------------------------------------------------------
# Prompt checkpoints: one JSON header line + row-major float32 values.

_MAGIC = "ctxinpaint-prompt-v1"


def save_prompt(
    table: PromptTable, task: TaskKind, path, backbone_fingerprint: str = ""
) -> None:
    mat = table.get(task).detach().cpu().numpy().astype(np.float32)
    header = {
        "magic": _MAGIC,
        "task_id": task.value,
        "length": int(mat.shape[0]),
        "dim": int(mat.shape[1]),
        "init_mode": table.init_modes.get(task.value, "unknown"),
        "backbone_fingerprint": backbone_fingerprint,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(mat.tobytes(order="C"))


def load_prompt(path, expected_dim: int | None = None,
                expected_fingerprint: str | None = None):
    """Read a prompt checkpoint; returns (task, matrix, header)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PromptCheckpointError(f"corrupted prompt header in {path}: {exc}") from exc
    if header.get("magic") != _MAGIC:
        raise PromptCheckpointError(f"{path} is not a prompt checkpoint")
    length, dim = header["length"], header["dim"]
    if expected_dim is not None and dim != expected_dim:
        raise PromptCheckpointError(
            f"prompt dim {dim} does not match backbone conditioning dim {expected_dim}"
        )
    if expected_fingerprint is not None and header["backbone_fingerprint"] != expected_fingerprint:
        raise PromptCheckpointError(
            "backbone fingerprint mismatch: checkpoint "
            f"{header['backbone_fingerprint']!r} vs model {expected_fingerprint!r}"
        )
    expected_bytes = length * dim * 4
    if len(payload) != expected_bytes:
        raise PromptCheckpointError(
            f"corrupted prompt payload in {path}: {len(payload)} bytes, "
            f"expected {expected_bytes}"
        )
    mat = np.frombuffer(payload, dtype=np.float32).reshape(length, dim)
    return TaskKind(header["task_id"]), mat, header
