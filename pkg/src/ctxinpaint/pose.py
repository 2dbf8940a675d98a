"""Spherical relative camera pose and its projection to one conditioning token."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


class PoseError(ValueError):
    pass


def wrap_angle(phi: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return float((phi + math.pi) % (2 * math.pi) - math.pi)


@dataclass(frozen=True)
class RelativePose:
    """Relative camera motion: polar angle, azimuth, radius offset."""

    theta: float
    phi: float
    r: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.theta, self.phi, self.r)):
            raise PoseError(f"pose components must be finite, got {self}")
        if not (-math.pi <= self.theta <= math.pi):
            raise PoseError(f"theta must lie in [-pi, pi], got {self.theta}")
        object.__setattr__(self, "phi", wrap_angle(self.phi))

    def to_dict(self) -> dict:
        return {"theta": self.theta, "phi": self.phi, "r": self.r}

    @staticmethod
    def from_dict(d: dict) -> "RelativePose":
        return RelativePose(float(d["theta"]), float(d["phi"]), float(d["r"]))


def encode_pose(p: RelativePose) -> np.ndarray:
    """4-vector encoding (dtheta, sin dphi, cos dphi, dr).

    The azimuth is sinusoidally encoded, making the feature 2*pi-periodic
    in the azimuth.
    """
    return np.array(
        [p.theta, math.sin(p.phi), math.cos(p.phi), p.r], dtype=np.float64
    )


POSE_FEATURE_DIM = 4


class PoseProjector(nn.Module):
    """Two affine layers with a smooth nonlinearity: 4 -> hidden -> D.

    The output is exactly one token embedding appended to the task prompt.
    """

    def __init__(self, embed_dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or embed_dim
        self.fc1 = nn.Linear(POSE_FEATURE_DIM, hidden)
        self.act = nn.SiLU()
        self.fc2 = nn.Linear(hidden, embed_dim)
        self.embed_dim = embed_dim

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        if feature.shape[-1] != POSE_FEATURE_DIM:
            raise PoseError(
                f"pose feature must have dim {POSE_FEATURE_DIM}, got {feature.shape[-1]}"
            )
        return self.fc2(self.act(self.fc1(feature)))


def project_pose(feature: np.ndarray, proj: PoseProjector) -> torch.Tensor:
    """Project a pose feature to a single D-dimensional token."""
    f = torch.as_tensor(np.asarray(feature), dtype=torch.float32)
    if f.shape != (POSE_FEATURE_DIM,):
        raise PoseError(f"expected a ({POSE_FEATURE_DIM},) feature, got {tuple(f.shape)}")
    return proj(f)
