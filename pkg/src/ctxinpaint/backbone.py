"""Desk-scale denoiser backbone and frozen conditioning encoder.

The toy backbone is a small encoder-decoder noise predictor over stitched
pixel grids with self-attention at the 1/4 and 1/8 scales and
cross-attention to the conditioning sequence. It stands in for a large
pretrained latent-diffusion inpainting model: same input layout
[z_t ; masked z_0 ; mask], same conditioning pathway, <5M parameters.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import torch
import torch.nn.functional as F
from torch import nn

COND_DIM = 64


@contextmanager
def _deterministic_init(seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sinusoidal embedding of integer timesteps."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=torch.get_default_dtype(), device=t.device) / half
    )
    args = t.to(freqs.dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    """Residual block with scale-shift (FiLM-style) embedding conditioning.

    Multiplicative modulation lets the embedding gate or even flip feature
    signs, which a purely additive injection cannot express.
    """

    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, 2 * cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.temb_proj(F.silu(temb))[:, :, None, None].chunk(2, dim=1)
        h = self.conv2(F.silu(self.norm2(h) * (1 + scale) + shift))
        return h + self.skip(x)


def _heads_attention(q, k, v, heads):
    b, lq, c = q.shape
    lk = k.shape[1]
    q = q.view(b, lq, heads, c // heads).transpose(1, 2)
    k = k.view(b, lk, heads, c // heads).transpose(1, 2)
    v = v.view(b, lk, heads, c // heads).transpose(1, 2)
    out = F.scaled_dot_product_attention(q, k, v)
    return out.transpose(1, 2).reshape(b, lq, c)


def positional_grid(h: int, w: int, dim: int, device=None) -> torch.Tensor:
    """Fixed 2D sinusoidal positional encoding, shape (1, h*w, dim).

    Half the channels encode the row index, half the column index, so
    relative offsets (in particular the fixed pane-to-pane shift of a
    stitched canvas) are linearly recoverable by attention projections.
    """
    half = dim // 2
    rows = timestep_embedding(torch.arange(h, device=device), half)
    cols = timestep_embedding(torch.arange(w, device=device), dim - half)
    grid = torch.cat(
        [rows[:, None, :].expand(h, w, half), cols[None, :, :].expand(h, w, dim - half)],
        dim=-1,
    )
    return grid.reshape(1, h * w, dim)


class AttnBlock(nn.Module):
    """Self-attention over the spatial grid plus cross-attention to cond.

    Self-attention queries and keys see the normalized features plus a
    fixed 2D positional encoding; without it, copying content across the
    stitched panes by relative position is barely expressible. When
    `capture` is set, the sequence fed to the self-attention projections
    is kept for attention-map probing.
    """

    def __init__(self, ch: int, cond_dim: int = COND_DIM, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.ch = ch
        self.norm1 = nn.GroupNorm(8, ch)
        self.q = nn.Linear(ch, ch)
        self.k = nn.Linear(ch, ch)
        self.v = nn.Linear(ch, ch)
        self.proj = nn.Linear(ch, ch)
        self.norm2 = nn.GroupNorm(8, ch)
        self.cq = nn.Linear(ch, ch)
        self.ck = nn.Linear(cond_dim, ch)
        self.cv = nn.Linear(cond_dim, ch)
        self.cproj = nn.Linear(ch, ch)
        self.capture = False
        self.captured_seq = None
        self.captured_shape = None
        self._pos_cache: dict = {}

    def _pos(self, h, w, device):
        key = (h, w)
        if key not in self._pos_cache:
            self._pos_cache[key] = positional_grid(h, w, self.ch, device)
        return self._pos_cache[key]

    def forward(self, x, cond):
        b, c, h, w = x.shape
        seq = self.norm1(x).flatten(2).transpose(1, 2)
        qk_in = seq + self._pos(h, w, x.device).to(seq.dtype)
        if self.capture:
            self.captured_seq = qk_in.detach().clone()
            self.captured_shape = (h, w)
        attn = _heads_attention(self.q(qk_in), self.k(qk_in), self.v(seq), self.heads)
        x = x + self.proj(attn).transpose(1, 2).view(b, c, h, w)

        seq = self.norm2(x).flatten(2).transpose(1, 2)
        cross = _heads_attention(self.cq(seq), self.ck(cond), self.cv(cond), self.heads)
        return x + self.cproj(cross).transpose(1, 2).view(b, c, h, w)

    def lora_sites(self):
        return {
            "q": self.q, "k": self.k, "v": self.v, "proj": self.proj,
            "cq": self.cq, "ck": self.ck, "cv": self.cv, "cproj": self.cproj,
        }


class Downsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class ToyBackbone(nn.Module):
    """Small noise predictor over [z_t ; masked z_0 ; mask] channel stacks."""

    def __init__(self, image_channels: int = 3, cond_dim: int = COND_DIM, seed: int = 0):
        super().__init__()
        self.image_channels = image_channels
        self.cond_dim = cond_dim
        self.in_channels = 2 * image_channels + 1
        temb = 128
        with _deterministic_init(seed):
            self.time_embed = nn.Sequential(
                nn.Linear(64, temb), nn.SiLU(), nn.Linear(temb, temb)
            )
            # Pooled conditioning joins the timestep embedding (the usual
            # second conditioning pathway besides cross-attention), so the
            # denoiser's behavior is gated on the prompt, not just its
            # spatial attention.
            self.cond_pool = nn.Linear(cond_dim, temb)
            self.stem = nn.Conv2d(self.in_channels, 32, 3, padding=1)
            self.res1 = ResBlock(32, 48, temb)
            self.down1 = Downsample(48)
            self.res2 = ResBlock(48, 64, temb)
            self.attn_q2 = AttnBlock(64, cond_dim)          # 1/2 scale
            self.down2 = Downsample(64)
            self.attn_q4 = AttnBlock(64, cond_dim)          # 1/4 scale
            self.res3 = ResBlock(64, 96, temb)
            self.down3 = Downsample(96)
            self.attn_q8 = AttnBlock(96, cond_dim)          # 1/8 scale
            self.mid1 = ResBlock(96, 96, temb)
            self.attn_mid = AttnBlock(96, cond_dim)
            self.mid2 = ResBlock(96, 96, temb)
            self.up3 = Upsample(96)
            self.res_u3 = ResBlock(96 + 64, 64, temb)
            self.attn_u4 = AttnBlock(64, cond_dim)
            self.up2 = Upsample(64)
            self.res_u2 = ResBlock(64 + 64, 48, temb)
            self.attn_u2 = AttnBlock(48, cond_dim)
            self.up1 = Upsample(48)
            self.res_u1 = ResBlock(48 + 48, 32, temb)
            self.out_norm = nn.GroupNorm(8, 32)
            self.out_conv = nn.Conv2d(32, image_channels, 3, padding=1)
            # Output gate (identity at init): lets the embedding rescale or
            # flip the prediction as a whole, so conditioning can select
            # between globally different behaviors.
            self.out_gate = nn.Linear(temb, image_channels)
            nn.init.zeros_(self.out_gate.weight)
            nn.init.zeros_(self.out_gate.bias)

    # Attention blocks in forward order; indices double as cross-attention
    # layer ids for deep-prompt injection and probing.
    def attention_blocks(self) -> list[AttnBlock]:
        return [self.attn_q2, self.attn_q4, self.attn_q8, self.attn_mid,
                self.attn_u4, self.attn_u2]

    def attention_scales(self) -> list[float]:
        return [0.5, 0.25, 0.125, 0.125, 0.25, 0.5]

    def first_conv(self) -> nn.Conv2d:
        return self.stem

    def forward(self, z_stack: torch.Tensor, t: torch.Tensor, cond: torch.Tensor,
                deep_prompts=None) -> torch.Tensor:
        if z_stack.shape[1] != self.in_channels:
            raise ValueError(
                f"expected {self.in_channels} input channels, got {z_stack.shape[1]}"
            )
        if z_stack.shape[2] % 8 or z_stack.shape[3] % 8:
            raise ValueError("spatial size must be divisible by 8")
        if cond.shape[-1] != self.cond_dim:
            raise ValueError(f"conditioning dim {cond.shape[-1]} != {self.cond_dim}")

        def layer_cond(index):
            if deep_prompts is None:
                return cond
            from .prompts import inject_deep_prompts
            return inject_deep_prompts(index, cond, deep_prompts)

        temb = self.time_embed(timestep_embedding(t, 64)) + self.cond_pool(cond.mean(dim=-2))
        h0 = self.stem(z_stack)
        h1 = self.res1(h0, temb)
        h2 = self.attn_q2(self.res2(self.down1(h1), temb), layer_cond(0))
        h3 = self.attn_q4(self.down2(h2), layer_cond(1))
        h4 = self.attn_q8(self.down3(self.res3(h3, temb)), layer_cond(2))
        m = self.mid2(self.attn_mid(self.mid1(h4, temb), layer_cond(3)), temb)
        u = self.res_u3(torch.cat([self.up3(m), h3], dim=1), temb)
        u = self.attn_u4(u, layer_cond(4))
        u = self.res_u2(torch.cat([self.up2(u), h2], dim=1), temb)
        u = self.attn_u2(u, layer_cond(5))
        u = self.res_u1(torch.cat([self.up1(u), h1], dim=1), temb)
        gate = 1 + self.out_gate(F.silu(temb))[:, :, None, None]
        return gate * self.out_conv(F.silu(self.out_norm(u)))


class ToyTextEncoder(nn.Module):
    """Frozen stand-in for the pretrained text encoder.

    A small deterministic transformer over D-dimensional token embeddings;
    never trained, so conditioning gradients flow only into the inputs
    (prompt rows and the pose token).
    """

    MAX_LEN = 128

    def __init__(self, dim: int = COND_DIM, layers: int = 2, heads: int = 4, seed: int = 0):
        super().__init__()
        self.dim = dim
        with _deterministic_init(seed):
            layer = nn.TransformerEncoderLayer(
                d_model=dim, nhead=heads, dim_feedforward=2 * dim,
                batch_first=True, dropout=0.0,
            )
            self.encoder = nn.TransformerEncoder(layer, num_layers=layers)
        pos = timestep_embedding(torch.arange(self.MAX_LEN), dim)
        self.register_buffer("positional", pos)
        self.requires_grad_(False)

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        if seq.shape[-1] != self.dim:
            raise ValueError(f"token dim {seq.shape[-1]} != encoder dim {self.dim}")
        if seq.shape[-2] > self.MAX_LEN:
            raise ValueError(f"sequence length {seq.shape[-2]} exceeds {self.MAX_LEN}")
        squeeze = seq.dim() == 2
        if squeeze:
            seq = seq[None]
        out = self.encoder(seq + self.positional[: seq.shape[1]])
        return out[0] if squeeze else out
