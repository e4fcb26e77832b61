"""Trajectory update: motion tokens, alternating time/space transformer, residual head."""

from __future__ import annotations

import torch
from torch import nn

from .nn import MLP, MultiHeadAttention, ShapeError, sinusoidal_encode


class TokenBuilder(nn.Module):
    """Builds (T, N, D) motion tokens from correlation, features, flow, position and time."""

    def __init__(self, fuse_dim: int, channels: int, flow_dim: int = 32, pos_dim: int = 16, time_dim: int = 16):
        super().__init__()
        self.fuse_dim = fuse_dim
        self.channels = channels
        self.flow_dim = flow_dim
        self.pos_dim = pos_dim
        self.time_dim = time_dim
        self.dim = fuse_dim + channels + 3 * flow_dim
        self.pos_proj = nn.Linear(3 * pos_dim, self.dim)
        self.time_proj = nn.Linear(time_dim, self.dim)

    def forward(self, c_fuse, q_feat, q_xyz, q_xyz0, timestamps) -> torch.Tensor:
        return build_tokens(self, c_fuse, q_feat, q_xyz, q_xyz0, timestamps)


def build_tokens(builder: TokenBuilder, c_fuse, q_feat, q_xyz, q_xyz0, timestamps) -> torch.Tensor:
    t, n = q_xyz.shape[:2]
    for name, x in (("c_fuse", c_fuse), ("q_feat", q_feat), ("q_xyz0", q_xyz0)):
        if x.shape[:2] != (t, n):
            raise ShapeError(f"{name} grid {tuple(x.shape[:2])} does not match ({t}, {n})")
    if c_fuse.shape[-1] != builder.fuse_dim or q_feat.shape[-1] != builder.channels:
        raise ShapeError("correlation or feature width does not match the token builder")
    ts = torch.as_tensor(timestamps, dtype=q_xyz.dtype)
    if ts.shape != (t,):
        raise ShapeError(f"expected {t} timestamps, got shape {tuple(ts.shape)}")
    motion = torch.cat((c_fuse, q_feat, sinusoidal_encode(q_xyz - q_xyz0, builder.flow_dim)), dim=-1)
    pos = builder.pos_proj(sinusoidal_encode(q_xyz, builder.pos_dim))
    time = builder.time_proj(sinusoidal_encode(ts[:, None], builder.time_dim))
    return motion + pos + time[:, None, :]


class TransformerBlock(nn.Module):
    """Pre-norm attention + MLP, attending along time (axis 0) or space (axis 1)."""

    def __init__(self, dim: int, heads: int, axis: str, mlp_ratio: int = 2):
        super().__init__()
        if axis not in ("time", "space"):
            raise ValueError(f"axis must be 'time' or 'space', got {axis!r}")
        self.axis = axis
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP([dim, mlp_ratio * dim, dim], activation="gelu")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (T, N, D); attention runs over the second-to-last axis
        if self.axis == "time":
            x = x.transpose(0, 1)
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        if self.axis == "time":
            x = x.transpose(0, 1)
        return x


class SpatioTemporalTransformer(nn.Module):
    def __init__(self, dim: int, depth: int = 3, heads: int = 4, mlp_ratio: int = 2):
        super().__init__()
        if dim % heads:
            raise ValueError(f"token dim {dim} not divisible by heads {heads}")
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, heads, "time" if i % 2 == 0 else "space", mlp_ratio)
            for i in range(2 * depth)
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            tokens = block(tokens)
        return tokens


class Predictor(nn.Module):
    """Shared two-layer head mapping each token to (delta_xyz, delta_feat)."""

    def __init__(self, dim: int, channels: int):
        super().__init__()
        self.channels = channels
        self.head = MLP([dim, dim, 3 + channels], activation="gelu")

    def forward(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.head(tokens)
        return out[..., :3], out[..., 3:]

    @property
    def final_layer_prefix(self) -> str:
        return f"head.layers.{len(self.head.layers) - 1}."


class STTU(nn.Module):
    def __init__(self, fuse_dim: int, channels: int, flow_dim: int = 32, pos_dim: int = 16,
                 time_dim: int = 16, depth: int = 3, heads: int = 4, mlp_ratio: int = 2):
        super().__init__()
        self.tokens = TokenBuilder(fuse_dim, channels, flow_dim, pos_dim, time_dim)
        self.transformer = SpatioTemporalTransformer(self.tokens.dim, depth, heads, mlp_ratio)
        self.predictor = Predictor(self.tokens.dim, channels)

    def forward(self, c_fuse, q_feat, q_xyz, q_xyz0, timestamps):
        tokens = self.tokens(c_fuse, q_feat, q_xyz, q_xyz0, timestamps)
        return self.predictor(self.transformer(tokens))
