"""Truncated feature correlation and the point / voxel correlation branches.

Tensors are laid out (T, N, ...) for trajectories and (T, M, ...) for padded
frame features. Index selections (top-k, nearest candidates, cell membership)
are computed on detached values and act as constants for autograd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import torch
from torch import nn

from .nn import MLP, ShapeError


class CorrelationError(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


class TruncatedCorrelation(NamedTuple):
    indices: torch.Tensor  # (T, N, m) long, into the padded frame axis
    values: torch.Tensor  # (T, N, m) similarity, descending along m


@dataclass
class PaddedFrames:
    """Downsampled frames stacked along time, padded to a common size."""

    points: torch.Tensor  # (T, M, 3)
    feats: torch.Tensor  # (T, M, C)
    valid: torch.Tensor  # (T, M) bool

    @classmethod
    def stack(cls, frames: Sequence) -> "PaddedFrames":
        sizes = [f.points.shape[0] for f in frames]
        m = max(sizes)
        c = frames[0].feats.shape[-1]
        ref = frames[0].feats
        if all(s == m for s in sizes):
            return cls(
                torch.stack([f.points for f in frames]),
                torch.stack([f.feats for f in frames]),
                torch.ones(len(frames), m, dtype=torch.bool),
            )
        pts = torch.zeros(len(frames), m, 3, dtype=ref.dtype)
        feats = ref.new_zeros(len(frames), m, c)
        valid = torch.zeros(len(frames), m, dtype=torch.bool)
        pts_rows, feat_rows = [], []
        for t, (f, s) in enumerate(zip(frames, sizes)):
            pad = m - s
            pts_rows.append(torch.cat((f.points, pts.new_zeros(pad, 3))))
            feat_rows.append(torch.cat((f.feats, feats.new_zeros(pad, c))))
            valid[t, :s] = True
        return cls(torch.stack(pts_rows), torch.stack(feat_rows), valid)

    @property
    def min_size(self) -> int:
        return int(self.valid.sum(dim=1).min())


def stable_topk(scores: torch.Tensor, k: int, largest: bool = True) -> torch.Tensor:
    """Indices of the k best scores along the last axis, ties to the lowest index."""
    order = torch.sort(scores.detach(), dim=-1, descending=largest, stable=True).indices
    return order[..., :k]


def similarity_truncate(
    q_feat: torch.Tensor, frames: PaddedFrames, m_trunc: int
) -> TruncatedCorrelation:
    """Scaled dot-product similarity against every frame point, keeping the top ``m_trunc``."""
    c = q_feat.shape[-1]
    if frames.feats.shape[-1] != c:
        raise ShapeError(f"feature width {c} does not match frame features {frames.feats.shape[-1]}")
    if m_trunc > frames.min_size:
        raise ValueError(f"m_trunc {m_trunc} exceeds smallest frame size {frames.min_size}")
    sim = torch.einsum("tnc,tmc->tnm", q_feat, frames.feats) / math.sqrt(c)
    ranked = sim.masked_fill(~frames.valid[:, None, :], float("-inf"))
    idx = stable_topk(ranked, m_trunc)
    return TruncatedCorrelation(idx, torch.gather(sim, 2, idx))


def gather_candidates(trunc: TruncatedCorrelation, frames: PaddedFrames) -> torch.Tensor:
    """Positions of the truncated candidates, (T, N, m, 3)."""
    t, n, m = trunc.indices.shape
    flat = trunc.indices.reshape(t, n * m, 1).expand(-1, -1, 3)
    return torch.gather(frames.points, 1, flat).reshape(t, n, m, 3)


class PointBranch(nn.Module):
    def __init__(self, m_k: int = 16, hidden: int = 32, out_dim: int = 64):
        super().__init__()
        self.m_k = m_k
        self.out_dim = out_dim
        self.mlp = MLP([4, hidden, out_dim], activation="relu")

    def forward(self, q_xyz, trunc: TruncatedCorrelation, cand_xyz) -> torch.Tensor:
        m_k = min(self.m_k, trunc.values.shape[-1]) or 1
        return point_branch(q_xyz, trunc, cand_xyz, m_k, self.mlp)


def point_branch(q_xyz, trunc: TruncatedCorrelation, cand_xyz, m_k: int, mlp: nn.Module) -> torch.Tensor:
    """Max-pooled MLP over [similarity, offset] of the m_k spatially nearest candidates."""
    m = trunc.values.shape[-1]
    if m == 0:
        raise CorrelationError("no truncated candidates (degenerate frame)")
    if m_k > m:
        raise ValueError(f"m_k {m_k} exceeds truncated candidate count {m}")
    offsets = cand_xyz - q_xyz[..., None, :]
    near = stable_topk((offsets * offsets).sum(-1), m_k, largest=False)
    vals = torch.gather(trunc.values, -1, near)
    offs = torch.gather(offsets, -2, near[..., None].expand(*near.shape, 3))
    return mlp(torch.cat((vals[..., None], offs), dim=-1)).amax(dim=-2)


def voxel_cells_torch(offsets: torch.Tensor, radius: float, resolution: int) -> torch.Tensor:
    """Torch twin of ``geometry.voxel_cells``: flat cell index or -1 outside the cube."""
    off = offsets.detach().to(torch.float64)
    inside = (off.abs() <= radius).all(dim=-1)
    u = (off + radius) * (resolution / (2.0 * radius))
    cell = (torch.ceil(u).long() - 1).clamp(0, resolution - 1)
    flat = (cell[..., 0] * resolution + cell[..., 1]) * resolution + cell[..., 2]
    return torch.where(inside, flat, torch.full_like(flat, -1))


def subcube_averages(values, offsets, radius: float, resolution: int) -> torch.Tensor:
    """Mean similarity per sub-cube, zero for empty cells; shape (..., a^3)."""
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    n_cells = resolution**3
    cells = voxel_cells_torch(offsets, radius, resolution)
    # points outside the cube go to a spill bin that is dropped afterwards
    cells = torch.where(cells < 0, torch.full_like(cells, n_cells), cells)
    shape = (*values.shape[:-1], n_cells + 1)
    sums = values.new_zeros(shape).scatter_add(-1, cells, values)
    counts = values.new_zeros(shape).scatter_add(-1, cells, torch.ones_like(values))
    return sums[..., :n_cells] / counts[..., :n_cells].clamp(min=1.0)


class VoxelBranch(nn.Module):
    def __init__(self, radii: Sequence[float] = (0.25, 0.5, 1.0), resolution: int = 3,
                 hidden: int = 32, out_dim: int = 32):
        super().__init__()
        if not radii or any(r <= 0 for r in radii):
            raise ValueError(f"radii must be non-empty and positive, got {radii}")
        self.radii = tuple(float(r) for r in radii)
        self.resolution = resolution
        self.out_dim = out_dim * len(self.radii)
        self.mlps = nn.ModuleList(
            MLP([resolution**3, hidden, out_dim], activation="relu") for _ in self.radii
        )

    def forward(self, q_xyz, trunc: TruncatedCorrelation, cand_xyz) -> torch.Tensor:
        offsets = cand_xyz - q_xyz[..., None, :]
        return torch.cat(
            [mlp(subcube_averages(trunc.values, offsets, r, self.resolution))
             for r, mlp in zip(self.radii, self.mlps)],
            dim=-1,
        )


class Fuse(nn.Module):
    """Concatenate both branch features and project; an ablated branch is zero-filled."""

    def __init__(self, point_dim: int, voxel_dim: int, out_dim: int,
                 use_point: bool = True, use_voxel: bool = True):
        super().__init__()
        if not (use_point or use_voxel):
            raise ConfigurationError("at least one correlation branch must be enabled")
        self.point_dim = point_dim
        self.voxel_dim = voxel_dim
        self.use_point = use_point
        self.use_voxel = use_voxel
        self.proj = nn.Linear(point_dim + voxel_dim, out_dim)

    def forward(self, point_feat, voxel_feat) -> torch.Tensor:
        if not self.use_point:
            point_feat = None
        if not self.use_voxel:
            voxel_feat = None
        return fuse(point_feat, voxel_feat, self.proj, self.point_dim, self.voxel_dim)


def fuse(point_feat, voxel_feat, proj: nn.Linear, point_dim: int, voxel_dim: int) -> torch.Tensor:
    if point_feat is None and voxel_feat is None:
        raise ConfigurationError("both correlation branches are ablated")
    ref = point_feat if point_feat is not None else voxel_feat
    lead = ref.shape[:-1]
    if point_feat is None:
        point_feat = ref.new_zeros(*lead, point_dim)
    if voxel_feat is None:
        voxel_feat = ref.new_zeros(*lead, voxel_dim)
    return proj(torch.cat((point_feat, voxel_feat), dim=-1))


class CorrelationModule(nn.Module):
    """Similarity truncation plus both branches and fusion, for a (T, N) trajectory grid."""

    def __init__(self, m_trunc: int = 64, m_k: int = 16, radii=(0.25, 0.5, 1.0), resolution: int = 3,
                 point_dim: int = 64, voxel_dim: int = 32, hidden: int = 32, fuse_dim: int = 64,
                 use_point: bool = True, use_voxel: bool = True):
        super().__init__()
        self.m_trunc = m_trunc
        self.point = PointBranch(m_k, hidden, point_dim)
        self.voxel = VoxelBranch(radii, resolution, hidden, voxel_dim)
        self.fuse = Fuse(point_dim, self.voxel.out_dim, fuse_dim, use_point, use_voxel)
        self.out_dim = fuse_dim

    def forward(self, q_feat, q_xyz, frames: PaddedFrames) -> torch.Tensor:
        m_trunc = min(self.m_trunc, frames.min_size)
        trunc = similarity_truncate(q_feat, frames, m_trunc)
        cand = gather_candidates(trunc, frames)
        p = self.point(q_xyz, trunc, cand) if self.fuse.use_point else None
        v = self.voxel(q_xyz, trunc, cand) if self.fuse.use_voxel else None
        return self.fuse(p, v)
