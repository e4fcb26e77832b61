"""Per-frame point encoder: two FPS halvings with offset-MLP + max-pool aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import geometry
from .nn import MLP

MIN_FRAME_POINTS = 16


@dataclass
class FrameGeometry:
    """Parameter-free index structure of one frame; reusable across training steps."""

    keep1: np.ndarray  # (n1,) indices into the frame
    nbr1: np.ndarray  # (n1, k) indices into the frame
    keep2: np.ndarray  # (n2,) indices into the stage-1 set
    nbr2: np.ndarray  # (n2, k) indices into the stage-1 set

    @classmethod
    def build(cls, points: np.ndarray, k_enc: int) -> "FrameGeometry":
        pts = geometry.as_points(points, "frame")
        n = pts.shape[0]
        if n < MIN_FRAME_POINTS:
            raise ValueError(f"frame needs at least {MIN_FRAME_POINTS} points, got {n}")
        keep1 = geometry.farthest_point_sample(pts, n // 2, start=0)
        nbr1 = geometry.knn_query(pts, pts[keep1], min(k_enc, n)).indices
        pts1 = pts[keep1]
        keep2 = geometry.farthest_point_sample(pts1, len(keep1) // 2, start=0)
        nbr2 = geometry.knn_query(pts1, pts1[keep2], min(k_enc, len(keep1))).indices
        return cls(keep1, nbr1, keep2, nbr2)

    @property
    def indices(self) -> np.ndarray:
        """Downsampled points as indices into the original frame."""
        return self.keep1[self.keep2]


@dataclass
class FrameFeatures:
    points: torch.Tensor  # (m, 3)
    feats: torch.Tensor  # (m, C)
    indices: np.ndarray  # (m,) into the input frame


class PointEncoder(nn.Module):
    def __init__(self, channels: int = 64, k_enc: int = 8):
        super().__init__()
        self.channels = channels
        self.k_enc = k_enc
        mid = max(channels // 2, 1)
        self.stage1 = MLP([3, mid, mid], activation="relu", final_activation=True)
        self.stage2 = MLP([mid + 3, channels, channels], activation="relu")

    def forward(self, frame: torch.Tensor, geom: FrameGeometry | None = None) -> FrameFeatures:
        return encode_frame(frame, self, geom)


def encode_frame(frame, encoder: PointEncoder, geom: FrameGeometry | None = None) -> FrameFeatures:
    """Encode one frame into features over a 4x downsampled subset of its points."""
    dtype = next(encoder.parameters()).dtype
    pts = torch.as_tensor(np.asarray(frame) if not isinstance(frame, torch.Tensor) else frame).to(dtype)
    if geom is None:
        geom = FrameGeometry.build(pts.detach().numpy(), encoder.k_enc)
    keep1 = torch.from_numpy(geom.keep1)
    nbr1 = torch.from_numpy(geom.nbr1)
    centers1 = pts[keep1]
    f1 = encoder.stage1(pts[nbr1] - centers1[:, None, :]).amax(dim=1)

    keep2 = torch.from_numpy(geom.keep2)
    nbr2 = torch.from_numpy(geom.nbr2)
    centers2 = centers1[keep2]
    offsets = centers1[nbr2] - centers2[:, None, :]
    f2 = encoder.stage2(torch.cat((f1[nbr2], offsets), dim=-1)).amax(dim=1)
    return FrameFeatures(points=centers2, feats=f2, indices=geom.indices)


def encode_sequence(frames, encoder: PointEncoder, geoms=None) -> list[FrameFeatures]:
    """Encode frames independently, preserving order."""
    if geoms is None:
        geoms = [None] * len(frames)
    return [encode_frame(f, encoder, g) for f, g in zip(frames, geoms)]
