"""Full tracking pipeline: model assembly, trajectory init, the refinement loop, sliding windows."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np
import torch
from torch import nn

from . import geometry
from .backbone import FrameFeatures, FrameGeometry, PointEncoder, encode_frame
from .correlation import CorrelationModule, PaddedFrames
from .nn import NumericError, ParamStore
from .sttu import STTU

AUX_MODES = ("none", "local_knn", "global_fps", "global_random", "knn_plus_fps", "knn_plus_random")


@dataclass
class ModelConfig:
    channels: int = 64
    k_enc: int = 8
    interp_k: int = 3
    m_trunc: int = 64
    m_k: int = 16
    radii: tuple[float, ...] = (0.25, 0.5, 1.0)
    resolution: int = 3
    corr_hidden: int = 32
    point_dim: int = 64
    voxel_dim: int = 32
    fuse_dim: int = 64
    flow_dim: int = 32
    pos_dim: int = 16
    time_dim: int = 16
    depth: int = 3
    heads: int = 4
    mlp_ratio: int = 2
    use_point: bool = True
    use_voxel: bool = True
    feature_update: bool = True

    @property
    def token_dim(self) -> int:
        return self.fuse_dim + self.channels + 3 * self.flow_dim

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "radii" in d:
            d["radii"] = tuple(float(r) for r in d["radii"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["radii"] = list(self.radii)
        return d


@dataclass
class AuxiliaryConfig:
    mode: str = "none"
    count: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.mode not in AUX_MODES:
            raise ValueError(f"unknown auxiliary mode {self.mode!r}; expected one of {AUX_MODES}")
        if self.count < 0:
            raise ValueError(f"auxiliary count must be >= 0, got {self.count}")


@dataclass
class TrackConfig:
    iters: int = 4
    window: int = 16
    aux: AuxiliaryConfig = field(default_factory=AuxiliaryConfig)


class SceneFlowTracker(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.encoder = PointEncoder(cfg.channels, cfg.k_enc)
        self.correlation = CorrelationModule(
            cfg.m_trunc, cfg.m_k, cfg.radii, cfg.resolution, cfg.point_dim, cfg.voxel_dim,
            cfg.corr_hidden, cfg.fuse_dim, cfg.use_point, cfg.use_voxel,
        )
        self.sttu = STTU(cfg.fuse_dim, cfg.channels, cfg.flow_dim, cfg.pos_dim, cfg.time_dim,
                         cfg.depth, cfg.heads, cfg.mlp_ratio)
        self.__dict__["_store"] = ParamStore(self)

    @property
    def params(self) -> ParamStore:
        return self.__dict__["_store"]

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    @property
    def head_prefix(self) -> str:
        return "sttu.predictor." + self.sttu.predictor.final_layer_prefix

    def initialize(self, seed: int = 0, zero_head: bool = True, random_bias: bool = False) -> "SceneFlowTracker":
        self.params.initialize(seed, zero=[self.head_prefix] if zero_head else [], random_bias=random_bias)
        return self


def build_model(cfg: ModelConfig | None = None, seed: int = 0, zero_head: bool = True,
                dtype: torch.dtype = torch.float32, random_bias: bool = False) -> SceneFlowTracker:
    model = SceneFlowTracker(cfg).to(dtype)
    return model.initialize(seed, zero_head, random_bias)


class PreparedSequence:
    """Frames plus cached parameter-free encoder geometry."""

    def __init__(self, frames: Sequence[np.ndarray], k_enc: int):
        self.frames = [np.ascontiguousarray(f, dtype=np.float32) for f in frames]
        self.k_enc = k_enc
        self._geoms: dict[int, FrameGeometry] = {}
        self._tensors: dict[tuple[int, torch.dtype], torch.Tensor] = {}

    def __len__(self) -> int:
        return len(self.frames)

    def geometry(self, t: int) -> FrameGeometry:
        if t not in self._geoms:
            self._geoms[t] = FrameGeometry.build(self.frames[t].astype(np.float64), self.k_enc)
        return self._geoms[t]

    def tensor(self, t: int, dtype: torch.dtype) -> torch.Tensor:
        key = (t, dtype)
        if key not in self._tensors:
            self._tensors[key] = torch.from_numpy(self.frames[t]).to(dtype)
        return self._tensors[key]

    def encode(self, model: SceneFlowTracker, frames: Sequence[int] | None = None) -> list[FrameFeatures]:
        ts = range(len(self.frames)) if frames is None else frames
        return [encode_frame(self.tensor(t, model.dtype), model.encoder, self.geometry(t)) for t in ts]


@dataclass
class TrajectoryState:
    q_xyz: torch.Tensor  # (T, N, 3)
    q_feat: torch.Tensor  # (T, N, C)
    q_xyz0: torch.Tensor  # (T, N, 3) positions the window started from
    iteration: int = 0
    query_frame: int = 0

    def detach(self) -> "TrajectoryState":
        return replace(self, q_xyz=self.q_xyz.detach(), q_feat=self.q_feat.detach(), q_xyz0=self.q_xyz0.detach())


def interpolate_features(queries: np.ndarray, frame: FrameFeatures, k: int = geometry.DEFAULT_INTERP_K) -> torch.Tensor:
    """Differentiable (in the features) inverse-distance interpolation at query positions."""
    pts = frame.points.detach().to(torch.float64).numpy()
    nb = geometry.knn_query(pts, queries, min(k, pts.shape[0]))
    w = torch.from_numpy(geometry.interpolation_weights(nb.distances)).to(frame.feats.dtype)
    return torch.einsum("qk,qkc->qc", w, frame.feats[torch.from_numpy(nb.indices)])


def init_trajectories(queries, query_frame: int, features: Sequence[FrameFeatures], length: int,
                      interp_k: int = geometry.DEFAULT_INTERP_K) -> TrajectoryState:
    """Replicate query positions and interpolated query features over ``length`` timesteps."""
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.shape[0] == 0 or q.shape[1] != 3:
        raise ValueError(f"queries must be a non-empty (n, 3) array, got shape {q.shape}")
    if not 0 <= query_frame < len(features):
        raise ValueError(f"query frame {query_frame} outside the {len(features)} encoded frames")
    feat = interpolate_features(q, features[query_frame], interp_k)
    dtype = feat.dtype
    xyz = torch.from_numpy(q).to(dtype)
    n = q.shape[0]
    q_xyz = xyz[None].expand(length, n, 3).clone()
    return TrajectoryState(
        q_xyz=q_xyz,
        q_feat=feat[None].expand(length, n, feat.shape[-1]).clone(),
        q_xyz0=q_xyz.clone(),
        query_frame=query_frame,
    )


def run_window(model: SceneFlowTracker, state: TrajectoryState, features: Sequence[FrameFeatures],
               iters: int, timestamps=None) -> tuple[TrajectoryState, list[torch.Tensor]]:
    """Refine a window's trajectories for ``iters`` iterations.

    Returns the final state and the position grid after every iteration.
    """
    if state.iteration != 0:
        raise ValueError("run_window expects a fresh state (iteration 0)")
    t = state.q_xyz.shape[0]
    if len(features) != t:
        raise ValueError(f"window has {t} timesteps but {len(features)} feature frames")
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    frames = PaddedFrames.stack(features)
    ts = torch.arange(t, dtype=state.q_xyz.dtype) if timestamps is None else torch.as_tensor(timestamps)
    q_xyz, q_feat = state.q_xyz, state.q_feat
    snapshots = []
    for k in range(1, iters + 1):
        c_fuse = model.correlation(q_feat, q_xyz, frames)
        d_xyz, d_feat = model.sttu(c_fuse, q_feat, q_xyz, state.q_xyz0, ts)
        q_xyz = q_xyz + d_xyz
        if model.cfg.feature_update:
            q_feat = q_feat + d_feat
        if not (torch.isfinite(q_xyz).all() and torch.isfinite(q_feat).all()):
            raise NumericError(f"non-finite trajectory state after iteration {k}")
        snapshots.append(q_xyz)
    return replace(state, q_xyz=q_xyz, q_feat=q_feat, iteration=iters), snapshots


@dataclass(frozen=True)
class WindowPlan:
    total_length: int
    window_length: int
    windows: tuple[tuple[int, int], ...]

    @property
    def stride(self) -> int:
        return self.window_length // 2


def plan_windows(total_length: int, window_length: int) -> WindowPlan:
    """Half-overlapping windows; the last one is shortened to end at ``total_length``."""
    if window_length < 2 or window_length % 2:
        raise ValueError(f"window length must be even and >= 2, got {window_length}")
    if window_length > total_length:
        raise ValueError(f"window length {window_length} exceeds sequence length {total_length}")
    count = math.ceil(2 * total_length / window_length - 1)
    stride = window_length // 2
    windows = tuple((w * stride, min(w * stride + window_length, total_length)) for w in range(count))
    return WindowPlan(total_length, window_length, windows)


def inject_auxiliary(queries, frame, cfg: AuxiliaryConfig) -> tuple[np.ndarray, np.ndarray]:
    """Append auxiliary query points picked from ``frame``; the mask marks the originals."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    mask = np.ones(q.shape[0], dtype=bool)
    if cfg.mode == "none" or cfg.count == 0:
        return q, mask
    pts = geometry.as_points(frame, "frame")
    if cfg.count > pts.shape[0]:
        raise ValueError(f"auxiliary budget {cfg.count} exceeds frame size {pts.shape[0]}")
    if cfg.mode in ("knn_plus_fps", "knn_plus_random"):
        n_local = cfg.count // 2
    elif cfg.mode == "local_knn":
        n_local = cfg.count
    else:
        n_local = 0
    n_global = cfg.count - n_local
    picks = []
    if n_local:
        picks.append(_local_aux(q, pts, n_local))
    if n_global:
        if cfg.mode in ("global_fps", "knn_plus_fps"):
            picks.append(geometry.farthest_point_sample(pts, n_global, start=0))
        else:
            picks.append(geometry.random_subsample(pts, n_global, cfg.seed))
    aux = pts[np.concatenate(picks)]
    return np.concatenate((q, aux)), np.concatenate((mask, np.zeros(len(aux), dtype=bool)))


def _local_aux(queries: np.ndarray, pts: np.ndarray, budget: int) -> np.ndarray:
    # round-robin over the queries' ranked neighbor lists until the budget is met
    per_query = min(pts.shape[0], -(-budget // len(queries)))
    ranked = geometry.knn_query(pts, queries, per_query).indices
    while True:
        seen: dict[int, None] = {}
        for idx in ranked.T.reshape(-1):
            seen.setdefault(int(idx), None)
            if len(seen) == budget:
                return np.fromiter(seen, dtype=np.int64)
        if per_query == pts.shape[0]:
            return np.fromiter(seen, dtype=np.int64)
        per_query = min(pts.shape[0], 2 * per_query)
        ranked = geometry.knn_query(pts, queries, per_query).indices


@dataclass
class WindowResult:
    start: int
    end: int
    state: TrajectoryState
    snapshots: list[torch.Tensor]


def iterate_windows(model: SceneFlowTracker, seq: PreparedSequence, queries: np.ndarray, query_frame: int,
                    cfg: TrackConfig, features: Sequence[FrameFeatures] | None = None,
                    detach: bool = True) -> Iterator[WindowResult]:
    """Run the sliding-window chain, yielding each window's result in order.

    Later windows start from the previous window's estimates on overlapping
    frames and from a constant extrapolation of the last overlapping frame
    beyond it. State handed across windows is detached when ``detach`` is set.
    """
    plan = plan_windows(len(seq), cfg.window)
    if features is None:
        features = seq.encode(model)
    est_xyz = est_feat = None
    prev_end = 0
    for start, end in plan.windows:
        if est_xyz is None:
            state = init_trajectories(queries, query_frame, features, end - start, model.cfg.interp_k)
        else:
            extra = end - prev_end
            xyz = torch.cat((est_xyz[start:prev_end], est_xyz[prev_end - 1 : prev_end].expand(extra, -1, -1)))
            feat = torch.cat((est_feat[start:prev_end], est_feat[prev_end - 1 : prev_end].expand(extra, -1, -1)))
            if detach:
                xyz, feat = xyz.detach(), feat.detach()
            state = TrajectoryState(xyz, feat, xyz.clone(), query_frame=query_frame)
        state, snaps = run_window(model, state, features[start:end], cfg.iters)
        yield WindowResult(start, end, state, snaps)
        if est_xyz is None:
            n = state.q_xyz.shape[1]
            est_xyz = state.q_xyz.new_zeros(len(seq), n, 3)
            est_feat = state.q_feat.new_zeros(len(seq), n, state.q_feat.shape[-1])
        est_xyz = torch.cat((est_xyz[:start], state.q_xyz, est_xyz[end:]))
        est_feat = torch.cat((est_feat[:start], state.q_feat, est_feat[end:]))
        prev_end = end


def track_sequence(model: SceneFlowTracker, seq: PreparedSequence | Sequence[np.ndarray], queries,
                   query_frame: int = 0, cfg: TrackConfig | None = None) -> np.ndarray:
    """Track ``queries`` through the whole sequence; returns (T', N, 3) positions."""
    cfg = cfg or TrackConfig()
    if not isinstance(seq, PreparedSequence):
        seq = PreparedSequence(seq, model.cfg.k_enc)
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if len(seq) < cfg.window:
        raise ValueError(f"sequence of {len(seq)} frames is shorter than the window ({cfg.window})")
    augmented, mask = inject_auxiliary(q, seq.frames[query_frame], cfg.aux)
    out = np.empty((len(seq), len(augmented), 3), dtype=np.float64)
    with torch.no_grad():
        for res in iterate_windows(model, seq, augmented, query_frame, cfg):
            out[res.start : res.end] = res.state.q_xyz.to(torch.float64).numpy()
    return out[:, mask]
