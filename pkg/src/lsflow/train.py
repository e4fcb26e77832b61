"""Unrolled sliding-window training with the iteration-discounted trajectory loss."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import data as dataio
from .metrics import MetricsReport, evaluate
from .nn import GradReport, NumericError, ShapeError, grad_check
from .tracker import (
    ModelConfig,
    PreparedSequence,
    SceneFlowTracker,
    TrackConfig,
    build_model,
    iterate_windows,
    track_sequence,
)

log = logging.getLogger(__name__)

DTYPES = {"f32": torch.float32, "f64": torch.float64}


@dataclass
class TrainConfig:
    lr: float = 2e-4
    steps: int = 1000
    batch_size: int = 1
    window: int = 16
    queries: int = 256
    iters: int = 4
    gamma: float = 0.8
    seed: int = 0
    precision: str = "f32"
    warmup_frac: float = 0.05
    final_lr_frac: float = 0.01
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    checkpoint_every: int = 0
    log_every: int = 50

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def iteration_weights(iters: int, gamma: float) -> list[float]:
    """gamma^(K-k) for k = 1..K, oldest iteration first."""
    return [gamma ** (iters - k) for k in range(1, iters + 1)]


def window_loss(snapshots: Sequence[torch.Tensor], gt: torch.Tensor, gamma: float = 0.8) -> torch.Tensor:
    """Discounted mean endpoint distance over all iteration snapshots of one window."""
    if len(snapshots) < 1:
        raise ValueError("need at least one snapshot")
    gt = torch.as_tensor(gt, dtype=snapshots[0].dtype)
    total = snapshots[0].new_zeros(())
    for w, snap in zip(iteration_weights(len(snapshots), gamma), snapshots):
        if snap.shape != gt.shape:
            raise ShapeError(f"snapshot {tuple(snap.shape)} does not match ground truth {tuple(gt.shape)}")
        total = total + w * torch.linalg.vector_norm(snap - gt, dim=-1).mean()
    return total


def lr_factor(step: int, total: int, warmup_frac: float = 0.05, final_frac: float = 0.01) -> float:
    """Linear warmup to 1 over ``warmup_frac`` of training, then cosine decay to ``final_frac``."""
    warm = max(1, int(round(warmup_frac * total)))
    if step < warm:
        return (step + 1) / warm
    span = max(1, total - warm)
    progress = min(1.0, (step - warm) / span)
    return final_frac + (1 - final_frac) * 0.5 * (1 + math.cos(math.pi * progress))


class Sample:
    """A training record with cached geometry."""

    def __init__(self, record: dataio.SequenceRecord, k_enc: int):
        self.record = record
        self.seq = PreparedSequence(record.frames, k_enc)


def sequence_loss(model: SceneFlowTracker, sample: Sample, query_idx: np.ndarray, cfg: TrainConfig,
                  query_frame: int = 0) -> torch.Tensor:
    """Sum of window losses over the sliding-window chain, gradients cut between windows."""
    gt = torch.from_numpy(sample.record.gt_traj[:, query_idx].astype(np.float64)).to(model.dtype)
    queries = sample.record.gt_traj[query_frame, query_idx].astype(np.float64)
    track_cfg = TrackConfig(iters=cfg.iters, window=min(cfg.window, sample.record.length))
    total = gt.new_zeros(())
    for res in iterate_windows(model, sample.seq, queries, query_frame, track_cfg, detach=True):
        total = total + window_loss(res.snapshots, gt[res.start : res.end], cfg.gamma)
    return total


def _pick_queries(record: dataio.SequenceRecord, n: int, rng: np.random.Generator, frame: int = 0) -> np.ndarray:
    visible = np.flatnonzero(record.visibility[frame])
    return np.sort(rng.choice(visible, size=min(n, len(visible)), replace=False))


@dataclass
class TrainResult:
    model: SceneFlowTracker
    curve: list[tuple[int, float, float]] = field(default_factory=list)


def train(records: Sequence[dataio.SequenceRecord] | Sequence[Sample], cfg: TrainConfig,
          model: SceneFlowTracker | None = None, model_cfg: ModelConfig | None = None,
          out_dir=None, fixed_queries: np.ndarray | None = None,
          callback: Callable[[int, float], None] | None = None) -> TrainResult:
    """Train ``model`` (built fresh when omitted) and return it with its loss curve.

    Each step draws ``batch_size`` records and query subsets from a generator
    seeded by ``cfg.seed``; ``fixed_queries`` pins the query indices instead.
    """
    torch.manual_seed(cfg.seed)
    dtype = DTYPES[cfg.precision]
    if model is None:
        model = build_model(model_cfg, seed=cfg.seed, dtype=dtype)
    samples = [r if isinstance(r, Sample) else Sample(r, model.cfg.k_enc) for r in records]
    if not samples:
        raise ValueError("no training records")
    rng = np.random.default_rng([cfg.seed, 7])
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: lr_factor(s, cfg.steps, cfg.warmup_frac, cfg.final_lr_frac)
    )
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(model)
    last_good = model.params.state()
    for step in range(cfg.steps):
        lr = opt.param_groups[0]["lr"]
        opt.zero_grad(set_to_none=True)
        loss_val = 0.0
        for _ in range(cfg.batch_size):
            sample = samples[int(rng.integers(len(samples)))]
            idx = fixed_queries if fixed_queries is not None else _pick_queries(sample.record, cfg.queries, rng)
            try:
                loss = sequence_loss(model, sample, idx, cfg) / cfg.batch_size
                if not torch.isfinite(loss):
                    raise NumericError(f"loss is {loss.item()}")
            except NumericError as exc:
                model.params.load_state(last_good)
                raise NumericError(f"step {step}: {exc}; parameters restored to last good state") from exc
            loss.backward()
            loss_val += loss.item()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        sched.step()
        if not all(torch.isfinite(p).all() for p in model.parameters()):
            model.params.load_state(last_good)
            raise NumericError(f"step {step}: non-finite parameters after update; parameters restored")
        last_good = model.params.state()
        result.curve.append((step, loss_val, lr))
        if callback is not None:
            callback(step, loss_val)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.5f lr %.3g", step, loss_val, lr)
        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_training_checkpoint(out / "checkpoint.bin", model, cfg)
    if out is not None:
        save_training_checkpoint(out / "checkpoint.bin", model, cfg)
        write_loss_csv(out / "loss.csv", result.curve)
    return result


def save_training_checkpoint(path, model: SceneFlowTracker, cfg: TrainConfig | None = None) -> None:
    path = Path(path)
    model.params.save(path)
    sidecar = {"model": model.cfg.to_dict()}
    if cfg is not None:
        sidecar["train"] = cfg.to_dict()
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_model(path, dtype: torch.dtype = torch.float32) -> SceneFlowTracker:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    model = SceneFlowTracker(ModelConfig.from_dict(sidecar["model"])).to(dtype)
    model.params.load(path)
    return model


def write_loss_csv(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in curve:
            w.writerow([step, repr(float(loss)), repr(float(lr))])


def evaluate_model(model: SceneFlowTracker, records: Sequence[dataio.SequenceRecord], track_cfg: TrackConfig,
                   n_queries: int, seed: int = 0, query_idx: np.ndarray | None = None,
                   drift_checkpoints=None) -> tuple[MetricsReport, MetricsReport]:
    """Score the model and the static (zero-motion) baseline on the same queries.

    Returns (model report, static report) pooled over all records.
    """
    preds, statics, gts = [], [], []
    for i, rec in enumerate(records):
        idx = query_idx if query_idx is not None else _pick_queries(rec, n_queries, np.random.default_rng([seed, i]))
        truth = rec.gt_traj[:, idx].astype(np.float64)
        q = truth[0]
        preds.append(track_sequence(model, rec.frames, q, 0, track_cfg))
        statics.append(np.broadcast_to(q, truth.shape))
        gts.append(truth)
    pred = np.concatenate(preds, axis=1)
    static = np.concatenate(statics, axis=1)
    gt = np.concatenate(gts, axis=1)
    return (evaluate(pred, gt, drift_checkpoints=drift_checkpoints),
            evaluate(static, gt, drift_checkpoints=drift_checkpoints))


# ---------------------------------------------------------------- grad check

# m_trunc and m_k cover every candidate (16 pts/frame after encoding) so top-k
# selection cannot switch under a finite-difference probe.
MICRO_MODEL = ModelConfig(
    channels=8, k_enc=4, interp_k=3, m_trunc=16, m_k=16, radii=(0.25, 0.5, 1.0), resolution=3,
    corr_hidden=8, point_dim=8, voxel_dim=4, fuse_dim=8, flow_dim=2, pos_dim=2, time_dim=2,
    depth=1, heads=2, mlp_ratio=1,
)


@dataclass
class GradCheckConfig:
    model: ModelConfig = field(default_factory=lambda: MICRO_MODEL)
    frames: int = 4
    queries: int = 4
    points: int = 64
    iters: int = 2
    gamma: float = 0.8
    seed: int = 2
    h: float = 1e-5
    cap: int = 2000
    zero_head: bool = False


def micro_problem(cfg: GradCheckConfig):
    spec = dataio.SceneSpec(seed=cfg.seed, frames=cfg.frames, points_per_frame=cfg.points, bodies=2,
                            background_points=cfg.points // 4, trajectories=16,
                            speed=(0.02, 0.05), angular_speed=(0.0, 0.05))
    record = dataio.generate(spec)
    model = build_model(cfg.model, seed=cfg.seed, zero_head=cfg.zero_head, dtype=torch.float64,
                        random_bias=True)
    sample = Sample(record, cfg.model.k_enc)
    idx = np.arange(cfg.queries)
    tcfg = TrainConfig(window=cfg.frames, queries=cfg.queries, iters=cfg.iters, gamma=cfg.gamma,
                       precision="f64")

    def loss_fn(_params) -> torch.Tensor:
        return sequence_loss(model, sample, idx, tcfg)

    return model, loss_fn


def verify_gradients(cfg: GradCheckConfig | None = None) -> GradReport:
    """Finite-difference check of the whole pipeline loss on a micro model in float64."""
    cfg = cfg or GradCheckConfig()
    if cfg.frames > 4 or cfg.queries > 4 or cfg.points > 64 or cfg.model.channels > 8:
        raise ValueError("gradient verification is limited to the micro configuration")
    model, loss_fn = micro_problem(cfg)
    return grad_check(loss_fn, model.params, h=cfg.h, cap=cfg.cap, seed=cfg.seed)
