"""Trajectory accuracy metrics: EPE, delta thresholds, median trajectory error, survival, drift."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .nn import ShapeError

THRESHOLDS = (0.10, 0.20, 0.40, 0.80)
SURVIVAL_THRESHOLD = 0.50
DRIFT_CHECKPOINTS = (2, 8, 24, 40)
OCCLUSION_BUCKETS = ((0, 0), (1, 2), (3, 4), (5, None))


@dataclass
class MetricsReport:
    epe3d: float
    delta: dict[str, float]
    delta_avg: float
    mae3d: float
    mae_mode: str
    survival: float
    survival_mode: str
    drift: dict[str, float] | None = None
    occlusion: dict[str, float] | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["drift"] is None:
            del d["drift"]
        if d["occlusion"] is None:
            del d["occlusion"]
        if not d["extra"]:
            del d["extra"]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def exact_mean(values) -> float:
    """Mean from a correctly rounded sum, so uniform inputs give their exact value."""
    arr = np.asarray(values, dtype=np.float64).ravel()
    return math.fsum(arr) / arr.size


def point_errors(pred, gt) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 3:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} must both be (T, N, 3)")
    return np.linalg.norm(pred - gt, axis=-1)


def survival_rate(err: np.ndarray, mode: str = "fraction", threshold: float = SURVIVAL_THRESHOLD) -> float:
    """Percent survival; ``fraction`` averages frames-before-first-failure / T over trajectories."""
    t = err.shape[0]
    failed = err > threshold
    ever = failed.any(axis=0)
    if mode == "binary":
        return float(100.0 * np.mean(~ever))
    if mode != "fraction":
        raise ValueError(f"unknown survival mode {mode!r}")
    first = np.where(ever, failed.argmax(axis=0), t)
    return float(100.0 * np.mean(first / t))


def evaluate(pred, gt, visibility=None, *, exclude_frame: int | None = None, mae_mode: str = "median",
             survival_mode: str = "fraction", drift_checkpoints: Sequence[int] | None = None,
             occlusion_buckets=None) -> MetricsReport:
    """Score predicted trajectories against ground truth, all frames included by default."""
    err = point_errors(pred, gt)
    if visibility is not None and np.shape(visibility) != err.shape:
        raise ShapeError(f"visibility {np.shape(visibility)} does not match {err.shape}")
    if exclude_frame is not None:
        err = np.delete(err, exclude_frame, axis=0)
    delta = {f"{x:.2f}": float(100.0 * np.mean(err < x)) for x in THRESHOLDS}
    if mae_mode == "median":
        mae = float(np.median(err.mean(axis=0)))
    elif mae_mode == "mean_abs":
        diff = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64))
        if exclude_frame is not None:
            diff = np.delete(diff, exclude_frame, axis=0)
        mae = float(diff.mean())
    else:
        raise ValueError(f"unknown MAE mode {mae_mode!r}")
    report = MetricsReport(
        epe3d=exact_mean(err),
        delta=delta,
        delta_avg=float(np.mean(list(delta.values()))),
        mae3d=mae,
        mae_mode=mae_mode,
        survival=survival_rate(err, survival_mode),
        survival_mode=survival_mode,
    )
    if drift_checkpoints is not None:
        report.drift = {str(c): v for c, v in zip(drift_checkpoints, drift_table(pred, gt, drift_checkpoints))}
    if occlusion_buckets is not None and visibility is not None:
        report.occlusion = occlusion_breakdown(pred, gt, visibility, occlusion_buckets)
    return report


def drift_table(pred, gt, checkpoints: Sequence[int] = DRIFT_CHECKPOINTS) -> list[float]:
    """EPE restricted to each checkpoint frame (0-based), in checkpoint order."""
    err = point_errors(pred, gt)
    for c in checkpoints:
        if not 0 <= c < err.shape[0]:
            raise ValueError(f"checkpoint {c} outside [0, {err.shape[0]})")
    return [exact_mean(err[c]) for c in checkpoints]


def bucket_label(lo: int, hi: int | None) -> str:
    if hi is None:
        return f"{lo}+"
    return str(lo) if lo == hi else f"{lo}-{hi}"


def _check_buckets(buckets) -> list[tuple[int, int | None]]:
    spans = sorted(((int(lo), None if hi is None else int(hi)) for lo, hi in buckets), key=lambda s: s[0])
    expected = 0
    for lo, hi in spans:
        if lo < expected:
            raise ValueError(f"occlusion buckets overlap at {lo}")
        if lo > expected:
            raise ValueError(f"occlusion buckets leave a gap at {expected}")
        if hi is not None and hi < lo:
            raise ValueError(f"empty bucket ({lo}, {hi})")
        if hi is None:
            return spans
        expected = hi + 1
    raise ValueError("occlusion buckets must end with an open-ended bucket")


def occlusion_breakdown(pred, gt, visibility, buckets=OCCLUSION_BUCKETS) -> dict[str, float]:
    """Mean EPE of trajectories grouped by their number of occluded frames; empty buckets omitted."""
    spans = _check_buckets(buckets)
    err = point_errors(pred, gt)
    vis = np.asarray(visibility, dtype=bool)
    if vis.shape != err.shape:
        raise ShapeError(f"visibility {vis.shape} does not match {err.shape}")
    occluded = (~vis).sum(axis=0)
    per_traj = err.mean(axis=0)
    out = {}
    for lo, hi in spans:
        sel = (occluded >= lo) & (True if hi is None else occluded <= hi)
        if sel.any():
            out[bucket_label(lo, hi)] = exact_mean(per_traj[sel])
    return out


def write_table_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
