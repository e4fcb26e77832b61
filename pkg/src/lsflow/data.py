"""Synthetic dynamic scenes with exact ground-truth trajectories, and the PCS1 sequence file format.

File layout (little-endian)::

    "PCS1" | version u16 | flags u16 | T' u32 | N_gt u32 | points-per-frame u32 x T'
    frames  f32 xyz, frame after frame
    gt_traj f32 (T', N_gt, 3)
    visibility, packed bits (T' * N_gt, little bit order)
    metadata JSON | JSON byte length u32 | CRC-32 of all preceding bytes u32
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PCS1"
VERSION = 1
FLAG_TRAJECTORY = 1  # prediction file: no frame payload, gt_traj holds predicted positions
_HEADER = struct.Struct("<4sHHII")
_MAX_DIM = 1 << 26


class SequenceFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SequenceVersionError(SequenceFormatError):
    pass


class SequenceIOError(OSError):
    pass


@dataclass
class SceneSpec:
    seed: int = 0
    frames: int = 24
    points_per_frame: int = 1024
    bodies: int = 3
    body_size: tuple[float, float] = (0.4, 0.9)  # edge length range, m
    speed: tuple[float, float] = (0.0, 0.05)  # linear speed range, m/frame
    angular_speed: tuple[float, float] = (0.0, 0.05)  # rad/frame
    sheet: bool = False
    sheet_amplitude: float = 0.15
    sheet_frequency: float = 2.0  # rad/m along x
    sheet_phase_speed: float = 0.2  # rad/frame
    occluder: bool = False
    occluder_thickness: float = 0.4
    occluder_speed: float = 0.15  # m/frame along +x
    background_points: int = 128
    trajectories: int = 128

    def __post_init__(self):
        for name in ("body_size", "speed", "angular_speed"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a non-negative (lo, hi) range, got {(lo, hi)}")
            setattr(self, name, (float(lo), float(hi)))
        if self.frames < 1 or self.points_per_frame < 1:
            raise ValueError("frames and points_per_frame must be positive")
        if not 0 <= self.background_points <= self.points_per_frame:
            raise ValueError("background_points must lie in [0, points_per_frame]")
        if self.trajectories < 1:
            raise ValueError("trajectories must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for key in ("body_size", "speed", "angular_speed"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("body_size", "speed", "angular_speed"):
            d[key] = list(d[key])
        return d


@dataclass
class SequenceRecord:
    frames: list[np.ndarray]  # T' arrays of (n_t, 3) float32
    gt_traj: np.ndarray  # (T', N_gt, 3) float32
    visibility: np.ndarray  # (T', N_gt) bool
    meta: dict = field(default_factory=dict)
    flags: int = 0

    @property
    def length(self) -> int:
        return self.gt_traj.shape[0]

    def equals(self, other: "SequenceRecord") -> bool:
        return (
            self.flags == other.flags
            and len(self.frames) == len(other.frames)
            and all(np.array_equal(a, b) for a, b in zip(self.frames, other.frames))
            and self.gt_traj.dtype == other.gt_traj.dtype
            and np.array_equal(self.gt_traj, other.gt_traj)
            and np.array_equal(self.visibility, other.visibility)
            and self.meta == other.meta
        )


# ------------------------------------------------------------------ surfaces


def _rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) * c + s * k + (1 - c) * np.outer(axis, axis)


class _Box:
    def __init__(self, rng: np.random.Generator, spec: SceneSpec):
        self.half = rng.uniform(*spec.body_size, size=3) / 2
        self.center = np.array([rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-0.4, 0.8)])
        direction = rng.normal(size=3)
        self.velocity = direction / np.linalg.norm(direction) * rng.uniform(*spec.speed)
        axis = rng.normal(size=3)
        self.axis = axis / np.linalg.norm(axis)
        self.omega = rng.uniform(*spec.angular_speed)
        hx, hy, hz = self.half
        self.face_areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy]) * 4

    @property
    def area(self) -> float:
        return float(self.face_areas.sum())

    def sample_material(self, rng: np.random.Generator, n: int) -> np.ndarray:
        faces = rng.choice(6, size=n, p=self.face_areas / self.area)
        pts = rng.uniform(-1, 1, size=(n, 3)) * self.half
        axis = faces // 2
        sign = np.where(faces % 2 == 0, -1.0, 1.0)
        pts[np.arange(n), axis] = sign * self.half[axis]
        return pts

    def pose(self, material: np.ndarray, t: int) -> np.ndarray:
        rotated = material @ _rotation(self.axis, self.omega * t).T
        return (self.center + rotated) + t * self.velocity


class _Sheet:
    half = 1.2

    def __init__(self, rng: np.random.Generator, spec: SceneSpec):
        self.height = rng.uniform(-0.2, 0.4)
        self.amplitude = spec.sheet_amplitude
        self.frequency = spec.sheet_frequency
        self.phase_speed = spec.sheet_phase_speed

    @property
    def area(self) -> float:
        return (2 * self.half) ** 2

    def sample_material(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.column_stack((rng.uniform(-self.half, self.half, size=(n, 2)), np.zeros(n)))

    def pose(self, material: np.ndarray, t: int) -> np.ndarray:
        out = material.copy()
        out[:, 2] = self.height + self.amplitude * np.sin(self.frequency * material[:, 0] + self.phase_speed * t)
        return out


class _Floor:
    half = 3.0
    height = -1.0

    def sample_material(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.column_stack((rng.uniform(-self.half, self.half, size=(n, 2)), np.full(n, self.height)))

    def pose(self, material: np.ndarray, t: int) -> np.ndarray:
        return material


class _Occluder:
    def __init__(self, spec: SceneSpec):
        self.thickness = spec.occluder_thickness
        self.speed = spec.occluder_speed
        self.start = -3.0

    def covers(self, pts: np.ndarray, t: int) -> np.ndarray:
        x0 = self.start + self.speed * t
        # slab spans the dynamic region in y/z; the floor stays measurable
        return (np.abs(pts[:, 0] - x0) <= self.thickness / 2) & (pts[:, 2] > _Floor.height + 0.05)


def generate(spec: SceneSpec) -> SequenceRecord:
    """Animate a seeded scene and resample every frame independently."""
    rng = np.random.default_rng([spec.seed, 0])
    dynamic: list = [_Box(rng, spec) for _ in range(spec.bodies)]
    if spec.sheet:
        dynamic.append(_Sheet(rng, spec))
    floor = _Floor()
    n_dynamic = spec.points_per_frame - spec.background_points
    if dynamic and spec.trajectories > n_dynamic:
        raise ValueError(
            f"{spec.trajectories} trajectories do not fit in {n_dynamic} dynamic points per frame"
        )
    if not dynamic and spec.trajectories > spec.points_per_frame:
        raise ValueError(f"{spec.trajectories} trajectories exceed {spec.points_per_frame} points per frame")

    surfaces = dynamic or [floor]
    areas = np.array([s.area for s in dynamic]) if dynamic else np.ones(1)
    probs = areas / areas.sum()
    owner = rng.choice(len(surfaces), size=spec.trajectories, p=probs)
    anchor_mat = np.zeros((spec.trajectories, 3))
    for s_idx, surf in enumerate(surfaces):
        sel = np.flatnonzero(owner == s_idx)
        anchor_mat[sel] = surf.sample_material(rng, len(sel))

    occluder = _Occluder(spec) if spec.occluder else None
    t_total = spec.frames
    gt = np.empty((t_total, spec.trajectories, 3))
    vis = np.ones((t_total, spec.trajectories), dtype=bool)
    frames = []
    for t in range(t_total):
        frng = np.random.default_rng([spec.seed, 1, t])
        for s_idx, surf in enumerate(surfaces):
            sel = np.flatnonzero(owner == s_idx)
            gt[t, sel] = surf.pose(anchor_mat[sel], t)
        if occluder is not None:
            vis[t] = ~occluder.covers(gt[t], t)
        visible = gt[t, vis[t]]
        n_bg = spec.background_points if dynamic else spec.points_per_frame - len(visible)
        n_dyn = spec.points_per_frame - n_bg - len(visible)
        parts = [visible, _fill(frng, [floor], np.ones(1), n_bg, occluder, t)]
        if dynamic:
            parts.append(_fill(frng, dynamic, probs, n_dyn, occluder, t))
        pts = np.concatenate(parts)
        frames.append(pts[frng.permutation(len(pts))].astype(np.float32))
    return SequenceRecord(frames, gt.astype(np.float32), vis, meta={"scene": spec.to_dict()})


def _fill(rng, surfaces, probs, n: int, occluder, t: int, max_rounds: int = 64) -> np.ndarray:
    """``n`` fresh surface samples at frame ``t`` that the occluder does not cover."""
    out = []
    need = n
    for _ in range(max_rounds):
        if need <= 0:
            break
        batch = max(2 * need, 16)
        owner = rng.choice(len(surfaces), size=batch, p=probs)
        pts = np.concatenate([
            surfaces[i].pose(surfaces[i].sample_material(rng, int((owner == i).sum())), t)
            for i in range(len(surfaces))
        ])
        if occluder is not None:
            pts = pts[~occluder.covers(pts, t)]
        pts = pts[rng.permutation(len(pts))][:need]
        out.append(pts)
        need -= len(pts)
    if need > 0:
        raise ValueError(f"occluder leaves too little visible surface at frame {t}")
    return np.concatenate(out) if out else np.zeros((0, 3))


def sample_queries(record: SequenceRecord, n: int, frame: int = 0, seed: int = 0):
    """Pick ``n`` anchors visible at ``frame``; returns (positions, truth (T', n, 3), anchor indices).

    Selected anchors keep their original order.
    """
    if not 0 <= frame < record.length:
        raise ValueError(f"frame {frame} outside sequence of length {record.length}")
    visible = np.flatnonzero(record.visibility[frame])
    if n > len(visible):
        raise ValueError(f"only {len(visible)} anchors visible at frame {frame}, need {n}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(visible, size=n, replace=False))
    truth = record.gt_traj[:, idx]
    return truth[frame].copy(), truth, idx


# --------------------------------------------------------------------- files


def encode_record(record: SequenceRecord) -> bytes:
    t_total, n_gt = record.gt_traj.shape[:2]
    sizes = [f.shape[0] for f in record.frames] if not record.flags & FLAG_TRAJECTORY else [0] * t_total
    if len(sizes) != t_total:
        raise ValueError(f"{len(sizes)} frames but {t_total} trajectory timesteps")
    if record.visibility.shape != (t_total, n_gt):
        raise ValueError("visibility shape does not match gt_traj")
    out = bytearray(_HEADER.pack(MAGIC, VERSION, record.flags, t_total, n_gt))
    out += struct.pack(f"<{t_total}I", *sizes)
    if not record.flags & FLAG_TRAJECTORY:
        for f in record.frames:
            out += np.ascontiguousarray(f, dtype="<f4").tobytes()
    out += np.ascontiguousarray(record.gt_traj, dtype="<f4").tobytes()
    out += np.packbits(record.visibility.reshape(-1), bitorder="little").tobytes()
    meta = json.dumps(record.meta, sort_keys=True).encode()
    out += meta + struct.pack("<I", len(meta))
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def decode_record(buf: bytes) -> SequenceRecord:
    size = len(buf)
    if size < _HEADER.size:
        raise SequenceFormatError("file shorter than header", size)
    magic, version, flags, t_total, n_gt = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise SequenceFormatError("bad magic", 0)
    if version != VERSION:
        raise SequenceVersionError(f"unsupported version {version}", 4)
    if flags & ~FLAG_TRAJECTORY:
        raise SequenceFormatError(f"unknown flags {flags:#x}", 6)
    if t_total > _MAX_DIM or n_gt > _MAX_DIM:
        raise SequenceFormatError("implausible header dimensions", 8)
    pos = _HEADER.size
    if size < pos + 4 * t_total:
        raise SequenceFormatError("truncated frame-size table", size)
    sizes = np.frombuffer(buf, dtype="<u4", count=t_total, offset=pos).astype(np.int64)
    pos += 4 * t_total
    if flags & FLAG_TRAJECTORY and sizes.any():
        raise SequenceFormatError("trajectory file lists frame points", _HEADER.size)
    frame_bytes = int(sizes.sum()) * 12
    gt_bytes = t_total * n_gt * 12
    vis_bytes = (t_total * n_gt + 7) // 8
    body_end = pos + frame_bytes + gt_bytes + vis_bytes
    if size < body_end + 8:
        raise SequenceFormatError("truncated payload", size)
    (meta_len,) = struct.unpack_from("<I", buf, size - 8)
    if body_end + meta_len + 8 != size:
        raise SequenceFormatError(f"length mismatch: metadata length {meta_len} inconsistent with file size", size - 8)
    (crc,) = struct.unpack_from("<I", buf, size - 4)
    if zlib.crc32(buf[: size - 4]) != crc:
        raise SequenceFormatError("checksum mismatch", size - 4)

    frames = []
    for n in sizes:
        frames.append(np.frombuffer(buf, dtype="<f4", count=3 * int(n), offset=pos).reshape(-1, 3).astype(np.float32))
        pos += 12 * int(n)
    gt = np.frombuffer(buf, dtype="<f4", count=t_total * n_gt * 3, offset=pos).reshape(t_total, n_gt, 3).astype(np.float32)
    pos += gt_bytes
    if not all(np.isfinite(f).all() for f in frames) or not np.isfinite(gt).all():
        raise SequenceFormatError("non-finite coordinates", _HEADER.size)
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8, count=vis_bytes, offset=pos), bitorder="little")
    vis = bits[: t_total * n_gt].astype(bool).reshape(t_total, n_gt)
    if bits[t_total * n_gt :].any():
        raise SequenceFormatError("non-zero visibility padding bits", pos + vis_bytes - 1)
    pos += vis_bytes
    try:
        meta = json.loads(buf[pos : pos + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SequenceFormatError(f"malformed metadata: {exc}", pos) from exc
    if not isinstance(meta, dict):
        raise SequenceFormatError("metadata is not a JSON object", pos)
    if flags & FLAG_TRAJECTORY:
        frames = []
    return SequenceRecord(frames, gt, vis, meta, flags)


def write_sequence(record: SequenceRecord, path) -> None:
    data = encode_record(record)
    if not str(path):
        raise SequenceIOError("empty output path")
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise SequenceIOError(f"cannot write {path}: {exc}") from exc


def read_sequence(path) -> SequenceRecord:
    if not str(path):
        raise SequenceIOError("empty input path")
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise SequenceIOError(f"cannot read {path}: {exc}") from exc
    return decode_record(buf)


def trajectory_record(traj: np.ndarray, meta: dict | None = None) -> SequenceRecord:
    """Wrap predicted (T', N, 3) positions for storage in the sequence format."""
    traj = np.asarray(traj, dtype=np.float32)
    return SequenceRecord([], traj, np.ones(traj.shape[:2], dtype=bool), meta or {}, FLAG_TRAJECTORY)
