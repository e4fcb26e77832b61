"""Acceptance criteria, one test each. A pass/fail line per criterion is printed in the terminal summary."""

import dataclasses
import json
import math
import time

import numpy as np
import pytest
import torch

from acceptance_support import desk_scale, micro_overfit
from lsflow import data, geometry
from lsflow.backbone import FrameFeatures
from lsflow.cli import run
from lsflow.correlation import PaddedFrames, similarity_truncate
from lsflow.metrics import evaluate
from lsflow.tracker import AUX_MODES, AuxiliaryConfig, ModelConfig, TrackConfig, build_model, plan_windows, track_sequence
from lsflow.train import verify_gradients, window_loss

RESULTS: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    RESULTS[criterion] = (bool(ok), detail)
    assert ok, detail


def rel_close(a, b, tol=1e-6):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return bool(np.all(np.abs(a - b) <= tol * np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)))


# ------------------------------------------------------------ brute-force oracles


def oracle_knn(points, query, k):
    d = np.sqrt(((points - query) ** 2).sum(axis=1))
    order = np.lexsort((np.arange(len(d)), d))[:k]
    return order, d[order]


def oracle_fps(points, k, start=0):
    chosen = [start]
    mind = np.full(len(points), np.inf)
    for _ in range(k - 1):
        mind = np.minimum(mind, ((points - points[chosen[-1]]) ** 2).sum(axis=1))
        mind[chosen] = -1.0
        best = max(range(len(points)), key=lambda i: (mind[i], -i))
        chosen.append(best)
    return chosen


def oracle_truncate(q, feats, m):
    sims = [float(np.dot(q, f)) / math.sqrt(len(q)) for f in feats]
    order = sorted(range(len(sims)), key=lambda i: (-sims[i], i))[:m]
    return order, [sims[i] for i in order]


def oracle_metrics(pred, gt):
    t, n, _ = pred.shape
    err = np.array([[math.dist(pred[i, j], gt[i, j]) for j in range(n)] for i in range(t)])
    deltas = [100.0 * np.count_nonzero(err < x) / err.size for x in (0.1, 0.2, 0.4, 0.8)]
    per_traj = err.mean(axis=0)
    surv = np.mean([next((i for i in range(t) if err[i, j] > 0.5), t) / t for j in range(n)]) * 100
    return [err.mean(), *deltas, float(np.mean(deltas)), float(np.median(per_traj)), surv]


def test_criterion_1_oracle_equivalence():
    rng = np.random.default_rng(2024)
    start = time.time()
    bad = []
    for i in range(200):
        n = int(rng.integers(1, 2001))
        pts = rng.normal(size=(n, 3)) * rng.uniform(0.1, 10)
        if i % 10 == 0:
            pts = np.round(pts, 1)  # force ties
        k = int(rng.integers(1, min(n, 32) + 1))
        q = rng.normal(size=(4, 3))
        nb = geometry.knn_query(pts, q, k)
        for j in range(4):
            idx, dist = oracle_knn(pts, q[j], k)
            if nb.indices[j].tolist() != idx.tolist() or not rel_close(nb.distances[j], dist):
                bad.append(f"knn #{i}")
        kf = int(rng.integers(1, min(n, 24) + 1))
        if geometry.farthest_point_sample(pts, kf).tolist() != oracle_fps(pts, kf):
            bad.append(f"fps #{i}")
        c = int(rng.integers(1, 17))
        m_pts = int(rng.integers(1, 400))
        feats = rng.normal(size=(m_pts, c))
        if i % 10 == 1:
            feats = np.round(feats)
        frames = PaddedFrames.stack([FrameFeatures(torch.zeros(m_pts, 3, dtype=torch.float64),
                                                   torch.from_numpy(feats), np.arange(m_pts))])
        m = int(rng.integers(1, m_pts + 1))
        qf = rng.normal(size=(1, 3, c))
        if i % 10 == 1:
            qf = np.round(qf)
        tr = similarity_truncate(torch.from_numpy(qf), frames, m)
        for j in range(3):
            idx, vals = oracle_truncate(qf[0, j], feats, m)
            if tr.indices[0, j].tolist() != idx or not rel_close(tr.values[0, j].numpy(), vals):
                bad.append(f"truncate #{i}")
        t, nq = int(rng.integers(1, 12)), int(rng.integers(1, 30))
        gt = rng.normal(size=(t, nq, 3))
        pred = gt + rng.normal(size=gt.shape) * rng.uniform(0.01, 0.6)
        rep = evaluate(pred, gt)
        got = [rep.epe3d, *rep.delta.values(), rep.delta_avg, rep.mae3d, rep.survival]
        if not rel_close(got, oracle_metrics(pred, gt)):
            bad.append(f"evaluate #{i}")
    elapsed = time.time() - start
    record(1, not bad and elapsed < 60,
           f"200 instances x 4 ops, mismatches={bad[:5]}, {elapsed:.1f}s (limit 60s)")


def test_criterion_2_gradient_check():
    start = time.time()
    report = verify_gradients()
    elapsed = time.time() - start
    record(2, report.overall_max < 1e-4 and elapsed < 300,
           f"max rel err {report.overall_max:.2e} over {len(report.per_param)} tensors (limit 1e-4), {elapsed:.0f}s")


def test_criterion_3_identity_model():
    cfg = ModelConfig(channels=16, point_dim=16, voxel_dim=8, fuse_dim=16, flow_dim=4, pos_dim=4, time_dim=4,
                      depth=1, m_trunc=32)
    model = build_model(cfg, seed=3, zero_head=True)
    failures = []
    for seed in (0, 1):
        rec = data.generate(data.SceneSpec(seed=seed, frames=24, points_per_frame=512, occluder=seed == 1,
                                           trajectories=64))
        q = rec.gt_traj[0, :32].astype(np.float64)
        expected = np.broadcast_to(q.astype(np.float32).astype(np.float64), (24, 32, 3))
        for window in (2, 8, 16):
            for mode in AUX_MODES:
                tcfg = TrackConfig(iters=4, window=window, aux=AuxiliaryConfig(mode, 128, seed=seed))
                traj = track_sequence(model, rec.frames, q, 0, tcfg)
                if not np.array_equal(traj, expected):
                    failures.append((seed, window, mode))
    record(3, not failures, f"2 sequences x windows {{2,8,16}} x {len(AUX_MODES)} aux modes, non-constant={failures}")


def test_criterion_4_window_plan():
    bad = []
    pairs = 0
    for total in range(2, 201):
        for window in range(2, total + 1, 2):
            pairs += 1
            plan = plan_windows(total, window)
            ok = len(plan.windows) == math.ceil(2 * total / window - 1)
            ok &= plan.windows[0][0] == 0 and plan.windows[-1][1] == total
            ok &= all(s1 - s0 == window // 2 and e0 - s1 == window // 2
                      for (s0, e0), (s1, _) in zip(plan.windows, plan.windows[1:]))
            if not ok:
                bad.append((total, window))
    record(4, not bad, f"{pairs} (T', T) pairs checked exhaustively, failures={bad[:5]}")


def test_criterion_5_loss_weights():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        t, n = int(rng.integers(1, 9)), int(rng.integers(1, 20))
        gt = rng.normal(size=(t, n, 3))
        snaps = [rng.normal(size=(t, n, 3)) for _ in range(4)]
        ref = sum(w * np.mean(np.linalg.norm(s - gt, axis=-1)) for w, s in zip((0.512, 0.64, 0.8, 1.0), snaps))
        got = window_loss([torch.from_numpy(s) for s in snaps], torch.from_numpy(gt), 0.8).item()
        worst = max(worst, abs(got - ref) / abs(ref))
    record(5, worst <= 1e-6, f"max rel deviation {worst:.1e} over 50 random cases (limit 1e-6)")


def test_criterion_6_micro_overfit():
    res = micro_overfit()
    ok = res["ratio_to_untrained"] < 0.25 and res["gain_over_static"] >= 0.5 and res["train_seconds"] < 1800
    record(6, ok, f"EPE {res['untrained_epe']:.4f} -> {res['trained_epe']:.4f} "
                  f"({100 * res['ratio_to_untrained']:.1f}% of untrained, limit 25%); "
                  f"{100 * res['gain_over_static']:.1f}% better than static (need 50%); {res['train_seconds']:.0f}s")


@pytest.mark.slow
def test_criterion_7_desk_scale():
    res = desk_scale()
    model, static = res["model"], res["static"]
    ok = (res["epe_ratio_to_static"] <= 0.5 and model["delta_avg"] > static["delta_avg"]
          and res["drift_ratio"] <= 4.0 and res["train_seconds"] < 4 * 3600)
    record(7, ok, f"EPE {model['epe3d']:.4f} vs static {static['epe3d']:.4f} "
                  f"(ratio {res['epe_ratio_to_static']:.3f}, limit 0.5); delta_avg {model['delta_avg']:.2f} vs "
                  f"{static['delta_avg']:.2f}; drift 24/2 = {res['drift_ratio']:.2f} (limit 4); "
                  f"{res['train_seconds'] / 3600:.2f}h")


def test_criterion_8_metric_vector():
    gt = np.zeros((7, 5, 3))
    pred = gt.copy()
    pred[..., 1] = 0.15
    rep = evaluate(pred, gt)
    deltas = tuple(rep.delta.values())
    ok = rep.epe3d == 0.15 and deltas == (0.0, 100.0, 100.0, 100.0) and rep.delta_avg == 75.0 and rep.survival == 100.0
    record(8, ok, f"EPE={rep.epe3d!r} delta={deltas} delta_avg={rep.delta_avg!r} survival={rep.survival!r}")


TINY_RUN = {"model": {"channels": 8, "k_enc": 4, "m_trunc": 8, "m_k": 4, "resolution": 2, "corr_hidden": 8,
                      "point_dim": 8, "voxel_dim": 4, "fuse_dim": 8, "flow_dim": 2, "pos_dim": 2, "time_dim": 2,
                      "depth": 1, "heads": 2, "mlp_ratio": 1},
            "track": {"window": 4, "num_queries": 8}, "train": {"queries": 8, "window": 4}}


def _tiny_dataset(root):
    (root / "tiny.json").write_text(json.dumps(TINY_RUN))
    assert run(["generate", "--out", str(root / "gen"), "--count", "2", "--frames", "8", "--points", "128",
                "--trajectories", "16", "--background", "32"]) == 0


def test_criterion_9_ablation(tmp_path):
    _tiny_dataset(tmp_path)
    rows = {}
    for axis, expected in (("correlation-branch", ["point", "voxel", "point+voxel"]), ("iterations", ["1", "2", "4"])):
        code = run(["ablate", "--config", str(tmp_path / "tiny.json"), "--axis", axis, "--data", str(tmp_path / "gen"),
                    "--train-data", str(tmp_path / "gen"), "--steps", "3", "--out", str(tmp_path / axis)])
        lines = (tmp_path / axis / "ablation.csv").read_text().splitlines() if code == 0 else []
        rows[axis] = (code, [ln.split(",")[0] for ln in lines[1:]], expected)
    ok = all(code == 0 and got == exp for code, got, exp in rows.values())
    record(9, ok, "; ".join(f"{a}: exit {c}, rows {g}" for a, (c, g, _) in rows.items()))


def test_criterion_10_reproducibility(tmp_path, monkeypatch):
    cmds = [
        ["generate", "--out", "gen", "--count", "2", "--frames", "8", "--points", "128", "--trajectories", "16",
         "--background", "32"],
        ["train", "--config", "tiny.json", "--data", "gen", "--out", "m", "--steps", "3"],
        ["track", "--config", "tiny.json", "--sequence", "gen/seq_0000.pcs", "--checkpoint", "m/checkpoint.bin",
         "--out", "t", "--aux-mode", "knn_plus_random", "--aux-count", "16"],
        ["eval", "--pred", "t/trajectories.pcs", "--sequence", "gen/seq_0000.pcs", "--out", "e"],
        ["plot", "--pred", "t/trajectories.pcs", "--out", "p"],
    ]
    outputs = []
    for name in ("a", "b"):
        root = tmp_path / name
        root.mkdir()
        (root / "tiny.json").write_text(json.dumps(TINY_RUN))
        monkeypatch.chdir(root)
        codes = [run([*c, "--seed", "17", "--threads", "1"]) for c in cmds]
        assert codes == [0] * len(cmds)
        outputs.append({str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()})
    a, b = outputs
    diff = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    record(10, not diff, f"{len(cmds)} commands run twice, {len(a)} output files compared, differing={diff}")


def test_criterion_11_format_robustness(tmp_path):
    rec = data.generate(data.SceneSpec(seed=21, frames=6, points_per_frame=256, background_points=64,
                                       trajectories=32, occluder=True))
    path = tmp_path / "seq.pcs"
    data.write_sequence(rec, path)
    round_trip = data.read_sequence(path).equals(rec)
    raw = path.read_bytes()
    rng = np.random.default_rng(11)
    outcomes = []
    for i in range(50):
        buf = bytearray(raw)
        if i % 2:
            buf = buf[: int(rng.integers(0, len(buf)))]
        else:
            for pos in rng.choice(len(buf), size=int(rng.integers(1, 8)), replace=False):
                buf[pos] ^= int(rng.integers(1, 256))
        fuzzed = tmp_path / f"fuzz_{i:02d}.pcs"
        fuzzed.write_bytes(bytes(buf))
        try:
            data.read_sequence(fuzzed)
            outcomes.append("silent")
        except data.SequenceFormatError:
            outcomes.append("format")
        except Exception as exc:  # noqa: BLE001 - any other exception is a crash for this criterion
            outcomes.append(type(exc).__name__)
    bad = [o for o in outcomes if o != "format"]
    record(11, round_trip and not bad, f"round trip bit-exact={round_trip}; 50 fuzzed files, non-format outcomes={bad}")
