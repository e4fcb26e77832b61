"""Command-line entry point: generate | train | track | eval | ablate | plot."""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from . import data as dataio
from .metrics import DRIFT_CHECKPOINTS, OCCLUSION_BUCKETS, evaluate, write_table_csv
from .tracker import AUX_MODES, AuxiliaryConfig, ModelConfig, TrackConfig, build_model, track_sequence
from .train import DTYPES, TrainConfig, load_model, train

log = logging.getLogger("lsflow")

RUN_CONFIG_NAME = "run_config.json"

DEFAULTS: dict = {
    "seed": 0,
    "threads": 1,
    "precision": "f32",
    "model": ModelConfig().to_dict(),
    "scene": dataio.SceneSpec().to_dict(),
    "track": {"iters": 4, "window": 16, "aux_mode": "none", "aux_count": 1024,
              "num_queries": 256, "query_frame": 0},
    "train": {k: v for k, v in TrainConfig().to_dict().items() if k not in ("seed", "precision")},
    "generate": {"count": 1},
    "plot": {"axes": "xy"},
}

ABLATION_AXES = {
    "iterations": [1, 2, 4],
    "window-size": [2, 8, 16],
    "correlation-branch": ["point", "voxel", "point+voxel"],
    "aux-mode": list(AUX_MODES),
    "query-count": [16, 64, 256],
    "feature-update": [False, True],
}


def derive_seed(seed: int, *names) -> int:
    """Independent named sub-stream of the run seed."""
    key = "/".join([str(seed), *map(str, names)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        cfg = _merge(cfg, json.loads(Path(args.config).read_text()))
    for dest, value in vars(args).items():
        if value is None or "." not in dest:
            continue
        section, key = dest.split(".", 1)
        cfg.setdefault(section, {})[key] = value
    for key in ("seed", "threads", "precision"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    cfg["command"] = args.command
    cfg["inputs"] = {k: str(v) for k, v in sorted(vars(args).items())
                     if k in ("data", "sequence", "checkpoint", "pred", "query_file", "axis", "train_data") and v is not None}
    return cfg


def write_run_config(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / RUN_CONFIG_NAME).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _scene_spec(cfg: dict, seed: int) -> dataio.SceneSpec:
    return dataio.SceneSpec.from_dict({**cfg["scene"], "seed": seed})


def _track_config(cfg: dict) -> TrackConfig:
    t = cfg["track"]
    aux = AuxiliaryConfig(t["aux_mode"], int(t["aux_count"]), derive_seed(cfg["seed"], "aux"))
    return TrackConfig(iters=int(t["iters"]), window=int(t["window"]), aux=aux)


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"], "precision": cfg["precision"]})


def _list_sequences(folder) -> list[Path]:
    paths = sorted(Path(folder).glob("*.pcs"))
    if not paths:
        raise FileNotFoundError(f"no .pcs sequences in {folder}")
    return paths


def _model_for(cfg: dict, checkpoint: str | None):
    dtype = DTYPES[cfg["precision"]]
    if checkpoint:
        model = load_model(checkpoint, dtype)
        # ablation switches apply on top of trained weights
        model.cfg.use_point = cfg["model"]["use_point"]
        model.cfg.use_voxel = cfg["model"]["use_voxel"]
        model.correlation.fuse.use_point = cfg["model"]["use_point"]
        model.correlation.fuse.use_voxel = cfg["model"]["use_voxel"]
        model.cfg.feature_update = cfg["model"]["feature_update"]
        return model
    return build_model(ModelConfig.from_dict(cfg["model"]), seed=derive_seed(cfg["seed"], "init"), dtype=dtype)


# --------------------------------------------------------------- subcommands


def cmd_generate(args, cfg) -> None:
    out = Path(args.out)
    write_run_config(out, cfg)
    for i in range(int(cfg["generate"]["count"])):
        rec = dataio.generate(_scene_spec(cfg, derive_seed(cfg["seed"], "generate", i)))
        dataio.write_sequence(rec, out / f"seq_{i:04d}.pcs")
    log.info("wrote %d sequences to %s", cfg["generate"]["count"], out)


def cmd_train(args, cfg) -> None:
    out = Path(args.out)
    write_run_config(out, cfg)
    records = [dataio.read_sequence(p) for p in _list_sequences(args.data)]
    train(records, _train_config(cfg), model_cfg=ModelConfig.from_dict(cfg["model"]), out_dir=out)


def _queries(cfg: dict, record: dataio.SequenceRecord, query_file: str | None):
    t = cfg["track"]
    frame = int(t["query_frame"])
    if query_file:
        pts = np.loadtxt(query_file, delimiter=",", ndmin=2)
        return pts, frame, None
    n = min(int(t["num_queries"]), int(record.visibility[frame].sum()))
    pts, _, idx = dataio.sample_queries(record, n, frame, derive_seed(cfg["seed"], "queries"))
    return pts.astype(np.float64), frame, idx


def run_tracking(cfg: dict, record: dataio.SequenceRecord, checkpoint: str | None, query_file: str | None = None):
    model = _model_for(cfg, checkpoint)
    queries, frame, idx = _queries(cfg, record, query_file)
    traj = track_sequence(model, record.frames, queries, frame, _track_config(cfg))
    return traj, frame, idx


def cmd_track(args, cfg) -> None:
    out = Path(args.out)
    write_run_config(out, cfg)
    record = dataio.read_sequence(args.sequence)
    traj, frame, idx = run_tracking(cfg, record, args.checkpoint, args.query_file)
    meta = {"query_frame": frame, "anchor_indices": None if idx is None else idx.tolist(),
            "sequence": str(args.sequence)}
    dataio.write_sequence(dataio.trajectory_record(traj, meta), out / "trajectories.pcs")
    summary = {"frames": int(traj.shape[0]), "queries": int(traj.shape[1]), "query_frame": frame,
               "window": cfg["track"]["window"], "iters": cfg["track"]["iters"],
               "aux_mode": cfg["track"]["aux_mode"],
               "mean_displacement": float(np.linalg.norm(traj[-1] - traj[frame], axis=-1).mean())}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def _truth_for(pred: dataio.SequenceRecord, record: dataio.SequenceRecord):
    idx = pred.meta.get("anchor_indices")
    if idx is None:
        raise ValueError("trajectory file has no anchor indices; cannot align ground truth")
    return record.gt_traj[:, idx].astype(np.float64), record.visibility[:, idx]


def cmd_eval(args, cfg) -> None:
    out = Path(args.out)
    write_run_config(out, cfg)
    pred = dataio.read_sequence(args.pred)
    record = dataio.read_sequence(args.sequence)
    gt, vis = _truth_for(pred, record)
    checkpoints = [c for c in DRIFT_CHECKPOINTS if c < gt.shape[0]]
    report = evaluate(pred.gt_traj.astype(np.float64), gt, vis, drift_checkpoints=checkpoints,
                      occlusion_buckets=OCCLUSION_BUCKETS)
    (out / "report.json").write_text(report.to_json() + "\n")
    write_table_csv(out / "drift.csv", ["frame", "epe3d"], [[c, repr(v)] for c, v in report.drift.items()])
    write_table_csv(out / "occlusion.csv", ["occluded_frames", "epe3d"],
                    [[k, repr(v)] for k, v in (report.occlusion or {}).items()])


def _apply_ablation(cfg: dict, axis: str, value) -> dict:
    c = copy.deepcopy(cfg)
    if axis == "iterations":
        c["track"]["iters"] = value
        c["train"]["iters"] = value
    elif axis == "window-size":
        c["track"]["window"] = value
    elif axis == "correlation-branch":
        c["model"]["use_point"] = value in ("point", "point+voxel")
        c["model"]["use_voxel"] = value in ("voxel", "point+voxel")
    elif axis == "aux-mode":
        c["track"]["aux_mode"] = value
    elif axis == "query-count":
        c["track"]["num_queries"] = value
    elif axis == "feature-update":
        c["model"]["feature_update"] = value
    return c


def cmd_ablate(args, cfg) -> None:
    out = Path(args.out)
    write_run_config(out, cfg)
    records = [dataio.read_sequence(p) for p in _list_sequences(args.data)]
    train_records = [dataio.read_sequence(p) for p in _list_sequences(args.train_data)] if args.train_data else None
    rows = []
    for value in ABLATION_AXES[args.axis]:
        c = _apply_ablation(cfg, args.axis, value)
        if args.axis == "window-size" and value > min(r.length for r in records):
            log.warning("skipping window %s longer than the sequences", value)
            continue
        checkpoint = args.checkpoint
        if train_records is not None:
            sub = out / f"model_{args.axis}_{value}"
            c["train"]["window"] = min(c["train"]["window"], min(r.length for r in train_records))
            train(train_records, _train_config(c), model_cfg=ModelConfig.from_dict(c["model"]), out_dir=sub)
            checkpoint = str(sub / "checkpoint.bin")
        preds, gts = [], []
        for rec in records:
            traj, _, idx = run_tracking(c, rec, checkpoint)
            preds.append(traj)
            gts.append(rec.gt_traj[:, idx].astype(np.float64))
        rep = evaluate(np.concatenate(preds, axis=1), np.concatenate(gts, axis=1))
        rows.append([value, repr(rep.epe3d), repr(rep.delta_avg), repr(rep.survival), repr(rep.mae3d)])
    write_table_csv(out / "ablation.csv", [args.axis, "epe3d", "delta_avg", "survival", "mae3d"], rows)


AXIS_INDEX = {"x": 0, "y": 1, "z": 2}


def render_svg(traj: np.ndarray, axes: str = "xy", size: int = 640, margin: int = 20) -> str:
    """Polyline per trajectory, projected onto two axes; segment color ramps with the frame index."""
    a, b = (AXIS_INDEX[c] for c in axes)
    pts = traj[..., [a, b]]
    lo = pts.reshape(-1, 2).min(axis=0)
    span = max(float((pts.reshape(-1, 2).max(axis=0) - lo).max()), 1e-9)
    scale = (size - 2 * margin) / span

    def xy(p):
        return margin + (p[0] - lo[0]) * scale, size - margin - (p[1] - lo[1]) * scale

    t_total = traj.shape[0]
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    for n in range(traj.shape[1]):
        for t in range(t_total - 1):
            x0, y0 = xy(pts[t, n])
            x1, y1 = xy(pts[t + 1, n])
            f = t / max(t_total - 2, 1)
            color = f"rgb({int(255 * f)},{int(64 + 64 * (1 - f))},{int(255 * (1 - f))})"
            lines.append(f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y1:.2f}" stroke="{color}" stroke-width="1.5"/>')
        sx, sy = xy(pts[0, n])
        lines.append(f'<circle cx="{sx:.2f}" cy="{sy:.2f}" r="2" fill="black"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def cmd_plot(args, cfg) -> None:
    out = Path(args.out)
    write_run_config(out, cfg)
    pred = dataio.read_sequence(args.pred)
    traj = pred.gt_traj.astype(np.float64)
    axes = cfg["plot"]["axes"]
    (out / "trajectories.svg").write_text(render_svg(traj, axes))
    rows = [[t, n, *map(repr, map(float, traj[t, n]))] for n in range(traj.shape[1]) for t in range(traj.shape[0])]
    write_table_csv(out / "trajectories.csv", ["frame", "query", "x", "y", "z"], rows)


# -------------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags given on the command line override it")
    p.add_argument("--seed", type=int, help="root seed, fanned out to named sub-streams (default 0)")
    p.add_argument("--threads", type=int, help="torch intra-op threads (default 1, bit-exact)")
    p.add_argument("--precision", choices=sorted(DTYPES), help="floating point precision (default f32)")
    p.add_argument("--out", required=True, help="output directory")


def _track_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window", dest="track.window", type=int, help="sliding window length, even (default 16)")
    p.add_argument("--iters", dest="track.iters", type=int, help="refinement iterations per window (default 4)")
    p.add_argument("--aux-mode", dest="track.aux_mode", choices=AUX_MODES, help="auxiliary query mode (default none)")
    p.add_argument("--aux-count", dest="track.aux_count", type=int, help="auxiliary point budget (default 1024)")
    p.add_argument("--num-queries", dest="track.num_queries", type=int,
                   help="ground-truth anchors sampled as queries (default 256)")
    p.add_argument("--query-frame", dest="track.query_frame", type=int, help="frame the queries come from (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsflow", description="Long-term point-cloud scene flow tracking.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{generate,train,track,eval,ablate,plot}")

    p = sub.add_parser("generate", help="generate synthetic sequences")
    _common(p)
    p.add_argument("--count", dest="generate.count", type=int, help="number of sequences (default 1)")
    p.add_argument("--frames", dest="scene.frames", type=int, help="frames per sequence (default 24)")
    p.add_argument("--points", dest="scene.points_per_frame", type=int, help="points per frame (default 1024)")
    p.add_argument("--bodies", dest="scene.bodies", type=int, help="rigid bodies (default 3)")
    p.add_argument("--trajectories", dest="scene.trajectories", type=int, help="ground-truth anchors (default 128)")
    p.add_argument("--background", dest="scene.background_points", type=int, help="static floor points per frame (default 128)")
    p.add_argument("--max-speed", dest="scene.max_speed", type=float, help="maximum body speed in m/frame (default 0.05)")
    p.add_argument("--max-angular", dest="scene.max_angular", type=float, help="maximum angular speed in rad/frame (default 0.05)")
    p.add_argument("--sheet", dest="scene.sheet", action="store_const", const=True, help="add a deforming sheet")
    p.add_argument("--occluder", dest="scene.occluder", action="store_const", const=True, help="add a moving occluding slab")

    p = sub.add_parser("train", help="train a model on a directory of sequences")
    _common(p)
    p.add_argument("--data", required=True, help="directory of .pcs training sequences")
    p.add_argument("--steps", dest="train.steps", type=int, help="optimizer steps (default 1000)")
    p.add_argument("--lr", dest="train.lr", type=float, help="peak learning rate (default 2e-4)")
    p.add_argument("--batch-size", dest="train.batch_size", type=int, help="sequences per step (default 1)")
    p.add_argument("--window", dest="train.window", type=int, help="training window length (default 16)")
    p.add_argument("--queries", dest="train.queries", type=int, help="queries per sample (default 256)")
    p.add_argument("--iters", dest="train.iters", type=int, help="refinement iterations (default 4)")
    p.add_argument("--gamma", dest="train.gamma", type=float, help="iteration discount (default 0.8)")
    p.add_argument("--checkpoint-every", dest="train.checkpoint_every", type=int, help="checkpoint interval in steps (0 = end only)")

    p = sub.add_parser("track", help="track queries through one sequence")
    _common(p)
    p.add_argument("--sequence", required=True, help="input .pcs sequence")
    p.add_argument("--checkpoint", help="trained checkpoint (default: seeded untrained model)")
    p.add_argument("--query-file", help="CSV of x,y,z queries instead of sampled anchors")
    _track_flags(p)

    p = sub.add_parser("eval", help="score a trajectory file against its sequence")
    _common(p)
    p.add_argument("--pred", required=True, help="trajectory file written by track")
    p.add_argument("--sequence", required=True, help="sequence the trajectories were tracked on")

    p = sub.add_parser("ablate", help="evaluate a grid of configurations along one axis")
    _common(p)
    p.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES), help="ablation axis")
    p.add_argument("--data", required=True, help="directory of .pcs evaluation sequences")
    p.add_argument("--checkpoint", help="trained checkpoint shared by all rows")
    p.add_argument("--train-data", help="train each row from scratch on this directory instead")
    p.add_argument("--steps", dest="train.steps", type=int, help="training steps per row with --train-data")
    _track_flags(p)

    p = sub.add_parser("plot", help="render trajectories as SVG polylines and CSV")
    _common(p)
    p.add_argument("--pred", required=True, help="trajectory file written by track")
    p.add_argument("--axes", dest="plot.axes", choices=["xy", "xz", "yz"], help="projection plane (default xy)")
    for action in (a for sp in sub.choices.values() for a in sp._actions):
        if "." in action.dest and action.metavar is None and action.nargs != 0 and not action.choices:
            action.metavar = action.dest.split(".", 1)[1].upper()
    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "track": cmd_track, "eval": cmd_eval,
            "ablate": cmd_ablate, "plot": cmd_plot}


def _normalize_scene(cfg: dict) -> None:
    scene = cfg["scene"]
    if "max_speed" in scene:
        scene["speed"] = [0.0, float(scene.pop("max_speed"))]
    if "max_angular" in scene:
        scene["angular_speed"] = [0.0, float(scene.pop("max_angular"))]


def run(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("PCST_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        _normalize_scene(cfg)
        torch.set_num_threads(int(cfg["threads"]))
        COMMANDS[args.command](args, cfg)
    except Exception as exc:  # pipeline failure: structured message, exit 1
        log.debug("%s", traceback.format_exc())
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
