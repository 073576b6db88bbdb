"""Command-line entry point: dataset generation, curriculum training,
autoregressive rollout, and metric reports.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
Every command is deterministic given its seed and configuration; JSON outputs
embed the configuration hash.
"""

from __future__ import annotations

import os

if "WM_THREADS" in os.environ:  # cap BLAS parallelism; must precede numpy load
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, os.environ["WM_THREADS"])

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as cfgmod
from . import metrics as M
from . import rollout as RO
from . import toyroad as R
from . import training as TR
from .backbone import ConditionSet, VideoDenoiser
from .diffusion import build_schedule
from .errors import (ConfigError, ContractError, DataError, FormatError,
                     LongroadError, MetricUndefinedError, NumericDomainError,
                     NumericFailure)
from .seeding import rng_for

METRIC_NAMES = ("mawe", "warp_error", "optical_flow_score",
                "background_consistency", "fid_proxy", "fvd_proxy", "curves")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    p = _Parser(prog="longroad",
                description="Desk-scale long-horizon video world model lab.")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("datagen", help="render a synthetic clip dataset")
    d.add_argument("--out", required=True, help="output dataset directory")
    d.add_argument("--clips", type=int, default=8)
    d.add_argument("--frames", type=int, default=64)
    d.add_argument("--height", type=int, default=32)
    d.add_argument("--width", type=int, default=48)
    d.add_argument("--fps", type=int, default=10)
    d.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="run the curriculum training loop")
    t.add_argument("--config", default=None, help="JSON run configuration")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="checkpoint/log directory")

    r = sub.add_parser("rollout", help="autoregressive long-video generation")
    r.add_argument("--ckpt", required=True, help="model checkpoint (.idck)")
    r.add_argument("--config", default=None)
    r.add_argument("--cond", required=True,
                   help="condition clip (.toyr) or 'none' for a text-only start")
    r.add_argument("--iters", type=int, required=True)
    r.add_argument("--caption", default=None, help="caption text to condition on")
    r.add_argument("--direction", default="straight",
                   choices=("straight", "left", "right"),
                   help="per-frame drive command fed to the model")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True, help="output clip path (.toyr)")

    e = sub.add_parser("eval", help="metric report over generated clips")
    e.add_argument("--gen", required=True, help="directory of generated clips")
    e.add_argument("--ref", required=True, help="directory of reference clips")
    e.add_argument("--config", default=None)
    e.add_argument("--metrics", default=",".join(METRIC_NAMES),
                   help="comma-separated metric names")
    e.add_argument("--window", type=int, default=None,
                   help="override the evaluation window length")
    e.add_argument("--out", required=True, help="report JSON path")
    e.add_argument("--csv", default=None, help="optional CSV of windowed curves")
    return p


def cmd_datagen(args) -> int:
    if min(args.clips, args.frames, args.height, args.width, args.fps) < 1:
        raise UsageError("clips/frames/height/width/fps must all be >= 1")
    run_cfg = cfgmod.load_config(None, overrides={"data": {
        "clips": args.clips, "frames": args.frames, "height": args.height,
        "width": args.width, "fps": args.fps, "seed": args.seed}})
    R.generate_dataset(args.out, args.clips, args.frames, args.height,
                       args.width, args.fps, args.seed,
                       extra_manifest={"config_hash": cfgmod.config_hash(run_cfg)})
    print(f"wrote {args.clips} clips to {args.out}")
    return 0


def _build_model(cfg: dict) -> VideoDenoiser:
    mc = cfgmod.model_config(cfg)
    return VideoDenoiser(mc, rng_for(cfg["train"]["seed"], "init"))


def cmd_train(args) -> int:
    cfg = cfgmod.load_config(args.config)
    if not Path(args.data).exists():
        raise DataError(f"dataset directory {args.data} does not exist")
    dataset = R.ClipDataset(args.data)
    model = _build_model(cfg)
    tc = cfgmod.train_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chash = cfgmod.config_hash(cfg)
    result = TR.run_curriculum(model, dataset, tc, out,
                               log_path=out / "train_log.jsonl")
    meta = {
        "config_hash": chash,
        "checkpoints": [str(p) for p in result.checkpoints],
        "steps": len(result.history),
        "final_loss": result.history[-1]["loss"] if result.history else None,
    }
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    print(f"trained {len(result.history)} steps; checkpoints: "
          + ", ".join(p.name for p in result.checkpoints))
    return 0


def cmd_rollout(args) -> int:
    cfg = cfgmod.load_config(args.config)
    if args.iters < 1:
        raise UsageError("--iters must be >= 1")
    model = _build_model(cfg)
    ckpt.load_into(args.ckpt, model.named_parameters())
    schedule = build_schedule(cfg["train"]["t_max"], cfg["train"]["beta_start"],
                              cfg["train"]["beta_end"])
    l_window = cfg["rollout"]["l_window"]
    m_memory = cfg["train"]["memory_span_d"]   # full-resolution memory rule
    fps = cfg["rollout"]["fps"]
    settings = RO.SamplerSettings(l_window=l_window, steps=cfg["rollout"]["steps"],
                                  guidance_scale=cfg["rollout"]["guidance_scale"])
    cmd_code = {"straight": R.STRAIGHT, "left": R.LEFT, "right": R.RIGHT}[args.direction]

    def condition(height, width):
        if args.caption is None:
            return None
        return ConditionSet(text_tokens=R.encode_caption(args.caption),
                            command_ids=np.full(l_window, cmd_code, dtype=np.int64),
                            fps=float(fps), height=float(height), width=float(width))

    rng = rng_for(args.seed, "sampler")
    if args.cond == "none":
        h, w = cfg["data"]["height"], cfg["data"]["width"]
        cond = condition(h, w)
        state = RO.bootstrap(model, schedule, cond, settings, m_memory,
                             (cfg["model"]["channels"], h, w), fps, rng)
        frames = RO.run(state, model, schedule, cond, settings,
                        args.iters - 1, rng)
    else:
        record = R.read_clip(args.cond)
        if record.frames.shape[0] != m_memory:
            raise ContractError(
                f"condition clip has {record.frames.shape[0]} frames, "
                f"rollout memory expects exactly {m_memory}"
            )
        cond = condition(record.frames.shape[2], record.frames.shape[3])
        state = RO.init(R.to_model_space(record.frames), fps)
        frames = RO.run(state, model, schedule, cond, settings, args.iters, rng)

    caption = args.caption or "unconditional rollout"
    out_record = R.ClipRecord(frames=R.to_pixel_space(frames), fps=fps,
                              caption=caption,
                              commands=np.full(frames.shape[0], cmd_code, np.uint8))
    R.write_clip(out_record, args.out)
    sidecar = {
        "config_hash": cfgmod.config_hash(cfg), "seed": args.seed,
        "iters": args.iters, "checkpoint": str(args.ckpt),
        "frames": int(frames.shape[0]),
        "duration_seconds": frames.shape[0] / fps,
    }
    Path(str(args.out) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    print(f"wrote {frames.shape[0]} frames to {args.out}")
    return 0


def _load_clip_dir(path) -> dict[str, np.ndarray]:
    root = Path(path)
    files = sorted(root.glob("*.toyr"))
    if not files:
        raise DataError(f"no .toyr clips under {root}")
    return {f.name: R.read_clip(f).frames for f in files}


def cmd_eval(args) -> int:
    cfg = cfgmod.load_config(args.config)
    requested = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in requested if m not in METRIC_NAMES]
    if bad:
        raise UsageError(
            f"unknown metric name(s) {bad}; valid: {', '.join(METRIC_NAMES)}"
        )
    ecfg = cfg["eval"]
    mcfg = M.MetricConfig(c=ecfg["c"], window=args.window or ecfg["window"],
                          search_radius=ecfg["search_radius"], block=ecfg["block"],
                          feature_seed=ecfg["feature_seed"])
    gen = _load_clip_dir(args.gen)
    ref = _load_clip_dir(args.ref)

    ref_frame_feats, ref_stack_feats = [], []
    for vid in ref.values():
        f, s = M.video_features(vid, mcfg.feature_seed)
        ref_frame_feats.append(f)
        if s.shape[0]:
            ref_stack_feats.append(s)
    ref_frames = M.feature_stats(np.concatenate(ref_frame_feats))
    ref_stacks = (M.feature_stats(np.concatenate(ref_stack_feats))
                  if ref_stack_feats else None)

    per_clip: dict[str, dict] = {}
    gen_frame_feats, gen_stack_feats = [], []
    for name, vid in gen.items():
        entry: dict = {"frames": int(vid.shape[0])}
        f, s = M.video_features(vid, mcfg.feature_seed)
        gen_frame_feats.append(f)
        if s.shape[0]:
            gen_stack_feats.append(s)
        if "mawe" in requested:
            entry["mawe"] = M.mawe(vid, mcfg)
        if "warp_error" in requested:
            entry["warp_error"] = M.warp_error(vid, mcfg)
        if "optical_flow_score" in requested:
            entry["optical_flow_score"] = M.optical_flow_score(vid, mcfg)
        if "background_consistency" in requested:
            entry["background_consistency"] = M.background_consistency_from_features(f)
        if "curves" in requested and vid.shape[0] >= mcfg.window:
            entry["curves"] = M.windowed_curves(vid, mcfg, ref_frames, ref_stacks)
        per_clip[name] = entry

    aggregate: dict = {}
    for key in ("mawe", "warp_error", "optical_flow_score", "background_consistency"):
        vals = [e[key] for e in per_clip.values() if key in e]
        if vals:
            aggregate[key] = float(np.mean(vals))
    if "fid_proxy" in requested:
        aggregate["fid_proxy"] = M.frechet_distance(
            M.feature_stats(np.concatenate(gen_frame_feats)), ref_frames)
    if "fvd_proxy" in requested and gen_stack_feats and ref_stacks is not None:
        aggregate["fvd_proxy"] = M.frechet_distance(
            M.feature_stats(np.concatenate(gen_stack_feats)), ref_stacks)

    report = {
        "config_hash": cfgmod.config_hash(cfg),
        "extractor_checksum": M.extractor_checksum(
            int(next(iter(gen.values())).shape[1]), mcfg.feature_seed),
        "window": mcfg.window,
        "per_clip": per_clip,
        "aggregate": aggregate,
    }
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True))
    if args.csv:
        lines = ["clip,frame,metric,value"]
        for name, entry in per_clip.items():
            for point in entry.get("curves", []):
                for key, val in point.items():
                    if key != "frame" and val is not None:
                        lines.append(f"{name},{point['frame']},{key},{val}")
        Path(args.csv).write_text("\n".join(lines) + "\n")
    print(f"wrote report to {args.out}")
    return 0


_DISPATCH = {"datagen": cmd_datagen, "train": cmd_train,
             "rollout": cmd_rollout, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _DISPATCH[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 1
    except (DataError, FormatError, ContractError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (NumericFailure, NumericDomainError, MetricUndefinedError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except LongroadError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
