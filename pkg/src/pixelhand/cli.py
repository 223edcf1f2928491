"""Command-line surface for the detection, fusion, tracking and scoring tools.

Every command is batch-oriented and deterministic: fixed seeds and inputs give
byte-identical output files. Exit codes: 0 success, 1 missing input file,
2 parse error, 3 constraint violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import fusion, pipeline, report, tensor, tracking
from .config import load_config, thread_limit
from .errors import (
    ConfigError,
    DegenerateGeometryError,
    EvaluationError,
    GenerationError,
    ParseError,
)
from .evaluation import evaluate_detections
from .geometry import encode_ground_truth, load_boxes, save_boxes
from .losses import LossWeights, breakdown
from .tracking import Track, iou_track, load_mot, mot_metrics, run_sort, save_mot


def _opt(args, cfg, name, cast, default):
    """Resolve an option: command line beats config file beats built-in default."""
    val = getattr(args, name, None)
    if val is not None:
        return val
    if name in cfg:
        raw = cfg[name]
        try:
            return cast(raw)
        except ValueError:
            raise ParseError(f"config value {name}={raw!r} is not a valid {cast.__name__}") from None
    return default


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError:
        raise ParseError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> tuple:
    try:
        return tuple(float(p) for p in text.split(","))
    except ValueError:
        raise ParseError(f"expected comma-separated numbers, got {text!r}") from None


def _listing(directory, suffix) -> list:
    names = sorted(n for n in os.listdir(directory) if n.endswith(suffix))
    return [os.path.join(directory, n) for n in names]


def cmd_encode(args, cfg) -> int:
    height = _opt(args, cfg, "height", int, 256)
    width = _opt(args, cfg, "width", int, 256)
    shrink = _opt(args, cfg, "shrink", float, 0.1)
    boxes = load_boxes(args.boxes_file)
    maps = encode_ground_truth(boxes, height, width, shrink)
    pipeline.save_maps(maps, args.out_maps)
    return 0


def cmd_decode(args, cfg) -> int:
    score_thresh = _opt(args, cfg, "score_thresh", float, 0.8)
    nms_thresh = _opt(args, cfg, "nms_thresh", float, 0.2)
    max_candidates = _opt(args, cfg, "max_candidates", int, 20000)
    maps = pipeline.load_maps(args.maps_file)
    boxes = pipeline.decode(maps, score_thresh, nms_thresh, max_candidates)
    save_boxes(boxes, args.out_boxes)
    return 0


def cmd_eval_det(args, cfg) -> int:
    level = _opt(args, cfg, "level", str, "all")
    iou = _opt(args, cfg, "iou", float, 0.5)
    det_paths = _listing(args.dets_dir, ".txt")
    truth_paths = _listing(args.truths_dir, ".txt")
    det_stems = [os.path.splitext(os.path.basename(p))[0] for p in det_paths]
    truth_stems = [os.path.splitext(os.path.basename(p))[0] for p in truth_paths]
    if det_stems != truth_stems:
        raise ConfigError(
            f"detection/annotation file sets differ: {len(det_stems)} vs "
            f"{len(truth_stems)} files ({sorted(set(det_stems) ^ set(truth_stems))[:5]} ...)"
        )
    if not det_paths:
        raise ConfigError(f"no .txt files under {args.dets_dir}")
    with ThreadPoolExecutor(max_workers=thread_limit()) as pool:
        dets = list(pool.map(load_boxes, det_paths))
        truths = list(pool.map(load_boxes, truth_paths))
    result = evaluate_detections(dets, truths, iou_thresh=iou, level=level)
    sys.stdout.write(report.format_eval_report(result))
    if args.out_dir is not None:
        os.makedirs(args.out_dir, exist_ok=True)
        with open(os.path.join(args.out_dir, "report.txt"), "w") as f:
            f.write(report.format_eval_report(result))
        report.write_pr_csv(result, os.path.join(args.out_dir, "pr.csv"))
        report.write_fppi_csv(result, os.path.join(args.out_dir, "fppi.csv"))
        report.render_pr_curve(result, os.path.join(args.out_dir, "pr_curve.png"))
    return 0


def cmd_track(args, cfg) -> int:
    tracker = _opt(args, cfg, "tracker", str, "sort")
    det_paths = _listing(args.dets_dir, ".txt")
    if not det_paths:
        raise ConfigError(f"no .txt files under {args.dets_dir}")
    frames = [load_boxes(p) for p in det_paths]
    if tracker == "sort":
        tracks = run_sort(
            frames,
            iou_gate=_opt(args, cfg, "iou_gate", float, 0.3),
            max_age=_opt(args, cfg, "max_age", int, 1),
            min_hits=_opt(args, cfg, "min_hits", int, 3),
        )
    elif tracker == "iou":
        tracks = iou_track(
            frames,
            sigma_iou=_opt(args, cfg, "sigma_iou", float, 0.5),
            min_track_len=_opt(args, cfg, "min_track_len", int, 2),
        )
    else:
        raise ConfigError(f"unknown tracker {tracker!r}; expected 'sort' or 'iou'")
    save_mot(tracks, args.out_file)
    return 0


def cmd_eval_mot(args, cfg) -> int:
    iou = _opt(args, cfg, "iou", float, 0.5)
    tracks = load_mot(args.tracks_file)
    gt = load_mot(args.gt_file)
    result = mot_metrics(tracks, gt, iou_match=iou)
    sys.stdout.write(report.format_mot_report(result))
    if args.out_dir is not None:
        os.makedirs(args.out_dir, exist_ok=True)
        with open(os.path.join(args.out_dir, "report.txt"), "w") as f:
            f.write(report.format_mot_report(result))
        report.write_mot_timeline_csv(result, os.path.join(args.out_dir, "timeline.csv"))
        report.render_mot_timeline(result, os.path.join(args.out_dir, "timeline.png"))
    return 0


def cmd_generate(args, cfg) -> int:
    seed = _opt(args, cfg, "seed", int, 0)
    n_frames = _opt(args, cfg, "frames", int, 1)
    n_boxes = _opt(args, cfg, "boxes", int, 3)
    height = _opt(args, cfg, "height", int, 256)
    width = _opt(args, cfg, "width", int, 256)
    shrink = _opt(args, cfg, "shrink", float, 0.1)
    max_iou = _opt(args, cfg, "max_iou", float, 0.3)
    if n_frames < 1:
        raise ConfigError(f"--frames must be >= 1, got {n_frames}")
    if n_frames == 1:
        boxes, _maps = pipeline.generate_scene(
            seed, height, width, n_boxes, max_pair_iou=max_iou, shrink=shrink
        )
        frames = [boxes]
    else:
        frames = pipeline.generate_sequence(
            seed, n_frames, height, width, n_boxes, max_pair_iou=max_iou
        )
    os.makedirs(args.out_dir, exist_ok=True)
    gt_tracks = [Track(i + 1, state=tracking.CONFIRMED) for i in range(n_boxes)]
    for f, frame_boxes in enumerate(frames, start=1):
        save_boxes(frame_boxes, os.path.join(args.out_dir, f"frame_{f:04d}.txt"))
        for i, b in enumerate(frame_boxes):
            gt_tracks[i].add(f, tracking.to_tlwh(b))
        if args.with_maps:
            maps = encode_ground_truth(frame_boxes, height, width, shrink)
            pipeline.save_maps(maps, os.path.join(args.out_dir, f"frame_{f:04d}.maps"))
    save_mot(gt_tracks, os.path.join(args.out_dir, "gt.csv"))
    return 0


def cmd_fuse(args, cfg) -> int:
    block = _opt(args, cfg, "block", str, "hff")
    feats = [tensor.load(p) for p in (args.f0, args.f1, args.f2, args.f3)]
    weights = fusion.load_weights(args.weights_file)
    config = fusion.infer_config(weights, block=block, mask_sigmoid=not args.raw_mask)
    if args.strict_single_conv and not config.strict_single_conv:
        config = dataclasses.replace(config, strict_single_conv=True)
        fusion.check_weights(config, weights)
    fused = fusion.cascade(feats, config, weights)
    out_h, out_w = feats[0].height * 4, feats[0].width * 4
    if os.path.isdir(args.out) or args.out.endswith(os.sep):
        os.makedirs(args.out, exist_ok=True)
        for s in range(4):
            maps = fusion.head(fused[s], weights.heads[s], out_h, out_w)
            pipeline.save_maps(maps, os.path.join(args.out, f"scale{s}.maps"))
    else:
        maps = fusion.head(fused[0], weights.heads[0], out_h, out_w)
        pipeline.save_maps(maps, args.out)
    return 0


def _load_maps_arg(path) -> list:
    if os.path.isdir(path):
        paths = _listing(path, ".maps")
        if not paths:
            raise ConfigError(f"no .maps files under {path}")
        return [pipeline.load_maps(p) for p in paths]
    return [pipeline.load_maps(path)]


def cmd_losses(args, cfg) -> int:
    weights = LossWeights(
        alpha=_opt(args, cfg, "alpha", float, 0.01),
        beta=_opt(args, cfg, "beta", float, 20.0),
        w_s=_opt(args, cfg, "scale_weights", _float_list, (1.0, 1.0, 1.0, 1.0)),
        eps0=_opt(args, cfg, "eps0", float, 1e-5),
        eps1=_opt(args, cfg, "eps1", float, 1e-5),
    )
    preds = _load_maps_arg(args.pred)
    truths = _load_maps_arg(args.truth)
    if len(truths) == 1 and len(preds) > 1:
        truths = truths * len(preds)
    if len(preds) != len(truths):
        raise ConfigError(f"{len(preds)} predicted map sets vs {len(truths)} reference sets")
    result = breakdown(list(zip(preds, truths)), weights)
    sys.stdout.write(report.format_loss_report(result))
    if args.out_dir is not None:
        os.makedirs(args.out_dir, exist_ok=True)
        with open(os.path.join(args.out_dir, "report.txt"), "w") as f:
            f.write(report.format_loss_report(result))
        report.write_loss_csv(result, os.path.join(args.out_dir, "losses.csv"))
        report.render_loss_chart(result, os.path.join(args.out_dir, "losses.png"))
    return 0


def cmd_heatmap(args, cfg) -> int:
    channel = _opt(args, cfg, "channel", str, "score")
    maps = pipeline.load_maps(args.maps_file)
    if channel == "score":
        values = maps.score.data[0]
    elif channel == "rotation":
        values = (maps.rotation.data[0] + math.pi / 2) / math.pi
    elif channel.startswith("distance"):
        try:
            idx = int(channel[len("distance"):])
        except ValueError:
            raise ConfigError(f"bad channel {channel!r}") from None
        if not 0 <= idx < 4:
            raise ConfigError(f"distance channel index {idx} out of range 0..3")
        plane = maps.distance.data[idx]
        top = plane.max()
        values = plane / top if top > 0 else plane
    else:
        raise ConfigError(
            f"unknown channel {channel!r}; expected score, rotation or distance0..3"
        )
    report.write_pgm(values, args.out_file)
    return 0


def cmd_pyramid(args, cfg) -> int:
    seed = _opt(args, cfg, "seed", int, 0)
    channels = _opt(args, cfg, "channels", int, 8)
    height = _opt(args, cfg, "height", int, 256)
    width = _opt(args, cfg, "width", int, 256)
    rng = np.random.default_rng(seed)
    image = tensor.Tensor(rng.uniform(0.0, 1.0, size=(channels, height, width)))
    levels = fusion.build_pyramid(image)
    os.makedirs(args.out_dir, exist_ok=True)
    for s, level in enumerate(levels):
        tensor.dump(level, os.path.join(args.out_dir, f"scale{s}.pwt"))
    return 0


def cmd_make_weights(args, cfg) -> int:
    in_channels = _opt(args, cfg, "channels", _int_list, (8, 8, 8, 8))
    fused = _opt(args, cfg, "fused", _int_list, None) or in_channels
    config = fusion.FusionConfig(
        in_channels,
        fused,
        block=_opt(args, cfg, "block", str, "hff"),
        head_channels=_opt(args, cfg, "head_channels", int, 16),
        strict_single_conv=args.strict_single_conv,
    )
    weights = fusion.make_random_weights(config, seed=_opt(args, cfg, "seed", int, 0))
    fusion.save_weights(weights, args.out_file)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pixelhand",
        description="Rotated-box hand detection toolkit: map codecs, fusion, tracking, scoring.",
    )
    parser.add_argument("--config", help="key=value defaults file; flags override it")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="rasterize annotated boxes into score/rotation/distance maps")
    p.add_argument("boxes_file")
    p.add_argument("out_maps")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--shrink", type=float)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="extract scored boxes from maps via thresholding and NMS")
    p.add_argument("maps_file")
    p.add_argument("out_boxes")
    p.add_argument("--score-thresh", type=float, dest="score_thresh")
    p.add_argument("--nms-thresh", type=float, dest="nms_thresh")
    p.add_argument("--max-candidates", type=int, dest="max_candidates")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval-det", help="score detections against annotations (AP, AR, PR curve)")
    p.add_argument("dets_dir")
    p.add_argument("truths_dir")
    p.add_argument("--level", choices=["1", "2", "all"])
    p.add_argument("--iou", type=float)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_eval_det)

    p = sub.add_parser("track", help="link per-frame detections into identity tracks")
    p.add_argument("dets_dir")
    p.add_argument("out_file")
    p.add_argument("--tracker", choices=["sort", "iou"])
    p.add_argument("--iou-gate", type=float, dest="iou_gate")
    p.add_argument("--max-age", type=int, dest="max_age")
    p.add_argument("--min-hits", type=int, dest="min_hits")
    p.add_argument("--sigma-iou", type=float, dest="sigma_iou")
    p.add_argument("--min-track-len", type=int, dest="min_track_len")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval-mot", help="score tracks against ground truth (CLEAR metrics)")
    p.add_argument("tracks_file")
    p.add_argument("gt_file")
    p.add_argument("--iou", type=float)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_eval_mot)

    p = sub.add_parser("generate", help="write a synthetic scene or sequence with ground truth")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--boxes", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--shrink", type=float)
    p.add_argument("--max-iou", type=float, dest="max_iou")
    p.add_argument("--with-maps", action="store_true", dest="with_maps")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fuse", help="run the fusion cascade and prediction heads on a pyramid")
    p.add_argument("f0")
    p.add_argument("f1")
    p.add_argument("f2")
    p.add_argument("f3")
    p.add_argument("weights_file")
    p.add_argument("out", help="maps file, or an existing directory for per-scale maps")
    p.add_argument("--block", choices=["hff", "bff"])
    p.add_argument("--raw-mask", action="store_true", dest="raw_mask")
    p.add_argument("--strict-single-conv", action="store_true", dest="strict_single_conv")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("losses", help="print the loss breakdown between map sets")
    p.add_argument("pred", help="maps file or directory of per-scale .maps files")
    p.add_argument("truth", help="maps file (broadcast over scales) or directory")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--eps0", type=float)
    p.add_argument("--eps1", type=float)
    p.add_argument("--scale-weights", type=_float_list, dest="scale_weights")
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_losses)

    p = sub.add_parser("heatmap", help="dump one map channel as a portable graymap")
    p.add_argument("maps_file")
    p.add_argument("out_file")
    p.add_argument("--channel", help="score, rotation, or distance0..3")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("pyramid", help="synthesize a random image and pool it to four scales")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.set_defaults(func=cmd_pyramid)

    p = sub.add_parser("make-weights", help="write seeded random fusion weights")
    p.add_argument("out_file")
    p.add_argument("--channels", type=_int_list, help="per-scale input channels, e.g. 8,16,32,64")
    p.add_argument("--fused", type=_int_list, help="per-scale fused channels (default: same)")
    p.add_argument("--head-channels", type=int, dest="head_channels")
    p.add_argument("--block", choices=["hff", "bff"])
    p.add_argument("--strict-single-conv", action="store_true", dest="strict_single_conv")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_make_weights)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else {}
        return args.func(args, cfg)
    except (FileNotFoundError, NotADirectoryError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, DegenerateGeometryError, GenerationError, EvaluationError) as exc:
        print(f"constraint violated: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
