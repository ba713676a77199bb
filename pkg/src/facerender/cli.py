"""Command-line entry points for the full pipeline lifecycle.

Exit codes: 0 success, 1 usage error (bad flags/arguments), 2 runtime
failure. Every stochastic subcommand takes --seed and is bit-reproducible
given identical inputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import List, Optional

import numpy as np


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 instead of argparse's 2
        raise UsageError(message)


def _load_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _load_motion(path: str):
    from .face import MotionFrame

    return MotionFrame.from_json_dict(_load_json(path))


def _train_config(args, overrides: Optional[dict] = None):
    from .train import TrainConfig

    data = _load_json(args.config) if getattr(args, "config", None) else {}
    if overrides:
        data.update(overrides)
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    return TrainConfig.from_json(data)


def cmd_dataset_synth(args) -> int:
    from .data import synthesize_dataset

    cfg = _load_json(args.config) if args.config else {}
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    manifest = synthesize_dataset(
        args.out, seed=seed,
        n_train=cfg.get("n_train", 8), n_val=cfg.get("n_val", 2), n_test=cfg.get("n_test", 0),
        clip_length=cfg.get("clip_length", 48), size=cfg.get("size", 64))
    total = sum(len(v) for v in manifest.splits.values())
    print(f"wrote {total} clips under {args.out}")
    return 0


def cmd_train_renderer(args) -> int:
    from .data import load_manifest
    from .train import train_renderer_stage1, train_renderer_stage2

    config = _train_config(args)
    manifest = load_manifest(args.dataset)
    stage1_ckpt = args.stage1_checkpoint
    if args.stage in ("1", "both"):
        result = train_renderer_stage1(config, manifest, args.out, resume_from=args.resume)
        stage1_ckpt = result.checkpoint_dir
        print(f"stage 1 done: {stage1_ckpt} "
              f"(final warp {result.final_stats['final_warp_mean']:.4f}, "
              f"identity baseline {result.final_stats['identity_baseline_mean']:.4f})")
    if args.stage in ("2", "both"):
        if not stage1_ckpt:
            raise UsageError("stage 2 requires --stage1-checkpoint (or --stage both)")
        result = train_renderer_stage2(config, manifest, args.out, stage1_ckpt)
        print(f"stage 2 done: {result.checkpoint_dir} "
              f"(total median {result.final_stats['leading_total_median']:.4f} -> "
              f"{result.final_stats['trailing_total_median']:.4f})")
    return 0


def cmd_train_flow(args) -> int:
    from .data import load_manifest
    from .train import train_flow

    config = _train_config(args)
    manifest = load_manifest(args.dataset)
    whichs = ["expression", "pose"] if args.which == "both" else [args.which]
    for which in whichs:
        result = train_flow(config, manifest, args.out, which)
        print(f"{which} flow done: {result.checkpoint_dir} "
              f"(held-out NLL {result.final_stats['initial_heldout_nll']:.4f} -> "
              f"{result.final_stats['final_heldout_nll']:.4f})")
    return 0


def _render_one(model, source: np.ndarray, frame) -> np.ndarray:
    from .face import window_descriptor, descriptors_to_tensor
    from .tensor import Tensor, no_grad

    descriptor = window_descriptor([frame], 0, model.cfg.window_len, mode="single")
    with no_grad():
        _, edited, _, _ = model.render_full(Tensor(source[None]),
                                            descriptors_to_tensor([descriptor]))
    return edited.data[0]


def cmd_render(args) -> int:
    from .data import load_png, save_png
    from .nets import RendererModel

    model = RendererModel.load(args.checkpoint)
    image = _render_one(model, load_png(args.source), _load_motion(args.motion))
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_png(args.out, image)
    print(f"wrote {args.out}")
    return 0


def cmd_reenact(args) -> int:
    from .data import load_png, save_png
    from .face import load_track, window_descriptor, descriptors_to_tensor
    from .nets import RendererModel
    from .tensor import Tensor, no_grad

    model = RendererModel.load(args.checkpoint)
    source = load_png(args.source)
    track = load_track(args.driving)
    os.makedirs(args.out, exist_ok=True)
    for i in range(len(track)):
        descriptor = window_descriptor(track, i, model.cfg.window_len, mode="windowed")
        with no_grad():
            _, edited, _, _ = model.render_full(Tensor(source[None]),
                                                descriptors_to_tensor([descriptor]))
        save_png(os.path.join(args.out, f"frame_{i:05d}.png"), edited.data[0])
    print(f"wrote {len(track)} frames under {args.out}")
    return 0


def cmd_audio_drive(args) -> int:
    from .data import audio_features, load_png, read_wav, save_png
    from .face import MotionFrame, save_track
    from .flow import NormFlowModel, generate_sequence
    from .nets import RendererModel
    from .rng import Rng

    model = RendererModel.load(args.checkpoint)
    expr = NormFlowModel.load(os.path.join(args.flow, "flow_expression_checkpoint"))
    pose = NormFlowModel.load(os.path.join(args.flow, "flow_pose_checkpoint"))
    source = load_png(args.source)
    source_motion = _load_motion(args.source_motion) if args.source_motion else MotionFrame.zero()
    pcm = read_wav(args.wav)
    feats = audio_features(pcm)
    length = feats.shape[0]  # floor(duration * 25)
    lookahead = expr.cfg.lookahead
    # Edge-extend the feature track so the look-ahead window exists at the end.
    feats_ext = np.concatenate([feats, np.repeat(feats[-1:], lookahead, axis=0)], axis=0)
    track = generate_sequence(expr, pose, feats_ext, source_motion, length,
                              temperature=args.temperature,
                              rng=Rng(args.seed if args.seed is not None else 0))
    os.makedirs(args.out, exist_ok=True)
    save_track(os.path.join(args.out, "generated_motions.jsonl"), track)
    for i, frame in enumerate(track):
        save_png(os.path.join(args.out, f"frame_{i:05d}.png"),
                 _render_one(model, source, frame))
    print(f"wrote {length} frames under {args.out}")
    return 0


def cmd_interpolate(args) -> int:
    from .data import load_png, save_png
    from .face import window_descriptor, descriptors_to_tensor
    from .nets import RendererModel, interpolate_latent
    from .tensor import Tensor, no_grad

    model = RendererModel.load(args.checkpoint)
    source = load_png(args.source)
    if not 0.0 <= args.alpha <= 1.0:
        raise UsageError(f"--alpha must lie in [0,1], got {args.alpha}")

    def latent(frame):
        descriptor = window_descriptor([frame], 0, model.cfg.window_len, mode="single")
        with no_grad():
            return model.map_motion(descriptors_to_tensor([descriptor]))

    z = interpolate_latent(latent(_load_motion(args.p1)), latent(_load_motion(args.p2)),
                           args.alpha)
    src = Tensor(source[None])
    with no_grad():
        flow = model.predict_flow(src, z)
        warped = model.warp_image(src, flow)
        edited = model.edit_image(warped, src, z)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_png(args.out, edited.data[0])
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .data import load_manifest
    from .losses import FeatureExtractor
    from .metrics import EvalReport, evaluate_renderer
    from .nets import RendererModel
    from .train import ClipCache

    config = _train_config(args)
    manifest = load_manifest(args.dataset)
    model = RendererModel.load(args.checkpoint)
    fx = FeatureExtractor(config.feature_seed)
    ev = evaluate_renderer(model, ClipCache(manifest, args.split), fx, n_pairs=args.pairs,
                           descriptor_mode=config.descriptor_mode,
                           noise_amplitude=config.noise_amplitude,
                           seed=config.seed, window_len=config.window_len)
    report = EvalReport(aed=ev.aed, apd=ev.apd, fpd=ev.fpd, ffd=ev.ffd, n_samples=ev.n_pairs,
                        config_digest=f"seed={config.seed},mode={config.descriptor_mode},"
                                      f"noise={config.noise_amplitude}")
    os.makedirs(args.out, exist_ok=True)
    report.to_json(os.path.join(args.out, "eval_report.json"))
    report.to_csv(os.path.join(args.out, "eval_report.csv"))
    print(json.dumps(report.__dict__, indent=1, sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.checkpoint, args.sources, ui_dir=args.ui, flow_dir=args.flow)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> Parser:
    parser = Parser(prog="facerender", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset-synth", help="generate a synthetic sprite dataset")
    p.add_argument("--config", help="JSON: seed, n_train, n_val, n_test, clip_length, size")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_dataset_synth)

    p = sub.add_parser("train-renderer", help="train the warp/edit renderer")
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=["1", "2", "both"], default="both")
    p.add_argument("--stage1-checkpoint", help="existing stage-1 checkpoint (for --stage 2)")
    p.add_argument("--resume", help="training-state checkpoint to resume stage 1 from")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_renderer)

    p = sub.add_parser("train-flow", help="train the audio-to-motion flows")
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--which", choices=["expression", "pose", "both"], default="both")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_flow)

    p = sub.add_parser("render", help="render one motion onto a source image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="source PNG")
    p.add_argument("--motion", required=True, help="MotionFrame JSON")
    p.add_argument("--out", required=True, help="output PNG path")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("reenact", help="drive a source image with a motion track")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--driving", required=True, help="JSONL motion track")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reenact)

    p = sub.add_parser("audio-drive", help="generate a talking sequence from audio")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--flow", required=True, help="directory with flow checkpoints")
    p.add_argument("--source", required=True)
    p.add_argument("--source-motion", help="MotionFrame JSON of the source (default zero)")
    p.add_argument("--wav", required=True, help="PCM16 mono 16 kHz WAV")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_audio_drive)

    p = sub.add_parser("interpolate", help="render a latent interpolation of two motions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--p1", required=True)
    p.add_argument("--p2", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("eval", help="evaluate a renderer checkpoint on a dataset split")
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--pairs", type=int, default=24)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the HTTP render service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sources", required=True, help="directory of source PNGs")
    p.add_argument("--port", type=int, default=8787)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--ui", help="static UI directory to mount at /")
    p.add_argument("--flow", help="flow checkpoint directory enabling /api/audio-drive")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
