"""Command-line surface: dataset generation, preprocessing, training,
evaluation, single-clip offset estimation/correction and feature export.

Exit codes: 0 ok, 2 config error, 3 data error, 4 clip too short,
5 checkpoint error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as avdata
from .config import load_run_config
from .encoders import export_visual_features
from .evaluation import (OffsetSearchConfig, SkipClip, evaluate_clip,
                         evaluate_dataset, shift_waveform)
from .synthetic import generate_dataset
from .training import (CheckpointError, ConfigurationError, load_checkpoint,
                       model_from_checkpoint, train_loop)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TOO_SHORT = 4
EXIT_CHECKPOINT = 5


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_manifest(path) -> avdata.ClipManifest:
    # A missing manifest is an operator mistake, so it maps to the config exit code.
    if not Path(path).exists():
        raise ConfigurationError(f"manifest not found: {path}")
    return avdata.ClipManifest.load(path)


def _load_config(args):
    cfg = load_run_config(getattr(args, "config", None),
                          getattr(args, "override", None) or [])
    _log("resolved config:\n" + cfg.resolved_text())
    return cfg


def cmd_gen_synthetic(args) -> int:
    cfg = _load_config(args)
    syn = cfg.synthetic
    if args.n_clips is not None:
        syn.n_clips = args.n_clips
    if args.seed is not None:
        syn.seed = args.seed
    if args.clip_len is not None:
        syn.clip_len_frames = args.clip_len
    manifest = generate_dataset(syn, args.out)
    _log(f"wrote {len(manifest.entries)} clips under {args.out}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    """Populate the binary mel cache for every manifest entry."""
    manifest = _load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for entry in manifest.entries:
        _, wave = avdata.load_clip(entry)
        mel = avdata.compute_mel(wave)
        avdata.write_feature_file(out_dir / f"{entry.clip_id}.mel", mel.values)
    _log(f"wrote {len(manifest.entries)} mel caches to {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest = _load_manifest(args.manifest)
    final = train_loop(manifest, cfg.model, cfg.sync, cfg.sampler, cfg.train,
                       args.out, log_fn=lambda r: _log(json.dumps(r)))
    _log(f"final checkpoint: {final}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    model, _ = model_from_checkpoint(args.checkpoint)
    manifest = _load_manifest(args.manifest)
    entries = manifest.split(args.split)
    contexts = [int(c) for c in args.contexts.split(",")]
    search_cfg = OffsetSearchConfig(
        search_range=cfg.eval.search_range, window_len=cfg.eval.window_len,
        tolerance=args.tolerance, context_len=max(contexts),
        stride=cfg.eval.stride)
    report = evaluate_dataset(model, entries, contexts, search_cfg,
                              report_path=args.report)
    header = "context " + "".join(f"{c:>4d} ({c / 25:.2f}s)" for c in contexts)
    row = "acc     " + "".join(
        f"{p['accuracy'] * 100:>11.1f}" for p in report.per_context)
    print(header)
    print(row)
    if report.n_evaluated == 0:
        _log("no windows evaluated (empty split or all clips skipped)")
        return EXIT_DATA
    return EXIT_OK


def cmd_offset(args) -> int:
    model, _ = model_from_checkpoint(args.checkpoint)
    entry = avdata.ManifestEntry(
        clip_id=Path(args.frames).parent.name or "clip",
        frames_path=args.frames, audio_path=args.audio,
        num_frames=args.num_frames or _count_frames(args.frames),
        split="test")
    clip, wave = avdata.load_clip(entry)
    mel = avdata.compute_mel(wave)
    cfg = OffsetSearchConfig(search_range=args.search_range,
                             window_len=args.window_len,
                             tolerance=1, context_len=args.context_len)
    preds = evaluate_clip(model, clip, mel, cfg)
    offsets = sorted(p.predicted_offset for p in preds)
    global_offset = int(round(float(np.median(offsets))))
    mean_curve = np.mean([p.score_curve for p in preds], axis=0)
    print(f"predicted offset: {global_offset:+d} frames "
          f"({global_offset * 40:+d} ms, audio {'late' if global_offset > 0 else 'early' if global_offset < 0 else 'in sync'})")
    print("score curve (offset: mean score):")
    for k, s in zip(range(-cfg.search_range, cfg.search_range + 1), mean_curve):
        print(f"  {k:+3d}: {s:.4f}")
    if args.fix:
        corrected = shift_waveform(wave, -global_offset)
        avdata.write_wav(args.fix, corrected)
        _log(f"wrote corrected audio (shifted {-global_offset:+d} frames) to {args.fix}")
    return EXIT_OK


def _count_frames(frames_dir) -> int:
    frames = sorted(Path(frames_dir).glob("*.png")) or sorted(Path(frames_dir).glob("*.jpg"))
    if not frames:
        raise avdata.LoadError(f"no frames found in {frames_dir}")
    return len(frames)


def cmd_export_features(args) -> int:
    from .encoders import EncoderConfig
    from .sync_model import CrossModalConfig, SyncModel
    from .training import read_checkpoint_header

    header = read_checkpoint_header(args.checkpoint)
    groups = {t["group"] for t in header["tensors"]}
    if "visual_encoder" not in groups:
        raise CheckpointError(f"{args.checkpoint}: visual encoder weights absent")
    model = SyncModel(EncoderConfig(**header["encoder_config"]),
                      CrossModalConfig(**header["sync_config"]))
    load_checkpoint(args.checkpoint, model, groups=("visual_encoder",))
    manifest = _load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for entry in manifest.entries:
        clip, _ = avdata.load_clip(entry)
        export_visual_features(model.visual_encoder, clip.frames,
                               out_dir / f"{entry.clip_id}.feat")
    _log(f"wrote {len(manifest.entries)} feature files to {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avsync",
        description="Audio-visual lip-sync scoring, training and offset estimation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML-style config file")
        p.add_argument("--override", action="append", default=[],
                       metavar="SECTION.KEY=VALUE",
                       help="config override, repeatable")

    p = sub.add_parser("gen-synthetic", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-clips", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--clip-len", type=int)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("preprocess", help="precompute mel caches for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a sync model")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="offset-accuracy evaluation on a split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--contexts", default="5,15",
                   help="comma-separated context lengths in frames")
    p.add_argument("--tolerance", type=int, default=1)
    p.add_argument("--report", help="JSON report output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("offset", help="estimate (and optionally fix) one clip's offset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", required=True, help="directory of 48x96 frames")
    p.add_argument("--audio", required=True, help="16 kHz mono WAV")
    p.add_argument("--num-frames", type=int, default=None)
    p.add_argument("--search-range", type=int, default=15)
    p.add_argument("--window-len", type=int, default=5)
    p.add_argument("--context-len", type=int, default=5)
    p.add_argument("--fix", help="write offset-corrected WAV here")
    p.set_defaults(func=cmd_offset)

    p = sub.add_parser("export-features", help="export frozen visual features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_features)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except SkipClip as exc:
        _log(f"clip too short: {exc}")
        return EXIT_TOO_SHORT
    except CheckpointError as exc:
        _log(f"checkpoint error: {exc}")
        return EXIT_CHECKPOINT
    except avdata.DataError as exc:
        _log(f"data error: {exc}")
        return EXIT_DATA
    except OSError as exc:
        _log(f"io error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
