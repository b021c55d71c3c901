"""Offset-estimation protocol: sliding ±range search, context averaging,
tolerance accuracy and dataset-level reports."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import (AVWindowSpec, MelSpectrogram, MouthClip, Waveform,
                   SAMPLES_PER_VIDEO_FRAME, compute_mel, load_clip,
                   mel_window_for_frames)
from .sync_model import SyncModel


class SkipClip(Exception):
    """Clip is too short for the search margins; recorded, not fatal."""


@dataclass
class OffsetSearchConfig:
    search_range: int = 15
    window_len: int = 5
    tolerance: int = 1          # 1 for speech, 5 for singing voice
    context_len: int = 5
    stride: int = 1             # sub-window stride inside the context

    def __post_init__(self):
        if self.tolerance > self.search_range:
            raise ValueError("tolerance must be <= search_range")
        if self.context_len < self.window_len:
            raise ValueError("context_len must be >= window_len")


@dataclass
class OffsetPrediction:
    clip_id: str
    visual_start: int
    predicted_offset: int
    score_curve: np.ndarray  # (2 * search_range + 1,), offsets -range..+range


@dataclass
class AccuracyReport:
    n_evaluated: int = 0
    n_correct: int = 0
    per_context: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_evaluated if self.n_evaluated else 0.0

    def to_dict(self) -> dict:
        return {
            "n_evaluated": self.n_evaluated, "n_correct": self.n_correct,
            "accuracy": self.accuracy, "per_context": self.per_context,
            "skipped": self.skipped,
        }


def _candidate_offsets(search_range: int) -> list:
    return list(range(-search_range, search_range + 1))


def score_offsets(model: SyncModel, clip: MouthClip, mel: MelSpectrogram,
                  visual_start: int, cfg: OffsetSearchConfig) -> np.ndarray:
    """Sigmoid sync scores for every candidate offset in [-range, +range]."""
    offsets = _candidate_offsets(cfg.search_range)
    v0, v1 = visual_start, visual_start + cfg.window_len
    if v0 < 0 or v1 > clip.num_frames:
        raise SkipClip(f"{clip.clip_id}: visual window [{v0}, {v1}) out of range")

    mel_windows = []
    for k in offsets:
        spec = AVWindowSpec(visual_start=visual_start, visual_len=cfg.window_len,
                            audio_offset_frames=k)
        m0, mlen = mel_window_for_frames(spec)
        if m0 < 0 or m0 + mlen > mel.num_frames:
            raise SkipClip(
                f"{clip.clip_id}: mel window for offset {k} out of range at "
                f"visual_start {visual_start}")
        mel_windows.append(mel.values[None, :, m0:m0 + mlen])

    visual = torch.from_numpy(clip.frames[:, :, :, v0:v1]).unsqueeze(0)
    visuals = visual.expand(len(offsets), -1, -1, -1, -1)
    mels = torch.from_numpy(np.stack(mel_windows))
    return model.score(mels, visuals).numpy().astype(np.float64)


def estimate_offset(score_curve: np.ndarray, cfg: OffsetSearchConfig) -> int:
    """Argmax offset; ties break toward smallest |offset|, then negative."""
    offsets = _candidate_offsets(cfg.search_range)
    if len(score_curve) != len(offsets):
        raise ValueError(
            f"curve length {len(score_curve)} != {len(offsets)} candidates")
    best = max(offsets,
               key=lambda k: (score_curve[k + cfg.search_range], -abs(k), -k))
    return best


def estimate_offset_context(model: SyncModel, clip: MouthClip, mel: MelSpectrogram,
                            visual_start: int, cfg: OffsetSearchConfig,
                            score_fn=None) -> OffsetPrediction:
    """Average the score curves of every window-sized sub-window, then argmax.

    `score_fn(visual_start) -> curve` substitutes the model-driven scorer,
    used by the protocol-oracle tests.
    """
    if score_fn is None:
        def score_fn(vs):
            return score_offsets(model, clip, mel, vs, cfg)
    sub_starts = range(0, cfg.context_len - cfg.window_len + 1, cfg.stride)
    curves = [np.asarray(score_fn(visual_start + s), dtype=np.float64)
              for s in sub_starts]
    mean_curve = np.mean(curves, axis=0)
    return OffsetPrediction(
        clip_id=getattr(clip, "clip_id", ""), visual_start=visual_start,
        predicted_offset=estimate_offset(mean_curve, cfg),
        score_curve=mean_curve)


def sync_accuracy(predictions: list, true_offsets: list, tolerance: int) -> AccuracyReport:
    """Count predictions within ±tolerance of the ground-truth offsets."""
    if len(predictions) != len(true_offsets):
        raise ValueError(
            f"{len(predictions)} predictions vs {len(true_offsets)} truths")
    report = AccuracyReport()
    for pred, true in zip(predictions, true_offsets):
        value = pred.predicted_offset if isinstance(pred, OffsetPrediction) else int(pred)
        report.n_evaluated += 1
        if abs(value - true) <= tolerance:
            report.n_correct += 1
    return report


def shift_waveform(w: Waveform, offset_frames: int) -> Waveform:
    """Delay (positive) or advance (negative) audio by whole video frames.

    Length is preserved: delayed audio is zero-padded at the start and
    truncated at the end, advanced audio the other way around.
    """
    shift = offset_frames * SAMPLES_PER_VIDEO_FRAME
    out = np.zeros_like(w.samples)
    if shift >= 0:
        out[shift:] = w.samples[:len(w.samples) - shift]
    else:
        out[:shift] = w.samples[-shift:]
    return Waveform(samples=out, sample_rate=w.sample_rate)


def evaluate_clip(model: SyncModel, clip: MouthClip, mel: MelSpectrogram,
                  cfg: OffsetSearchConfig,
                  window_stride: int | None = None) -> list:
    """Context predictions across a clip at fixed (non-overlapping) stride."""
    window_stride = window_stride or cfg.context_len
    lo = cfg.search_range
    hi = clip.num_frames - cfg.context_len - cfg.search_range
    if hi < lo:
        raise SkipClip(
            f"{clip.clip_id}: {clip.num_frames} frames too short for context "
            f"{cfg.context_len} with ±{cfg.search_range} search margin")
    preds = []
    for vs in range(lo, hi + 1, window_stride):
        preds.append(estimate_offset_context(model, clip, mel, vs, cfg))
    return preds


def evaluate_dataset(model: SyncModel, entries: list, context_lens: list,
                     cfg: OffsetSearchConfig, injected_offset: int = 0,
                     report_path=None) -> AccuracyReport:
    """Per-context-length offset accuracy over a manifest split.

    `injected_offset` shifts every clip's audio by that many video frames
    before scoring; the ground truth becomes that offset (0 for in-sync data).
    """
    report = AccuracyReport()
    all_scores = []
    for context_len in context_lens:
        ctx_cfg = OffsetSearchConfig(
            search_range=cfg.search_range, window_len=cfg.window_len,
            tolerance=cfg.tolerance, context_len=context_len, stride=cfg.stride)
        n, correct = 0, 0
        for entry in entries:
            try:
                clip, wave = load_clip(entry)
                if injected_offset:
                    wave = shift_waveform(wave, injected_offset)
                mel = compute_mel(wave)
                preds = evaluate_clip(model, clip, mel, ctx_cfg)
            except SkipClip as exc:
                report.skipped.append({"clip_id": entry.clip_id,
                                       "context_len": context_len,
                                       "reason": str(exc)})
                continue
            for p in preds:
                all_scores.append(float(np.max(p.score_curve)))
                n += 1
                if abs(p.predicted_offset - injected_offset) <= cfg.tolerance:
                    correct += 1
        report.per_context.append({
            "context_len": context_len, "n": n,
            "accuracy": correct / n if n else 0.0,
        })
        report.n_evaluated += n
        report.n_correct += correct

    if report_path is not None:
        hist, edges = np.histogram(all_scores, bins=20, range=(0.0, 1.0))
        payload = {
            "config": asdict(cfg),
            "context_lens": list(context_lens),
            "injected_offset": injected_offset,
            **report.to_dict(),
            "score_histogram": {"counts": hist.tolist(), "edges": edges.tolist()},
        }
        Path(report_path).write_text(json.dumps(payload, indent=2) + "\n")
    return report
