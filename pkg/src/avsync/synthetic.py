"""Deterministic synthetic audio-visual clips with exact ground-truth alignment.

A band-limited random envelope drives both streams: it amplitude-modulates a
sum of carrier tones (audio) and sets the mean intensity of a random texture
(video frames). Alignment is exact by construction, so offset-recovery tests
have a known truth.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .data import (ClipManifest, FRAME_HEIGHT, FRAME_WIDTH, ManifestEntry,
                   MouthClip, SAMPLE_RATE, VIDEO_FPS, Waveform, write_wav)

# Frame mean intensity = INTENSITY_LO + (INTENSITY_HI - INTENSITY_LO) * e(t).
INTENSITY_LO = 0.2
INTENSITY_HI = 0.8
TEXTURE_AMPLITUDE = 0.15  # keeps base + texture inside [0, 1], no clipping


@dataclass
class SyntheticConfig:
    n_clips: int = 200
    clip_len_frames: int = 50
    envelope_bandwidth_hz: float = 8.0
    carrier_freqs_hz: list = field(default_factory=lambda: [220.0, 440.0, 880.0, 1760.0])
    noise_level: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.envelope_bandwidth_hz < VIDEO_FPS / 2):
            raise ValueError("envelope bandwidth must be below video Nyquist (12.5 Hz)")
        if self.clip_len_frames < 1:
            raise ValueError("clip_len_frames must be >= 1")


def envelope_fn(cfg: SyntheticConfig, rng: np.random.Generator):
    """Seeded band-limited envelope e(t) in [0, 1] as a callable of time.

    Sum of 3..6 random-phase sinusoids with frequencies below the bandwidth
    cap, affinely rescaled so the clip-local range is exactly [0, 1].
    """
    n_components = int(rng.integers(3, 7))
    freqs = rng.uniform(0.5, cfg.envelope_bandwidth_hz, n_components)
    phases = rng.uniform(0, 2 * np.pi, n_components)
    amps = rng.uniform(0.5, 1.0, n_components)

    duration = cfg.clip_len_frames / VIDEO_FPS
    dense_t = np.linspace(0.0, duration, 4 * cfg.clip_len_frames)

    def raw(t):
        t = np.asarray(t, dtype=np.float64)
        return sum(a * np.sin(2 * np.pi * f * t + p)
                   for a, f, p in zip(amps, freqs, phases))

    lo, hi = raw(dense_t).min(), raw(dense_t).max()
    span = max(hi - lo, 1e-9)

    def e(t):
        return np.clip((raw(t) - lo) / span, 0.0, 1.0)

    return e


def generate_clip(cfg: SyntheticConfig, rng: np.random.Generator,
                  clip_id: str = "clip") -> tuple[MouthClip, Waveform, np.ndarray]:
    """One aligned (frames, audio, envelope-at-frame-times) triple."""
    e = envelope_fn(cfg, rng)
    n_samples = cfg.clip_len_frames * SAMPLE_RATE // VIDEO_FPS

    t_audio = np.arange(n_samples) / SAMPLE_RATE
    carriers = sum(np.sin(2 * np.pi * f * t_audio) for f in cfg.carrier_freqs_hz)
    carriers /= len(cfg.carrier_freqs_hz)
    audio = e(t_audio) * carriers + cfg.noise_level * rng.standard_normal(n_samples)
    peak = np.max(np.abs(audio))
    if peak > 0:
        audio = 0.9 * audio / max(peak, 0.9)
    waveform = Waveform(samples=audio.astype(np.float32))

    t_frames = np.arange(cfg.clip_len_frames) / VIDEO_FPS
    env_frames = e(t_frames)
    frames = np.empty((3, FRAME_HEIGHT, FRAME_WIDTH, cfg.clip_len_frames), dtype=np.float32)
    for i in range(cfg.clip_len_frames):
        base = INTENSITY_LO + (INTENSITY_HI - INTENSITY_LO) * env_frames[i]
        texture = rng.uniform(-TEXTURE_AMPLITUDE, TEXTURE_AMPLITUDE,
                              (3, FRAME_HEIGHT, FRAME_WIDTH))
        texture -= texture.mean()  # frame mean equals `base` exactly
        frames[:, :, :, i] = base + texture
    clip = MouthClip(frames=frames, clip_id=clip_id)
    return clip, waveform, env_frames


def _split_for_index(i: int, n: int) -> str:
    # Deterministic 80/10/10 split by index.
    if i < int(n * 0.8):
        return "train"
    if i < int(n * 0.9):
        return "val"
    return "test"


def generate_dataset(cfg: SyntheticConfig, out_dir) -> ClipManifest:
    """Write frames/WAVs/manifest in the standard on-disk clip layout.

    Re-running with the same config and seed reproduces byte-identical files:
    every clip uses an RNG stream keyed by (seed, clip index).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(cfg.n_clips):
        clip_id = f"syn{i:04d}"
        rng = np.random.default_rng([cfg.seed, i])
        clip, waveform, _ = generate_clip(cfg, rng, clip_id=clip_id)

        clip_dir = out_dir / "clips" / clip_id
        frames_dir = clip_dir / "frames"
        frames_dir.mkdir(parents=True, exist_ok=True)
        for j in range(clip.num_frames):
            img = np.round(clip.frames[:, :, :, j].transpose(1, 2, 0) * 255.0)
            Image.fromarray(img.astype(np.uint8), mode="RGB").save(
                frames_dir / f"{j:05d}.png")
        audio_path = clip_dir / "audio.wav"
        write_wav(audio_path, waveform)

        entries.append(ManifestEntry(
            clip_id=clip_id, frames_path=str(frames_dir),
            audio_path=str(audio_path), num_frames=clip.num_frames,
            split=_split_for_index(i, cfg.n_clips)))

    manifest = ClipManifest(entries=entries)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest
