"""Clip ingestion, mel-spectrogram frontend and audio/visual windowing arithmetic.

All tensors here are plain numpy arrays; the model code converts to torch.
Conventions: video at 25 fps, audio at 16 kHz, mel hop 200 samples, so one
video frame spans exactly 3.2 mel frames.
"""
from __future__ import annotations

import json
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SAMPLE_RATE = 16000
VIDEO_FPS = 25
N_MELS = 80
MEL_HOP = 200
MEL_WIN = 800
MELS_PER_VIDEO_FRAME = (SAMPLE_RATE / MEL_HOP) / VIDEO_FPS  # 3.2
SAMPLES_PER_VIDEO_FRAME = SAMPLE_RATE // VIDEO_FPS  # 640

FRAME_HEIGHT = 48
FRAME_WIDTH = 96


class DataError(Exception):
    """Base class for ingestion/validation failures."""


class LoadError(DataError):
    """Missing or malformed clip files."""


class WindowRangeError(DataError):
    """Requested window falls outside the clip."""


@dataclass
class MelScaling:
    """Amplitude normalization constants for the log-mel frontend.

    Power mel values are converted to dB, clamped to [floor_db, ref_db] and
    mapped affinely onto [out_min, out_max].
    """
    floor_db: float = -100.0
    ref_db: float = 20.0
    out_min: float = -4.0
    out_max: float = 4.0


@dataclass
class Waveform:
    samples: np.ndarray  # float32, amplitudes in [-1, 1]
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise DataError(f"waveform must be mono 1-D, got shape {self.samples.shape}")
        if self.sample_rate != SAMPLE_RATE:
            raise DataError(f"sample rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)


@dataclass
class MelSpectrogram:
    values: np.ndarray  # float32, shape (80, t_a)
    hop: int = MEL_HOP
    win: int = MEL_WIN

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] != N_MELS:
            raise DataError(f"mel must have shape (80, t_a), got {self.values.shape}")
        if self.values.shape[1] < 1:
            raise DataError("mel must have at least one frame")
        if not np.all(np.isfinite(self.values)):
            raise DataError("mel contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class MouthClip:
    frames: np.ndarray  # float32, shape (3, 48, 96, t_v), values in [0, 1]
    fps: int = VIDEO_FPS
    clip_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[:3] != (3, FRAME_HEIGHT, FRAME_WIDTH):
            raise DataError(
                f"clip frames must have shape (3, {FRAME_HEIGHT}, {FRAME_WIDTH}, t_v), "
                f"got {self.frames.shape}")
        if self.frames.shape[3] < 1:
            raise DataError("clip must contain at least one frame")
        if self.fps != VIDEO_FPS:
            raise DataError(f"fps must be {VIDEO_FPS}, got {self.fps}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[3]


@dataclass
class AVWindowSpec:
    """One candidate pairing: a visual window plus a signed audio offset.

    The offset is expressed in video frames; positive means the audio window
    is taken later in the clip than the visual one.
    """
    visual_start: int
    visual_len: int
    audio_offset_frames: int = 0

    def __post_init__(self):
        if self.visual_len < 1:
            raise DataError("visual_len must be >= 1")


@dataclass
class ManifestEntry:
    clip_id: str
    frames_path: str
    audio_path: str
    num_frames: int
    split: str

    def to_json(self) -> str:
        return json.dumps({
            "clip_id": self.clip_id, "frames_path": self.frames_path,
            "audio_path": self.audio_path, "num_frames": self.num_frames,
            "split": self.split,
        }, sort_keys=True)


@dataclass
class ClipManifest:
    entries: list = field(default_factory=list)

    def __post_init__(self):
        ids = [e.clip_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("manifest contains duplicate clip ids")

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    @classmethod
    def load(cls, path) -> "ClipManifest":
        path = Path(path)
        if not path.exists():
            raise LoadError(f"manifest not found: {path}")
        entries = []
        for line_no, line in enumerate(path.read_text().splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                entries.append(ManifestEntry(
                    clip_id=raw["clip_id"], frames_path=raw["frames_path"],
                    audio_path=raw["audio_path"], num_frames=int(raw["num_frames"]),
                    split=raw["split"]))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise LoadError(f"{path}:{line_no}: malformed manifest entry: {exc}")
        return cls(entries=entries)

    def save(self, path) -> None:
        path = Path(path)
        path.write_text("".join(e.to_json() + "\n" for e in self.entries))


def _mel_filterbank(n_mels: int = N_MELS, n_fft: int = MEL_WIN,
                    sr: int = SAMPLE_RATE, fmin: float = 0.0,
                    fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filterbank, shape (n_mels, n_fft // 2 + 1)."""
    if fmax is None:
        fmax = sr / 2

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)

    mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_freqs = np.linspace(0, sr / 2, n_fft // 2 + 1)

    fb = np.zeros((n_mels, len(bin_freqs)), dtype=np.float64)
    for i in range(n_mels):
        lo, center, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (bin_freqs - lo) / max(center - lo, 1e-9)
        down = (hi - bin_freqs) / max(hi - center, 1e-9)
        fb[i] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


_FILTERBANK_CACHE: dict[tuple, np.ndarray] = {}


def mel_power(w: Waveform) -> np.ndarray:
    """Power mel-spectrogram, shape (80, ceil(len(samples)/200)).

    Frames are centered: the signal is zero-padded by win//2 on the left, so
    frame i covers samples around i*hop and the frame count is ceil(N/hop).
    """
    if len(w) == 0:
        raise DataError("cannot compute mel of an empty waveform")
    n = len(w)
    t_a = -(-n // MEL_HOP)  # ceil

    padded_len = (t_a - 1) * MEL_HOP + MEL_WIN
    padded = np.zeros(padded_len, dtype=np.float64)
    padded[MEL_WIN // 2: MEL_WIN // 2 + n] = w.samples

    idx = np.arange(t_a)[:, None] * MEL_HOP + np.arange(MEL_WIN)[None, :]
    frames = padded[idx] * np.hanning(MEL_WIN)[None, :]
    spectrum = np.fft.rfft(frames, n=MEL_WIN, axis=1)
    power = np.abs(spectrum) ** 2  # (t_a, n_fft//2+1)

    key = (N_MELS, MEL_WIN, SAMPLE_RATE)
    if key not in _FILTERBANK_CACHE:
        _FILTERBANK_CACHE[key] = _mel_filterbank()
    return _FILTERBANK_CACHE[key] @ power.T  # (80, t_a)


def compute_mel(w: Waveform, scaling: MelScaling | None = None) -> MelSpectrogram:
    """dB-scaled, range-normalized log-mel features for a 16 kHz waveform."""
    scaling = scaling or MelScaling()
    power = mel_power(w)
    db = 10.0 * np.log10(np.maximum(power, 10.0 ** (scaling.floor_db / 10.0)))
    unit = (db - scaling.floor_db) / (scaling.ref_db - scaling.floor_db)
    unit = np.clip(unit, 0.0, 1.0)
    values = scaling.out_min + unit * (scaling.out_max - scaling.out_min)
    return MelSpectrogram(values=values.astype(np.float32))


def mel_window_for_frames(spec: AVWindowSpec) -> tuple[int, int]:
    """Map a visual window (plus offset) to the matching mel-frame window.

    One consistent rounding rule is used everywhere: nearest mel frame.
    """
    mel_start = int(round((spec.visual_start + spec.audio_offset_frames) * MELS_PER_VIDEO_FRAME))
    mel_len = int(round(spec.visual_len * MELS_PER_VIDEO_FRAME))
    return mel_start, mel_len


def read_wav(path) -> Waveform:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"audio file not found: {path}")
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise LoadError(f"{path}: expected mono audio, got {wf.getnchannels()} channels")
            if wf.getframerate() != SAMPLE_RATE:
                raise DataError(f"{path}: sample rate must be {SAMPLE_RATE}, got {wf.getframerate()}")
            if wf.getsampwidth() != 2:
                raise LoadError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
            raw = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise LoadError(f"{path}: malformed WAV: {exc}")
    samples = np.frombuffer(raw, dtype=np.int16).astype(np.float32) / 32768.0
    return Waveform(samples=samples)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype(np.int16)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(pcm.tobytes())


def load_clip(entry: ManifestEntry) -> tuple[MouthClip, Waveform]:
    """Load and validate one manifest entry's frames and audio."""
    frames_dir = Path(entry.frames_path)
    if not frames_dir.is_dir():
        raise LoadError(f"{entry.clip_id}: frames directory not found: {frames_dir}")

    frames = np.empty((3, FRAME_HEIGHT, FRAME_WIDTH, entry.num_frames), dtype=np.float32)
    for i in range(entry.num_frames):
        candidates = [frames_dir / f"{i:05d}{ext}" for ext in (".png", ".jpg", ".jpeg")]
        frame_path = next((p for p in candidates if p.exists()), None)
        if frame_path is None:
            raise LoadError(f"{entry.clip_id}: missing frame {i:05d} in {frames_dir}")
        try:
            img = np.asarray(Image.open(frame_path).convert("RGB"))
        except OSError as exc:
            raise LoadError(f"{entry.clip_id}: malformed image {frame_path}: {exc}")
        if img.shape[:2] != (FRAME_HEIGHT, FRAME_WIDTH):
            raise LoadError(
                f"{entry.clip_id}: frame {frame_path.name} has size "
                f"{img.shape[1]}x{img.shape[0]}, expected {FRAME_WIDTH}x{FRAME_HEIGHT}")
        frames[:, :, :, i] = img.transpose(2, 0, 1).astype(np.float32) / 255.0

    waveform = read_wav(entry.audio_path)
    video_dur = entry.num_frames / VIDEO_FPS
    audio_dur = len(waveform) / SAMPLE_RATE
    if abs(audio_dur - video_dur) > 1.0 / VIDEO_FPS:
        raise LoadError(
            f"{entry.clip_id}: audio covers {audio_dur:.3f}s but video is "
            f"{video_dur:.3f}s (mismatch exceeds one frame)")

    return MouthClip(frames=frames, clip_id=entry.clip_id), waveform


def slice_pair(clip: MouthClip, mel: MelSpectrogram,
               spec: AVWindowSpec) -> tuple[np.ndarray, np.ndarray]:
    """Cut matching visual and audio windows: (3,48,96,L) and (1,80,round(3.2 L))."""
    v0, v1 = spec.visual_start, spec.visual_start + spec.visual_len
    if v0 < 0 or v1 > clip.num_frames:
        raise WindowRangeError(
            f"visual window [{v0}, {v1}) outside clip of {clip.num_frames} frames")
    mel_start, mel_len = mel_window_for_frames(spec)
    if mel_start < 0 or mel_start + mel_len > mel.num_frames:
        raise WindowRangeError(
            f"mel window [{mel_start}, {mel_start + mel_len}) outside mel of "
            f"{mel.num_frames} frames")
    visual = clip.frames[:, :, :, v0:v1]
    audio = mel.values[None, :, mel_start:mel_start + mel_len]
    return visual, audio


# Binary feature/mel cache format: 8-byte header of two little-endian uint32
# (n_rows, n_cols) followed by row-major float32 data.

def write_feature_file(path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise DataError(f"feature file payload must be 2-D, got shape {values.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", values.shape[0], values.shape[1]))
        fh.write(values.tobytes())


def read_feature_file(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"feature file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 8:
        raise LoadError(f"{path}: truncated feature file header")
    rows, cols = struct.unpack("<II", blob[:8])
    expected = 8 + rows * cols * 4
    if len(blob) != expected:
        raise LoadError(f"{path}: expected {expected} bytes for ({rows}, {cols}), got {len(blob)}")
    return np.frombuffer(blob[8:], dtype=np.float32).reshape(rows, cols).copy()
