"""Self-supervised pair sampling, BCE training loop and checkpointing.

Positives are in-sync windows (offset 0); negatives shift the audio window of
the same clip by a random nonzero offset. Labels therefore come for free.
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import (AVWindowSpec, ClipManifest, ManifestEntry, MelSpectrogram,
                   MouthClip, compute_mel, load_clip, slice_pair)
from .encoders import EncoderConfig
from .sync_model import CrossModalConfig, SyncModel

CHECKPOINT_MAGIC = b"AVSC"
CHECKPOINT_VERSION = 1


class ClipTooShort(Exception):
    """Clip cannot host the requested window plus offset margins; resample."""


class CheckpointError(Exception):
    pass


class ConfigurationError(Exception):
    pass


@dataclass
class PairSample:
    clip_id: str
    visual_start: int
    visual_len: int
    offset: int
    label: int

    def __post_init__(self):
        if (self.label == 1) != (self.offset == 0):
            raise ValueError("label 1 iff offset 0")


@dataclass
class SamplerConfig:
    visual_len: int = 5
    max_offset: int = 15
    min_neg_offset: int = 2
    positive_fraction: float = 0.5  # fixed by the training recipe
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.min_neg_offset <= self.max_offset):
            raise ValueError("need 1 <= min_neg_offset <= max_offset")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_steps: int = 2000
    eval_every: int = 200
    grad_clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


def sample_pair(clip_id: str, num_frames: int, rng: np.random.Generator,
                cfg: SamplerConfig) -> PairSample:
    """Draw one balanced positive/negative window pair from a clip."""
    if num_frames < cfg.visual_len + 2 * cfg.max_offset:
        raise ClipTooShort(
            f"{clip_id}: {num_frames} frames < {cfg.visual_len + 2 * cfg.max_offset} needed")
    if rng.random() < cfg.positive_fraction:
        offset, label = 0, 1
    else:
        magnitude = int(rng.integers(cfg.min_neg_offset, cfg.max_offset + 1))
        sign = 1 if rng.random() < 0.5 else -1
        offset, label = sign * magnitude, 0
    # Both the visual window and the offset audio window must fit in the clip.
    lo = max(0, -offset)
    hi = num_frames - cfg.visual_len - max(0, offset)
    visual_start = int(rng.integers(lo, hi + 1))
    return PairSample(clip_id=clip_id, visual_start=visual_start,
                      visual_len=cfg.visual_len, offset=offset, label=label)


def bce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Numerically stable binary cross-entropy on raw logits."""
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))


class ClipStore:
    """In-memory cache of decoded clips and their mel-spectrograms.

    Frames are kept as uint8 to bound memory; windows are scaled to [0, 1]
    on slicing.
    """

    def __init__(self, entries: list):
        self.entries = {e.clip_id: e for e in entries}
        self._frames: dict[str, np.ndarray] = {}
        self._mels: dict[str, MelSpectrogram] = {}

    def clip_ids(self) -> list:
        return list(self.entries)

    def num_frames(self, clip_id: str) -> int:
        return self.entries[clip_id].num_frames

    def _ensure(self, clip_id: str):
        if clip_id not in self._frames:
            clip, wave = load_clip(self.entries[clip_id])
            self._frames[clip_id] = np.round(clip.frames * 255.0).astype(np.uint8)
            self._mels[clip_id] = compute_mel(wave)

    def realize(self, sample: PairSample) -> tuple[np.ndarray, np.ndarray]:
        """PairSample -> (visual (3,48,96,L), mel (1,80,round(3.2 L)))."""
        self._ensure(sample.clip_id)
        clip = MouthClip(
            frames=self._frames[sample.clip_id].astype(np.float32) / 255.0,
            clip_id=sample.clip_id)
        spec = AVWindowSpec(visual_start=sample.visual_start,
                            visual_len=sample.visual_len,
                            audio_offset_frames=sample.offset)
        return slice_pair(clip, self._mels[sample.clip_id], spec)


def make_batch(store: ClipStore, clip_ids: list, rng: np.random.Generator,
               cfg: SamplerConfig, batch_size: int):
    """Sample a balanced batch of realized pairs as torch tensors."""
    visuals, mels, labels, samples = [], [], [], []
    while len(samples) < batch_size:
        clip_id = clip_ids[int(rng.integers(0, len(clip_ids)))]
        try:
            s = sample_pair(clip_id, store.num_frames(clip_id), rng, cfg)
        except ClipTooShort:
            continue
        v, m = store.realize(s)
        visuals.append(v)
        mels.append(m)
        labels.append(s.label)
        samples.append(s)
    return (torch.from_numpy(np.stack(mels)),
            torch.from_numpy(np.stack(visuals)),
            torch.tensor(labels, dtype=torch.float32),
            samples)


def train_step(model: SyncModel, optimizer, batch, grad_clip_norm: float = 1.0) -> float:
    """One Adam update on the mean BCE of a realized batch."""
    mels, visuals, labels, samples = batch
    model.train()
    optimizer.zero_grad()
    logits = model(mels, visuals)
    loss = bce_loss(logits, labels)
    if not torch.isfinite(loss):
        offenders = sorted({s.clip_id for s in samples})
        raise RuntimeError(f"non-finite training loss; batch clips: {offenders}")
    loss.backward()
    if grad_clip_norm and grad_clip_norm > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip_norm)
    optimizer.step()
    return float(loss.item())


def recalibrate_batchnorm(model: SyncModel, store: ClipStore, clip_ids: list,
                          sampler_cfg: SamplerConfig, seed: int,
                          n_batches: int = 20, batch_size: int = 32) -> None:
    """Re-estimate batch-norm running statistics over fresh training batches.

    Batch statistics drift away from the EMA buffers early in training, which
    tanks inference-mode accuracy; a cumulative-average pass over the data
    fixes the buffers without touching any trainable parameter.
    """
    bn_types = (torch.nn.BatchNorm1d, torch.nn.BatchNorm2d, torch.nn.BatchNorm3d)
    bn_layers = [m for m in model.modules() if isinstance(m, bn_types)]
    if not bn_layers:
        return
    momenta = [m.momentum for m in bn_layers]
    for m in bn_layers:
        m.reset_running_stats()
        m.momentum = None  # cumulative moving average
    was_training = model.training
    model.train()
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for _ in range(n_batches):
            mels, visuals, _, _ = make_batch(store, clip_ids, rng, sampler_cfg, batch_size)
            model(mels, visuals)
    for m, mom in zip(bn_layers, momenta):
        m.momentum = mom
    model.train(was_training)


def pair_accuracy(model: SyncModel, store: ClipStore, clip_ids: list,
                  sampler_cfg: SamplerConfig, n_pairs: int, seed: int) -> float:
    """Classification accuracy at probability threshold 0.5 on fresh pairs."""
    rng = np.random.default_rng(seed)
    correct = 0
    done = 0
    while done < n_pairs:
        batch_n = min(64, n_pairs - done)
        mels, visuals, labels, _ = make_batch(store, clip_ids, rng, sampler_cfg, batch_n)
        probs = model.score(mels, visuals)
        correct += int(((probs > 0.5).float() == labels).sum().item())
        done += batch_n
    return correct / n_pairs


# --- Checkpoint format -------------------------------------------------------
# magic "AVSC" | uint32 header_len | JSON header | concatenated raw tensors.
# The header records format version, step, config snapshot, RNG states and a
# manifest of {name, group, dtype, shape, offset} per tensor.

_GROUP_PREFIXES = ("audio_encoder", "visual_encoder", "sync_block", "classifier")


def _group_of(param_name: str) -> str:
    head = param_name.split(".", 1)[0]
    return head if head in _GROUP_PREFIXES else "other"


def save_checkpoint(path, model: SyncModel, step: int,
                    extra_config: dict | None = None,
                    rng_states: bool = True) -> None:
    """Atomically write model state plus config snapshot and RNG states."""
    path = Path(path)
    manifest = []
    payload = io.BytesIO()
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        manifest.append({
            "name": name, "group": _group_of(name), "dtype": str(arr.dtype),
            "shape": list(arr.shape), "offset": payload.tell(),
        })
        payload.write(np.ascontiguousarray(arr).tobytes())
    header = {
        "version": CHECKPOINT_VERSION,
        "step": int(step),
        "encoder_config": asdict(model.encoder_cfg),
        "sync_config": asdict(model.sync_cfg),
        "extra_config": extra_config or {},
        "tensors": manifest,
    }
    if rng_states:
        header["rng"] = {
            "torch": torch.get_rng_state().numpy().tobytes().hex(),
        }
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload.getvalue())
    os.replace(tmp, path)


def _read_header(path) -> tuple[dict, int]:
    """Parse the checkpoint header; returns (header, tensor-data offset)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        raw = fh.read(4)
        if len(raw) < 4:
            raise CheckpointError(f"{path}: truncated header")
        (hlen,) = struct.unpack("<I", raw)
        blob = fh.read(hlen)
        if len(blob) < hlen:
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(blob)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {header.get('version')}")
    return header, 8 + hlen


def read_checkpoint_header(path) -> dict:
    return _read_header(path)[0]


def load_checkpoint(path, model: SyncModel, groups: tuple | None = None) -> dict:
    """Load parameters into `model`; returns the checkpoint header.

    `groups` restricts loading to the named parameter groups (partial load,
    e.g. visual encoder only for feature export).
    """
    path = Path(path)
    header, data_start = _read_header(path)
    blob = path.read_bytes()[data_start:]

    state = model.state_dict()
    wanted = {t["name"]: t for t in header["tensors"]
              if groups is None or t["group"] in groups}
    if groups is not None:
        present = {t["group"] for t in header["tensors"]}
        for g in groups:
            if g not in present:
                raise CheckpointError(f"{path}: checkpoint has no '{g}' parameter group")
    new_state = {}
    for name, meta in wanted.items():
        if name not in state:
            raise CheckpointError(
                f"{path}: tensor '{name}' (group {meta['group']}) not in this model")
        shape = tuple(meta["shape"])
        if tuple(state[name].shape) != shape:
            raise CheckpointError(
                f"{path}: shape mismatch for '{name}' (group {meta['group']}): "
                f"checkpoint {shape} vs model {tuple(state[name].shape)}")
        count = int(np.prod(shape)) if shape else 1
        dtype = np.dtype(meta["dtype"])
        start = meta["offset"]
        end = start + count * dtype.itemsize
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated tensor data for '{name}'")
        arr = np.frombuffer(blob[start:end], dtype=dtype).reshape(shape)
        new_state[name] = torch.from_numpy(arr.copy())
    if groups is None:
        missing = set(state) - set(new_state)
        if missing:
            raise CheckpointError(
                f"{path}: checkpoint missing tensors: {sorted(missing)[:5]} ...")
    merged = dict(state)
    merged.update(new_state)
    model.load_state_dict(merged)
    return header


def build_model(encoder_cfg: EncoderConfig, sync_cfg: CrossModalConfig,
                seed: int | None = None) -> SyncModel:
    if seed is not None:
        torch.manual_seed(seed)
    return SyncModel(encoder_cfg, sync_cfg)


def model_from_checkpoint(path) -> tuple[SyncModel, dict]:
    header = read_checkpoint_header(path)
    model = SyncModel(EncoderConfig(**header["encoder_config"]),
                      CrossModalConfig(**header["sync_config"]))
    load_checkpoint(path, model)
    model.eval()
    return model, header


def train_loop(manifest: ClipManifest, encoder_cfg: EncoderConfig,
               sync_cfg: CrossModalConfig, sampler_cfg: SamplerConfig,
               train_cfg: TrainConfig, out_dir,
               log_fn=None) -> Path:
    """Run the full optimization and return the final checkpoint path.

    Writes `checkpoint_final.ckpt`, periodic `checkpoint_<step>.ckpt` and a
    JSON-lines metrics log under `out_dir`.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_entries = manifest.split("train")
    if not train_entries:
        raise ConfigurationError("manifest has no train split")
    val_entries = manifest.split("val") or train_entries

    torch.manual_seed(train_cfg.seed)
    model = SyncModel(encoder_cfg, sync_cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate)

    store = ClipStore(train_entries + val_entries)
    train_ids = [e.clip_id for e in train_entries]
    val_ids = [e.clip_id for e in val_entries]
    rng = np.random.default_rng(sampler_cfg.seed)

    extra = {"sampler": asdict(sampler_cfg), "train": asdict(train_cfg)}
    metrics_path = out_dir / "metrics.jsonl"
    losses = []
    with open(metrics_path, "w") as metrics:
        for step in range(1, train_cfg.max_steps + 1):
            batch = make_batch(store, train_ids, rng, sampler_cfg, train_cfg.batch_size)
            loss = train_step(model, optimizer, batch, train_cfg.grad_clip_norm)
            losses.append(loss)
            record = {"step": step, "train_loss": loss}
            if train_cfg.eval_every and step % train_cfg.eval_every == 0:
                recalibrate_batchnorm(model, store, train_ids, sampler_cfg,
                                      seed=train_cfg.seed + 1)
                acc = pair_accuracy(model, store, val_ids, sampler_cfg,
                                    n_pairs=128, seed=train_cfg.seed + step)
                record["val_pair_acc"] = acc
                save_checkpoint(out_dir / f"checkpoint_{step:06d}.ckpt", model,
                                step, extra_config=extra)
            metrics.write(json.dumps(record) + "\n")
            if log_fn:
                log_fn(record)

    if train_cfg.max_steps > 0:
        recalibrate_batchnorm(model, store, train_ids, sampler_cfg,
                              seed=train_cfg.seed + 1)
    final = out_dir / "checkpoint_final.ckpt"
    save_checkpoint(final, model, train_cfg.max_steps, extra_config=extra)
    return final
