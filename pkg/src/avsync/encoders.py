"""Temporal-resolution-preserving audio (2D conv) and visual (3D conv) encoders.

Both encoders keep the time axis untouched (stride 1, same-padding) and
progressively collapse the non-temporal axes, ending in feature maps of
shape (channels, t). Strides never touch the time axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .data import N_MELS, FRAME_HEIGHT, FRAME_WIDTH, write_feature_file


class ShapeError(ValueError):
    """Input tensor does not match the encoder's contract."""


def _scaled(channels, width_multiplier):
    return [max(1, int(round(c * width_multiplier))) for c in channels]


@dataclass
class EncoderConfig:
    # First audio stage keeps the 80-band axis; later stages halve it.
    audio_stage_channels: list = field(default_factory=lambda: [16, 32, 64, 128, 256, 512])
    visual_stage_channels: list = field(default_factory=lambda: [64, 128, 256, 512, 512])
    audio_blocks_per_stage: list = field(default_factory=lambda: [1, 1, 1, 1, 1, 1])
    visual_blocks_per_stage: list = field(default_factory=lambda: [2, 2, 2, 1, 0])
    width_multiplier: float = 1.0

    def __post_init__(self):
        if len(self.audio_blocks_per_stage) != len(self.audio_stage_channels):
            raise ValueError("audio_blocks_per_stage must match audio_stage_channels")
        if len(self.visual_blocks_per_stage) != len(self.visual_stage_channels):
            raise ValueError("visual_blocks_per_stage must match visual_stage_channels")
        if self.audio_channels()[-1] != self.visual_channels()[-1]:
            raise ValueError("audio and visual encoders must end in the same channel count")

    def audio_channels(self):
        return _scaled(self.audio_stage_channels, self.width_multiplier)

    def visual_channels(self):
        return _scaled(self.visual_stage_channels, self.width_multiplier)

    @property
    def feature_dim(self) -> int:
        return self.audio_channels()[-1]


class ResidualBlock2d(nn.Module):
    """Two 3x3 conv+BN layers with an identity skip; shape-preserving."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        y = self.act(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return self.act(x + y)


class ResidualBlock3d(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(channels)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(channels)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        y = self.act(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return self.act(x + y)


class AudioEncoder(nn.Module):
    """Mel (B, 1, 80, t_a) -> features (B, C, t_a).

    Stage transitions stride 2 along frequency only; a final valid conv
    collapses the surviving frequency bins. The time axis is never strided.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        channels = cfg.audio_channels()
        stages = []
        in_ch = 1
        freq = N_MELS
        for i, (out_ch, n_blocks) in enumerate(zip(channels, cfg.audio_blocks_per_stage)):
            stride = (1, 1) if i == 0 else (2, 1)
            if stride[0] == 2:
                freq = (freq + 1) // 2
            layers = [
                nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(inplace=True),
            ]
            layers += [ResidualBlock2d(out_ch) for _ in range(n_blocks)]
            stages.append(nn.Sequential(*layers))
            in_ch = out_ch
        self.stages = nn.Sequential(*stages)
        # Collapses the remaining frequency bins in one valid convolution.
        self.collapse = nn.Sequential(
            nn.Conv2d(in_ch, in_ch, (freq, 1), bias=False),
            nn.BatchNorm2d(in_ch),
            nn.ReLU(inplace=True),
        )

    def temporal_radius(self) -> int:
        """Half-width of the temporal receptive field, in mel frames."""
        # Every conv is kernel-3 along time except the collapse (kernel 1).
        return sum(1 + 2 * n for n in self.cfg.audio_blocks_per_stage)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        if mel.ndim != 4 or mel.shape[1] != 1 or mel.shape[2] != N_MELS:
            raise ShapeError(f"audio encoder expects (B, 1, {N_MELS}, t_a), got {tuple(mel.shape)}")
        x = self.stages(mel)
        x = self.collapse(x)
        return x.squeeze(2)  # (B, C, t_a)


class VisualEncoder(nn.Module):
    """Mouth frames (B, 3, 48, 96, t_v) -> features (B, C, t_v).

    3D convolutions with temporal kernel 3 and same-padding; spatial dims are
    halved per stage and collapsed by a final valid convolution.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        channels = cfg.visual_channels()
        stages = []
        in_ch = 3
        h, w = FRAME_HEIGHT, FRAME_WIDTH
        for i, (out_ch, n_blocks) in enumerate(zip(channels, cfg.visual_blocks_per_stage)):
            # Last stage keeps its spatial size so the collapse kernel stays small.
            stride = (1, 1, 1) if i == len(channels) - 1 else (1, 2, 2)
            if stride[1] == 2:
                h, w = (h + 1) // 2, (w + 1) // 2
            layers = [
                nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False),
                nn.BatchNorm3d(out_ch),
                nn.ReLU(inplace=True),
            ]
            layers += [ResidualBlock3d(out_ch) for _ in range(n_blocks)]
            stages.append(nn.Sequential(*layers))
            in_ch = out_ch
        self.stages = nn.Sequential(*stages)
        self.collapse = nn.Sequential(
            nn.Conv3d(in_ch, in_ch, (1, h, w), bias=False),
            nn.BatchNorm3d(in_ch),
            nn.ReLU(inplace=True),
        )

    def temporal_radius(self) -> int:
        """Half-width of the temporal receptive field, in video frames."""
        return sum(1 + 2 * n for n in self.cfg.visual_blocks_per_stage)

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        if clip.ndim != 5 or clip.shape[1] != 3 or clip.shape[2:4] != (FRAME_HEIGHT, FRAME_WIDTH):
            raise ShapeError(
                f"visual encoder expects (B, 3, {FRAME_HEIGHT}, {FRAME_WIDTH}, t_v), "
                f"got {tuple(clip.shape)}")
        x = clip.permute(0, 1, 4, 2, 3)  # (B, 3, t, H, W)
        x = self.stages(x)
        x = self.collapse(x)
        return x.squeeze(-1).squeeze(-1)  # (B, C, t_v)


def count_parameters(module: nn.Module) -> int:
    """Exact count of trainable scalars."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def export_visual_features(encoder: VisualEncoder, clip_frames: np.ndarray, path) -> np.ndarray:
    """Run the frozen visual encoder on one clip and write a (C, t_v) feature file.

    `clip_frames` is (3, 48, 96, t_v) in [0, 1]; the binary file format is the
    shared float32 cache format from the data module.
    """
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(clip_frames, dtype=np.float32))
            feats = encoder(x.unsqueeze(0))[0].numpy()
    finally:
        encoder.train(was_training)
    write_feature_file(Path(path), feats)
    return feats
