"""Cross-modal transformer synchronisation block and the full scoring model.

Three identical cross-modal units: audio-queries-visual, visual-queries-audio,
and a hybrid fusion unit whose queries come from the first and keys/values
from the second. The fused sequence is max-pooled over time, passed through
tanh, and classified by a single linear layer into a sync logit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .data import N_MELS
from .encoders import AudioEncoder, EncoderConfig, ShapeError, VisualEncoder


@dataclass
class CrossModalConfig:
    layers: int = 4
    heads: int = 8
    model_dim: int = 512
    ffn_dim: int = 2048
    dropout: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ValueError("model_dim must be divisible by heads")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed sinusoidal positional encodings, shape (length, dim)."""
    position = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    half = torch.arange(0, dim, 2, dtype=torch.float64)
    div = torch.exp(-math.log(10000.0) * half / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div[: dim // 2])
    return pe.to(dtype)


class CrossModalLayer(nn.Module):
    """Pre-norm cross-attention + feed-forward, both with residual connections."""

    def __init__(self, cfg: CrossModalConfig):
        super().__init__()
        self.attn = nn.MultiheadAttention(
            cfg.model_dim, cfg.heads, dropout=cfg.dropout, batch_first=True)
        self.norm_attn = nn.LayerNorm(cfg.model_dim)
        self.norm_ffn = nn.LayerNorm(cfg.model_dim)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.model_dim, cfg.ffn_dim),
            nn.ReLU(inplace=True),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.ffn_dim, cfg.model_dim),
        )
        self.dropout = nn.Dropout(cfg.dropout)

    def attend(self, query: torch.Tensor, source: torch.Tensor,
               need_weights: bool = False):
        """Pre-residual multi-head cross-attention output (B, Lq, d).

        With need_weights, also returns per-head attention (B, heads, Lq, Ls).
        """
        out, weights = self.attn(
            self.norm_attn(query), source, source,
            need_weights=need_weights, average_attn_weights=False)
        return (out, weights) if need_weights else out

    def forward(self, query: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
        x = query + self.dropout(self.attend(query, source))
        x = x + self.dropout(self.ffn(self.norm_ffn(x)))
        return x


class CrossModalUnit(nn.Module):
    """Stack of cross-modal layers over one (target, source) modality pairing.

    Keys/values at every layer are re-drawn from the layer-normalized original
    source sequence; sinusoidal positions are added to both streams up front.
    """

    def __init__(self, cfg: CrossModalConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(CrossModalLayer(cfg) for _ in range(cfg.layers))
        self.norm_source = nn.LayerNorm(cfg.model_dim)
        self.norm_out = nn.LayerNorm(cfg.model_dim)

    def forward(self, target: torch.Tensor, source: torch.Tensor,
                collect_attn: list | None = None) -> torch.Tensor:
        if target.shape[-1] != self.cfg.model_dim or source.shape[-1] != self.cfg.model_dim:
            raise ShapeError(
                f"cross-modal unit expects feature dim {self.cfg.model_dim}, got "
                f"target {tuple(target.shape)}, source {tuple(source.shape)}")
        dt = target.dtype
        x = target + sinusoidal_positions(target.shape[1], self.cfg.model_dim, dt).to(target.device)
        src = source + sinusoidal_positions(source.shape[1], self.cfg.model_dim, dt).to(source.device)
        src = self.norm_source(src)
        for layer in self.layers:
            if collect_attn is not None:
                _, w = layer.attend(x, src, need_weights=True)
                collect_attn.append(w)
            x = layer(x, src)
        return self.norm_out(x)


class SyncClassifierHead(nn.Module):
    """Temporal max-pool -> tanh -> linear logit."""

    def __init__(self, model_dim: int):
        super().__init__()
        self.fc = nn.Linear(model_dim, 1)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        pooled = fused.max(dim=1).values  # (B, d)
        return self.fc(torch.tanh(pooled)).squeeze(-1)  # (B,)


class SyncBlock(nn.Module):
    """The three cross-modal units operating on encoder feature sequences."""

    def __init__(self, cfg: CrossModalConfig):
        super().__init__()
        self.cfg = cfg
        self.av_unit = CrossModalUnit(cfg)   # audio queries, visual keys/values
        self.va_unit = CrossModalUnit(cfg)   # visual queries, audio keys/values
        self.hybrid_unit = CrossModalUnit(cfg)

    def forward(self, audio_seq: torch.Tensor, visual_seq: torch.Tensor,
                collect_attn: list | None = None) -> torch.Tensor:
        av = self.av_unit(audio_seq, visual_seq, collect_attn)
        va = self.va_unit(visual_seq, audio_seq, collect_attn)
        return self.hybrid_unit(av, va, collect_attn)  # (B, t_a, d)


class SyncModel(nn.Module):
    """End-to-end scorer: mel + mouth frames -> sync logit per pair."""

    def __init__(self, encoder_cfg: EncoderConfig, sync_cfg: CrossModalConfig):
        super().__init__()
        if encoder_cfg.feature_dim != sync_cfg.model_dim:
            raise ValueError(
                f"encoder feature dim {encoder_cfg.feature_dim} must equal "
                f"sync model_dim {sync_cfg.model_dim}")
        self.encoder_cfg = encoder_cfg
        self.sync_cfg = sync_cfg
        self.audio_encoder = AudioEncoder(encoder_cfg)
        self.visual_encoder = VisualEncoder(encoder_cfg)
        self.sync_block = SyncBlock(sync_cfg)
        self.classifier = SyncClassifierHead(sync_cfg.model_dim)

    def forward(self, mel: torch.Tensor, frames: torch.Tensor,
                collect_attn: list | None = None) -> torch.Tensor:
        """mel (B, 1, 80, t_a) + frames (B, 3, 48, 96, t_v) -> logits (B,)."""
        if mel.ndim != 4 or mel.shape[1:3] != (1, N_MELS):
            raise ShapeError(f"expected mel (B, 1, {N_MELS}, t_a), got {tuple(mel.shape)}")
        audio_seq = self.audio_encoder(mel).transpose(1, 2)      # (B, t_a, d)
        visual_seq = self.visual_encoder(frames).transpose(1, 2)  # (B, t_v, d)
        fused = self.sync_block(audio_seq, visual_seq, collect_attn)
        return self.classifier(fused)

    def score(self, mel: torch.Tensor, frames: torch.Tensor) -> torch.Tensor:
        """Sigmoid correspondence probabilities in inference mode."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                return torch.sigmoid(self.forward(mel, frames))
        finally:
            self.train(was_training)

    def parameter_groups(self) -> dict:
        return {
            "audio_encoder": self.audio_encoder,
            "visual_encoder": self.visual_encoder,
            "sync_block": self.sync_block,
            "classifier": self.classifier,
        }
