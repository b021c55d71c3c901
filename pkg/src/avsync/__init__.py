"""Audio-visual lip-sync detection: encoders, cross-modal transformer scorer,
self-supervised training and the sliding-window offset-estimation protocol."""

__version__ = "0.1.0"

from .data import (AVWindowSpec, ClipManifest, ManifestEntry, MelSpectrogram,
                   MouthClip, Waveform, compute_mel, load_clip,
                   mel_window_for_frames, slice_pair)
from .encoders import AudioEncoder, EncoderConfig, VisualEncoder, count_parameters
from .evaluation import (AccuracyReport, OffsetPrediction, OffsetSearchConfig,
                         estimate_offset, estimate_offset_context,
                         evaluate_dataset, score_offsets, sync_accuracy)
from .sync_model import CrossModalConfig, SyncModel
from .synthetic import SyntheticConfig, generate_clip, generate_dataset
from .training import (PairSample, SamplerConfig, TrainConfig, bce_loss,
                       load_checkpoint, sample_pair, save_checkpoint,
                       train_loop, train_step)
