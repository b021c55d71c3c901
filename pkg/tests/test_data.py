import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avsync.data import (AVWindowSpec, ClipManifest, DataError, LoadError,
                         ManifestEntry, MelSpectrogram, MouthClip, Waveform,
                         WindowRangeError, compute_mel, load_clip,
                         mel_window_for_frames, read_feature_file, slice_pair,
                         write_feature_file, write_wav)


def make_waveform(n, seed=0):
    rng = np.random.default_rng(seed)
    return Waveform(rng.uniform(-0.5, 0.5, n).astype(np.float32))


class TestComputeMel:
    def test_shape_0_2s(self):
        mel = compute_mel(make_waveform(3200))
        assert mel.values.shape == (80, 16)

    def test_shape_single_hop(self):
        mel = compute_mel(make_waveform(200))
        assert mel.values.shape == (80, 1)

    def test_silence_maps_to_floor(self):
        mel = compute_mel(Waveform(np.zeros(3200, dtype=np.float32)))
        assert np.all(mel.values == -4.0)
        # every column identical
        assert np.all(mel.values == mel.values[:, :1])

    def test_wrong_sample_rate_rejected(self):
        with pytest.raises(DataError, match="sample rate"):
            Waveform(np.zeros(100, dtype=np.float32), sample_rate=44100)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            compute_mel(Waveform(np.zeros(0, dtype=np.float32)))

    def test_deterministic(self):
        w = make_waveform(5000, seed=3)
        a = compute_mel(w).values
        b = compute_mel(Waveform(w.samples.copy())).values
        assert a.tobytes() == b.tobytes()

    def test_values_bounded(self):
        mel = compute_mel(make_waveform(8000, seed=1))
        assert np.all(mel.values >= -4.0) and np.all(mel.values <= 4.0)

    @given(n=st.integers(min_value=1, max_value=16000))
    @settings(max_examples=40, deadline=None)
    def test_frame_count_is_ceil(self, n):
        mel = compute_mel(make_waveform(n, seed=n))
        assert mel.values.shape == (80, -(-n // 200))


class TestMelWindowForFrames:
    @pytest.mark.parametrize("vs,vl,off,expected", [
        (0, 5, 0, (0, 16)),
        (3, 5, 0, (10, 16)),
        (10, 5, -2, (26, 16)),
    ])
    def test_examples(self, vs, vl, off, expected):
        assert mel_window_for_frames(AVWindowSpec(vs, vl, off)) == expected

    def test_monotonic_in_start_and_offset(self):
        for vl in (1, 5, 10):
            starts = [mel_window_for_frames(AVWindowSpec(vs, vl, 0))[0]
                      for vs in range(30)]
            assert starts == sorted(starts)
            offs = [mel_window_for_frames(AVWindowSpec(15, vl, k))[0]
                    for k in range(-15, 16)]
            assert offs == sorted(offs)

    def test_len_depends_only_on_visual_len(self):
        for vl in range(1, 26):
            lens = {mel_window_for_frames(AVWindowSpec(vs, vl, k))[1]
                    for vs in (0, 3, 11) for k in (-5, 0, 7)}
            assert lens == {int(round(vl * 3.2))}


def make_clip(t_v, seed=0):
    rng = np.random.default_rng(seed)
    return MouthClip(frames=rng.uniform(0, 1, (3, 48, 96, t_v)).astype(np.float32),
                     clip_id="t")


class TestSlicePair:
    def test_shapes_5(self):
        clip = make_clip(50)
        mel = compute_mel(make_waveform(32000))
        v, a = slice_pair(clip, mel, AVWindowSpec(0, 5, 0))
        assert v.shape == (3, 48, 96, 5)
        assert a.shape == (1, 80, 16)

    def test_shapes_15(self):
        clip = make_clip(50)
        mel = compute_mel(make_waveform(32000))
        v, a = slice_pair(clip, mel, AVWindowSpec(4, 15, 0))
        assert v.shape == (3, 48, 96, 15)
        assert a.shape == (1, 80, 48)

    def test_negative_mel_start_rejected(self):
        clip = make_clip(50)
        mel = compute_mel(make_waveform(32000))
        with pytest.raises(WindowRangeError, match="mel"):
            slice_pair(clip, mel, AVWindowSpec(0, 5, -1))

    def test_visual_overflow_rejected(self):
        clip = make_clip(10)
        mel = compute_mel(make_waveform(6400))
        with pytest.raises(WindowRangeError, match="visual"):
            slice_pair(clip, mel, AVWindowSpec(8, 5, 0))

    @given(vs=st.integers(0, 30), vl=st.integers(1, 15), off=st.integers(-5, 5))
    @settings(max_examples=30, deadline=None)
    def test_shape_contract(self, vs, vl, off):
        clip = make_clip(50)
        mel = compute_mel(make_waveform(32000))
        spec = AVWindowSpec(vs, vl, off)
        m0, mlen = mel_window_for_frames(spec)
        if vs + vl > 50 or m0 < 0 or m0 + mlen > mel.num_frames:
            return
        v, a = slice_pair(clip, mel, spec)
        assert v.shape == (3, 48, 96, vl)
        assert a.shape == (1, 80, int(round(vl * 3.2)))


def write_clip_files(tmp_path, clip_id, n_frames, n_samples, frame_size=(96, 48)):
    from PIL import Image
    rng = np.random.default_rng(1)
    frames_dir = tmp_path / clip_id / "frames"
    frames_dir.mkdir(parents=True)
    for i in range(n_frames):
        arr = rng.integers(0, 255, (frame_size[1], frame_size[0], 3), dtype=np.uint8)
        Image.fromarray(arr, "RGB").save(frames_dir / f"{i:05d}.png")
    audio_path = tmp_path / clip_id / "audio.wav"
    write_wav(audio_path, make_waveform(n_samples))
    return ManifestEntry(clip_id=clip_id, frames_path=str(frames_dir),
                         audio_path=str(audio_path), num_frames=n_frames,
                         split="train")


class TestLoadClip:
    def test_ok(self, tmp_path):
        entry = write_clip_files(tmp_path, "c0", 50, 32000)
        clip, wave = load_clip(entry)
        assert clip.num_frames == 50
        assert len(wave) == 32000
        assert clip.frames.min() >= 0.0 and clip.frames.max() <= 1.0

    def test_duration_mismatch(self, tmp_path):
        entry = write_clip_files(tmp_path, "c1", 50, 16000)
        with pytest.raises(LoadError, match="mismatch"):
            load_clip(entry)

    def test_bad_frame_size_named(self, tmp_path):
        entry = write_clip_files(tmp_path, "c2", 3, 1920, frame_size=(96, 96))
        with pytest.raises(LoadError, match="00000"):
            load_clip(entry)

    def test_missing_files(self, tmp_path):
        entry = ManifestEntry(clip_id="nope", frames_path=str(tmp_path / "x"),
                              audio_path=str(tmp_path / "x.wav"),
                              num_frames=5, split="train")
        with pytest.raises(LoadError):
            load_clip(entry)


class TestManifest:
    def test_roundtrip(self, tmp_path):
        entries = [ManifestEntry(f"c{i}", f"/f{i}", f"/a{i}.wav", 50,
                                 "train" if i < 2 else "test")
                   for i in range(3)]
        m = ClipManifest(entries=entries)
        m.save(tmp_path / "m.jsonl")
        loaded = ClipManifest.load(tmp_path / "m.jsonl")
        assert loaded.entries == entries
        assert len(loaded.split("train")) == 2
        assert len(loaded.split("test")) == 1

    def test_duplicate_ids_rejected(self):
        e = ManifestEntry("dup", "/f", "/a.wav", 50, "train")
        with pytest.raises(DataError, match="duplicate"):
            ClipManifest(entries=[e, e])

    def test_malformed_line(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text('{"clip_id": "x"}\n')
        with pytest.raises(LoadError, match="malformed"):
            ClipManifest.load(p)


class TestFeatureFile:
    def test_roundtrip(self, tmp_path):
        values = np.random.default_rng(0).normal(size=(80, 17)).astype(np.float32)
        path = tmp_path / "x.mel"
        write_feature_file(path, values)
        back = read_feature_file(path)
        assert back.shape == (80, 17)
        assert back.tobytes() == values.tobytes()
        # 8-byte header of two uint32
        import struct
        rows, cols = struct.unpack("<II", path.read_bytes()[:8])
        assert (rows, cols) == (80, 17)

    def test_truncated(self, tmp_path):
        path = tmp_path / "x.mel"
        write_feature_file(path, np.zeros((4, 4), dtype=np.float32))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(LoadError, match="expected"):
            read_feature_file(path)


class TestMelSpectrogramType:
    def test_rejects_wrong_band_count(self):
        with pytest.raises(DataError):
            MelSpectrogram(values=np.zeros((40, 10), dtype=np.float32))

    def test_rejects_nonfinite(self):
        bad = np.zeros((80, 4), dtype=np.float32)
        bad[0, 0] = np.nan
        with pytest.raises(DataError):
            MelSpectrogram(values=bad)
