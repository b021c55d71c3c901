import numpy as np
import pytest

from avsync.data import Waveform
from avsync.evaluation import (AccuracyReport, OffsetPrediction,
                               OffsetSearchConfig, estimate_offset,
                               estimate_offset_context, shift_waveform,
                               sync_accuracy)

CFG = OffsetSearchConfig()


def indicator_curve(k_star, search_range=15):
    curve = np.zeros(2 * search_range + 1)
    curve[k_star + search_range] = 1.0
    return curve


def brute_force_context(score_fn, visual_start, cfg):
    """Reference: materialize the full (sub-window x offset) table, average,
    then scan candidates for the max with the tie rule applied explicitly."""
    starts = list(range(0, cfg.context_len - cfg.window_len + 1, cfg.stride))
    table = np.stack([np.asarray(score_fn(visual_start + s), dtype=np.float64)
                      for s in starts])
    mean = table.mean(axis=0)
    offsets = list(range(-cfg.search_range, cfg.search_range + 1))
    best = None
    for k in offsets:
        s = mean[k + cfg.search_range]
        if best is None:
            best = (k, s)
            continue
        bk, bs = best
        if s > bs or (s == bs and (abs(k) < abs(bk) or (abs(k) == abs(bk) and k < bk))):
            best = (k, s)
    return best[0]


class TestEstimateOffset:
    def test_indicator(self):
        assert estimate_offset(indicator_curve(-3), CFG) == -3

    def test_flat_curve_ties_to_zero(self):
        assert estimate_offset(np.full(31, 0.5), CFG) == 0

    def test_equal_maxima_prefers_small_abs(self):
        curve = np.zeros(31)
        curve[-2 + 15] = curve[7 + 15] = 0.9
        assert estimate_offset(curve, CFG) == -2

    def test_tie_at_same_abs_prefers_negative(self):
        curve = np.zeros(31)
        curve[-4 + 15] = curve[4 + 15] = 0.9
        assert estimate_offset(curve, CFG) == -4

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError):
            estimate_offset(np.zeros(30), CFG)

    def test_all_indicators_recovered(self):
        for k in range(-15, 16):
            assert estimate_offset(indicator_curve(k), CFG) == k


class TestEstimateOffsetContext:
    def test_single_subwindow_equals_plain(self):
        cfg = OffsetSearchConfig(context_len=5, window_len=5)
        curve = np.random.default_rng(0).uniform(0, 1, 31)
        pred = estimate_offset_context(None, None, None, 0, cfg,
                                       score_fn=lambda vs: curve)
        assert pred.predicted_offset == estimate_offset(curve, cfg)
        np.testing.assert_array_equal(pred.score_curve, curve)

    def test_averages_11_curves(self):
        cfg = OffsetSearchConfig(context_len=15, window_len=5)
        calls = []
        pred = estimate_offset_context(
            None, None, None, 3, cfg,
            score_fn=lambda vs: calls.append(vs) or np.full(31, 0.1))
        assert calls == list(range(3, 14))
        assert len(calls) == 11

    def test_mean_curve_decides(self):
        # sub-window argmaxes are {-4, 0, 0} but the mean peaks at 0
        cfg = OffsetSearchConfig(context_len=7, window_len=5)
        c1 = np.zeros(31); c1[-4 + 15] = 0.6; c1[0 + 15] = 0.5
        c2 = np.zeros(31); c2[0 + 15] = 0.9
        c3 = np.zeros(31); c3[0 + 15] = 0.8
        curves = {3: c1, 4: c2, 5: c3}
        pred = estimate_offset_context(None, None, None, 3, cfg,
                                       score_fn=lambda vs: curves[vs])
        assert pred.predicted_offset == 0
        assert pred.predicted_offset == brute_force_context(
            lambda vs: curves[vs], 3, cfg)

    def test_oracle_equivalence_random_scorers(self):
        rng = np.random.default_rng(42)
        for trial in range(100):
            context_len = int(rng.choice([5, 7, 9, 11, 13, 15]))
            cfg = OffsetSearchConfig(context_len=context_len, window_len=5)
            seed = int(rng.integers(0, 2 ** 31))

            def score_fn(vs, seed=seed):
                r = np.random.default_rng([seed, vs])
                return r.uniform(0, 1, 31)

            pred = estimate_offset_context(None, None, None, 2, cfg,
                                           score_fn=score_fn)
            assert pred.predicted_offset == brute_force_context(score_fn, 2, cfg)

    def test_indicator_scorer_passthrough(self):
        for k_star in range(-15, 16):
            cfg = OffsetSearchConfig(context_len=9, window_len=5)
            pred = estimate_offset_context(
                None, None, None, 0, cfg,
                score_fn=lambda vs: indicator_curve(k_star))
            assert pred.predicted_offset == k_star


class TestSyncAccuracy:
    def test_two_of_three(self):
        r = sync_accuracy([0, 1, -2], [0, 0, 0], tolerance=1)
        assert (r.n_correct, r.n_evaluated) == (2, 3)
        assert r.accuracy == pytest.approx(2 / 3)

    def test_perfect(self):
        preds = [3, -1, 0, 7]
        r = sync_accuracy(preds, preds, tolerance=0)
        assert r.accuracy == 1.0

    def test_singing_tolerance(self):
        r = sync_accuracy([4, -5, 6], [0, 0, 0], tolerance=5)
        assert r.accuracy == pytest.approx(2 / 3)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            sync_accuracy([0], [0, 0], 1)

    def test_monotone_in_tolerance(self):
        rng = np.random.default_rng(0)
        preds = rng.integers(-15, 16, 50).tolist()
        accs = [sync_accuracy(preds, [0] * 50, tol).accuracy
                for tol in range(0, 16)]
        assert accs == sorted(accs)

    def test_accepts_prediction_objects(self):
        p = OffsetPrediction("c", 0, 1, np.zeros(31))
        assert sync_accuracy([p], [0], 1).accuracy == 1.0


class TestShiftWaveform:
    def test_delay_preserves_length_and_content(self):
        w = Waveform(np.arange(1, 3201, dtype=np.float32) / 4000)
        d = shift_waveform(w, 2)
        assert len(d) == len(w)
        assert np.all(d.samples[:2 * 640] == 0)
        np.testing.assert_array_equal(d.samples[2 * 640:], w.samples[:-2 * 640])

    def test_advance(self):
        w = Waveform(np.arange(1, 3201, dtype=np.float32) / 4000)
        a = shift_waveform(w, -1)
        np.testing.assert_array_equal(a.samples[:-640], w.samples[640:])
        assert np.all(a.samples[-640:] == 0)

    def test_roundtrip_interior(self):
        w = Waveform(np.random.default_rng(0).uniform(-1, 1, 6400).astype(np.float32))
        back = shift_waveform(shift_waveform(w, 3), -3)
        np.testing.assert_array_equal(back.samples[3 * 640:-3 * 640],
                                      w.samples[3 * 640:-3 * 640])
