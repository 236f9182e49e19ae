"""Quality metrics and the evaluation-only emotion probe."""

import numpy as np
import pytest
import torch

from emoface.errors import NotTrainedError
from emoface.metrics import (
    EmotionProbe,
    metric_au_std,
    metric_blink_rate,
    metric_emo_sim,
    metric_lip_dist,
    probe_calibration,
    load_probe,
    save_probe,
)


class TestLipDist:
    def test_hand_example(self):
        # two lip channels offset by (3, 4) on every frame: distance 5
        frames = np.zeros((4, 6))
        gt = np.zeros((4, 6))
        frames[:, 4] = 3.0
        frames[:, 5] = 4.0
        assert metric_lip_dist(frames, gt, (4, 5)) == pytest.approx(5.0)

    def test_ignores_other_channels(self):
        rng = np.random.default_rng(0)
        frames = rng.normal(size=(8, 6))
        gt = frames.copy()
        gt[:, :4] = 0.0  # differences outside the lip channels must not count
        assert metric_lip_dist(frames, gt, (4, 5)) == 0.0

    def test_mean_over_frames(self):
        frames = np.zeros((2, 3))
        gt = np.zeros((2, 3))
        frames[0, 1] = 1.0
        frames[1, 1] = 3.0
        assert metric_lip_dist(frames, gt, (1,)) == pytest.approx(2.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            metric_lip_dist(np.zeros((4, 6)), np.zeros((5, 6)), (4, 5))


class TestAuStd:
    def test_constant_channels_have_zero_std(self):
        frames = np.ones((16, 5)) * 3.0
        assert metric_au_std(frames, range(4)) == 0.0

    def test_sinusoid_std_is_amplitude_over_sqrt2(self):
        t = np.arange(1000)
        frames = np.zeros((1000, 3))
        frames[:, 0] = 0.4 * np.sin(2 * np.pi * t / 125)
        frames[:, 1] = 0.4 * np.sin(2 * np.pi * t / 125)
        expected = 0.4 / np.sqrt(2.0)
        assert metric_au_std(frames, (0, 1)) == pytest.approx(expected, rel=1e-3)

    def test_mean_over_channels(self):
        rng = np.random.default_rng(1)
        frames = rng.normal(size=(64, 4))
        expected = np.mean([np.std(frames[:, c]) for c in range(3)])
        assert metric_au_std(frames, (0, 1, 2)) == pytest.approx(expected, rel=1e-12)


class TestBlinkRate:
    def test_hand_case(self):
        x = np.zeros((100, 2))
        for s in (10, 40, 70):
            x[s : s + 5, 1] = 1.0
        assert metric_blink_rate(x, 1, fps=25.0) == pytest.approx(3 / 4.0)

    def test_initial_high_frame_counts(self):
        x = np.zeros((50, 1))
        x[0:5, 0] = 1.0
        assert metric_blink_rate(x, 0, fps=25.0) == pytest.approx(1 / 2.0)

    def test_plateau_counts_once(self):
        x = np.zeros((50, 1))
        x[10:30, 0] = 1.0
        assert metric_blink_rate(x, 0, fps=25.0) == pytest.approx(1 / 2.0)

    def test_subthreshold_noise_ignored(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0.0, 0.4, size=(200, 1))
        assert metric_blink_rate(x, 0, fps=25.0) == 0.0


class TestEmotionProbe:
    def test_features_are_mean_and_std(self):
        frames = torch.randn(3, 32, 4)
        feats = EmotionProbe.features(frames)
        assert feats.shape == (3, 8)
        assert torch.allclose(feats[:, :4], frames.mean(dim=1))
        assert torch.allclose(feats[:, 4:], frames.std(dim=1, unbiased=False))

    def test_untrained_probe_refuses_to_score(self):
        probe = EmotionProbe(6, 3)
        with pytest.raises(NotTrainedError):
            probe.similarity(torch.randn(1, 10, 6), 0)

    def test_embeddings_unit_norm(self):
        probe = EmotionProbe(6, 3)
        z = probe.embed(torch.randn(5, 10, 6))
        assert torch.allclose(z.norm(dim=-1), torch.ones(5), atol=1e-5)

    def test_trained_probe_recognizes_held_out_clips(self, small_probe, small_corpus):
        cal = probe_calibration(small_probe, small_corpus, split="val")
        assert cal["accuracy"] >= 0.9
        assert cal["own_mean"] > cal["cross_max"]

    def test_metric_emo_sim_matches_similarity(self, small_probe, small_corpus):
        rec = small_corpus.records("val")[0]
        frames = small_corpus.load_motion(rec).frames
        direct = small_probe.similarity(torch.from_numpy(frames), rec.emotion_class)
        assert metric_emo_sim(frames, rec.emotion_class, small_probe) == pytest.approx(direct)

    def test_own_class_scores_higher_than_wrong_class(self, small_probe, small_corpus):
        rec = small_corpus.records("val")[0]
        frames = small_corpus.load_motion(rec).frames
        own = metric_emo_sim(frames, rec.emotion_class, small_probe)
        wrong = metric_emo_sim(
            frames, (rec.emotion_class + 1) % small_corpus.num_classes, small_probe
        )
        assert own > wrong + 0.3

    def test_amplitude_rescale_keeps_class(self, small_probe, small_corpus):
        # guided sampling overshoots amplitudes; the probe must not flip class
        rec = small_corpus.records("val")[0]
        frames = small_corpus.load_motion(rec).frames.astype(np.float64)
        mean = frames.mean(axis=0, keepdims=True)
        boosted = mean + 1.4 * (frames - mean)
        assert metric_emo_sim(boosted.astype(np.float32), rec.emotion_class, small_probe) > 0.9

    def test_save_load_round_trip(self, small_probe, small_corpus, tmp_path):
        path = tmp_path / "probe.ckpt"
        save_probe(small_probe, path)
        loaded = load_probe(path)
        assert loaded.trained
        rec = small_corpus.records("val")[1]
        frames = small_corpus.load_motion(rec).frames
        assert metric_emo_sim(frames, rec.emotion_class, loaded) == pytest.approx(
            metric_emo_sim(frames, rec.emotion_class, small_probe)
        )
