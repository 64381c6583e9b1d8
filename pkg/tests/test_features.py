"""
Tests for framing, band power, deficiency and RTF features.
"""

import pytest
import numpy as np
from scipy.signal import check_COLA

from src.config import FeatureConfig
from src.dsp.features import (
    FrameGeometry,
    band_powers,
    deficiency_mask,
    frame_signal,
    mel_points,
    overlap_add,
    rtf_backward,
    rtf_features,
    silence_fraction,
    silent_frames,
)
from src.dsp.signal_core import Signal, convolve, tone, white_noise
from src.ear.ear_model import EarProfile, Resonator, acquire, realize_ir
from src.errors import ConfigError, RateMismatchError, TooShortError


@pytest.fixture
def geometry(feature_cfg):
    return FrameGeometry.from_config(feature_cfg)


class TestGeometry:
    """Test frame geometry and the mel filterbank."""

    def test_frame_count(self, geometry):
        assert geometry.n_frames(16000) == 98
        assert geometry.n_frames(399) == 0

    def test_mel_points_span_range(self):
        pts = mel_points(40, 100.0, 7600.0)
        assert len(pts) == 42
        assert pts[0] == pytest.approx(100.0)
        assert pts[-1] == pytest.approx(7600.0)
        assert np.all(np.diff(pts) > 0)

    def test_every_band_has_support(self, geometry):
        fb = geometry.filterbank
        assert fb.shape == (40, 257)
        assert np.all(fb.max(axis=1) > 0)
        assert np.all(fb >= 0)

    def test_partition_owner_within_support(self, geometry):
        owner = geometry.band_of_bin
        fb = geometry.filterbank
        for k, b in enumerate(owner):
            if b >= 0:
                assert fb[b, k] == fb[:, k].max()

    def test_geometry_is_hashable(self, feature_cfg):
        a = FrameGeometry.from_config(feature_cfg)
        b = FrameGeometry.from_config(feature_cfg)
        assert hash(a) == hash(b) and a == b

    def test_bad_nfft(self):
        with pytest.raises(ConfigError):
            FrameGeometry.from_config(FeatureConfig(nfft=256))


class TestFraming:
    """Test framing and overlap-add."""

    def test_frame_shape(self, noise_clip):
        frames = frame_signal(noise_clip, 400, 160)
        assert frames.shape == (98, 400)

    def test_too_short(self):
        with pytest.raises(TooShortError):
            frame_signal(Signal(np.zeros(100)), 400, 160)

    def test_overlap_add_positions(self):
        frames = np.ones((3, 4))
        out = overlap_add(frames, 2, 9)
        np.testing.assert_array_equal(out, [1, 1, 2, 2, 2, 2, 1, 1, 0])

    def test_hann_overlap_add_reconstructs(self):
        """At half-frame hop the periodic Hann frames sum back to the input."""
        assert check_COLA("hann", 400, 200)
        x = white_noise(4000, 0.5, seed=31)
        out = overlap_add(frame_signal(x, 400, 200), 200, len(x))
        np.testing.assert_allclose(out[200:3800], x.samples[200:3800], atol=1e-12)


class TestBandPower:
    """Test band power calibration."""

    def test_tone_lands_in_its_band(self, geometry):
        b = 20
        s = tone(geometry.band_centers[b], 0.2, amplitude=0.1)
        powers = band_powers(s.samples, geometry)
        assert int(np.argmax(powers.mean(axis=0))) == b

    def test_power_scales_quadratically(self, geometry, noise_clip):
        p1 = band_powers(noise_clip.samples, geometry)
        p2 = band_powers(2 * noise_clip.samples, geometry)
        np.testing.assert_allclose(p2, 4 * p1)

    def test_white_noise_total_power(self, geometry):
        """Band powers of white noise add up to variance * covered bandwidth / (fs / 2)."""
        s = white_noise(48000, 0.5, seed=9)
        variance = 0.5 ** 2 / 3
        fb = geometry.filterbank
        covered = fb.sum(axis=0)[1:-1].sum() / (geometry.nfft / 2)
        total = band_powers(s.samples, geometry).sum(axis=1).mean()
        assert total == pytest.approx(variance * covered, rel=0.05)


class TestSilenceAndDeficiency:
    """Test silent frames and the deficiency mask."""

    def test_half_silent_fraction(self, half_silent_clip, feature_cfg):
        assert silence_fraction(half_silent_clip, feature_cfg) == pytest.approx(0.5, abs=0.03)

    def test_silent_frames_are_fully_deficient(self, half_silent_clip, feature_cfg):
        mask = deficiency_mask(half_silent_clip, feature_cfg)
        assert mask.cells[mask.silent_frames].all()
        assert mask.silent_frames[-1] and not mask.silent_frames[0]

    def test_loud_noise_is_not_deficient(self, noise_clip, feature_cfg):
        mask = deficiency_mask(noise_clip, feature_cfg)
        assert not mask.silent_frames.any()
        assert mask.fraction < 0.05

    def test_band_limited_tone_leaves_other_bands_deficient(self, feature_cfg):
        s = tone(1000.0, 1.0, amplitude=1e-3)
        mask = deficiency_mask(s, feature_cfg)
        assert mask.cells[:, -1].all()

    def test_silent_threshold(self, geometry):
        quiet = np.full(16000, 10 ** (-60 / 20))
        assert silent_frames(quiet, geometry, -50.0).all()


class TestRtfFeatures:
    """Test the relative transfer function features."""

    def test_gain_and_delay(self, noise_clip, feature_cfg):
        """A delayed x2 channel reads as +6.02 dB at the right lag."""
        shifted = np.concatenate([np.zeros(5), 2.0 * noise_clip.samples])
        feats = rtf_features(noise_clip, Signal(shifted), feature_cfg)
        assert feats.lag == 5
        np.testing.assert_allclose(feats.values, 20 * np.log10(2.0), atol=1e-2)

    def test_shape_and_clamp(self, half_silent_clip, feature_cfg):
        feats = rtf_features(half_silent_clip, Signal(np.zeros(len(half_silent_clip))), feature_cfg)
        assert feats.values.shape == (98, 40)
        assert feats.values.min() >= feature_cfg.clamp_min_db
        assert feats.values.max() <= feature_cfg.clamp_max_db

    def test_identity_channel_is_zero_db(self, noise_clip, feature_cfg):
        feats = rtf_features(noise_clip, noise_clip, feature_cfg)
        assert feats.lag == 0
        np.testing.assert_allclose(feats.values, 0.0, atol=1e-9)

    def test_joint_scaling_invariant(self, noise_clip, feature_cfg):
        ir = realize_ir(EarProfile((Resonator(1200.0, 5.0, 0.2),), 0.8, 3, "u"), length=128)
        y = convolve(noise_clip, ir.taps)
        feats = rtf_features(noise_clip, y, feature_cfg)
        scaled = rtf_features(noise_clip.with_samples(0.25 * noise_clip.samples),
                              y.with_samples(0.25 * y.samples), feature_cfg, lag=feats.lag)
        np.testing.assert_allclose(scaled.values, feats.values, atol=1e-2)

    def test_silent_playback_is_fully_clamped(self, feature_cfg):
        silence = Signal(np.zeros(16000))
        feats = rtf_features(silence, white_noise(16000, 30.0, seed=32), feature_cfg)
        assert np.all(feats.values == feature_cfg.clamp_max_db)
        assert feats.mask.cells.all()

    def test_deficient_cells_carry_no_user_information(self, half_silent_clip, feature_cfg):
        """Two different ears disagree on audible cells but not on deficient ones."""
        ears = [
            EarProfile((Resonator(1200.0, 5.0, 0.2), Resonator(3400.0, 8.0, 0.1)), 0.8, 3, "a"),
            EarProfile((Resonator(5000.0, 10.0, 0.25), Resonator(700.0, 3.0, 0.2)), 0.6, 1, "b"),
        ]
        feats = [
            rtf_features(half_silent_clip, acquire(half_silent_clip, realize_ir(ear), 1e-5, seed=i),
                         feature_cfg)
            for i, ear in enumerate(ears)
        ]
        mask = feats[0].mask.cells
        # frames clear of the loud half plus the IR tail and alignment search
        quiet_from = (8000 + 512 + feature_cfg.max_align_lag) // feature_cfg.hop + 1
        deficient = mask.copy()
        deficient[:quiet_from] = False
        assert deficient.any() and (~mask).any()

        a, b = feats[0].values, feats[1].values
        assert abs(a[deficient].mean() - b[deficient].mean()) < 0.05
        assert np.abs(a[~mask] - b[~mask]).mean() > 1.0

    def test_rate_mismatch(self, noise_clip, feature_cfg):
        with pytest.raises(RateMismatchError):
            rtf_features(noise_clip, Signal(noise_clip.samples, 8000), feature_cfg)

    def test_to_frame_columns(self, noise_clip, feature_cfg):
        df = rtf_features(noise_clip, noise_clip, feature_cfg).to_frame()
        assert df.shape == (98, 40)
        assert df.columns[0].startswith("band_00_")

    def test_backward_matches_finite_differences(self, feature_cfg):
        """rtf_backward agrees with central differences on sampled playback and response taps."""
        x = white_noise(2400, 0.3, seed=21)
        ir = realize_ir(EarProfile((Resonator(2000.0, 4.0, 0.3), Resonator(900.0, 3.0, 0.2)), 0.8, 2, "u"),
                        length=64)
        y = convolve(x, ir.taps)
        feats = rtf_features(x, y, feature_cfg)
        g = np.random.default_rng(0).standard_normal(feats.values.shape)
        grad_x, grad_y = rtf_backward(x, y, feats, g, feature_cfg)

        def objective(xs, ys):
            f = rtf_features(Signal(xs), Signal(ys), feature_cfg, lag=feats.lag)
            return float(np.sum(g * f.values))

        h = 1e-6
        for i in (410, 1000, 1733):
            e = np.zeros(len(x))
            e[i] = h
            numeric = (objective(x.samples + e, y.samples) - objective(x.samples - e, y.samples)) / (2 * h)
            assert grad_x[i] == pytest.approx(numeric, rel=1e-4, abs=1e-6)

            e = np.zeros(len(y))
            e[i] = h
            numeric = (objective(x.samples, y.samples + e) - objective(x.samples, y.samples - e)) / (2 * h)
            assert grad_y[i] == pytest.approx(numeric, rel=1e-4, abs=1e-6)
