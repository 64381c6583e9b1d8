"""
Tests for the sampled-signal core.
"""

import pytest
import numpy as np
from scipy.io import wavfile

from src.dsp.signal_core import (
    Signal,
    convolve,
    convolve_direct,
    correlate_lag,
    delta,
    derive_seed,
    energy,
    make_rng,
    read_wav,
    rms_dbfs,
    spectrum,
    tone,
    white_noise,
    write_wav,
)
from src.errors import EmptyInputError, RateMismatchError, TruncationError, WavFormatError


class TestSignal:
    """Test the signal value type."""

    def test_samples_are_read_only(self):
        """Samples cannot be mutated in place."""
        s = Signal(np.zeros(4))
        with pytest.raises(ValueError):
            s.samples[0] = 1.0

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Signal(np.array([0.0, np.nan]))

    def test_rejects_two_dimensional(self):
        with pytest.raises(ValueError):
            Signal(np.zeros((2, 2)))

    def test_duration(self):
        assert Signal(np.zeros(8000), 16000).duration == 0.5


class TestRandomness:
    """Test seeded generators."""

    def test_same_seed_same_stream(self):
        a = make_rng(5, 1, 2).standard_normal(16)
        b = make_rng(5, 1, 2).standard_normal(16)
        np.testing.assert_array_equal(a, b)

    def test_stream_path_separates(self):
        a = make_rng(5, 1).standard_normal(16)
        b = make_rng(5, 2).standard_normal(16)
        assert not np.allclose(a, b)

    def test_derive_seed_is_stable(self):
        assert derive_seed(7, 3) == derive_seed(7, 3)
        assert derive_seed(7, 3) != derive_seed(7, 4)

    def test_white_noise_bounded(self):
        s = white_noise(1000, 0.25, seed=1)
        assert np.max(np.abs(s.samples)) <= 0.25

    def test_white_noise_moments(self):
        """Zero mean, variance amplitude**2 / 3."""
        s = white_noise(20000, 1.0, seed=9).samples
        assert abs(s.mean()) < 0.02
        assert s.var() == pytest.approx(1 / 3, rel=0.05)


class TestConvolve:
    """Test linear convolution."""

    def test_length(self):
        out = convolve(Signal(np.ones(10)), Signal(np.ones(4)))
        assert len(out) == 13

    def test_delta_is_identity(self):
        x = white_noise(64, 1.0, seed=2)
        out = convolve(x, delta(1))
        np.testing.assert_allclose(out.samples, x.samples, atol=1e-12)

    def test_matches_direct_summation(self):
        """Fast path agrees with the O(n*m) oracle."""
        a = white_noise(300, 1.0, seed=3)
        b = white_noise(41, 1.0, seed=4)
        np.testing.assert_allclose(convolve(a, b).samples, convolve_direct(a, b).samples, atol=1e-9)

    def test_commutative(self):
        a = white_noise(257, 1.0, seed=10)
        b = white_noise(63, 1.0, seed=11)
        np.testing.assert_allclose(convolve(a, b).samples, convolve(b, a).samples, atol=1e-9)

    def test_linear(self):
        x = white_noise(200, 1.0, seed=12)
        y = white_noise(200, 1.0, seed=13)
        h = white_noise(31, 1.0, seed=14)
        mixed = x.with_samples(2.5 * x.samples - 0.75 * y.samples)
        expected = 2.5 * convolve(x, h).samples - 0.75 * convolve(y, h).samples
        np.testing.assert_allclose(convolve(mixed, h).samples, expected, atol=1e-9)

    def test_rate_mismatch(self):
        with pytest.raises(RateMismatchError):
            convolve(Signal(np.ones(4), 16000), Signal(np.ones(4), 8000))

    def test_empty_input(self):
        with pytest.raises(EmptyInputError):
            convolve(Signal(np.zeros(0)), Signal(np.ones(4)))


class TestSpectrum:
    """Test one-sided spectra."""

    def test_tone_peaks_at_its_bin(self):
        s = tone(1000.0, 512 / 16000, amplitude=1.0)
        spec = spectrum(s, 512)
        assert spec.frequencies[int(np.argmax(spec.magnitude))] == pytest.approx(1000.0)

    def test_constant_is_pure_dc(self):
        spec = spectrum(Signal(np.ones(4)), 4)
        np.testing.assert_allclose(spec.bins, [4.0, 0.0, 0.0], atol=1e-12)

    def test_impulse_is_flat(self):
        spec = spectrum(delta(8), 8)
        np.testing.assert_allclose(spec.bins, np.ones(5), atol=1e-12)

    def test_parseval(self):
        """Energy is preserved once interior bins count for both halves."""
        s = white_noise(300, 1.0, seed=15)
        spec = spectrum(s, 512)
        weights = np.full(len(spec.bins), 2.0)
        weights[0] = weights[-1] = 1.0
        assert np.sum(weights * spec.magnitude ** 2) / spec.nfft == pytest.approx(energy(s), rel=1e-9)

    def test_never_truncates(self):
        with pytest.raises(TruncationError):
            spectrum(Signal(np.zeros(600)), 512)

    def test_power_of_two_required(self):
        with pytest.raises(ValueError):
            spectrum(Signal(np.zeros(10)), 500)


class TestLevels:
    """Test energy and level helpers."""

    def test_energy(self):
        assert energy(Signal(np.array([3.0, 4.0]))) == 25.0

    def test_full_scale_square_is_zero_dbfs(self):
        assert rms_dbfs(np.ones(100)) == pytest.approx(0.0)

    def test_silence_is_minus_inf(self):
        assert rms_dbfs(np.zeros(100)) == float("-inf")

    def test_correlate_lag_finds_delay(self):
        ref = white_noise(400, 1.0, seed=5).samples
        delayed = np.concatenate([np.zeros(17), ref])
        assert correlate_lag(ref, delayed, 64) == 17


class TestWav:
    """Test 16-bit PCM WAV I/O."""

    def test_roundtrip_within_one_lsb(self, tmp_path):
        s = white_noise(1000, 0.9, seed=6)
        write_wav(tmp_path / "x.wav", s)
        back = read_wav(tmp_path / "x.wav")
        assert back.sample_rate == s.sample_rate
        assert np.max(np.abs(back.samples - s.samples)) <= 1 / 32768

    def test_full_scale_clips(self, tmp_path):
        write_wav(tmp_path / "x.wav", Signal(np.array([1.0, -1.0])))
        back = read_wav(tmp_path / "x.wav")
        assert back.samples[0] == pytest.approx(32767 / 32768)
        assert back.samples[1] == -1.0

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_wav(tmp_path / "missing.wav")

    def test_stereo_rejected(self, tmp_path):
        path = tmp_path / "stereo.wav"
        wavfile.write(str(path), 16000, np.zeros((100, 2), dtype="<i2"))
        with pytest.raises(WavFormatError) as exc:
            read_wav(path)
        assert exc.value.field == "num_channels"

    def test_32_bit_rejected(self, tmp_path):
        path = tmp_path / "wide.wav"
        wavfile.write(str(path), 16000, np.zeros(100, dtype="<i4"))
        with pytest.raises(WavFormatError) as exc:
            read_wav(path)
        assert exc.value.field == "bits_per_sample"

    def test_not_a_wav(self, tmp_path):
        path = tmp_path / "junk.wav"
        path.write_bytes(b"not a riff header")
        with pytest.raises(WavFormatError):
            read_wav(path)
