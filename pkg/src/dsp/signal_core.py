"""
Signal Core
===========
Sampled-signal arithmetic shared by every stage: convolution, spectra,
seeded noise generation and 16-bit PCM WAV I/O.

All randomness goes through make_rng(), which builds a numpy Philox
(counter-based) generator from a SeedSequence, so equal seeds give
bit-identical streams on every platform.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from scipy.io import wavfile
from scipy.signal import convolve as sp_convolve
from scipy.signal import correlate as sp_correlate

from ..config import PCM_FULL_SCALE, SAMPLE_RATE
from ..errors import EmptyInputError, RateMismatchError, TruncationError, WavFormatError

logger = logging.getLogger(__name__)

_SEED_MASK = 0xFFFFFFFFFFFFFFFF

PathLike = Union[str, Path]


@dataclass(frozen=True)
class Signal:
    """Uniformly sampled real signal. Full scale = 1.0."""
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        arr = np.array(self.samples, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"Signal must be one-dimensional, got shape {arr.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Signal samples must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def with_samples(self, samples: np.ndarray) -> "Signal":
        return Signal(samples, self.sample_rate)


@dataclass(frozen=True)
class ComplexSpectrum:
    """One-sided DFT: bin k sits at k * sample_rate / nfft."""
    bins: np.ndarray
    nfft: int
    sample_rate: int

    @property
    def frequencies(self) -> np.ndarray:
        return np.arange(len(self.bins)) * self.sample_rate / self.nfft

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.bins)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Philox generator keyed by a seed and an optional stream path."""
    entropy = [int(seed) & _SEED_MASK] + [int(s) & _SEED_MASK for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *stream: int) -> int:
    """64-bit child seed for a (seed, *stream) path."""
    entropy = [int(seed) & _SEED_MASK] + [int(s) & _SEED_MASK for s in stream]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


def _check_pair(a: Signal, b: Signal) -> None:
    if a.sample_rate != b.sample_rate:
        raise RateMismatchError(a.sample_rate, b.sample_rate)
    if len(a) == 0 or len(b) == 0:
        raise EmptyInputError("convolve needs two non-empty signals")


def convolve(a: Signal, b: Signal) -> Signal:
    """Full linear convolution, length len(a) + len(b) - 1."""
    _check_pair(a, b)
    return a.with_samples(sp_convolve(a.samples, b.samples, mode="full", method="auto"))


def convolve_direct(a: Signal, b: Signal) -> Signal:
    """O(n*m) time-domain convolution. Reference for the fast path."""
    _check_pair(a, b)
    out = np.zeros(len(a) + len(b) - 1)
    for i, ai in enumerate(a.samples):
        out[i:i + len(b)] += ai * b.samples
    return a.with_samples(out)


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def spectrum(s: Signal, nfft: int) -> ComplexSpectrum:
    """One-sided DFT of the zero-padded signal. Never truncates."""
    if not is_power_of_two(nfft):
        raise ValueError(f"nfft must be a power of two, got {nfft}")
    if nfft < len(s):
        raise TruncationError(f"nfft={nfft} is shorter than the signal ({len(s)} samples)")
    return ComplexSpectrum(np.fft.rfft(s.samples, n=nfft), nfft, s.sample_rate)


def white_noise(length: int, amplitude: float, seed: int,
                sample_rate: int = SAMPLE_RATE) -> Signal:
    """i.i.d. uniform samples in [-amplitude, +amplitude]."""
    if amplitude < 0:
        raise ValueError(f"amplitude must be >= 0, got {amplitude}")
    rng = make_rng(seed)
    return Signal(rng.uniform(-amplitude, amplitude, size=int(length)), sample_rate)


def delta(length: int, index: int = 0, gain: float = 1.0,
          sample_rate: int = SAMPLE_RATE) -> Signal:
    samples = np.zeros(length)
    samples[index] = gain
    return Signal(samples, sample_rate)


def tone(freq_hz: float, seconds: float, amplitude: float = 0.5,
         sample_rate: int = SAMPLE_RATE, phase: float = 0.0) -> Signal:
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return Signal(amplitude * np.cos(2 * np.pi * freq_hz * t + phase), sample_rate)


def energy(s: Signal) -> float:
    return float(np.sum(s.samples ** 2))


def rms_dbfs(samples: np.ndarray) -> float:
    """RMS level in dB relative to full scale; -inf for digital silence."""
    rms = float(np.sqrt(np.mean(np.square(samples)))) if len(samples) else 0.0
    return 20 * np.log10(rms) if rms > 0 else float("-inf")


def correlate_lag(reference: np.ndarray, delayed: np.ndarray, max_lag: int) -> int:
    """Lag in [0, max_lag] maximising sum(reference[n] * delayed[n + lag]).

    np.argmax keeps the first maximum, so ties go to the smaller lag.
    """
    if len(reference) == 0 or len(delayed) == 0:
        return 0
    xcorr = sp_correlate(delayed, reference, mode="full", method="auto")
    zero = len(reference) - 1
    window = xcorr[zero:zero + max_lag + 1]
    return int(np.argmax(window))


# =============================================================================
# WAV I/O
# =============================================================================

def write_wav(path: PathLike, s: Signal) -> None:
    """16-bit PCM mono. 1.0 is stored as 32767 (clipped)."""
    scaled = np.round(s.samples * PCM_FULL_SCALE)
    clipped = np.clip(scaled, -PCM_FULL_SCALE, PCM_FULL_SCALE - 1)
    n_clipped = int(np.count_nonzero(scaled != clipped))
    if n_clipped:
        logger.debug(f"write_wav {path}: {n_clipped} samples clipped at full scale")
    wavfile.write(str(path), s.sample_rate, clipped.astype("<i2"))


def read_wav(path: PathLike) -> Signal:
    """Read a 16-bit PCM mono RIFF/WAVE file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        rate, data = wavfile.read(str(path))
    except Exception as e:
        raise WavFormatError("header", str(e) or type(e).__name__) from e

    if data.ndim != 1:
        raise WavFormatError("num_channels", f"expected mono, got {data.shape[1]} channels")
    if data.dtype != np.int16:
        raise WavFormatError("bits_per_sample", f"expected 16-bit PCM, got {data.dtype}")
    if rate <= 0:
        raise WavFormatError("sample_rate", f"non-positive rate {rate}")

    return Signal(data.astype(np.float64) / PCM_FULL_SCALE, int(rate))
