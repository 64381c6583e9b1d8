"""
Channel Sounding
================
Enrollment-time exponential sine sweep (ESS) and impulse-response estimation.

    s(t) = A * sin(2*pi*f0*T/ln(f1/f0) * (exp(t*ln(f1/f0)/T) - 1))

Two deconvolution paths:
  spectral  regularised division R*conj(P) / max(|P|^2, (eps*max|P|)^2)   (default)
  farina    convolution with the time-reversed, amplitude-compensated sweep
"""

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..config import SAMPLE_RATE, SoundingConfig
from ..errors import SoundingFailedError, SpecError
from ..ear.ear_model import ImpulseResponse, IROrigin
from .signal_core import ComplexSpectrum, Signal, convolve, spectrum, write_wav

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChirpSpec:
    f0: float          # Hz
    f1: float          # Hz
    duration: float    # seconds
    amplitude: float = 0.5

    @classmethod
    def from_config(cls, cfg: SoundingConfig) -> "ChirpSpec":
        return cls(cfg.f0_hz, cfg.f1_hz, cfg.duration_s, cfg.amplitude)

    def validate(self, fs: int) -> None:
        if self.f0 <= 0:
            raise SpecError(f"f0 must be > 0 for a log sweep, got {self.f0}")
        if not self.f0 < self.f1 <= fs / 2:
            raise SpecError(f"need f0 < f1 <= {fs / 2}, got f0={self.f0}, f1={self.f1}")
        if self.duration <= 0:
            raise SpecError(f"duration must be > 0, got {self.duration}")

    def n_samples(self, fs: int) -> int:
        return int(round(self.duration * fs))


def exponential_chirp(spec: ChirpSpec, fs: int = SAMPLE_RATE) -> Signal:
    """Exponential sine sweep from f0 to f1."""
    spec.validate(fs)
    t = np.arange(spec.n_samples(fs)) / fs
    rate = math.log(spec.f1 / spec.f0)
    phase = 2 * np.pi * spec.f0 * spec.duration / rate * (np.exp(t * rate / spec.duration) - 1)
    return Signal(spec.amplitude * np.sin(phase), fs)


def inverse_filter(chirp: Signal, spec: ChirpSpec) -> Signal:
    """Time-reversed sweep with +6 dB/octave compensation.

    Scaled so that convolve(chirp, inverse) peaks at exactly 1. Refuses chirps
    that were not produced from `spec`.
    """
    expected = exponential_chirp(spec, chirp.sample_rate)
    if len(expected) != len(chirp) or not np.allclose(
            chirp.samples, expected.samples, rtol=0, atol=1e-9 * max(spec.amplitude, 1e-12)):
        raise SpecError("chirp does not match the given ChirpSpec")

    t = np.arange(len(chirp)) / chirp.sample_rate
    envelope = np.exp(-t * math.log(spec.f1 / spec.f0) / spec.duration)
    raw = chirp.samples[::-1] * envelope

    peak = np.max(np.abs(convolve(chirp, chirp.with_samples(raw)).samples))
    return chirp.with_samples(raw / peak)


def _next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def _deconvolve_spectral(probe: Signal, recorded: Signal, regularization: float) -> np.ndarray:
    nfft = _next_pow2(max(len(recorded), len(probe)))
    p = np.fft.rfft(probe.samples, n=nfft)
    r = np.fft.rfft(recorded.samples, n=nfft)
    power = np.abs(p) ** 2
    floor = (regularization * np.max(np.abs(p))) ** 2
    return np.fft.irfft(r * np.conj(p) / np.maximum(power, floor), n=nfft)


def _deconvolve_farina(probe: Signal, recorded: Signal, spec: ChirpSpec) -> np.ndarray:
    full = convolve(recorded, inverse_filter(probe, spec)).samples
    # The impulse of a zero-lag channel lands at len(probe) - 1
    return full[len(probe) - 1:]


def estimate_ir(probe: Signal, recorded: Signal, spec: ChirpSpec, ir_length: int = 512,
                method: str = "spectral", regularization: float = 1e-8,
                pre_peak_taps: int = 16, peak_to_rms_min: float = 10.0) -> ImpulseResponse:
    """Estimate the channel between a sweep and its in-ear recording.

    Crops ir_length taps starting pre_peak_taps before the strongest tap,
    clamped at lag 0. Raises SoundingFailedError if no tap stands out of the floor.
    """
    spec.validate(probe.sample_rate)
    if method == "spectral":
        h = _deconvolve_spectral(probe, recorded, regularization)
    elif method == "farina":
        h = _deconvolve_farina(probe, recorded, spec)
    else:
        raise SpecError(f"unknown deconvolution method '{method}'")

    peak = int(np.argmax(np.abs(h)))
    rms = float(np.sqrt(np.mean(h ** 2)))
    ratio = abs(h[peak]) / rms if rms > 0 else 0.0
    if ratio < peak_to_rms_min:
        raise SoundingFailedError(
            f"no impulse peak above noise floor (peak/rms {ratio:.1f} < {peak_to_rms_min})"
        )

    start = max(0, peak - pre_peak_taps)
    taps = np.zeros(ir_length)
    chunk = h[start:start + ir_length]
    taps[:len(chunk)] = chunk
    logger.debug(f"estimate_ir: peak at lag {peak}, peak/rms {ratio:.1f}, crop start {start}")
    return ImpulseResponse(Signal(taps, probe.sample_rate), IROrigin.ESTIMATED, offset=start)


def transfer_function(ir: ImpulseResponse, nfft: int) -> ComplexSpectrum:
    return spectrum(ir.taps, nfft)


def _on_lag_axis(ir: ImpulseResponse, length: int) -> np.ndarray:
    out = np.zeros(length)
    out[ir.offset:ir.offset + len(ir)] = ir.taps.samples
    return out


def band_limited_nmse(estimate: ImpulseResponse, truth: ImpulseResponse,
                      f0: float, f1: float) -> float:
    """Normalised squared error of two IRs after projection onto [f0, f1]."""
    length = max(estimate.offset + len(estimate), truth.offset + len(truth))
    nfft = _next_pow2(length)
    fs = truth.taps.sample_rate
    freqs = np.fft.rfftfreq(nfft, 1 / fs)
    band = (freqs >= f0) & (freqs <= f1)

    e = np.fft.rfft(_on_lag_axis(estimate, length), n=nfft)[band]
    t = np.fft.rfft(_on_lag_axis(truth, length), n=nfft)[band]
    denom = float(np.sum(np.abs(t) ** 2))
    return float(np.sum(np.abs(e - t) ** 2) / denom) if denom > 0 else float("inf")


def export_ir(path: Path, ir: ImpulseResponse, spec: ChirpSpec,
              truth: Optional[ImpulseResponse] = None) -> Path:
    """Write taps as WAV (peak-normalised) plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    peak = float(np.max(np.abs(ir.taps.samples))) or 1.0
    scale = max(1.0, peak)
    write_wav(path.with_suffix(".wav"), ir.taps.with_samples(ir.taps.samples / scale))

    sidecar = {
        "spec": asdict(spec),
        "origin": ir.origin.value,
        "offset": ir.offset,
        "peak_index": ir.offset + int(np.argmax(np.abs(ir.taps.samples))),
        "scale": scale,
        "nmse": band_limited_nmse(ir, truth, spec.f0, spec.f1) if truth is not None else None,
    }
    sidecar_path = path.with_suffix(".json")
    with open(sidecar_path, "w") as f:
        json.dump(sidecar, f, indent=2)
    return sidecar_path
