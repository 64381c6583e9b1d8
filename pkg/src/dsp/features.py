"""
RTF Features
============
Per-frame, per-band relative transfer function between what the earbud played
and what the in-ear microphone heard, plus the mask of silent frames and
inaudible bands the watermark has to fill.

Cell power (frame t, band b) with Hann window w, triangular mel weights W_b:

    P[t, b] = sum_k W_b(k) * 2 |X_t(k)|^2 / (nfft * sum(w^2))

so white noise of variance s^2 puts s^2 * B_eff / (fs / 2) into a band of
effective width B_eff, and 0 dBFS is unit power.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from ..config import SAMPLE_RATE, FeatureConfig
from ..errors import ConfigError, RateMismatchError, TooShortError
from ..watermark.psychoacoustics import threshold_in_quiet
from .signal_core import Signal, correlate_lag, is_power_of_two

logger = logging.getLogger(__name__)

_DB = 10 / np.log(10)


# =============================================================================
# GEOMETRY
# =============================================================================

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (np.power(10.0, np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_points(n_bands: int, f_min: float, f_max: float) -> np.ndarray:
    """n_bands + 2 mel-spaced points; band b spans points b..b+2, peaks at b+1."""
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_bands + 2))


@dataclass(frozen=True)
class FrameGeometry:
    frame_len: int
    hop: int
    nfft: int
    band_edges: Tuple[float, ...]
    sample_rate: int = SAMPLE_RATE

    @classmethod
    def from_config(cls, cfg: FeatureConfig, fs: int = SAMPLE_RATE) -> "FrameGeometry":
        if cfg.hop < 1:
            raise ConfigError("hop must be >= 1", key="features.hop")
        if not is_power_of_two(cfg.nfft) or cfg.nfft < cfg.frame_len:
            raise ConfigError("nfft must be a power of two >= frame_len", key="features.nfft")
        if not 0 < cfg.f_min_hz < cfg.f_max_hz <= fs / 2:
            raise ConfigError("need 0 < f_min < f_max <= fs/2", key="features.f_min_hz")
        edges = mel_points(cfg.n_bands, cfg.f_min_hz, cfg.f_max_hz)
        return cls(cfg.frame_len, cfg.hop, cfg.nfft, tuple(float(e) for e in edges), fs)

    @property
    def n_bands(self) -> int:
        return len(self.band_edges) - 2

    @property
    def band_centers(self) -> np.ndarray:
        return np.array(self.band_edges[1:-1])

    @property
    def n_bins(self) -> int:
        return self.nfft // 2 + 1

    def n_frames(self, length: int) -> int:
        if length < self.frame_len:
            return 0
        return (length - self.frame_len) // self.hop + 1

    @property
    def window(self) -> np.ndarray:
        return _hann(self.frame_len)

    @property
    def filterbank(self) -> np.ndarray:
        """Triangular band weights, n_bands x n_bins."""
        return _filterbank(self)

    @property
    def band_of_bin(self) -> np.ndarray:
        """Band owning each bin (largest weight), -1 outside all bands."""
        return _partition(self)


@lru_cache(maxsize=8)
def _hann(frame_len: int) -> np.ndarray:
    w = get_window("hann", frame_len, fftbins=True)
    w.setflags(write=False)
    return w


@lru_cache(maxsize=8)
def _filterbank(geometry: FrameGeometry) -> np.ndarray:
    freqs = np.arange(geometry.n_bins) * geometry.sample_rate / geometry.nfft
    edges = np.array(geometry.band_edges)
    weights = np.zeros((geometry.n_bands, geometry.n_bins))
    for b in range(geometry.n_bands):
        lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
        rise = (freqs - lo) / (mid - lo)
        fall = (hi - freqs) / (hi - mid)
        weights[b] = np.clip(np.minimum(rise, fall), 0.0, None)
        if not weights[b].any():
            weights[b, int(np.argmin(np.abs(freqs - mid)))] = 1.0
    weights.setflags(write=False)
    return weights


@lru_cache(maxsize=8)
def _partition(geometry: FrameGeometry) -> np.ndarray:
    weights = _filterbank(geometry)
    owner = np.argmax(weights, axis=0)
    owner[weights.max(axis=0) <= 0] = -1
    owner.setflags(write=False)
    return owner


# =============================================================================
# FRAMING AND BAND POWER
# =============================================================================

def _raw_frames(samples: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    if hop < 1:
        raise ValueError(f"hop must be >= 1, got {hop}")
    if frame_len > len(samples):
        raise TooShortError(f"signal of {len(samples)} samples is shorter than one frame ({frame_len})")
    return sliding_window_view(samples, frame_len)[::hop]


def frame_signal(s: Signal, frame_len: int, hop: int) -> np.ndarray:
    """Hann-windowed frames, shape (floor((len - frame_len) / hop) + 1, frame_len)."""
    return _raw_frames(s.samples, frame_len, hop) * _hann(frame_len)


def overlap_add(frames: np.ndarray, hop: int, length: int) -> np.ndarray:
    """Sum frames into a signal of the given length, frame t starting at t * hop."""
    out = np.zeros(length)
    frame_len = frames.shape[1]
    for t, frame in enumerate(frames):
        out[t * hop:t * hop + frame_len] += frame
    return out


def _analyze(samples: np.ndarray, geometry: FrameGeometry) -> Tuple[np.ndarray, np.ndarray]:
    """(spectra F x K, band powers F x B)."""
    frames = _raw_frames(samples, geometry.frame_len, geometry.hop) * geometry.window
    spectra = np.fft.rfft(frames, n=geometry.nfft, axis=1)
    scale = 2.0 / (geometry.nfft * np.sum(geometry.window ** 2))
    powers = (np.abs(spectra) ** 2 * scale) @ geometry.filterbank.T
    return spectra, powers


def band_powers(samples: np.ndarray, geometry: FrameGeometry) -> np.ndarray:
    return _analyze(np.asarray(samples, dtype=np.float64), geometry)[1]


def silent_frames(samples: np.ndarray, geometry: FrameGeometry, silence_dbfs: float) -> np.ndarray:
    """Frame is silent iff its (unwindowed) RMS is below silence_dbfs."""
    frames = _raw_frames(np.asarray(samples, dtype=np.float64), geometry.frame_len, geometry.hop)
    rms = np.sqrt(np.mean(frames ** 2, axis=1))
    return rms < 10 ** (silence_dbfs / 20)


def silence_fraction(s: Signal, cfg: FeatureConfig) -> float:
    geometry = FrameGeometry.from_config(cfg, s.sample_rate)
    return float(np.mean(silent_frames(s.samples, geometry, cfg.silence_dbfs)))


# =============================================================================
# DEFICIENCY
# =============================================================================

@dataclass(frozen=True, eq=False)
class DeficiencyMask:
    cells: np.ndarray           # frames x bands, True = deficient
    silent_frames: np.ndarray   # frames

    @property
    def shape(self) -> Tuple[int, int]:
        return self.cells.shape

    def any(self) -> bool:
        return bool(self.cells.any())

    @property
    def fraction(self) -> float:
        return float(self.cells.mean()) if self.cells.size else 0.0


def deficiency_mask(playback: Signal, config: FeatureConfig,
                    geometry: Optional[FrameGeometry] = None) -> DeficiencyMask:
    """Silent frames, and bands whose playback power is under the threshold in quiet."""
    geometry = geometry or FrameGeometry.from_config(config, playback.sample_rate)
    powers = band_powers(playback.samples, geometry)
    with np.errstate(divide="ignore"):
        level = 10 * np.log10(powers)
    floor = threshold_in_quiet(geometry.band_centers) + config.deficiency_margin_db
    cells = level < floor[np.newaxis, :]
    silent = silent_frames(playback.samples, geometry, config.silence_dbfs)
    cells[silent, :] = True
    return DeficiencyMask(cells, silent)


# =============================================================================
# RELATIVE TRANSFER FUNCTION
# =============================================================================

@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """frames x bands log band-power ratios, dB."""
    values: np.ndarray
    geometry: FrameGeometry
    mask: DeficiencyMask
    lag: int = 0

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bands(self) -> int:
        return self.values.shape[1]

    @property
    def frame_len(self) -> int:
        return self.geometry.frame_len

    @property
    def hop(self) -> int:
        return self.geometry.hop

    @property
    def band_edges(self) -> Tuple[float, ...]:
        return self.geometry.band_edges

    def with_values(self, values: np.ndarray) -> "FeatureMatrix":
        return FeatureMatrix(np.asarray(values, dtype=np.float64), self.geometry, self.mask, self.lag)

    def to_frame(self) -> pd.DataFrame:
        columns = [f"band_{b:02d}_{c:.0f}hz" for b, c in enumerate(self.geometry.band_centers)]
        df = pd.DataFrame(self.values, columns=columns)
        df.index.name = "frame"
        return df

    def to_csv(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, float_format="%.4f")


def _aligned(response: np.ndarray, lag: int, length: int) -> np.ndarray:
    out = np.zeros(length)
    chunk = response[lag:lag + length]
    out[:len(chunk)] = chunk
    return out


def _log_ratio(p_response: np.ndarray, p_playback: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    return 10 * np.log10((p_response + cfg.eps) / (p_playback + cfg.eps))


def rtf_features(playback: Signal, response: Signal, config: FeatureConfig,
                 geometry: Optional[FrameGeometry] = None,
                 lag: Optional[int] = None) -> FeatureMatrix:
    """Clamped 10*log10((P_response + eps) / (P_playback + eps)) per cell.

    The response is aligned to the playback by the cross-correlation peak
    within max_align_lag unless a lag is given.
    """
    if playback.sample_rate != response.sample_rate:
        raise RateMismatchError(playback.sample_rate, response.sample_rate)
    geometry = geometry or FrameGeometry.from_config(config, playback.sample_rate)
    if lag is None:
        lag = correlate_lag(playback.samples, response.samples, config.max_align_lag)

    aligned = _aligned(response.samples, lag, len(playback))
    raw = _log_ratio(band_powers(aligned, geometry), band_powers(playback.samples, geometry), config)
    values = np.clip(raw, config.clamp_min_db, config.clamp_max_db)
    return FeatureMatrix(values, geometry, deficiency_mask(playback, config, geometry), lag)


def _frame_backward(spectra: np.ndarray, grad_power: np.ndarray,
                    geometry: FrameGeometry, length: int) -> np.ndarray:
    """Pull dJ/dP (frames x bands) back to dJ/dsamples through |rfft(w * frame)|^2."""
    scale = 2.0 / (geometry.nfft * np.sum(geometry.window ** 2))
    per_bin = scale * (grad_power @ geometry.filterbank)
    y = per_bin * spectra
    y[:, 1:-1] *= 0.5
    frame_grad = 2 * geometry.nfft * np.fft.irfft(y, n=geometry.nfft, axis=1)[:, :geometry.frame_len]
    frame_grad *= geometry.window

    return overlap_add(frame_grad, geometry.hop, length)


def rtf_backward(playback: Signal, response: Signal, features: FeatureMatrix,
                 grad_values: np.ndarray, config: FeatureConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient of sum(grad_values * features.values) w.r.t. playback and response samples.

    The alignment lag is held fixed; clamped cells pass no gradient.
    """
    geometry = features.geometry
    aligned = _aligned(response.samples, features.lag, len(playback))
    spec_x, p_x = _analyze(playback.samples, geometry)
    spec_r, p_r = _analyze(aligned, geometry)

    raw = _log_ratio(p_r, p_x, config)
    live = (raw > config.clamp_min_db) & (raw < config.clamp_max_db)
    g = np.where(live, grad_values, 0.0)

    grad_playback = _frame_backward(spec_x, -_DB * g / (p_x + config.eps), geometry, len(playback))
    grad_aligned = _frame_backward(spec_r, _DB * g / (p_r + config.eps), geometry, len(playback))

    grad_response = np.zeros(len(response))
    lag = features.lag
    n = max(0, min(len(playback), len(response) - lag))
    grad_response[lag:lag + n] = grad_aligned[:n]
    return grad_playback, grad_response
