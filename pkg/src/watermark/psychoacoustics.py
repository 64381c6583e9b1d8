"""
Psychoacoustics
===============
Absolute threshold of hearing and the simultaneous-masking ceiling.

Threshold in quiet (Terhardt approximation, dB SPL, f in kHz):

    T_q(f) = 3.64 f^-0.8 - 6.5 exp(-0.6 (f - 3.3)^2) + 1e-3 f^4

mapped to dBFS with 90 dB SPL = 0 dBFS.
"""

from dataclasses import dataclass
from typing import Union

import numpy as np

from ..config import SPL_REFERENCE_DB
from ..errors import DomainError

FREQ_DOMAIN_HZ = (20.0, 8000.0)

ArrayLike = Union[float, np.ndarray]


def threshold_in_quiet_spl(freq: ArrayLike) -> ArrayLike:
    """T_q in dB SPL. No domain check."""
    f = np.asarray(freq, dtype=np.float64) / 1000.0
    tq = 3.64 * np.power(f, -0.8) - 6.5 * np.exp(-0.6 * (f - 3.3) ** 2) + 1e-3 * np.power(f, 4)
    return float(tq) if tq.ndim == 0 else tq


def threshold_in_quiet(freq: ArrayLike) -> ArrayLike:
    """T_q in dBFS for 20 Hz <= freq <= 8 kHz."""
    f = np.asarray(freq, dtype=np.float64)
    lo, hi = FREQ_DOMAIN_HZ
    if np.any(~np.isfinite(f)) or np.any(f < lo) or np.any(f > hi):
        raise DomainError(f"threshold_in_quiet defined on [{lo:g}, {hi:g}] Hz, got {freq}")
    tq = threshold_in_quiet_spl(f)
    return tq - SPL_REFERENCE_DB


def to_db(power: np.ndarray) -> np.ndarray:
    """Power to dBFS; zero power maps to -inf."""
    with np.errstate(divide="ignore"):
        return 10 * np.log10(power)


def masked_ceiling_db(band_power_db: np.ndarray, tq_db: np.ndarray,
                      masking_offset_db: float) -> np.ndarray:
    """max(T_q, P - offset) per cell; tq_db broadcasts over frames."""
    return np.maximum(tq_db, band_power_db - masking_offset_db)


@dataclass(frozen=True)
class AudibilityCeiling:
    """Per-cell maximum allowed watermark power, dBFS (frames x bands)."""
    values: np.ndarray
    threshold: np.ndarray         # T_q per band, dBFS
    masking_offset_db: float

    @property
    def power(self) -> np.ndarray:
        return np.power(10.0, self.values / 10)

    @property
    def shape(self):
        return self.values.shape
