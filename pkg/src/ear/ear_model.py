"""
Ear Model
=========
Synthetic per-user ear-canal acoustics and simulated in-ear acquisition.

An ear is a direct path plus a small bank of decaying resonators:

    h[n] = direct_gain * delta(n - direct_delay)
         + sum_r gain_r * exp(-pi * fc_r * t / Q_r) * sin(2 * pi * fc_r * t),   t = n / fs

Within-user variability between sessions is a multiplicative jitter on the
resonator parameters (assumption: the source gives no temporal model).
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..config import SAMPLE_RATE, PopulationConfig
from ..errors import ConfigError, PreconditionError, RateMismatchError
from ..dsp.signal_core import Signal, convolve, derive_seed, make_rng, white_noise

logger = logging.getLogger(__name__)

# Hard bounds every sampled profile must respect
RESONATOR_COUNT_BOUNDS = (2, 4)
CENTER_FREQ_BOUNDS = (500.0, 7000.0)
Q_BOUNDS = (2.0, 30.0)

_STREAM_PROFILE = 1
_STREAM_JITTER = 2

MIN_IR_LENGTH = 64


@dataclass(frozen=True)
class Resonator:
    center_freq: float   # Hz
    q_factor: float
    gain: float


@dataclass(frozen=True)
class EarProfile:
    """Parametric ear-canal model for one user."""
    resonators: Tuple[Resonator, ...]
    direct_gain: float
    direct_delay: int
    user_id: str
    sample_rate: int = SAMPLE_RATE

    def scaled(self, factor: float) -> "EarProfile":
        """Same profile with every gain multiplied by factor."""
        return EarProfile(
            resonators=tuple(Resonator(r.center_freq, r.q_factor, r.gain * factor)
                             for r in self.resonators),
            direct_gain=self.direct_gain * factor,
            direct_delay=self.direct_delay,
            user_id=self.user_id,
            sample_rate=self.sample_rate,
        )


class IROrigin(str, Enum):
    GROUND_TRUTH = "ground_truth"
    ESTIMATED = "estimated"


@dataclass(frozen=True)
class ImpulseResponse:
    """Finite impulse response; taps[0] sits at lag `offset`."""
    taps: Signal
    origin: IROrigin
    offset: int = 0

    def __len__(self) -> int:
        return len(self.taps)

    def normalized(self) -> "ImpulseResponse":
        """Unit-energy copy (zero responses are returned unchanged)."""
        norm = float(np.sqrt(np.sum(self.taps.samples ** 2)))
        if norm == 0:
            return self
        return ImpulseResponse(self.taps.with_samples(self.taps.samples / norm),
                               self.origin, self.offset)


# =============================================================================
# PROFILES
# =============================================================================

def _check_range(key: str, lo: float, hi: float, bounds: Tuple[float, float]) -> None:
    if lo > hi:
        raise ConfigError(f"degenerate range: min {lo} > max {hi}", key=key)
    if lo < bounds[0] or hi > bounds[1]:
        raise ConfigError(f"range [{lo}, {hi}] outside allowed {list(bounds)}", key=key)


def sample_profile(seed: int, params: PopulationConfig,
                   user_id: Optional[str] = None) -> EarProfile:
    """Draw a profile uniformly within the population ranges. Deterministic in seed."""
    _check_range("population.n_resonators", params.n_resonators_min,
                 params.n_resonators_max, RESONATOR_COUNT_BOUNDS)
    _check_range("population.freq", params.freq_min_hz, params.freq_max_hz, CENTER_FREQ_BOUNDS)
    _check_range("population.q", params.q_min, params.q_max, Q_BOUNDS)
    _check_range("population.gain", params.gain_min, params.gain_max, (1e-12, np.inf))
    _check_range("population.direct_gain", params.direct_gain_min,
                 params.direct_gain_max, (0.0, np.inf))
    _check_range("population.delay", params.delay_min, params.delay_max,
                 (0, params.ir_length - 1))

    rng = make_rng(seed, _STREAM_PROFILE)
    count = int(rng.integers(params.n_resonators_min, params.n_resonators_max + 1))
    freqs = rng.uniform(params.freq_min_hz, params.freq_max_hz, size=count)
    qs = rng.uniform(params.q_min, params.q_max, size=count)
    gains = rng.uniform(params.gain_min, params.gain_max, size=count)

    return EarProfile(
        resonators=tuple(Resonator(float(f), float(q), float(g))
                         for f, q, g in zip(freqs, qs, gains)),
        direct_gain=float(rng.uniform(params.direct_gain_min, params.direct_gain_max)),
        direct_delay=int(rng.integers(params.delay_min, params.delay_max + 1)),
        user_id=user_id or f"user_{seed}",
    )


def user_seed(population_seed: int, index: int) -> int:
    """Per-user seed derived from the population seed."""
    return derive_seed(population_seed, index)


def sample_population(params: PopulationConfig, seed: Optional[int] = None) -> List[EarProfile]:
    seed = params.seed if seed is None else seed
    return [
        sample_profile(user_seed(seed, i), params, user_id=f"user_{i:03d}")
        for i in range(params.n_users)
    ]


def jitter_profile(profile: EarProfile, session_seed: int,
                   jitter_freq: float, jitter_gain: float) -> EarProfile:
    """Session re-acquisition: multiplicative jitter on centre frequencies and gains."""
    rng = make_rng(session_seed, _STREAM_JITTER)
    nyquist = profile.sample_rate / 2
    resonators = []
    for r in profile.resonators:
        fc = r.center_freq * (1 + rng.uniform(-jitter_freq, jitter_freq))
        gain = r.gain * (1 + rng.uniform(-jitter_gain, jitter_gain))
        resonators.append(Resonator(float(min(fc, nyquist * 0.99)), r.q_factor, float(gain)))
    direct = profile.direct_gain * (1 + rng.uniform(-jitter_gain, jitter_gain))
    return EarProfile(tuple(resonators), float(direct), profile.direct_delay,
                      profile.user_id, profile.sample_rate)


def realize_ir(profile: EarProfile, fs: int = SAMPLE_RATE, length: int = 512) -> ImpulseResponse:
    """Ground-truth FIR of a profile."""
    if length < MIN_IR_LENGTH:
        raise ConfigError(f"IR length {length} < {MIN_IR_LENGTH}", key="population.ir_length")
    if not 0 <= profile.direct_delay < length:
        raise ConfigError(
            f"direct_delay {profile.direct_delay} does not fit in {length} taps",
            key="population.ir_length",
        )

    t = np.arange(length) / fs
    taps = np.zeros(length)
    taps[profile.direct_delay] += profile.direct_gain
    for r in profile.resonators:
        envelope = np.exp(-np.pi * r.center_freq * t / r.q_factor)
        taps += r.gain * envelope * np.sin(2 * np.pi * r.center_freq * t)

    return ImpulseResponse(Signal(taps, fs), IROrigin.GROUND_TRUTH)


# =============================================================================
# ACQUISITION
# =============================================================================

def acquire(playback: Signal, ir: ImpulseResponse, noise_amplitude: float, seed: int) -> Signal:
    """playback * ir + uniform noise, full convolution length."""
    clean = convolve(playback, ir.taps)
    if noise_amplitude == 0:
        return clean
    noise = white_noise(len(clean), noise_amplitude, seed, playback.sample_rate)
    return clean.with_samples(clean.samples + noise.samples)


def simulate_in_ear(profile: EarProfile, playback: Signal, noise_amplitude: float,
                    seed: int, ir_length: int = 512) -> Signal:
    """In-ear microphone signal for a playback through this ear."""
    if playback.sample_rate != profile.sample_rate:
        raise RateMismatchError(playback.sample_rate, profile.sample_rate)
    ir = realize_ir(profile, playback.sample_rate, ir_length)
    return acquire(playback, ir, noise_amplitude, seed)


# =============================================================================
# ADVERSARIES
# =============================================================================

class AdversaryMode(str, Enum):
    IMPOSTER = "imposter"
    REPLAY = "replay"
    DELAYED = "delayed"


# An imposter wearing the victim's own profile: a control, never a pass
SANITY_SOURCE = "sanity"


@dataclass(frozen=True)
class Acquisition:
    """A response signal plus the challenge it was produced under and its latency."""
    signal: Signal
    challenge_nonce: Optional[int]
    latency_ms: float
    source: str = "genuine"


@dataclass
class AdversaryContext:
    playback: Signal
    challenge_nonce: int
    attacker: Optional[EarProfile] = None
    victim: Optional[EarProfile] = None
    history: Sequence[Acquisition] = field(default_factory=list)
    noise_amplitude: float = 0.0
    seed: int = 0
    base_latency_ms: float = 40.0
    extra_latency_ms: float = 500.0
    ir_length: int = 512


def record_genuine(profile: EarProfile, playback: Signal, challenge_nonce: Optional[int],
                   noise_amplitude: float, seed: int, latency_ms: float = 40.0,
                   ir_length: int = 512) -> Acquisition:
    signal = simulate_in_ear(profile, playback, noise_amplitude, seed, ir_length)
    return Acquisition(signal, challenge_nonce, latency_ms, "genuine")


def adversary_response(mode: AdversaryMode, context: AdversaryContext) -> Acquisition:
    """Response an attacker submits for the current challenge."""
    mode = AdversaryMode(mode)

    if mode is AdversaryMode.IMPOSTER:
        if context.attacker is None:
            raise PreconditionError("imposter mode needs an attacker profile")
        signal = simulate_in_ear(context.attacker, context.playback,
                                 context.noise_amplitude, context.seed, context.ir_length)
        source = SANITY_SOURCE if context.attacker == context.victim else mode.value
        return Acquisition(signal, context.challenge_nonce, context.base_latency_ms, source)

    if mode is AdversaryMode.REPLAY:
        if not context.history:
            raise PreconditionError("replay mode needs at least one recorded response")
        stale = context.history[-1]
        return Acquisition(stale.signal, stale.challenge_nonce, context.base_latency_ms,
                           mode.value)

    if context.victim is None:
        raise PreconditionError("delayed mode needs the victim profile to relay")
    signal = simulate_in_ear(context.victim, context.playback,
                             context.noise_amplitude, context.seed, context.ir_length)
    return Acquisition(signal, context.challenge_nonce,
                       context.base_latency_ms + context.extra_latency_ms, mode.value)


# =============================================================================
# SERIALIZATION
# =============================================================================
# JSON fields: user_id, sample_rate, direct_gain, direct_delay,
#              resonators: [{center_freq_hz, q_factor, gain}]

def profile_to_dict(profile: EarProfile) -> dict:
    return {
        "user_id": profile.user_id,
        "sample_rate": profile.sample_rate,
        "direct_gain": profile.direct_gain,
        "direct_delay": profile.direct_delay,
        "resonators": [
            {"center_freq_hz": r.center_freq, "q_factor": r.q_factor, "gain": r.gain}
            for r in profile.resonators
        ],
    }


def profile_from_dict(data: dict) -> EarProfile:
    return EarProfile(
        resonators=tuple(
            Resonator(float(r["center_freq_hz"]), float(r["q_factor"]), float(r["gain"]))
            for r in data["resonators"]
        ),
        direct_gain=float(data["direct_gain"]),
        direct_delay=int(data["direct_delay"]),
        user_id=str(data["user_id"]),
        sample_rate=int(data.get("sample_rate", SAMPLE_RATE)),
    )


def save_profiles(path: Path, profiles: Sequence[EarProfile]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump({"profiles": [profile_to_dict(p) for p in profiles]}, f, indent=2)


def load_profiles(path: Path) -> List[EarProfile]:
    with open(path) as f:
        return [profile_from_dict(d) for d in json.load(f)["profiles"]]
