"""
Augmentation
============
Synthesize labeled (playback, response) training pairs by convolving a user's
estimated impulse response with an audio corpus, and build that corpus.

Synthetic corpora:
  speechlike  harmonic syllables (f0 100-300 Hz, 3-8 harmonics) with silent gaps
  musiclike   sustained tone stacks over band-limited noise, with rests

Both are deterministic in seed; silence_profile is the target fraction of
silent frames, measured back with the features module's detector.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.signal import butter, sosfilt

from ..config import SAMPLE_RATE, FeatureConfig
from ..errors import ConfigError, PreconditionError, StratificationError
from ..dsp.features import silence_fraction
from ..dsp.signal_core import Signal, derive_seed, make_rng, read_wav, write_wav
from .ear_model import ImpulseResponse, IROrigin, acquire

logger = logging.getLogger(__name__)

CLIP_SECONDS_BOUNDS = (1.0, 10.0)
MAX_PEAK = 0.5
RAMP_SECONDS = 0.01


class CorpusKind(str, Enum):
    SPEECHLIKE = "synthetic_speechlike"
    MUSICLIKE = "synthetic_musiclike"
    EXTERNAL = "external_wav"


_KIND_STREAM = {CorpusKind.SPEECHLIKE: 11, CorpusKind.MUSICLIKE: 12, CorpusKind.EXTERNAL: 13}


@dataclass(frozen=True, eq=False)
class Corpus:
    clips: Tuple[Signal, ...]
    silence_fraction: Tuple[float, ...]
    kind: CorpusKind

    def __post_init__(self):
        rates = {c.sample_rate for c in self.clips}
        if len(rates) > 1:
            raise ConfigError(f"corpus mixes sample rates {sorted(rates)}")
        lo, hi = CLIP_SECONDS_BOUNDS
        for i, clip in enumerate(self.clips):
            if not lo <= clip.duration <= hi:
                raise ConfigError(f"clip {i} lasts {clip.duration:.2f} s, outside [{lo}, {hi}] s",
                                  key="corpus.clip_seconds")

    def __len__(self) -> int:
        return len(self.clips)

    def subset(self, start: int, stop: int) -> "Corpus":
        return Corpus(self.clips[start:stop], self.silence_fraction[start:stop], self.kind)


@dataclass(frozen=True, eq=False)
class LabeledPair:
    playback: Signal
    response: Signal
    user_id: str
    session_id: str
    clip_index: int

    @property
    def key(self) -> Tuple[str, str, int]:
        return (self.user_id, self.session_id, self.clip_index)


# =============================================================================
# SYNTHETIC CORPORA
# =============================================================================

def _split_lengths(rng: np.random.Generator, total: int, parts: int) -> np.ndarray:
    """Random positive integer lengths summing to total."""
    if parts <= 0:
        return np.zeros(0, dtype=int)
    shares = rng.dirichlet(np.full(parts, 4.0))
    lengths = np.floor(shares * total).astype(int)
    lengths[-1] += total - lengths.sum()
    return lengths


def _ramp(length: int, fs: int) -> np.ndarray:
    """Raised-cosine on/off envelope."""
    env = np.ones(length)
    n = min(int(RAMP_SECONDS * fs), length // 4)
    if n > 0:
        edge = 0.5 - 0.5 * np.cos(np.pi * (np.arange(n) + 0.5) / n)
        env[:n] = edge
        env[-n:] = edge[::-1]
    return env


def _syllable(rng: np.random.Generator, length: int, fs: int) -> np.ndarray:
    t = np.arange(length) / fs
    f0 = rng.uniform(100.0, 300.0)
    glide = rng.uniform(-0.1, 0.1)
    # Linear f0 glide over the syllable
    inst = f0 * (1 + glide * t / max(t[-1], 1e-9))
    phase = 2 * np.pi * np.cumsum(inst) / fs

    out = np.zeros(length)
    for h in range(1, int(rng.integers(3, 9)) + 1):
        if h * f0 * (1 + abs(glide)) >= 0.45 * fs:
            break
        out += rng.uniform(0.5, 1.0) / h * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    return out * _ramp(length, fs)


def _speech_burst(rng: np.random.Generator, length: int, fs: int) -> np.ndarray:
    """Contiguous syllables of 120-300 ms filling `length` samples."""
    out = np.zeros(length)
    pos = 0
    while pos < length:
        n = int(rng.uniform(0.12, 0.30) * fs)
        if length - pos - n < int(0.08 * fs):
            n = length - pos
        syllable = _syllable(rng, n, fs)
        out[pos:pos + n] = syllable / (np.max(np.abs(syllable)) or 1.0) * rng.uniform(0.3, 1.0)
        pos += n
    return out


def _music_burst(rng: np.random.Generator, length: int, fs: int) -> np.ndarray:
    """Sustained notes (chord tones with a few harmonics) over band-limited noise."""
    out = np.zeros(length)
    pos = 0
    while pos < length:
        n = int(rng.uniform(0.25, 0.6) * fs)
        if length - pos - n < int(0.1 * fs):
            n = length - pos
        t = np.arange(n) / fs
        root = 110.0 * 2 ** rng.uniform(0, 3)
        note = np.zeros(n)
        for ratio in rng.choice([1.0, 1.25, 1.5, 2.0], size=int(rng.integers(2, 5)), replace=False):
            for h in range(1, int(rng.integers(2, 7)) + 1):
                f = root * ratio * h
                if f >= 0.45 * fs:
                    break
                note += rng.uniform(0.3, 1.0) / h * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        out[pos:pos + n] = note / (np.max(np.abs(note)) or 1.0) * _ramp(n, fs)
        pos += n

    lo = rng.uniform(800.0, 3000.0)
    hi = min(lo * rng.uniform(2.0, 4.0), 0.45 * fs)
    sos = butter(4, [lo, hi], btype="bandpass", fs=fs, output="sos")
    noise = sosfilt(sos, rng.standard_normal(length))
    noise *= 0.1 / (np.max(np.abs(noise)) or 1.0)
    return (out + noise) * _ramp(length, fs)


def _synth_clip(kind: CorpusKind, rng: np.random.Generator, n_samples: int,
                silence_profile: float, clip_seconds: float, fs: int) -> np.ndarray:
    silent_total = int(round(silence_profile * n_samples))
    n_gaps = max(1, int(round(silence_profile * clip_seconds / 0.25))) if silent_total > 0 else 0
    gaps = _split_lengths(rng, silent_total, n_gaps)
    bursts = _split_lengths(rng, n_samples - silent_total, n_gaps + 1)

    make = _speech_burst if kind is CorpusKind.SPEECHLIKE else _music_burst
    pieces = []
    for i, burst_len in enumerate(bursts):
        if burst_len > 0:
            pieces.append(make(rng, int(burst_len), fs))
        if i < len(gaps):
            pieces.append(np.zeros(int(gaps[i])))
    samples = np.concatenate(pieces)
    peak = np.max(np.abs(samples)) or 1.0
    return samples / peak * rng.uniform(0.2, MAX_PEAK)


def synth_corpus(kind: str, n_clips: int, seed: int, silence_profile: float,
                 clip_seconds: float = 2.0, fs: int = SAMPLE_RATE,
                 feature_cfg: Optional[FeatureConfig] = None) -> Corpus:
    """Deterministic synthetic corpus of n_clips clips of the given kind."""
    kind = CorpusKind(kind)
    if kind is CorpusKind.EXTERNAL:
        raise ConfigError("external corpora are loaded with load_wav_corpus", key="corpus.train_kinds")
    if n_clips < 1:
        raise ConfigError(f"need at least one clip, got {n_clips}", key="corpus.n_clips")
    if not 0.0 <= silence_profile < 1.0:
        raise ConfigError(f"silence profile must be in [0, 1), got {silence_profile}",
                          key="corpus.train_silence")
    lo, hi = CLIP_SECONDS_BOUNDS
    if not lo <= clip_seconds <= hi:
        raise ConfigError(f"clip length must be in [{lo}, {hi}] s", key="corpus.clip_seconds")

    feature_cfg = feature_cfg or FeatureConfig()
    n_samples = int(round(clip_seconds * fs))
    clips = []
    for i in range(n_clips):
        rng = make_rng(seed, _KIND_STREAM[kind], i)
        clips.append(Signal(_synth_clip(kind, rng, n_samples, silence_profile, clip_seconds, fs), fs))

    fractions = tuple(silence_fraction(c, feature_cfg) for c in clips)
    logger.debug(f"synth_corpus {kind.value}: {n_clips} clips, "
                 f"mean silence {np.mean(fractions):.2f} (target {silence_profile:.2f})")
    return Corpus(tuple(clips), fractions, kind)


def load_wav_corpus(directory: Path, n_clips: Optional[int] = None,
                    feature_cfg: Optional[FeatureConfig] = None) -> Corpus:
    """Mono 16-bit WAV files from a directory, sorted by name.

    Clips shorter than 1 s are skipped; longer than 10 s are trimmed.
    """
    directory = Path(directory)
    paths = sorted(directory.glob("*.wav"))
    feature_cfg = feature_cfg or FeatureConfig()
    lo, hi = CLIP_SECONDS_BOUNDS

    clips = []
    for path in paths:
        clip = read_wav(path)
        if clip.duration < lo:
            logger.warning(f"Skipping {path.name}: {clip.duration:.2f} s is shorter than {lo} s")
            continue
        if clip.duration > hi:
            clip = clip.with_samples(clip.samples[:int(hi * clip.sample_rate)])
        clips.append(clip)
        if n_clips is not None and len(clips) >= n_clips:
            break

    if not clips:
        raise ConfigError(f"no usable WAV clips in {directory}", key="corpus.external_dir")
    fractions = tuple(silence_fraction(c, feature_cfg) for c in clips)
    return Corpus(tuple(clips), fractions, CorpusKind.EXTERNAL)


# =============================================================================
# PAIRS
# =============================================================================

def make_pairs(ir: ImpulseResponse, corpus: Corpus, noise_amplitude: float, seed: int,
               user_id: str, session_id: str = "s0", clip_offset: int = 0) -> List[LabeledPair]:
    """One (clip, clip * ir + noise) pair per clip, in clip order."""
    if ir.origin is not IROrigin.ESTIMATED:
        raise PreconditionError("augmentation must use an estimated IR, not the ground truth")
    if len(corpus) == 0:
        raise ConfigError("empty corpus", key="corpus.n_clips")

    pairs = []
    for i, clip in enumerate(corpus.clips):
        index = clip_offset + i
        response = acquire(clip, ir, noise_amplitude, derive_seed(seed, index))
        pairs.append(LabeledPair(clip, response, user_id, session_id, index))
    return pairs


def split_dataset(pairs: Sequence[LabeledPair], train_fraction: float,
                  seed: int) -> Tuple[List[LabeledPair], List[LabeledPair]]:
    """Per-user stratified split; both halves ordered by (user, session, clip)."""
    if not 0 < train_fraction < 1:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}",
                          key="corpus.train_fraction")

    by_user: Dict[str, List[LabeledPair]] = {}
    for pair in pairs:
        by_user.setdefault(pair.user_id, []).append(pair)

    rng = make_rng(seed)
    train, held_out = [], []
    for user_id in sorted(by_user):
        group = sorted(by_user[user_id], key=lambda p: p.key)
        if len(group) < 2:
            raise StratificationError(f"user {user_id} has {len(group)} pair(s); need at least 2")
        n_train = min(max(int(round(train_fraction * len(group))), 1), len(group) - 1)
        order = rng.permutation(len(group))
        chosen = set(order[:n_train].tolist())
        for i, pair in enumerate(group):
            (train if i in chosen else held_out).append(pair)

    return sorted(train, key=lambda p: p.key), sorted(held_out, key=lambda p: p.key)


def write_manifest(directory: Path, pairs: Sequence[LabeledPair]) -> Path:
    """WAV clips and responses plus manifest.json.

    Responses can exceed full scale; each is stored divided by max(1, peak)
    and the divisor is recorded as response_scale.
    """
    directory = Path(directory)
    (directory / "clips").mkdir(parents=True, exist_ok=True)
    (directory / "responses").mkdir(parents=True, exist_ok=True)

    written = set()
    records = []
    for pair in pairs:
        clip_path = Path("clips") / f"clip_{pair.clip_index:04d}.wav"
        if pair.clip_index not in written:
            write_wav(directory / clip_path, pair.playback)
            written.add(pair.clip_index)

        scale = max(1.0, float(np.max(np.abs(pair.response.samples))))
        response_path = Path("responses") / f"{pair.user_id}_{pair.session_id}_{pair.clip_index:04d}.wav"
        write_wav(directory / response_path, pair.response.with_samples(pair.response.samples / scale))
        records.append({
            "user_id": pair.user_id,
            "session_id": pair.session_id,
            "clip_index": pair.clip_index,
            "clip_path": clip_path.as_posix(),
            "response_path": response_path.as_posix(),
            "response_scale": scale,
        })

    manifest = directory / "manifest.json"
    pd.DataFrame(records).to_json(manifest, orient="records", indent=2)
    logger.info(f"Wrote {len(records)} pairs to {manifest}")
    return manifest
