"""
EarCAN Configuration
====================
Centralized configuration for all constants and experiment settings.

IMPORTANT: This file is the SINGLE SOURCE OF TRUTH for:
- The global sample rate and PCM depth
- The SPL <-> dBFS reference used by the audibility model
- Every default of the experiment pipeline

DO NOT hardcode these values elsewhere. Import from this module.

Config documents are flat dotted keys, one per line:

    population.n_users=20
    net.epochs=30
    corpus.train_kinds=synthetic_speechlike,synthetic_musiclike
"""

import difflib
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, get_type_hints

from dotenv import dotenv_values, load_dotenv

from .errors import ConfigError

logger = logging.getLogger(__name__)


# =============================================================================
# GLOBAL SIGNAL FACTS
# =============================================================================
# 16 kHz / 16-bit PCM throughout.
# Full-band sensing (20 Hz - 20 kHz) is scaled to the Nyquist-limited 20 Hz - 8 kHz.

SAMPLE_RATE = 16000
PCM_BITS = 16
PCM_FULL_SCALE = 2 ** (PCM_BITS - 1)   # 32768

# Audibility model: 90 dB SPL maps to 0 dBFS
SPL_REFERENCE_DB = 90.0

ENV_OUTPUT_ROOT = "EARCAN_OUTPUT_ROOT"
ENV_SEED = "EARCAN_SEED"

REPO_ROOT = Path(__file__).parent.parent


# =============================================================================
# DATACLASS CONFIGS
# =============================================================================

@dataclass
class PopulationConfig:
    """Synthetic user population and per-session variability."""
    n_users: int = 20
    seed: int = 7
    n_resonators_min: int = 2
    n_resonators_max: int = 4
    freq_min_hz: float = 500.0
    freq_max_hz: float = 7000.0
    q_min: float = 2.0
    q_max: float = 12.0
    gain_min: float = 0.05
    gain_max: float = 0.25
    direct_gain_min: float = 0.6
    direct_gain_max: float = 1.0
    delay_min: int = 0
    delay_max: int = 8
    ir_length: int = 512             # 32 ms at 16 kHz

    # Session-to-session jitter (assumption, not measured)
    jitter_freq: float = 0.03        # +/-3% on centre frequencies
    jitter_gain: float = 0.10        # +/-10% on gains
    enroll_sessions: int = 2


@dataclass
class SoundingConfig:
    """Enrollment chirp and deconvolution settings."""
    f0_hz: float = 20.0
    f1_hz: float = 8000.0
    duration_s: float = 1.0
    amplitude: float = 0.5
    noise_amplitude: float = 1e-5
    pre_peak_taps: int = 16
    regularization: float = 1e-8
    peak_to_rms_min: float = 10.0
    method: str = "spectral"         # "spectral" or "farina"


@dataclass
class CorpusConfig:
    """Training and evaluation audio corpora."""
    train_kinds: Tuple[str, ...] = ("synthetic_speechlike", "synthetic_musiclike")
    n_clips: int = 25                # per enrollment session
    clip_seconds: float = 2.0
    train_silence: float = 0.2
    eval_kind: str = "synthetic_speechlike"
    eval_silence: float = 0.5
    eval_clips: int = 4
    external_dir: str = ""
    noise_amplitude: float = 1e-5    # in-ear acquisition noise
    train_fraction: float = 0.8


@dataclass
class FeatureConfig:
    """Frame geometry and relative-transfer-function features."""
    frame_len: int = 400             # 25 ms
    hop: int = 160                   # 10 ms
    nfft: int = 512
    n_bands: int = 40
    f_min_hz: float = 100.0
    f_max_hz: float = 7600.0
    eps: float = 1e-10
    clamp_min_db: float = -80.0
    clamp_max_db: float = 40.0
    silence_dbfs: float = -50.0
    deficiency_margin_db: float = 0.0  # added to T_q before the deficiency test
    max_align_lag: int = 64          # alignment search range, samples


@dataclass
class NetConfig:
    """Embedding network architecture and training hyperparameters."""
    in_dim: int = 40
    conv1_channels: int = 32
    conv1_kernel: int = 5
    conv2_channels: int = 32
    conv2_kernel: int = 3
    embed_dim: int = 32
    input_scale_db: float = 20.0
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 30
    batch: int = 16
    scale: float = 30.0              # AAMSoftmax s
    margin: float = 0.2              # AAMSoftmax m


@dataclass
class SessionConfig:
    """Continuous-authentication state machine."""
    window_seconds: float = 3.0
    theta_accept: float = 0.5        # replaced by calibration
    theta_update: float = 0.6        # replaced by calibration
    ema_lambda: float = 0.7
    k_fail: int = 3
    alpha_update: float = 0.05
    latency_budget_ms: float = 200.0
    update_far: float = 0.01         # strict operating point for login/update
    max_login_attempts: int = 3


@dataclass
class WatermarkConfig:
    """Patchwork watermark optimisation."""
    enabled: bool = True
    masking_offset_db: float = 13.0
    iters: int = 20
    step: float = 0.25
    init_fraction: float = 0.5
    objective: str = "score"         # "score" or "aam"
    max_clip_fraction: float = 0.01
    shrink_rounds: int = 3
    binding_threshold: float = 0.3


@dataclass
class EvaluationConfig:
    """Verification conditions and attack suites."""
    test_sessions: int = 3
    reference_amplitude: float = 0.3
    session_windows: int = 12
    takeover_window: int = 5
    intrusion_trials: int = 200
    genuine_latency_ms: float = 40.0
    delayed_extra_ms: float = 500.0
    cri_enabled: bool = True
    acceptance_eer: float = 0.10


@dataclass
class OutputConfig:
    """Where stage artifacts go."""
    root: str = "outputs"
    write_audio: bool = False        # WAV clips and responses in the augment manifest


@dataclass
class ExperimentConfig:
    """Main configuration container."""
    population: PopulationConfig = field(default_factory=PopulationConfig)
    sounding: SoundingConfig = field(default_factory=SoundingConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    net: NetConfig = field(default_factory=NetConfig)
    session: SessionConfig = field(default_factory=SessionConfig)
    watermark: WatermarkConfig = field(default_factory=WatermarkConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def flat(self) -> Dict[str, Any]:
        """Flat dotted-key view, the same shape as a config document."""
        out = {}
        for section, values in self.to_dict().items():
            for key, value in values.items():
                out[f"{section}.{key}"] = value
        return out


def config_hash(config: ExperimentConfig) -> str:
    """Short stable hash of everything that affects results (output paths excluded)."""
    payload = config.to_dict()
    payload.pop("output", None)
    canonical = json.dumps(payload, sort_keys=True, default=list)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


# =============================================================================
# VALIDATION
# =============================================================================

def validate_config(config: ExperimentConfig) -> ExperimentConfig:
    """Check cross-field invariants. Raises ConfigError naming the key."""
    pop = config.population
    ranges = [
        ("population.n_resonators", pop.n_resonators_min, pop.n_resonators_max),
        ("population.freq", pop.freq_min_hz, pop.freq_max_hz),
        ("population.q", pop.q_min, pop.q_max),
        ("population.gain", pop.gain_min, pop.gain_max),
        ("population.direct_gain", pop.direct_gain_min, pop.direct_gain_max),
        ("population.delay", pop.delay_min, pop.delay_max),
    ]
    for key, lo, hi in ranges:
        if lo > hi:
            raise ConfigError(f"min {lo} > max {hi}", key=key)

    if pop.n_users < 2:
        raise ConfigError("need at least 2 users", key="population.n_users")

    snd = config.sounding
    if not 0 < snd.f0_hz < snd.f1_hz <= SAMPLE_RATE / 2:
        raise ConfigError("need 0 < f0 < f1 <= fs/2", key="sounding.f0_hz")
    if snd.method not in ("spectral", "farina"):
        raise ConfigError(f"unknown method '{snd.method}'", key="sounding.method")

    if not 0 < config.corpus.train_fraction < 1:
        raise ConfigError("must be in (0, 1)", key="corpus.train_fraction")

    ses = config.session
    if ses.theta_update < ses.theta_accept:
        raise ConfigError("theta_update must be >= theta_accept", key="session.theta_update")
    if ses.k_fail < 1:
        raise ConfigError("must be >= 1", key="session.k_fail")
    if not 0.0 <= ses.ema_lambda <= 1.0:
        raise ConfigError("must be in [0, 1]", key="session.ema_lambda")
    if not 0.0 <= ses.alpha_update <= 1.0:
        raise ConfigError("must be in [0, 1]", key="session.alpha_update")

    ev = config.evaluation
    if ev.test_sessions < 1:
        raise ConfigError("must be >= 1", key="evaluation.test_sessions")
    if not 1 <= ev.takeover_window <= ev.session_windows:
        raise ConfigError("must be in [1, session_windows]", key="evaluation.takeover_window")

    if config.watermark.objective not in ("score", "aam"):
        raise ConfigError(
            f"unknown objective '{config.watermark.objective}'", key="watermark.objective"
        )
    return config


# =============================================================================
# DOCUMENT LOADING
# =============================================================================

def _coerce(raw: str, annotation: Any, key: str) -> Any:
    """Convert a document string to the field's declared type."""
    text = raw.strip()
    try:
        if annotation is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if annotation is int:
            return int(text)
        if annotation is float:
            return float(text)
        if annotation is str:
            return text
        if getattr(annotation, "__origin__", None) is tuple:
            return tuple(part.strip() for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"cannot parse '{raw}' as {getattr(annotation, '__name__', annotation)}", key=key)
    raise ConfigError(f"unsupported field type {annotation}", key=key)


def apply_overrides(config: ExperimentConfig, values: Dict[str, Optional[str]]) -> ExperimentConfig:
    """Apply flat dotted-key string values onto a config, schema-checked."""
    known = config.flat()
    for key, raw in values.items():
        if key not in known:
            hint = difflib.get_close_matches(key, known.keys(), n=1)
            suggestion = f" (did you mean '{hint[0]}'?)" if hint else ""
            raise ConfigError(f"unknown key{suggestion}", key=key)
        if raw is None:
            raise ConfigError("missing value", key=key)
        section_name, field_name = key.split(".", 1)
        section = getattr(config, section_name)
        hints = get_type_hints(type(section))
        setattr(section, field_name, _coerce(raw, hints[field_name], key))
    return config


def load_config(path: Optional[str] = None) -> ExperimentConfig:
    """Defaults, overlaid by a config document, then by environment variables."""
    load_dotenv(REPO_ROOT / ".env")
    config = ExperimentConfig()

    if path:
        doc = Path(path)
        if not doc.exists():
            raise ConfigError(f"config file not found: {doc}")
        values = dotenv_values(doc, interpolate=False)
        apply_overrides(config, dict(values))
        logger.debug(f"Loaded {len(values)} keys from {doc}")

    return validate_config(load_config_from_env(config))


def load_config_from_env(config: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Apply environment variable overrides."""
    config = config or ExperimentConfig()

    if os.environ.get(ENV_OUTPUT_ROOT):
        config.output.root = os.environ[ENV_OUTPUT_ROOT]

    if os.environ.get(ENV_SEED):
        config.population.seed = _coerce(os.environ[ENV_SEED], int, ENV_SEED)

    return config


# Global config instance
_config: Optional[ExperimentConfig] = None


def get_config() -> ExperimentConfig:
    """Get the global configuration instance."""
    global _config
    if _config is None:
        _config = ExperimentConfig()
    return _config
