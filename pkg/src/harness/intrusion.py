"""
Intrusion Scenarios
===================
Seeded attack simulations against the session machine and the challenge
verifier:

    insider_takeover_mid_session  an attacker puts the headset on at window N
    replay_login                  a recorded login response is resubmitted
    delayed_response              a genuine response relayed past the budget
    genuine_control               the wearer never changes (false-lock rate)
    imposter_login                another user answers the challenge with their own ear

imposter_login also runs one control where the "attacker" wears the victim's
own profile. It is tallied under sanity_trials and never counts as a
rejection or a pass.

Window probes come from the evaluation bank: watermarked-playback embeddings
of every wearer under every claimed user's patch.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..config import ExperimentConfig, SessionConfig
from ..errors import ConfigError
from ..auth.session import (
    Challenge,
    ChallengeVerifier,
    Phase,
    ResponseMeta,
    SessionState,
    VerifyReason,
    initial_login,
    maybe_update_template,
    new_session,
    window_step,
)
from ..dsp.features import rtf_features
from ..dsp.signal_core import Signal, derive_seed, make_rng
from ..ear.ear_model import (
    AdversaryContext,
    AdversaryMode,
    EarProfile,
    ImpulseResponse,
    SANITY_SOURCE,
    adversary_response,
    record_genuine,
)
from ..model.embedding import Embedding, NetParams, forward
from ..model.matcher import Template, score
from ..watermark.patchwork import WatermarkPatch, binding_score

logger = logging.getLogger(__name__)

INSIDER = "insider_takeover_mid_session"
REPLAY = "replay_login"
DELAYED = "delayed_response"
GENUINE = "genuine_control"
IMPOSTER_LOGIN = "imposter_login"
SCENARIOS = (INSIDER, REPLAY, DELAYED, GENUINE, IMPOSTER_LOGIN)

_STREAM_INTRUSION = 0x1D
_CRI_FAILURES = (VerifyReason.DELAY, VerifyReason.NONCE_MISMATCH, VerifyReason.BINDING)


@dataclass(frozen=True, eq=False)
class PatchedProbe:
    """One evaluation challenge: the clip, its patch, and the patched playback."""
    challenge: Challenge
    playback: Signal
    patched: Signal
    patch: WatermarkPatch


@dataclass(eq=False)
class ProbeBank:
    user_ids: List[str]
    templates: List[Template]
    login: np.ndarray                 # wearer x test session x dim (chirp probes)
    windows: np.ndarray               # wearer x claimed x probe x dim (watermarked probes)
    probes: Dict[Tuple[int, int, int], PatchedProbe]   # (session, clip, claimed)
    test_profiles: List[List[EarProfile]]              # wearer x test session
    est_irs: List[ImpulseResponse]                     # enrollment estimate per user
    net: NetParams
    session: SessionConfig            # calibrated thresholds

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_sessions(self) -> int:
        return self.login.shape[1]

    @property
    def n_clips(self) -> int:
        return len({key[1] for key in self.probes})


@dataclass
class IntrusionStats:
    scenario: str
    trials: int = 0
    cri_enabled: bool = True
    accepted: int = 0                 # attacker stayed in / response accepted
    rejected: int = 0                 # session locked / response rejected
    login_failures: int = 0
    lock_windows: List[Optional[int]] = field(default_factory=list)
    windows_to_lock: List[int] = field(default_factory=list)
    reasons: Dict[str, int] = field(default_factory=dict)
    binding: List[float] = field(default_factory=list)
    genuine_binding: List[float] = field(default_factory=list)
    sanity: int = 0                   # same-profile controls, outside trials
    sanity_accepted: int = 0

    def count(self, reason: str) -> None:
        self.reasons[reason] = self.reasons.get(reason, 0) + 1

    def summary(self, k_fail: Optional[int] = None) -> Dict:
        out = {
            "scenario": self.scenario,
            "trials": self.trials,
            "cri_enabled": self.cri_enabled,
            "accepted": self.accepted,
            "rejected": self.rejected,
            "rejection_rate": self.rejected / self.trials if self.trials else 0.0,
            "login_failures": self.login_failures,
            "reasons": dict(sorted(self.reasons.items())),
        }
        locks = [w for w in self.lock_windows if w is not None]
        if self.lock_windows:
            out["lock_rate"] = len(locks) / len(self.lock_windows)
            out["median_lock_window"] = float(np.median(locks)) if locks else None
        if self.windows_to_lock:
            out["median_windows_to_lock"] = float(np.median(self.windows_to_lock))
            if k_fail is not None:
                within = sum(1 for w in self.windows_to_lock if w <= k_fail)
                out["lock_within_k_rate"] = within / len(self.lock_windows)
        if self.binding:
            out["mean_binding"] = float(np.mean(self.binding))
        if self.genuine_binding:
            out["mean_genuine_binding"] = float(np.mean(self.genuine_binding))
        if self.sanity:
            out["sanity_trials"] = self.sanity
            out["sanity_accepted"] = self.sanity_accepted
        return out


# =============================================================================
# SESSION DRIVER
# =============================================================================

def run_session(template: Template, login_probes: Sequence[np.ndarray],
                window_probes: Sequence[np.ndarray], cfg: SessionConfig,
                seed: int, cri_enabled: bool = True,
                latency_ms: float = 40.0) -> Tuple[SessionState, Optional[int]]:
    """Login (up to max_login_attempts probes), then one window per probe.

    Returns the final state and the 1-indexed window that locked the session.
    The run ends at the first lock.
    """
    state = new_session(template, cfg)
    attempts = list(login_probes)[:max(1, cfg.max_login_attempts)]
    for probe in attempts:
        state = initial_login(state, score(state.template, probe))
        if state.phase is Phase.AUTHENTICATED:
            break
    if state.phase is not Phase.AUTHENTICATED:
        return state, None

    verifier = ChallengeVerifier(cfg)
    for j, probe in enumerate(window_probes, start=1):
        s = score(state.template, probe)
        if cri_enabled:
            challenge = verifier.issue(derive_seed(seed, j), state.last_time_ms)
            verdict = verifier.verify_response(challenge, ResponseMeta(challenge.nonce, latency_ms, s))
            if verdict.reason in _CRI_FAILURES:
                s = -1.0
        state = window_step(state, s)
        if state.phase is Phase.LOCKED:
            return state, j
        state = maybe_update_template(state, Embedding(probe), s)
    return state, None


# =============================================================================
# SCENARIOS
# =============================================================================

def _other_user(rng: np.random.Generator, victim: int, n_users: int) -> int:
    return (victim + 1 + int(rng.integers(n_users - 1))) % n_users


def _pick_pair(rng: np.random.Generator, n_users: int) -> Tuple[int, int]:
    victim = int(rng.integers(n_users))
    return victim, _other_user(rng, victim, n_users)


def _session_trials(config: ExperimentConfig, bank: ProbeBank, stats: IntrusionStats,
                    seed: int, takeover: Optional[int]) -> None:
    ev = config.evaluation
    n_probes = bank.windows.shape[2]
    for trial in range(ev.intrusion_trials):
        rng = make_rng(seed, _STREAM_INTRUSION, SCENARIOS.index(stats.scenario), trial)
        victim, attacker = _pick_pair(rng, bank.n_users)
        picks = rng.integers(n_probes, size=ev.session_windows)
        probes = [
            bank.windows[attacker if takeover is not None and j >= takeover else victim, victim, p]
            for j, p in enumerate(picks, start=1)
        ]
        state, lock = run_session(bank.templates[victim], bank.login[victim], probes, bank.session,
                                  derive_seed(seed, trial), ev.cri_enabled, ev.genuine_latency_ms)
        if lock is None and state.phase is not Phase.AUTHENTICATED:
            stats.login_failures += 1
            continue

        stats.trials += 1
        stats.lock_windows.append(lock)
        if lock is None:
            stats.accepted += 1
            continue
        stats.rejected += 1
        if takeover is not None:
            if lock >= takeover:
                stats.windows_to_lock.append(lock - takeover + 1)
            else:
                stats.count("locked_before_takeover")


def _embed(bank: ProbeBank, playback: Signal, response: Signal, config: ExperimentConfig) -> np.ndarray:
    return forward(bank.net, rtf_features(playback, response, config.features)).vector


def _challenge_trials(config: ExperimentConfig, bank: ProbeBank, stats: IntrusionStats,
                      seed: int, mode: AdversaryMode) -> None:
    ev = config.evaluation
    for trial in range(ev.intrusion_trials):
        rng = make_rng(seed, _STREAM_INTRUSION, SCENARIOS.index(stats.scenario), trial)
        victim = int(rng.integers(bank.n_users))
        clip = int(rng.integers(bank.n_clips))
        attacker = _other_user(rng, victim, bank.n_users)
        _challenge_trial(config, bank, stats, derive_seed(seed, trial), mode, victim, attacker, clip)

    if mode is AdversaryMode.IMPOSTER:
        # same-profile control
        _challenge_trial(config, bank, stats, derive_seed(seed, ev.intrusion_trials), mode,
                         victim=0, attacker=0, clip=0)


def _challenge_trial(config: ExperimentConfig, bank: ProbeBank, stats: IntrusionStats,
                     trial_seed: int, mode: AdversaryMode, victim: int, attacker: int,
                     clip: int) -> None:
    ev = config.evaluation
    noise = config.corpus.noise_amplitude
    ir_length = config.population.ir_length
    old, new = (0, 1) if bank.n_sessions > 1 else (0, 0)
    recorded = bank.probes[(old, clip, victim)]
    target = bank.probes[(new, clip, victim)]
    bind = None
    if config.watermark.enabled and not target.patch.is_zero:
        bind = config.watermark.binding_threshold

    stale = record_genuine(bank.test_profiles[victim][old], recorded.patched,
                           recorded.challenge.nonce, noise, trial_seed,
                           ev.genuine_latency_ms, ir_length)
    context = AdversaryContext(
        playback=target.patched,
        challenge_nonce=target.challenge.nonce,
        attacker=bank.test_profiles[attacker][new],
        victim=bank.test_profiles[victim][new],
        history=[stale],
        noise_amplitude=noise,
        seed=derive_seed(trial_seed, 1),
        base_latency_ms=ev.genuine_latency_ms,
        extra_latency_ms=ev.delayed_extra_ms,
        ir_length=ir_length,
    )
    submitted = adversary_response(mode, context)
    s = score(bank.templates[victim], _embed(bank, target.patched, submitted.signal, config))

    binding = genuine_binding = None
    if not target.patch.is_zero:
        est = bank.est_irs[victim]
        binding = binding_score(submitted.signal, target.playback, target.patch, est)
        fresh = record_genuine(bank.test_profiles[victim][new], target.patched,
                               target.challenge.nonce, noise, derive_seed(trial_seed, 2),
                               ev.genuine_latency_ms, ir_length)
        genuine_binding = binding_score(fresh.signal, target.playback, target.patch, est)

    if ev.cri_enabled:
        verifier = ChallengeVerifier(bank.session, bind)
        meta = ResponseMeta(submitted.challenge_nonce, submitted.latency_ms, s, binding)
        verdict = verifier.verify_response(target.challenge, meta)
        accepted, reason = verdict.accepted, verdict.reason.value
    else:
        accepted = s >= bank.session.theta_update
        reason = "ok" if accepted else VerifyReason.LOW_SCORE.value

    if submitted.source == SANITY_SOURCE:
        stats.sanity += 1
        stats.sanity_accepted += int(accepted)
        return

    stats.trials += 1
    if binding is not None:
        stats.binding.append(binding)
        stats.genuine_binding.append(genuine_binding)
    stats.count(reason)
    if accepted:
        stats.accepted += 1
    else:
        stats.rejected += 1


def simulate_intrusion(config: ExperimentConfig, scenario: str,
                       bank: Optional[ProbeBank] = None) -> IntrusionStats:
    """Run `evaluation.intrusion_trials` seeded trials of one scenario."""
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario '{scenario}', expected one of {list(SCENARIOS)}",
                          key="scenario")
    if bank is None:
        from .experiment import ExperimentRunner
        bank = ExperimentRunner(config, write=False).probe_bank

    seed = config.population.seed
    stats = IntrusionStats(scenario, cri_enabled=config.evaluation.cri_enabled)
    if scenario == INSIDER:
        _session_trials(config, bank, stats, seed, takeover=config.evaluation.takeover_window)
    elif scenario == GENUINE:
        _session_trials(config, bank, stats, seed, takeover=None)
    elif scenario == REPLAY:
        _challenge_trials(config, bank, stats, seed, AdversaryMode.REPLAY)
    elif scenario == DELAYED:
        _challenge_trials(config, bank, stats, seed, AdversaryMode.DELAYED)
    else:
        _challenge_trials(config, bank, stats, seed, AdversaryMode.IMPOSTER)

    logger.info(f"{scenario}: {stats.rejected}/{stats.trials} rejected")
    return stats
