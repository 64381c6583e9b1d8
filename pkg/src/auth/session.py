"""
CAN Session Machine
===================
Continuous-authentication lifecycle of one wearer:

    InitialLogin --strict score--> Authenticated --k_fail low windows--> Locked/Relogin
                                        ^                                    |
                                        +------------ strict relogin --------+

Strict checks (login, relogin, template update) use theta_update; continuous
windows use theta_accept. Every operation returns a new state whose event log
extends the old one; the log is the audit surface.

Challenges bind a response to a nonce and a latency budget (CRI check).
"""

import json
import logging
from dataclasses import asdict, dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from ..config import SessionConfig
from ..errors import ProtocolError
from ..dsp.signal_core import derive_seed
from ..model.embedding import Embedding
from ..model.matcher import Template, TemplateOrigin

logger = logging.getLogger(__name__)

_NONCE_STREAM = 0xC4A1


class Phase(str, Enum):
    INITIAL_LOGIN = "InitialLogin"
    AUTHENTICATED = "Authenticated"
    LOCKED = "Locked/Relogin"


@dataclass(frozen=True)
class SessionEvent:
    time_ms: float
    phase: str          # phase after the event
    event: str          # login | window | update | relogin
    score: Optional[float]
    decision: str       # accept | reject | lock | applied | skipped


@dataclass(frozen=True, eq=False)
class SessionState:
    config: SessionConfig
    template: Template
    phase: Phase = Phase.INITIAL_LOGIN
    confidence: float = 0.0
    consecutive_failures: int = 0
    event_log: Tuple[SessionEvent, ...] = ()

    @property
    def last_time_ms(self) -> float:
        return self.event_log[-1].time_ms if self.event_log else 0.0


def new_session(template: Template, config: SessionConfig) -> SessionState:
    return SessionState(config=config, template=template)


def _require(state: SessionState, phase: Phase, op: str) -> None:
    if state.phase is not phase:
        raise ProtocolError(f"{op} needs phase {phase.value}, session is {state.phase.value}")


def _next_time(state: SessionState, now_ms: Optional[float]) -> float:
    if now_ms is not None:
        return float(now_ms)
    if not state.event_log:
        return 0.0
    return state.last_time_ms + state.config.window_seconds * 1000.0


def _log(state: SessionState, time_ms: float, event: str, score: Optional[float],
         decision: str, **changes) -> SessionState:
    phase = changes.get("phase", state.phase)
    entry = SessionEvent(time_ms, phase.value, event, None if score is None else float(score), decision)
    return replace(state, event_log=state.event_log + (entry,), **changes)


# =============================================================================
# TRANSITIONS
# =============================================================================

def _strict(state: SessionState, score: float, event: str, now_ms: Optional[float]) -> SessionState:
    t = _next_time(state, now_ms)
    if score >= state.config.theta_update:
        return _log(state, t, event, score, "accept", phase=Phase.AUTHENTICATED,
                    confidence=float(score), consecutive_failures=0)
    return _log(state, t, event, score, "reject")


def initial_login(state: SessionState, enrollment_score: float,
                  now_ms: Optional[float] = None) -> SessionState:
    _require(state, Phase.INITIAL_LOGIN, "initial_login")
    return _strict(state, enrollment_score, "login", now_ms)


def relogin(state: SessionState, strict_score: float, now_ms: Optional[float] = None) -> SessionState:
    _require(state, Phase.LOCKED, "relogin")
    return _strict(state, strict_score, "relogin", now_ms)


def window_step(state: SessionState, window_score: float,
                now_ms: Optional[float] = None) -> SessionState:
    """EMA the score; k_fail consecutive sub-threshold windows lock the session."""
    _require(state, Phase.AUTHENTICATED, "window_step")
    cfg = state.config
    confidence = cfg.ema_lambda * state.confidence + (1 - cfg.ema_lambda) * window_score
    failed = window_score < cfg.theta_accept
    failures = state.consecutive_failures + 1 if failed else 0

    if failures >= cfg.k_fail:
        return _log(state, _next_time(state, now_ms), "window", window_score, "lock",
                    phase=Phase.LOCKED, confidence=float(confidence), consecutive_failures=failures)
    return _log(state, _next_time(state, now_ms), "window", window_score,
                "reject" if failed else "accept",
                confidence=float(confidence), consecutive_failures=failures)


def maybe_update_template(state: SessionState, probe: Embedding, score: float,
                          now_ms: Optional[float] = None) -> SessionState:
    """template <- normalize((1 - alpha) * template + alpha * probe) iff score >= theta_update.

    Outside Authenticated the state is returned untouched.
    """
    if state.phase is not Phase.AUTHENTICATED:
        logger.debug(f"template update ignored in phase {state.phase.value}")
        return state
    t = state.last_time_ms if now_ms is None else float(now_ms)
    alpha = state.config.alpha_update
    if score < state.config.theta_update or alpha == 0:
        return _log(state, t, "update", score, "skipped")

    mixed = (1 - alpha) * state.template.vector + alpha * probe.vector
    norm = float(np.linalg.norm(mixed))
    if norm < 1e-12:
        return _log(state, t, "update", score, "skipped")
    template = Template(mixed / norm, state.template.n_enrolled + 1, TemplateOrigin.PLAYBACK_UPDATE)
    return _log(state, t, "update", score, "applied", template=template)


# =============================================================================
# TRACE EXPORT
# =============================================================================

def trace_records(state: SessionState) -> List[Dict]:
    return [asdict(e) for e in state.event_log]


def trace_lines(state: SessionState) -> List[str]:
    """One JSON object per event: time_ms, phase, event, score, decision."""
    return [json.dumps(r, sort_keys=True) for r in trace_records(state)]


def write_trace(path: Path, states: List[SessionState], session_ids: Optional[List[str]] = None) -> None:
    """JSON lines for one or more sessions, tagged with a session id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    session_ids = session_ids or [f"session_{i:04d}" for i in range(len(states))]
    rows = [dict(session=sid, **r) for sid, s in zip(session_ids, states) for r in trace_records(s)]
    df = pd.DataFrame(rows, columns=["session", "time_ms", "phase", "event", "score", "decision"])
    df.to_json(path, orient="records", lines=True)


# =============================================================================
# CHALLENGE-RESPONSE
# =============================================================================

class ProbeKind(str, Enum):
    WATERMARK = "watermark"
    CHIRP_SEGMENT = "chirp_segment"


@dataclass(frozen=True)
class Challenge:
    nonce: int
    probe_kind: ProbeKind
    probe_seed: int
    issued_at: float    # ms
    expires_at: float   # ms

    @property
    def budget_ms(self) -> float:
        return self.expires_at - self.issued_at


@dataclass(frozen=True)
class ResponseMeta:
    challenge_nonce: Optional[int]
    latency_ms: float
    score: float
    binding: Optional[float] = None


class VerifyReason(str, Enum):
    OK = "ok"
    DELAY = "delay"
    NONCE_MISMATCH = "nonce_mismatch"
    BINDING = "binding"
    LOW_SCORE = "low_score"


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: VerifyReason


def issue_challenge(seed: int, now_ms: float, config: SessionConfig,
                    kind: ProbeKind = ProbeKind.WATERMARK) -> Challenge:
    nonce = derive_seed(seed, _NONCE_STREAM)
    return Challenge(
        nonce=nonce,
        probe_kind=ProbeKind(kind),
        probe_seed=derive_seed(nonce, 1),
        issued_at=float(now_ms),
        expires_at=float(now_ms) + config.latency_budget_ms,
    )


class ChallengeVerifier:
    """Verifies each issued challenge exactly once.

    Verified nonces are remembered until their challenge has expired before the
    newest verified one was issued. Challenges that old are refused outright.
    With a binding threshold set, a response must carry a binding score.
    """

    def __init__(self, config: SessionConfig, binding_threshold: Optional[float] = None):
        self.config = config
        self.binding_threshold = binding_threshold
        self._verified: Dict[int, float] = {}   # nonce -> expires_at
        self._horizon_ms = float("-inf")

    def issue(self, seed: int, now_ms: float, kind: ProbeKind = ProbeKind.WATERMARK) -> Challenge:
        return issue_challenge(seed, now_ms, self.config, kind)

    def verify_response(self, challenge: Challenge, meta: ResponseMeta) -> Verdict:
        """Reject late, replayed, unbound or low-scoring responses."""
        if challenge.nonce in self._verified:
            raise ProtocolError(f"challenge {challenge.nonce:#x} was already verified")
        if challenge.expires_at < self._horizon_ms:
            raise ProtocolError(f"challenge {challenge.nonce:#x} expired before the last verified one")
        self._forget_expired(challenge.issued_at)
        self._verified[challenge.nonce] = challenge.expires_at

        if meta.latency_ms > challenge.budget_ms:
            verdict = Verdict(False, VerifyReason.DELAY)
        elif meta.challenge_nonce != challenge.nonce:
            verdict = Verdict(False, VerifyReason.NONCE_MISMATCH)
        elif self.binding_threshold is not None and (
                meta.binding is None or meta.binding < self.binding_threshold):
            verdict = Verdict(False, VerifyReason.BINDING)
        elif meta.score < self.config.theta_accept:
            verdict = Verdict(False, VerifyReason.LOW_SCORE)
        else:
            verdict = Verdict(True, VerifyReason.OK)

        logger.debug(f"challenge {challenge.nonce:#x}: {verdict.reason.value}")
        return verdict

    def _forget_expired(self, now_ms: float) -> None:
        self._horizon_ms = max(self._horizon_ms, now_ms)
        self._verified = {n: t for n, t in self._verified.items() if t >= self._horizon_ms}

    @property
    def remembered(self) -> int:
        return len(self._verified)
