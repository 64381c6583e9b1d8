"""
Tests for the continuous-authentication session machine and CRI challenges.
"""

import json

import pytest
import numpy as np

from src.auth.session import (
    ChallengeVerifier,
    Phase,
    ProbeKind,
    ResponseMeta,
    VerifyReason,
    initial_login,
    issue_challenge,
    maybe_update_template,
    new_session,
    relogin,
    trace_lines,
    window_step,
    write_trace,
)
from src.dsp.signal_core import make_rng
from src.errors import ProtocolError
from src.model.embedding import Embedding
from src.model.matcher import Template, TemplateOrigin


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


@pytest.fixture
def template():
    return Template(unit([1.0, 0.0, 0.0, 0.0]), 4)


@pytest.fixture
def authed(template, session_cfg):
    return initial_login(new_session(template, session_cfg), 0.9)


class TestLogin:
    """Test strict login and relogin."""

    def test_strict_threshold(self, template, session_cfg):
        state = initial_login(new_session(template, session_cfg), 0.69)
        assert state.phase is Phase.INITIAL_LOGIN
        state = initial_login(state, 0.7)
        assert state.phase is Phase.AUTHENTICATED
        assert state.confidence == 0.7

    def test_login_only_from_initial(self, authed):
        with pytest.raises(ProtocolError):
            initial_login(authed, 0.9)

    def test_window_needs_authentication(self, template, session_cfg):
        with pytest.raises(ProtocolError):
            window_step(new_session(template, session_cfg), 0.9)

    def test_relogin_needs_lock(self, authed):
        with pytest.raises(ProtocolError):
            relogin(authed, 0.9)


class TestWindows:
    """Test EMA confidence and locking."""

    def test_ema(self, authed):
        state = window_step(authed, 0.5)
        assert state.confidence == pytest.approx(0.7 * 0.9 + 0.3 * 0.5)

    def test_locks_after_k_failures(self, authed):
        state = authed
        for _ in range(2):
            state = window_step(state, 0.1)
            assert state.phase is Phase.AUTHENTICATED
        state = window_step(state, 0.1)
        assert state.phase is Phase.LOCKED
        assert state.event_log[-1].decision == "lock"

    def test_good_window_resets_count(self, authed):
        state = window_step(window_step(authed, 0.1), 0.1)
        state = window_step(state, 0.6)
        assert state.consecutive_failures == 0
        state = window_step(window_step(state, 0.1), 0.1)
        assert state.phase is Phase.AUTHENTICATED

    def test_relogin_restores(self, authed):
        state = authed
        for _ in range(3):
            state = window_step(state, 0.0)
        state = relogin(state, 0.95)
        assert state.phase is Phase.AUTHENTICATED
        assert state.consecutive_failures == 0

    def test_default_clock_advances_by_window(self, authed):
        state = window_step(authed, 0.9)
        assert state.event_log[-1].time_ms - state.event_log[-2].time_ms == 3000.0


class TestTemplateUpdate:
    """Test the playback-driven template update."""

    def test_update_applied_above_strict_threshold(self, authed):
        probe = Embedding(unit([0.0, 1.0, 0.0, 0.0]))
        state = maybe_update_template(authed, probe, 0.8)
        assert state.event_log[-1].decision == "applied"
        assert state.template.created_from is TemplateOrigin.PLAYBACK_UPDATE
        assert np.linalg.norm(state.template.vector) == pytest.approx(1.0)
        assert state.template.vector[1] > 0

    def test_update_skipped_below(self, authed):
        state = maybe_update_template(authed, Embedding(unit([0, 1, 0, 0])), 0.65)
        assert state.event_log[-1].decision == "skipped"
        assert state.template is authed.template

    def test_ignored_when_locked(self, authed):
        state = authed
        for _ in range(3):
            state = window_step(state, 0.0)
        assert maybe_update_template(state, Embedding(unit([0, 1, 0, 0])), 0.99) is state


class TestTrace:
    """Test JSON-lines traces."""

    def test_trace_lines(self, authed):
        lines = trace_lines(window_step(authed, 0.2))
        records = [json.loads(line) for line in lines]
        assert [r["event"] for r in records] == ["login", "window"]
        assert set(records[0]) == {"time_ms", "phase", "event", "score", "decision"}

    def test_write_trace(self, tmp_path, authed):
        write_trace(tmp_path / "t.jsonl", [authed, window_step(authed, 0.1)], ["a", "b"])
        rows = [json.loads(line) for line in (tmp_path / "t.jsonl").read_text().splitlines()]
        assert [r["session"] for r in rows] == ["a", "b", "b"]


class TestChallenges:
    """Test nonce-bound challenge verification."""

    def test_issue_is_deterministic(self, session_cfg):
        a = issue_challenge(5, 100.0, session_cfg)
        b = issue_challenge(5, 100.0, session_cfg)
        assert a == b
        assert a.budget_ms == 200.0
        assert a.probe_kind is ProbeKind.WATERMARK

    def test_ok(self, session_cfg):
        v = ChallengeVerifier(session_cfg)
        c = v.issue(1, 0.0)
        assert v.verify_response(c, ResponseMeta(c.nonce, 40.0, 0.8)).reason is VerifyReason.OK

    def test_replayed_nonce_rejected(self, session_cfg):
        v = ChallengeVerifier(session_cfg)
        old, new = v.issue(1, 0.0), v.issue(2, 1000.0)
        verdict = v.verify_response(new, ResponseMeta(old.nonce, 40.0, 0.99))
        assert not verdict.accepted
        assert verdict.reason is VerifyReason.NONCE_MISMATCH

    def test_late_response_rejected(self, session_cfg):
        v = ChallengeVerifier(session_cfg)
        c = v.issue(1, 0.0)
        assert v.verify_response(c, ResponseMeta(c.nonce, 540.0, 0.99)).reason is VerifyReason.DELAY

    def test_binding_rejected(self, session_cfg):
        v = ChallengeVerifier(session_cfg, binding_threshold=0.3)
        c = v.issue(1, 0.0)
        verdict = v.verify_response(c, ResponseMeta(c.nonce, 40.0, 0.99, binding=0.05))
        assert verdict.reason is VerifyReason.BINDING

    def test_missing_binding_rejected(self, session_cfg):
        v = ChallengeVerifier(session_cfg, binding_threshold=0.3)
        c = v.issue(1, 0.0)
        verdict = v.verify_response(c, ResponseMeta(c.nonce, 40.0, 0.99))
        assert verdict.reason is VerifyReason.BINDING

    def test_low_score(self, session_cfg):
        v = ChallengeVerifier(session_cfg)
        c = v.issue(1, 0.0)
        assert v.verify_response(c, ResponseMeta(c.nonce, 40.0, 0.2)).reason is VerifyReason.LOW_SCORE

    def test_second_verification_raises(self, session_cfg):
        v = ChallengeVerifier(session_cfg)
        c = v.issue(1, 0.0)
        v.verify_response(c, ResponseMeta(c.nonce, 40.0, 0.8))
        with pytest.raises(ProtocolError):
            v.verify_response(c, ResponseMeta(c.nonce, 40.0, 0.8))

    def test_memory_stays_bounded(self, session_cfg):
        v = ChallengeVerifier(session_cfg)
        for j in range(50):
            c = v.issue(j, 3000.0 * j)
            v.verify_response(c, ResponseMeta(c.nonce, 40.0, 0.8))
        assert v.remembered == 1

    def test_expired_challenge_refused_after_newer(self, session_cfg):
        v = ChallengeVerifier(session_cfg)
        old, new = v.issue(1, 0.0), v.issue(2, 3000.0)
        v.verify_response(new, ResponseMeta(new.nonce, 40.0, 0.8))
        with pytest.raises(ProtocolError):
            v.verify_response(old, ResponseMeta(old.nonce, 40.0, 0.8))


class TestRandomizedSequences:
    """Randomized property suite over 1000 event sequences."""

    N_SEQUENCES = 1000

    def _run(self, seed, template, cfg):
        rng = make_rng(seed)
        state = new_session(template, cfg)
        failures = 0
        verifier = ChallengeVerifier(cfg)
        for step in range(int(rng.integers(5, 40))):
            s = float(rng.uniform(-0.2, 1.0))
            before = state
            op = int(rng.integers(4))

            if op == 0:
                if state.phase is not Phase.INITIAL_LOGIN:
                    with pytest.raises(ProtocolError):
                        initial_login(state, s)
                    continue
                state = initial_login(state, s)
                # safety: authentication only through a strict score
                assert (state.phase is Phase.AUTHENTICATED) == (s >= cfg.theta_update)
                failures = 0
            elif op == 1:
                if state.phase is not Phase.AUTHENTICATED:
                    with pytest.raises(ProtocolError):
                        window_step(state, s)
                    continue
                state = window_step(state, s)
                failures = failures + 1 if s < cfg.theta_accept else 0
                # liveness: k_fail consecutive failures always lock
                assert (state.phase is Phase.LOCKED) == (failures >= cfg.k_fail)
            elif op == 2:
                if state.phase is not Phase.LOCKED:
                    with pytest.raises(ProtocolError):
                        relogin(state, s)
                    continue
                state = relogin(state, s)
                assert (state.phase is Phase.AUTHENTICATED) == (s >= cfg.theta_update)
                if state.phase is Phase.AUTHENTICATED:
                    failures = 0
            else:
                probe = Embedding(unit(rng.normal(size=template.dim)))
                state = maybe_update_template(state, probe, s)
                changed = state.template is not before.template
                assert not changed or (before.phase is Phase.AUTHENTICATED and s >= cfg.theta_update)

            # template stays unit norm; log only grows by appending
            assert np.linalg.norm(state.template.vector) == pytest.approx(1.0)
            assert state.event_log[:len(before.event_log)] == before.event_log

            # replay: a stale nonce never verifies
            if step % 5 == 0:
                old, new = verifier.issue(seed * 1000 + 2 * step, 0.0), verifier.issue(seed * 1000 + 2 * step + 1, 0.0)
                if old.nonce != new.nonce:
                    assert not verifier.verify_response(new, ResponseMeta(old.nonce, 10.0, 1.0)).accepted

    def test_properties_hold(self, template, session_cfg):
        for seed in range(self.N_SEQUENCES):
            self._run(seed, template, session_cfg)
