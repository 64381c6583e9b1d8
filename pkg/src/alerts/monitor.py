"""
EarCAN Acceptance Monitor
=========================
Checks a metrics report against the acceptance criteria and, when a
previous report is given, flags run-over-run EER regressions.
"""

from typing import Dict, List, Optional
from dataclasses import dataclass


@dataclass
class Alert:
    """Single alert."""
    level: str  # "warning", "critical"
    metric: str
    message: str
    old_value: float
    new_value: float
    change_pct: float


class AcceptanceMonitor:
    """Check report dicts (MetricsReport.to_dict()) and generate alerts."""

    # Thresholds
    THRESHOLDS = {
        "chirp_eer_max": 0.10,             # Critical if above
        "inaudibility_violations_max": 0,  # Critical if above
        "replay_rejection_min": 1.0,       # Critical if below
        "lock_within_k_min": 0.9,          # Warning if below
        "eer_regression_pct": 10.0,        # % change vs previous to trigger alert
    }

    def __init__(self, current: Dict, previous: Optional[Dict] = None,
                 thresholds: Optional[Dict[str, float]] = None):
        self.current = current
        self.previous = previous
        self.thresholds = {**self.THRESHOLDS, **(thresholds or {})}

    def check_all(self) -> List[Alert]:
        """Run all alert checks."""
        alerts = []

        alerts.extend(self._check_chirp_eer())
        alerts.extend(self._check_inaudibility())
        alerts.extend(self._check_replay())
        alerts.extend(self._check_lock_latency())
        alerts.extend(self._check_ordering())
        alerts.extend(self._check_regressions())

        return alerts

    def critical(self, alerts: Optional[List[Alert]] = None) -> List[Alert]:
        alerts = self.check_all() if alerts is None else alerts
        return [a for a in alerts if a.level == "critical"]

    def _condition_eer(self, report: Dict, condition: str) -> Optional[float]:
        value = report.get("conditions", {}).get(condition, {}).get("eer")
        return None if value is None else float(value)

    def _check_chirp_eer(self) -> List[Alert]:
        """Chirp-sounding EER must stay within the acceptance bound."""
        eer = self._condition_eer(self.current, "chirp")
        threshold = self.thresholds["chirp_eer_max"]
        if eer is None or eer <= threshold:
            return []
        return [Alert(
            level="critical",
            metric="conditions.chirp.eer",
            message=f"Chirp EER {eer:.3f} above {threshold:.2f}",
            old_value=threshold,
            new_value=eer,
            change_pct=((eer - threshold) / threshold) * 100,
        )]

    def _check_inaudibility(self) -> List[Alert]:
        wm = self.current.get("watermark", {})
        violations = wm.get("violations", 0)
        limit = self.thresholds["inaudibility_violations_max"]
        if violations <= limit:
            return []
        return [Alert(
            level="critical",
            metric="watermark.violations",
            message=f"{violations} patch cells above the audibility ceiling "
                    f"(max excess {wm.get('max_excess_db') or 0:.2f} dB)",
            old_value=limit,
            new_value=violations,
            change_pct=100.0,
        )]

    def _check_replay(self) -> List[Alert]:
        rate = self.current.get("attacks", {}).get("replay_rejection_rate")
        threshold = self.thresholds["replay_rejection_min"]
        if rate is None or rate >= threshold:
            return []
        return [Alert(
            level="critical",
            metric="attacks.replay_rejection_rate",
            message=f"Replay rejection {rate:.1%} below {threshold:.0%}",
            old_value=threshold,
            new_value=rate,
            change_pct=((rate - threshold) / threshold) * 100,
        )]

    def _check_lock_latency(self) -> List[Alert]:
        """Insider takeovers should lock within k_fail windows."""
        alerts = []
        sessions = self.current.get("sessions", {})
        rate = sessions.get("lock_within_k_rate")
        threshold = self.thresholds["lock_within_k_min"]

        if rate is not None and rate < threshold:
            alerts.append(Alert(
                level="warning",
                metric="sessions.lock_within_k_rate",
                message=f"Only {rate:.1%} of takeovers locked within k_fail windows",
                old_value=threshold,
                new_value=rate,
                change_pct=((rate - threshold) / threshold) * 100,
            ))

        false_lock = sessions.get("genuine_false_lock_rate")
        intruder = sessions.get("intruder_lock_rate")
        if false_lock is not None and intruder is not None and false_lock >= intruder:
            alerts.append(Alert(
                level="warning",
                metric="sessions.genuine_false_lock_rate",
                message=f"Genuine false-lock rate {false_lock:.1%} not below "
                        f"intruder lock rate {intruder:.1%}",
                old_value=intruder,
                new_value=false_lock,
                change_pct=((false_lock - intruder) / intruder * 100) if intruder > 0 else 100,
            ))

        return alerts

    def _check_ordering(self) -> List[Alert]:
        """EER(chirp) <= EER(watermarked) <= EER(playback)."""
        chirp, wm, raw = (self._condition_eer(self.current, c)
                          for c in ("chirp", "watermarked", "playback"))
        if None in (chirp, wm, raw):
            return []

        alerts = []
        if wm > raw:
            alerts.append(Alert(
                level="warning",
                metric="conditions.watermarked.eer",
                message=f"Watermarked EER {wm:.3f} above raw playback {raw:.3f}",
                old_value=raw,
                new_value=wm,
                change_pct=((wm - raw) / raw * 100) if raw > 0 else 100,
            ))
        if chirp > wm:
            alerts.append(Alert(
                level="warning",
                metric="conditions.chirp.eer",
                message=f"Chirp EER {chirp:.3f} above watermarked {wm:.3f}",
                old_value=wm,
                new_value=chirp,
                change_pct=((chirp - wm) / wm * 100) if wm > 0 else 100,
            ))
        return alerts

    def _check_regressions(self) -> List[Alert]:
        """Check for significant run-over-run EER changes."""
        alerts = []

        if not self.previous:
            return alerts

        threshold = self.thresholds["eer_regression_pct"]

        for condition in ("chirp", "playback", "watermarked"):
            curr_val = self._condition_eer(self.current, condition)
            prev_val = self._condition_eer(self.previous, condition)

            if curr_val is not None and prev_val:
                change_pct = ((curr_val - prev_val) / prev_val) * 100

                if change_pct > threshold:
                    alerts.append(Alert(
                        level="warning",
                        metric=f"conditions.{condition}.eer",
                        message=f"{condition} EER rose {change_pct:.1f}% vs previous run",
                        old_value=prev_val,
                        new_value=curr_val,
                        change_pct=change_pct,
                    ))

        return alerts

    def format_alerts(self, alerts: List[Alert]) -> List[str]:
        """Format alerts as strings for display."""
        return [
            f"[{a.level.upper()}] {a.message}"
            for a in alerts
        ]
