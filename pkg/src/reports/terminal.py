"""
EarCAN Terminal Report
======================
Plain-text summary of a metrics report.
"""

from typing import Dict, List, Optional

from ..harness.report import CONDITIONS, MetricsReport


def fmt_rate(val: Optional[float]) -> str:
    """Format a [0, 1] rate as percentage."""
    if val is None:
        return "n/a"
    return f"{val * 100:.1f}%"


def fmt_num(val: Optional[float], digits: int = 3) -> str:
    if val is None:
        return "n/a"
    return f"{val:.{digits}f}"


class TerminalReport:
    """Generate terminal-friendly reports."""

    WIDTH = 62

    def __init__(self, report: MetricsReport, alerts: Optional[List[str]] = None):
        self.r = report
        self.alerts = alerts or []

    def _header(self) -> str:
        line = "=" * self.WIDTH
        return f"""
{line}
  EARCAN  config {self.r.config_hash}  seed {self.r.seed}
{line}"""

    def _conditions(self) -> str:
        """EER per verification condition."""
        lines = ["\nVERIFICATION"]
        for name in CONDITIONS:
            c = self.r.conditions.get(name)
            if not c:
                continue
            lines.append(
                f"  {name:12} EER {fmt_rate(c['eer']):>7} | thr {fmt_num(c['threshold']):>6} | "
                f"{c['genuine_trials']:>5} gen / {c['imposter_trials']:>6} imp"
            )

        order = self.r.ordering()
        if order:
            status = "[OK]" if order["chirp_le_watermarked"] and order["watermarked_le_playback"] else "[!]"
            lines.append(f"  chirp <= watermarked <= playback  {status}")
        return "\n".join(lines)

    def _calibration(self) -> str:
        c = self.r.calibration
        return f"""
CALIBRATION
  Held-out EER:  {fmt_rate(c.get('held_out_eer')):>8}
  theta_accept:  {fmt_num(c.get('theta_accept')):>8}
  theta_update:  {fmt_num(c.get('theta_update')):>8}
  Enroll NMSE:   {c.get('enroll_nmse_max', 0):>8.1e} max"""

    def _watermark(self) -> str:
        w = self.r.watermark
        if not w.get("enabled"):
            return "\nWATERMARK\n  disabled"
        return f"""
WATERMARK ({w.get('objective')})
  Patches:       {w.get('patches', 0):>8}
  Watermarked:   {w.get('watermarked_patches', 0):>8}
  Cells:         {w.get('cells_audited', 0):>8}
  Violations:    {w.get('violations', 0):>8}
  Score:         {fmt_num(w.get('mean_initial_score'))} -> {fmt_num(w.get('mean_final_score'))}"""

    def _attacks(self) -> str:
        a = self.r.attacks
        return f"""
ATTACKS
  Imposter FAR:  {fmt_rate(a.get('imposter_far')):>8}
  Replay rej.:   {fmt_rate(a.get('replay_rejection_rate')):>8}
  Delay rej.:    {fmt_rate(a.get('delay_rejection_rate')):>8}
  Imposter rej.: {fmt_rate(a.get('imposter_login_rejection_rate')):>8}"""

    def _sessions(self) -> str:
        s = self.r.sessions
        median = s.get("median_windows_to_lock")
        return f"""
SESSIONS
  False lock:    {fmt_rate(s.get('genuine_false_lock_rate')):>8}
  Intruder lock: {fmt_rate(s.get('intruder_lock_rate')):>8}
  Lock <= k:     {fmt_rate(s.get('lock_within_k_rate')):>8}
  Median wins:   {fmt_num(median, 1):>8} to lock"""

    def _alerts(self) -> str:
        """Alerts section."""
        if not self.alerts:
            return "\nALERTS\n  None - acceptance criteria met"

        lines = ["\nALERTS"]
        for alert in self.alerts:
            lines.append(f"  {alert}")

        return "\n".join(lines)

    def generate(self) -> str:
        """Generate full terminal report."""
        sections = [
            self._header(),
            self._conditions(),
            self._calibration(),
            self._watermark(),
            self._attacks(),
            self._sessions(),
            self._alerts(),
        ]

        report = "\n".join(s for s in sections if s)
        report += f"\n\n{'=' * self.WIDTH}\n  wall clock {self.r.wall_clock_seconds:.1f}s\n"

        return report

    def print(self):
        """Print report to terminal."""
        print(self.generate())


def sweep_table(rows: List[Dict]) -> str:
    """Seed-sweep rows as an aligned text table."""
    header = f"  {'seed':>8} " + " ".join(f"{c:>12}" for c in CONDITIONS) + "  ordering"
    lines = [header, "  " + "-" * (len(header) - 2)]
    for row in rows:
        eers = " ".join(f"{fmt_rate(row[f'eer_{c}']):>12}" for c in CONDITIONS)
        lines.append(f"  {str(row['seed']):>8} {eers}  {'OK' if row['ordering_holds'] else '!'}")
    return "\n".join(lines)
