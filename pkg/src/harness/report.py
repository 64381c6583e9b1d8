"""
Metrics Report
==============
The JSON summary of one experiment run. Keys are written sorted and
wall_clock_seconds is the only timing field, so two runs of the same config
produce byte-identical documents once that field is dropped.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict

from ..errors import ReportConsistencyError

logger = logging.getLogger(__name__)

CONDITIONS = ("chirp", "playback", "watermarked")
TIMING_FIELDS = ("wall_clock_seconds",)


@dataclass
class MetricsReport:
    config_hash: str
    seed: int
    conditions: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    calibration: Dict[str, float] = field(default_factory=dict)
    attacks: Dict[str, Any] = field(default_factory=dict)
    sessions: Dict[str, Any] = field(default_factory=dict)
    watermark: Dict[str, Any] = field(default_factory=dict)
    wall_clock_seconds: float = 0.0

    def to_dict(self, include_timing: bool = True) -> Dict[str, Any]:
        data = asdict(self)
        if not include_timing:
            for key in TIMING_FIELDS:
                data.pop(key, None)
        return data

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        logger.info(f"Wrote report to {path}")
        return path

    @classmethod
    def load(cls, path: Path) -> "MetricsReport":
        with open(path) as f:
            return cls(**json.load(f))

    def eer(self, condition: str) -> float:
        return float(self.conditions[condition]["eer"])

    def ordering(self) -> Dict[str, bool]:
        """EER(chirp) <= EER(watermarked) <= EER(playback), and the strict middle step."""
        if not all(c in self.conditions for c in CONDITIONS):
            return {}
        chirp, wm, raw = (self.eer(c) for c in CONDITIONS)
        return {
            "chirp_le_playback": chirp <= raw,
            "chirp_le_watermarked": chirp <= wm,
            "watermarked_le_playback": wm <= raw,
            "watermarked_lt_playback": wm < raw,
        }

    def validate(self) -> "MetricsReport":
        """accepts + rejects == trials for every condition and attack suite."""
        for name, cond in self.conditions.items():
            genuine = cond["genuine_trials"]
            imposter = cond["imposter_trials"]
            false_rejects = round(cond["frr"] * genuine)
            false_accepts = round(cond["far"] * imposter)
            if cond["true_accepts"] + false_rejects != genuine:
                raise ReportConsistencyError(f"{name}: genuine accepts + rejects != {genuine}")
            if cond["true_rejects"] + false_accepts != imposter:
                raise ReportConsistencyError(f"{name}: imposter accepts + rejects != {imposter}")

        for name, suite in self.attacks.items():
            if isinstance(suite, dict) and "trials" in suite:
                if suite["accepted"] + suite["rejected"] != suite["trials"]:
                    raise ReportConsistencyError(f"{name}: accepted + rejected != {suite['trials']}")
        return self
