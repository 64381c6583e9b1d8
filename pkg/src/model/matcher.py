"""
Matcher
=======
Templates, cosine scoring and verification metrics.

Convention: a probe is accepted iff score >= threshold. With that rule

    FAR(t) = #{imposter >= t} / n_imposter
    FRR(t) = #{genuine  <  t} / n_genuine

are evaluated at every distinct score plus one threshold just above the
maximum, so both rates are bit-reproducible.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, NamedTuple, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..errors import DegenerateTemplateError, DimensionMismatchError, EmptyInputError
from .embedding import Embedding

logger = logging.getLogger(__name__)

VectorLike = Union[Embedding, np.ndarray]


class TemplateOrigin(str, Enum):
    CHIRP_ENROLLMENT = "chirp_enrollment"
    PLAYBACK_UPDATE = "playback_update"


@dataclass(frozen=True, eq=False)
class Template:
    vector: np.ndarray
    n_enrolled: int
    created_from: TemplateOrigin = TemplateOrigin.CHIRP_ENROLLMENT

    @property
    def dim(self) -> int:
        return len(self.vector)

    def to_dict(self) -> dict:
        return {"vector": self.vector.tolist(), "n_enrolled": self.n_enrolled,
                "created_from": self.created_from.value}

    @classmethod
    def from_dict(cls, data: dict) -> "Template":
        return cls(np.array(data["vector"], dtype=np.float64), int(data["n_enrolled"]),
                   TemplateOrigin(data["created_from"]))


def _vec(v: VectorLike) -> np.ndarray:
    return v.vector if isinstance(v, (Embedding, Template)) else np.asarray(v, dtype=np.float64)


def make_template(embeddings: Sequence[VectorLike],
                  created_from: TemplateOrigin = TemplateOrigin.CHIRP_ENROLLMENT) -> Template:
    """Mean of the embeddings, renormalised."""
    if len(embeddings) == 0:
        raise EmptyInputError("make_template needs at least one embedding")
    mean = np.mean([_vec(e) for e in embeddings], axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < 1e-6:
        raise DegenerateTemplateError(f"mean embedding norm {norm:.2e} < 1e-6")
    return Template(mean / norm, len(embeddings), TemplateOrigin(created_from))


def score(template: Union[Template, np.ndarray], probe: VectorLike) -> float:
    t, p = _vec(template), _vec(probe)
    if t.shape != p.shape:
        raise DimensionMismatchError(f"template dim {t.shape} != probe dim {p.shape}")
    return float(np.clip(t @ p, -1.0, 1.0))


def score_matrix(templates: np.ndarray, probes: np.ndarray) -> np.ndarray:
    """probes x templates cosine scores for stacked unit vectors."""
    return np.clip(probes @ templates.T, -1.0, 1.0)


# =============================================================================
# ERROR RATES
# =============================================================================

class RocPoint(NamedTuple):
    far: float
    frr: float
    threshold: float


def _as_array(scores: Sequence[float], name: str) -> np.ndarray:
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise EmptyInputError(f"no {name} scores")
    return arr


def _rates(genuine: np.ndarray, imposter: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    scores = np.concatenate([genuine, imposter])
    thresholds = np.unique(scores)
    thresholds = np.append(thresholds, np.nextafter(thresholds[-1], np.inf))
    g = np.sort(genuine)
    i = np.sort(imposter)
    frr = np.searchsorted(g, thresholds, side="left") / len(g)
    far = 1.0 - np.searchsorted(i, thresholds, side="left") / len(i)
    return thresholds, far, frr


def rates_at(threshold: float, genuine: Sequence[float],
             imposter: Sequence[float]) -> Tuple[float, float]:
    g = _as_array(genuine, "genuine")
    i = _as_array(imposter, "imposter")
    return float(np.mean(i >= threshold)), float(np.mean(g < threshold))


def roc_points(genuine: Sequence[float], imposter: Sequence[float]) -> List[RocPoint]:
    thresholds, far, frr = _rates(_as_array(genuine, "genuine"), _as_array(imposter, "imposter"))
    return [RocPoint(float(a), float(r), float(t)) for a, r, t in zip(far, frr, thresholds)]


def roc_table(genuine: Sequence[float], imposter: Sequence[float]) -> pd.DataFrame:
    return pd.DataFrame(roc_points(genuine, imposter), columns=["far", "frr", "threshold"])[
        ["threshold", "far", "frr"]
    ]


def eer(genuine: Sequence[float], imposter: Sequence[float]) -> Tuple[float, float]:
    """Equal error rate and its threshold, interpolated between adjacent thresholds."""
    thresholds, far, frr = _rates(_as_array(genuine, "genuine"), _as_array(imposter, "imposter"))
    diff = far - frr
    crossing = int(np.argmax(diff <= 0))
    if diff[crossing] == 0 or crossing == 0:
        return float(far[crossing]), float(thresholds[crossing])

    prev = crossing - 1
    alpha = diff[prev] / (diff[prev] - diff[crossing])
    rate = far[prev] + alpha * (far[crossing] - far[prev])
    threshold = thresholds[prev] + alpha * (thresholds[crossing] - thresholds[prev])
    return float(rate), float(threshold)


def far_threshold(genuine: Sequence[float], imposter: Sequence[float], target_far: float) -> float:
    """Lowest candidate threshold whose FAR <= target_far."""
    thresholds, far, _ = _rates(_as_array(genuine, "genuine"), _as_array(imposter, "imposter"))
    return float(thresholds[int(np.argmax(far <= target_far))])


def accuracy_at(threshold: float, genuine: Sequence[float], imposter: Sequence[float]) -> Dict[str, float]:
    g = _as_array(genuine, "genuine")
    i = _as_array(imposter, "imposter")
    true_accepts = int(np.sum(g >= threshold))
    true_rejects = int(np.sum(i < threshold))
    far = 1.0 - true_rejects / len(i)
    frr = 1.0 - true_accepts / len(g)
    return {
        "threshold": float(threshold),
        "accuracy": (true_accepts + true_rejects) / (len(g) + len(i)),
        "balanced_accuracy": 1.0 - (far + frr) / 2,
        "far": far,
        "frr": frr,
        "genuine_trials": len(g),
        "imposter_trials": len(i),
        "true_accepts": true_accepts,
        "true_rejects": true_rejects,
    }


def write_metrics(directory: Path, name: str, genuine: Sequence[float],
                  imposter: Sequence[float]) -> Dict[str, float]:
    """<name>_roc.csv (threshold, far, frr) and <name>_summary.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    roc_table(genuine, imposter).to_csv(directory / f"{name}_roc.csv", index=False, float_format="%.6f")

    rate, threshold = eer(genuine, imposter)
    summary = {"eer": rate, **accuracy_at(threshold, genuine, imposter)}
    with open(directory / f"{name}_summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    logger.debug(f"{name}: EER {rate:.3f} at {threshold:.3f}")
    return summary
