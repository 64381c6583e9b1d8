"""
Patchwork Watermark
===================
Inaudible additive signal that refills silent frames and absent bands of a
playback so the in-ear response carries channel information there.

A patch is a frames x bands gain matrix on a nonce-seeded carrier: each cell
owns a unit-modulus, random-phase spectrum on its band's bins, synthesised
per frame with a Hann window and overlap-added at the analysis hop.

Constraints:
  * cells are eligible only where the band neighbourhood is deficient in every
    frame the synthesis window overlaps, so non-deficient cells see no patch;
  * realized patch power <= audibility ceiling in every cell, enforced by
    clipping, local shrinking and one exact global factor (synthesis is linear).

The optimizer is projected gradient ascent on the verification score (or the
negated AAM loss of the claimed class) through the estimated channel.
"""

import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import binary_dilation, minimum_filter1d
from scipy.signal import correlate as sp_correlate

from ..config import FeatureConfig, NetConfig, WatermarkConfig
from ..errors import DimensionMismatchError, OptimizationFailedError, PatchTooHotError
from ..dsp.features import (
    DeficiencyMask,
    FrameGeometry,
    band_powers,
    deficiency_mask,
    overlap_add,
    rtf_backward,
    rtf_features,
)
from ..dsp.signal_core import Signal, convolve, make_rng
from ..ear.ear_model import ImpulseResponse
from ..model.embedding import NetParams, _aam, backward_from_embedding, forward_cached
from ..model.matcher import Template
from .psychoacoustics import AudibilityCeiling, masked_ceiling_db, threshold_in_quiet, to_db

logger = logging.getLogger(__name__)

GUARD_BINS = 6
SAFETY = 1 - 1e-6

_CARRIER_STREAM = 0xCA
_KAPPA_FRAMES = 24
_SHRINK_MARGIN = 0.98


# =============================================================================
# CEILING
# =============================================================================

def compute_ceiling(playback: Signal, mask: DeficiencyMask, config: FeatureConfig,
                    masking_offset_db: float = 13.0,
                    geometry: Optional[FrameGeometry] = None) -> AudibilityCeiling:
    """max(T_q(band centre), playback band power - masking_offset_db) per cell."""
    geometry = geometry or FrameGeometry.from_config(config, playback.sample_rate)
    level = to_db(band_powers(playback.samples, geometry))
    if level.shape != mask.shape:
        raise DimensionMismatchError(f"mask {mask.shape} does not match playback frames {level.shape}")
    tq = threshold_in_quiet(geometry.band_centers)
    return AudibilityCeiling(masked_ceiling_db(level, tq[np.newaxis, :], masking_offset_db),
                             tq, masking_offset_db)


# =============================================================================
# CARRIER
# =============================================================================

def _overlap_radius(geometry: FrameGeometry) -> int:
    """Frames t and t' share samples iff |t - t'| <= radius."""
    return -(-geometry.frame_len // geometry.hop) - 1


@lru_cache(maxsize=8)
def _touch(geometry: FrameGeometry) -> np.ndarray:
    """bands x bins: band support widened by GUARD_BINS."""
    support = geometry.filterbank > 0
    structure = np.ones((1, 2 * GUARD_BINS + 1), dtype=bool)
    return binary_dilation(support, structure=structure).astype(np.float64)


@lru_cache(maxsize=8)
def _carrier_bins(geometry: FrameGeometry) -> np.ndarray:
    """Owned bins between the outer band centres, where the band weights sum to one."""
    freqs = np.arange(geometry.n_bins) * geometry.sample_rate / geometry.nfft
    centres = geometry.band_centers
    return (geometry.band_of_bin >= 0) & (freqs >= centres[0]) & (freqs <= centres[-1])


@lru_cache(maxsize=8)
def _owner_onehot(geometry: FrameGeometry) -> np.ndarray:
    """bins x bands, 1 where the band owns a carrier bin."""
    owner = geometry.band_of_bin
    onehot = np.zeros((geometry.n_bins, geometry.n_bands))
    owned = _carrier_bins(geometry)
    onehot[np.flatnonzero(owned), owner[owned]] = 1.0
    return onehot


def eligible_cells(mask: DeficiencyMask, geometry: FrameGeometry) -> np.ndarray:
    """Deficient cells whose band stays deficient across every overlapping frame."""
    size = 2 * _overlap_radius(geometry) + 1
    return minimum_filter1d(mask.cells.astype(np.uint8), size=size, axis=0, mode="nearest").astype(bool)


def usable_bins(eligible: np.ndarray, geometry: FrameGeometry) -> np.ndarray:
    """frames x bins: owned bins not touched by any ineligible band."""
    blocked = (~eligible).astype(np.float64) @ _touch(geometry) > 0
    return _carrier_bins(geometry)[np.newaxis, :] & ~blocked


def carrier_phases(seed: int, eligible: np.ndarray, geometry: FrameGeometry) -> np.ndarray:
    rng = make_rng(seed, _CARRIER_STREAM)
    phi = rng.uniform(0.0, 2 * np.pi, size=(eligible.shape[0], geometry.n_bins))
    return np.where(usable_bins(eligible, geometry), np.exp(1j * phi), 0.0)


def active_cells(phases: np.ndarray, geometry: FrameGeometry) -> np.ndarray:
    return (np.abs(phases) > 0).astype(np.float64) @ _owner_onehot(geometry) > 0


def _frame_index(geometry: FrameGeometry, n_frames: int) -> np.ndarray:
    return np.arange(n_frames)[:, np.newaxis] * geometry.hop + np.arange(geometry.frame_len)


def synthesize(gains: np.ndarray, phases: np.ndarray, geometry: FrameGeometry,
               n_samples: int) -> np.ndarray:
    owner = np.maximum(geometry.band_of_bin, 0)
    spectra = gains[:, owner] * phases
    frames = np.fft.irfft(spectra, n=geometry.nfft, axis=1)[:, :geometry.frame_len] * geometry.window
    return overlap_add(frames, geometry.hop, n_samples)


def _synthesis_adjoint(grad_signal: np.ndarray, phases: np.ndarray,
                       geometry: FrameGeometry) -> np.ndarray:
    """dJ/dgains from dJ/dsignal."""
    frames = grad_signal[_frame_index(geometry, phases.shape[0])] * geometry.window
    spectra = np.fft.rfft(frames, n=geometry.nfft, axis=1)
    per_bin = (2.0 / geometry.nfft) * np.real(phases * np.conj(spectra))
    return per_bin @ _owner_onehot(geometry)


@lru_cache(maxsize=8)
def _unit_power(geometry: FrameGeometry) -> np.ndarray:
    """Steady-state realized power per band for unit gains in every cell."""
    eligible = np.ones((_KAPPA_FRAMES, geometry.n_bands), dtype=bool)
    phases = carrier_phases(0, eligible, geometry)
    n_samples = (_KAPPA_FRAMES - 1) * geometry.hop + geometry.frame_len
    signal = synthesize(np.ones(eligible.shape), phases, geometry, n_samples)
    radius = _overlap_radius(geometry)
    realized = band_powers(signal, geometry)[radius:_KAPPA_FRAMES - radius]
    return np.maximum(realized.mean(axis=0), 1e-300)


# =============================================================================
# PATCH
# =============================================================================

@dataclass(frozen=True, eq=False)
class WatermarkPatch:
    gains: np.ndarray           # frames x bands
    eligible: np.ndarray        # frames x bands
    seed: int                   # challenge nonce
    geometry: FrameGeometry
    n_samples: int

    @property
    def phases(self) -> np.ndarray:
        return carrier_phases(self.seed, self.eligible, self.geometry)

    def signal(self) -> np.ndarray:
        return synthesize(self.gains, self.phases, self.geometry, self.n_samples)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.gains)

    def to_dict(self) -> dict:
        g = self.geometry
        return {
            "seed": self.seed,
            "sample_rate": g.sample_rate,
            "n_samples": self.n_samples,
            "frame_len": g.frame_len,
            "hop": g.hop,
            "nfft": g.nfft,
            "band_edges": list(g.band_edges),
            "gains": self.gains.tolist(),
            "eligible": self.eligible.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "WatermarkPatch":
        geometry = FrameGeometry(int(data["frame_len"]), int(data["hop"]), int(data["nfft"]),
                                 tuple(float(e) for e in data["band_edges"]),
                                 int(data["sample_rate"]))
        return cls(np.array(data["gains"], dtype=np.float64),
                   np.array(data["eligible"], dtype=bool),
                   int(data["seed"]), geometry, int(data["n_samples"]))

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path: Path) -> "WatermarkPatch":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True)
class AuditReport:
    cells: int
    violations: int
    max_excess_db: float        # max realized - ceiling over cells with patch power

    @property
    def passed(self) -> bool:
        return self.violations == 0


def audit_patch(patch: WatermarkPatch, ceiling: AudibilityCeiling) -> AuditReport:
    """Measure realized patch power per cell with the analysis front end."""
    realized = band_powers(patch.signal(), patch.geometry)
    if realized.shape != ceiling.shape:
        raise DimensionMismatchError(f"patch {realized.shape} vs ceiling {ceiling.shape}")
    violations = int(np.count_nonzero(realized > ceiling.power))
    live = realized > 0
    excess = float(np.max(to_db(realized[live]) - ceiling.values[live])) if live.any() else float("-inf")
    return AuditReport(int(realized.size), violations, excess)


def apply_patch(playback: Signal, patch: WatermarkPatch, max_clip_fraction: float = 0.01) -> Signal:
    """playback + carrier, clipped to [-1, 1]."""
    if patch.n_samples != len(playback) or patch.geometry.sample_rate != playback.sample_rate:
        raise DimensionMismatchError(
            f"patch built for {patch.n_samples} samples @ {patch.geometry.sample_rate} Hz, "
            f"playback has {len(playback)} @ {playback.sample_rate} Hz"
        )
    if patch.is_zero:
        return playback

    mixed = playback.samples + patch.signal()
    clipped = int(np.count_nonzero(np.abs(mixed) > 1.0))
    if clipped:
        fraction = clipped / len(mixed)
        if fraction > max_clip_fraction:
            raise PatchTooHotError(f"{fraction:.2%} of samples clip (limit {max_clip_fraction:.2%})")
        logger.warning(f"apply_patch: {clipped} samples clipped")
    return playback.with_samples(np.clip(mixed, -1.0, 1.0))


# =============================================================================
# PROJECTION
# =============================================================================

def _allowance(ceiling: AudibilityCeiling, active: np.ndarray, geometry: FrameGeometry) -> np.ndarray:
    return np.where(active, np.sqrt(ceiling.power / _unit_power(geometry)[np.newaxis, :]), 0.0)


def _global_scale(gains: np.ndarray, ceiling_power: np.ndarray, phases: np.ndarray,
                  geometry: FrameGeometry, n_samples: int) -> np.ndarray:
    realized = band_powers(synthesize(gains, phases, geometry, n_samples), geometry)
    live = realized > 0
    if not live.any():
        return gains
    ratio = float(np.min(ceiling_power[live] / realized[live]))
    if ratio >= 1.0:
        return gains
    return gains * np.sqrt(ratio) * SAFETY


def project(gains: np.ndarray, allowance: np.ndarray, ceiling: AudibilityCeiling,
            phases: np.ndarray, geometry: FrameGeometry, n_samples: int,
            shrink_rounds: int = 3) -> Tuple[np.ndarray, bool]:
    """Feasible gains close to `gains`; the flag is True if the global factor was needed."""
    g = np.clip(gains, -allowance, allowance)
    ceiling_power = ceiling.power
    size = 2 * _overlap_radius(geometry) + 1

    for _ in range(shrink_rounds):
        realized = band_powers(synthesize(g, phases, geometry, n_samples), geometry)
        over = realized > ceiling_power
        if not over.any():
            return g, False
        factor = np.ones_like(realized)
        factor[over] = np.sqrt(ceiling_power[over] / realized[over]) * _SHRINK_MARGIN
        g = g * minimum_filter1d(factor, size=size, axis=0, mode="nearest")

    logger.debug("projection fell back to global scaling")
    return _global_scale(g, ceiling_power, phases, geometry, n_samples), True


# =============================================================================
# OPTIMIZATION
# =============================================================================

@dataclass
class OptimizationResult:
    patch: WatermarkPatch
    trace: List[float] = field(default_factory=list)
    initial_score: float = 0.0
    final_score: float = 0.0
    global_fallbacks: int = 0
    watermarked: bool = False


class _Objective:
    """J(gains) and dJ/dgains through carrier -> estimated channel -> features -> network."""

    def __init__(self, playback: Signal, est_ir: ImpulseResponse, template: Template,
                 net: NetParams, feature_cfg: FeatureConfig, geometry: FrameGeometry,
                 phases: np.ndarray, objective: str, label: Optional[int], hyper: NetConfig):
        self.playback = playback
        self.taps = est_ir.taps
        self.template = template
        self.net = net
        self.cfg = feature_cfg
        self.geometry = geometry
        self.phases = phases
        self.objective = objective
        self.label = label
        self.hyper = hyper
        self.lag = rtf_features(playback, convolve(playback, self.taps), feature_cfg, geometry).lag

    def _embedding_grad(self, e: np.ndarray) -> Tuple[float, np.ndarray]:
        if self.objective == "aam":
            loss, _, grad_e, _ = _aam(e, self.label, self.net.class_weights,
                                      self.hyper.scale, self.hyper.margin)
            return -loss, -grad_e
        return float(self.template.vector @ e), self.template.vector

    def __call__(self, gains: np.ndarray, with_grad: bool = True):
        patch = synthesize(gains, self.phases, self.geometry, len(self.playback))
        x = self.playback.with_samples(self.playback.samples + patch)
        y = convolve(x, self.taps)
        feats = rtf_features(x, y, self.cfg, self.geometry, lag=self.lag)
        cache = forward_cached(self.net, feats)
        value, grad_e = self._embedding_grad(cache.embedding)
        if not with_grad:
            return value, None

        _, grad_values = backward_from_embedding(self.net, cache, grad_e)
        grad_x, grad_y = rtf_backward(x, y, feats, grad_values, self.cfg)
        grad_signal = grad_x + sp_correlate(grad_y, self.taps.samples, mode="valid")
        return value, _synthesis_adjoint(grad_signal, self.phases, self.geometry)


def optimize_patch(playback: Signal, est_ir: ImpulseResponse, template: Template, net: NetParams,
                   ceiling: AudibilityCeiling, iters: int, step: float, seed: int,
                   feature_cfg: Optional[FeatureConfig] = None,
                   mask: Optional[DeficiencyMask] = None,
                   wm_cfg: Optional[WatermarkConfig] = None,
                   label: Optional[int] = None,
                   hyper: Optional[NetConfig] = None) -> OptimizationResult:
    """Projected gradient ascent on the patch gains; returns the best feasible iterate.

    trace[0] is the score of the unpatched playback; the returned patch never
    scores below it. An empty mask yields a zero patch (nothing to watermark).
    """
    feature_cfg = feature_cfg or FeatureConfig()
    wm_cfg = wm_cfg or WatermarkConfig()
    hyper = hyper or NetConfig()
    if wm_cfg.objective == "aam" and label is None:
        raise OptimizationFailedError("the aam objective needs the claimed user's class label")

    geometry = FrameGeometry.from_config(feature_cfg, playback.sample_rate)
    if mask is None:
        mask = deficiency_mask(playback, feature_cfg, geometry)
    eligible = eligible_cells(mask, geometry)
    phases = carrier_phases(seed, eligible, geometry)
    active = active_cells(phases, geometry)
    zero = np.zeros(mask.shape)

    objective = _Objective(playback, est_ir, template, net, feature_cfg, geometry, phases,
                           wm_cfg.objective, label, hyper)
    initial, _ = objective(zero, with_grad=False)
    result = OptimizationResult(WatermarkPatch(zero, eligible, seed, geometry, len(playback)),
                                [initial], initial, initial)
    if not mask.any() or not active.any():
        logger.debug("optimize_patch: nothing to watermark")
        return result

    allowance = _allowance(ceiling, active, geometry)
    gains, fell_back = project(wm_cfg.init_fraction * allowance, allowance, ceiling, phases,
                               geometry, len(playback), wm_cfg.shrink_rounds)
    fallbacks = int(fell_back)
    best_value, best_gains = initial, zero

    for i in range(iters + 1):
        value, grad = objective(gains, with_grad=i < iters)
        result.trace.append(value)
        if value > best_value:
            best_value, best_gains = value, gains
        if grad is None:
            break
        if not np.all(np.isfinite(grad)):
            raise OptimizationFailedError(f"non-finite gradient at iteration {i}")
        direction = grad * allowance
        peak = float(np.max(np.abs(direction)))
        if peak == 0:
            break
        gains, fell_back = project(gains + step * allowance * direction / peak, allowance, ceiling,
                                   phases, geometry, len(playback), wm_cfg.shrink_rounds)
        fallbacks += int(fell_back)

    if best_gains is zero:
        logger.warning(f"optimize_patch: no iterate beat the unpatched score {initial:.4f}; "
                       f"returning the unpatched playback")

    result.patch = WatermarkPatch(best_gains, eligible, seed, geometry, len(playback))
    result.final_score = best_value
    result.global_fallbacks = fallbacks
    result.watermarked = best_gains is not zero
    return result


# =============================================================================
# CHALLENGE BINDING
# =============================================================================

def binding_score(response: Signal, playback: Signal, patch: WatermarkPatch,
                  est_ir: ImpulseResponse) -> float:
    """Normalised correlation between the response residual and the expected carrier echo.

    Near 1 when the response was produced under this patch, near 0 otherwise.
    """
    if patch.is_zero:
        return 0.0
    expected = convolve(playback.with_samples(patch.signal()), est_ir.taps).samples
    predicted = convolve(playback, est_ir.taps).samples
    n = min(len(response), len(expected))
    residual = response.samples[:n] - predicted[:n]

    region = np.zeros(n, dtype=bool)
    frames = np.flatnonzero(np.any(patch.gains != 0, axis=1))
    for t in frames:
        start = t * patch.geometry.hop
        region[start:min(n, start + patch.geometry.frame_len + len(est_ir))] = True

    e, r = expected[:n][region], residual[region]
    denom = float(np.linalg.norm(e) * np.linalg.norm(r))
    return float(e @ r / denom) if denom > 0 else 0.0
