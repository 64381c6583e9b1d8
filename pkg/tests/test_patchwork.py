"""
Tests for the patchwork watermark: eligibility, projection, audit and optimisation.
"""

import pytest
import numpy as np

from src.config import NetConfig, WatermarkConfig
from src.dsp.features import DeficiencyMask, FrameGeometry, deficiency_mask
from src.dsp.signal_core import Signal, convolve
from src.ear.ear_model import EarProfile, ImpulseResponse, IROrigin, Resonator, realize_ir
from src.errors import DimensionMismatchError, OptimizationFailedError, PatchTooHotError
from src.model.embedding import init_net
from src.model.matcher import Template
from src.watermark.patchwork import (
    WatermarkPatch,
    _allowance,
    active_cells,
    apply_patch,
    audit_patch,
    binding_score,
    carrier_phases,
    compute_ceiling,
    eligible_cells,
    optimize_patch,
    project,
)


@pytest.fixture
def geometry(feature_cfg):
    return FrameGeometry.from_config(feature_cfg)


@pytest.fixture
def est_ir():
    profile = EarProfile((Resonator(2000.0, 5.0, 0.2), Resonator(5000.0, 8.0, 0.1)), 0.8, 2, "u")
    return ImpulseResponse(realize_ir(profile, length=128).taps, IROrigin.ESTIMATED)


@pytest.fixture
def mask(half_silent_clip, feature_cfg, geometry):
    return deficiency_mask(half_silent_clip, feature_cfg, geometry)


@pytest.fixture
def ceiling(half_silent_clip, mask, feature_cfg, geometry):
    return compute_ceiling(half_silent_clip, mask, feature_cfg, geometry=geometry)


def patch_with(gains_value, eligible, geometry, n, seed=5):
    return WatermarkPatch(np.where(eligible, gains_value, 0.0), eligible, seed, geometry, n)


class TestCeiling:
    """Test the per-cell ceiling."""

    def test_shape_matches_mask(self, ceiling, mask):
        assert ceiling.shape == mask.shape

    def test_mismatched_mask(self, noise_clip, feature_cfg):
        short = Signal(noise_clip.samples[:8000])
        with pytest.raises(DimensionMismatchError):
            compute_ceiling(noise_clip, deficiency_mask(short, feature_cfg), feature_cfg)


class TestEligibility:
    """Test where the carrier is allowed to live."""

    def test_eligible_subset_of_deficient(self, mask, geometry):
        eligible = eligible_cells(mask, geometry)
        assert not np.any(eligible & ~mask.cells)

    def test_silent_half_eligible(self, mask, geometry):
        eligible = eligible_cells(mask, geometry)
        assert eligible[60:90].all()
        assert not eligible[:40].any()

    def test_phases_unit_modulus_or_zero(self, mask, geometry):
        phases = carrier_phases(3, eligible_cells(mask, geometry), geometry)
        mags = np.abs(phases)
        assert np.all((np.isclose(mags, 1.0)) | (mags == 0))

    def test_phases_follow_nonce(self, mask, geometry):
        eligible = eligible_cells(mask, geometry)
        assert not np.allclose(carrier_phases(1, eligible, geometry), carrier_phases(2, eligible, geometry))


class TestPatch:
    """Test synthesis, audit and mixing."""

    def test_loud_region_untouched(self, half_silent_clip, mask, geometry):
        """Samples only covered by non-deficient frames stay exactly zero."""
        patch = patch_with(1e-3, eligible_cells(mask, geometry), geometry, len(half_silent_clip))
        signal = patch.signal()
        assert np.all(signal[:6000] == 0.0)
        assert np.any(signal[9000:] != 0.0)

    def test_projection_passes_audit(self, half_silent_clip, mask, ceiling, geometry):
        eligible = eligible_cells(mask, geometry)
        phases = carrier_phases(5, eligible, geometry)
        allowance = _allowance(ceiling, active_cells(phases, geometry), geometry)
        gains, _ = project(10 * allowance, allowance, ceiling, phases, geometry, len(half_silent_clip))
        patch = WatermarkPatch(gains, eligible, 5, geometry, len(half_silent_clip))
        report = audit_patch(patch, ceiling)
        assert report.passed
        assert report.max_excess_db <= 0.0
        assert not patch.is_zero

    def test_apply_length_mismatch(self, half_silent_clip, mask, geometry):
        patch = patch_with(1e-3, eligible_cells(mask, geometry), geometry, len(half_silent_clip) - 1)
        with pytest.raises(DimensionMismatchError):
            apply_patch(half_silent_clip, patch)

    def test_zero_patch_is_identity(self, half_silent_clip, mask, geometry):
        patch = patch_with(0.0, eligible_cells(mask, geometry), geometry, len(half_silent_clip))
        assert apply_patch(half_silent_clip, patch) is half_silent_clip

    def test_too_hot(self, half_silent_clip, mask, geometry):
        patch = patch_with(1e3, eligible_cells(mask, geometry), geometry, len(half_silent_clip))
        with pytest.raises(PatchTooHotError):
            apply_patch(half_silent_clip, patch)

    def test_save_and_load(self, tmp_path, half_silent_clip, mask, geometry):
        patch = patch_with(2e-4, eligible_cells(mask, geometry), geometry, len(half_silent_clip))
        patch.save(tmp_path / "p.json")
        back = WatermarkPatch.load(tmp_path / "p.json")
        np.testing.assert_array_equal(back.gains, patch.gains)
        np.testing.assert_allclose(back.signal(), patch.signal())


class TestOptimize:
    """Test projected gradient ascent."""

    @pytest.fixture
    def net(self):
        return init_net(2, NetConfig(conv1_channels=6, conv2_channels=6, embed_dim=8), n_classes=2)

    @pytest.fixture
    def template(self):
        v = np.random.default_rng(8).normal(size=8)
        return Template(v / np.linalg.norm(v), 1)

    def test_never_worse_and_feasible(self, half_silent_clip, est_ir, template, net, ceiling,
                                      feature_cfg, mask):
        result = optimize_patch(half_silent_clip, est_ir, template, net, ceiling, iters=2,
                                step=0.25, seed=9, feature_cfg=feature_cfg, mask=mask)
        assert result.trace[0] == result.initial_score
        assert result.final_score >= result.initial_score
        assert len(result.trace) <= 4
        assert audit_patch(result.patch, ceiling).passed

    def test_aam_needs_label(self, half_silent_clip, est_ir, template, net, ceiling):
        with pytest.raises(OptimizationFailedError):
            optimize_patch(half_silent_clip, est_ir, template, net, ceiling, iters=1, step=0.25,
                           seed=1, wm_cfg=WatermarkConfig(objective="aam"))

    def test_empty_mask_gives_zero_patch(self, half_silent_clip, est_ir, template, net, ceiling, mask):
        empty = DeficiencyMask(np.zeros(mask.shape, dtype=bool), np.zeros(mask.shape[0], dtype=bool))
        result = optimize_patch(half_silent_clip, est_ir, template, net, ceiling, iters=3,
                                step=0.25, seed=1, mask=empty)
        assert result.patch.is_zero
        assert not result.watermarked
        assert result.trace == [result.initial_score]


class TestBinding:
    """Test the nonce binding check."""

    def test_genuine_response_binds(self, half_silent_clip, mask, ceiling, geometry, est_ir):
        eligible = eligible_cells(mask, geometry)
        phases = carrier_phases(5, eligible, geometry)
        allowance = _allowance(ceiling, active_cells(phases, geometry), geometry)
        gains, _ = project(allowance, allowance, ceiling, phases, geometry, len(half_silent_clip))
        patch = WatermarkPatch(gains, eligible, 5, geometry, len(half_silent_clip))
        other = WatermarkPatch(gains, eligible, 6, geometry, len(half_silent_clip))

        response = convolve(apply_patch(half_silent_clip, patch), est_ir.taps)
        assert binding_score(response, half_silent_clip, patch, est_ir) > 0.99
        assert abs(binding_score(response, half_silent_clip, other, est_ir)) < 0.3

    def test_zero_patch_never_binds(self, half_silent_clip, mask, geometry, est_ir):
        patch = patch_with(0.0, eligible_cells(mask, geometry), geometry, len(half_silent_clip))
        response = convolve(half_silent_clip, est_ir.taps)
        assert binding_score(response, half_silent_clip, patch, est_ir) == 0.0
