"""
Pytest configuration and fixtures for EarCAN tests.
"""

import pytest
import numpy as np
from pathlib import Path
import sys

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.config import ExperimentConfig, FeatureConfig, NetConfig, PopulationConfig, SessionConfig
from src.dsp.signal_core import Signal, white_noise


FS = 16000


@pytest.fixture
def feature_cfg():
    """Default frame geometry."""
    return FeatureConfig()


@pytest.fixture
def small_net_cfg():
    """Narrow network that trains in seconds."""
    return NetConfig(conv1_channels=6, conv2_channels=6, embed_dim=8, epochs=2, batch=4)


@pytest.fixture
def session_cfg():
    """Calibrated-looking thresholds with k_fail=3."""
    return SessionConfig(theta_accept=0.5, theta_update=0.7, ema_lambda=0.7, k_fail=3,
                         alpha_update=0.1, latency_budget_ms=200.0)


@pytest.fixture
def population_cfg():
    return PopulationConfig(n_users=4, seed=3)


@pytest.fixture
def noise_clip():
    """One second of -10 dBFS-ish white noise."""
    return white_noise(FS, 0.5, seed=11)


@pytest.fixture
def half_silent_clip():
    """White noise in the first half, digital silence in the second."""
    loud = white_noise(FS // 2, 0.5, seed=12).samples
    return Signal(np.concatenate([loud, np.zeros(FS // 2)]), FS)


def build_smoke_config(root):
    """Two users, two clips, one epoch: every stage in seconds."""
    cfg = ExperimentConfig()
    cfg.population.n_users = 2
    cfg.corpus.n_clips = 2
    cfg.corpus.clip_seconds = 1.0
    cfg.corpus.eval_clips = 2
    cfg.net.epochs = 1
    cfg.net.conv1_channels = 8
    cfg.net.conv2_channels = 8
    cfg.net.embed_dim = 8
    cfg.watermark.iters = 2
    cfg.evaluation.test_sessions = 2
    cfg.evaluation.session_windows = 6
    cfg.evaluation.takeover_window = 3
    cfg.evaluation.intrusion_trials = 4
    cfg.output.root = str(root)
    return cfg


@pytest.fixture
def smoke_config(tmp_path):
    return build_smoke_config(tmp_path / "outputs")


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    """One full smoke pipeline shared by the end-to-end tests."""
    from src.harness import ExperimentRunner

    root = tmp_path_factory.mktemp("smoke")
    runner = ExperimentRunner(build_smoke_config(root))
    return runner, runner.run()
