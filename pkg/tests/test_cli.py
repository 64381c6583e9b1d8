"""
Tests for the command-line entry point.
"""

import json

import pytest

import scripts.earcan_cli as cli
from scripts.earcan_cli import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, STAGES, load_previous, main
from src.alerts import AcceptanceMonitor
from src.harness import MetricsReport


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv("EARCAN_OUTPUT_ROOT", raising=False)
    monkeypatch.delenv("EARCAN_SEED", raising=False)


def write_conf(tmp_path, extra=""):
    doc = tmp_path / "smoke.conf"
    doc.write_text(
        "population.n_users=2\n"
        "corpus.n_clips=2\ncorpus.clip_seconds=1.0\ncorpus.eval_clips=2\n"
        "net.epochs=1\nnet.conv1_channels=8\nnet.conv2_channels=8\nnet.embed_dim=8\n"
        "watermark.iters=2\n"
        "evaluation.test_sessions=2\nevaluation.session_windows=6\n"
        "evaluation.takeover_window=3\nevaluation.intrusion_trials=4\n" + extra
    )
    return str(doc)


class TestMain:
    """Test exit codes and outputs."""

    def test_unknown_key_exits_2(self, tmp_path):
        conf = write_conf(tmp_path, "population.n_user=3\n")
        assert main(["enroll", "-c", conf, "-o", str(tmp_path / "out")]) == EXIT_CONFIG

    def test_missing_config_exits_2(self, tmp_path):
        assert main(["enroll", "-c", str(tmp_path / "absent.conf")]) == EXIT_CONFIG

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            main(["calibrate"])

    def test_stage_failure_exits_3(self, tmp_path):
        conf = write_conf(tmp_path, f"corpus.external_dir={tmp_path / 'nothing'}\n")
        assert main(["synth-corpus", "-c", conf, "-o", str(tmp_path / "out")]) == EXIT_STAGE

    def test_enroll_stage(self, tmp_path):
        out = tmp_path / "out"
        assert main(["enroll", "-c", write_conf(tmp_path), "-o", str(out)]) == EXIT_OK
        assert (out / "enroll" / "enrollment.csv").exists()
        assert not (out / "model").exists()

    def test_run_all(self, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["run-all", "-c", write_conf(tmp_path), "-o", str(out)]) == EXIT_OK
        report = json.loads((out / "report.json").read_text())
        assert set(report["conditions"]) == {"chirp", "playback", "watermarked"}
        assert "EER" in capsys.readouterr().out

    def test_stage_table(self):
        assert list(STAGES) == ["enroll", "synth-corpus", "augment", "train", "watermark",
                                "eval", "session-sim"]


class TestPreviousReport:
    """Test run-over-run comparison in run-all."""

    def test_no_previous(self, tmp_path):
        assert load_previous(tmp_path / "report.json") is None

    def test_unreadable_previous_ignored(self, tmp_path):
        path = tmp_path / "report.json"
        path.write_text("{not json")
        assert load_previous(path) is None

    def test_previous_loaded(self, tmp_path):
        path = MetricsReport(config_hash="abc", seed=7,
                             conditions={"chirp": {"eer": 0.05}}).write(tmp_path / "report.json")
        previous = load_previous(path)
        assert previous["conditions"]["chirp"]["eer"] == 0.05

    def test_run_all_compares_with_previous(self, tmp_path, monkeypatch):
        out = tmp_path / "out"
        prior = MetricsReport(config_hash="abc", seed=7, conditions={
            "chirp": {"eer": 1e-6}, "playback": {"eer": 1e-6}, "watermarked": {"eer": 1e-6}})
        prior.write(out / "report.json")

        seen = []

        class RecordingMonitor(AcceptanceMonitor):
            def __init__(self, current, previous=None, thresholds=None):
                seen.append(previous)
                super().__init__(current, previous, thresholds)

        monkeypatch.setattr(cli, "AcceptanceMonitor", RecordingMonitor)
        assert main(["run-all", "-c", write_conf(tmp_path), "-o", str(out)]) == EXIT_OK
        assert seen == [prior.to_dict()]
        report = json.loads((out / "report.json").read_text())
        assert report["config_hash"] != "abc"
