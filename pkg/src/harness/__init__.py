# Experiment orchestration, attack simulation and reporting
from .report import CONDITIONS, MetricsReport
from .intrusion import SCENARIOS, simulate_intrusion
from .experiment import ExperimentRunner, run_experiment, run_seed_sweep
