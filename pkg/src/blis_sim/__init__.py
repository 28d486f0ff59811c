"""Deterministic simulator and protocol library for battery-less IoT
networks: on-device task and federated-energy management, aggregator-side
vector-synchronized data collection with forecast-driven beacon scheduling,
and the baselines they are compared against."""

from .engine import EventLog, Scenario, build_scenario, run
from .metrics import MetricsBundle, compute_metrics

__version__ = "0.1.0"


def simulate(config: dict) -> tuple[EventLog, MetricsBundle]:
    """Build, run, and score one scenario config."""
    scenario = build_scenario(config)
    log = run(scenario)
    return log, compute_metrics(log, scenario)
