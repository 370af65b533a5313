"""Deterministic multi-agent cyber defense simulation.

Autonomous defender agents sense a simulated network, match learned world
state patterns, plan and execute responses from a repertoire, collaborate
over the simulated links, learn a tabular world dynamics model from
experience, and escalate to a human operator channel when no acceptable plan
exists.
"""

__version__ = "0.1.0"

from .config import ConfigError, ScenarioConfig, load_config, load_config_file
from .harness import Metrics, ReplayReport, RunResult, compute_metrics, replay, run_scenario

__all__ = [
    "ConfigError",
    "Metrics",
    "ReplayReport",
    "RunResult",
    "ScenarioConfig",
    "compute_metrics",
    "load_config",
    "load_config_file",
    "replay",
    "run_scenario",
    "__version__",
]
