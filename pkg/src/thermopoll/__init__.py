from __future__ import annotations

from thermopoll.clock import SimTime, duration
from thermopoll.config import ScenarioConfig, load_scenario
from thermopoll.deployment import Deployment
from thermopoll.engine import Engine
from thermopoll.experiments import ReportBundle, check_report, run_experiment

__version__ = '0.1.0'

__all__ = [
    'Deployment',
    'Engine',
    'ReportBundle',
    'ScenarioConfig',
    'SimTime',
    '__version__',
    'check_report',
    'duration',
    'load_scenario',
    'run_experiment',
]
