"""Scenario configuration and the run engine."""

from .config import ConfigValidationError, ScenarioConfig, TimingWarning
from .engine import PhaseLog, RunResult, Scenario, ScenarioError, run_scenario
from .presets import load_preset, preset_names

__all__ = ["ConfigValidationError", "ScenarioConfig", "TimingWarning", "PhaseLog", "RunResult", "Scenario",
           "ScenarioError", "run_scenario", "load_preset", "preset_names"]
