"""Decentralized bearing-based cooperative pose estimation for vehicle networks."""
from .config import ScenarioConfig, load_scenario, parse_scenario, list_scenarios
from .observer import ObserverGains, ObserverState, observer_step
from .simcore import run_scenario, StepRecord

__version__ = "0.1.0"

__all__ = ["ScenarioConfig", "load_scenario", "parse_scenario", "list_scenarios", "ObserverGains",
           "ObserverState", "observer_step", "run_scenario", "StepRecord"]
