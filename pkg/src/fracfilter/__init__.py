"""Joint state and parameter filtering for flow and transport in fractured porous media."""
from .config import ConfigError, TestCaseConfig, load_config, preset
from .experiment import build_problem, run_experiment

__all__ = ["ConfigError", "TestCaseConfig", "load_config", "preset", "build_problem", "run_experiment"]
__version__ = "0.1.0"
