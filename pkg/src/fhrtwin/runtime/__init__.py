from .config import ConfigError, ScenarioConfig, TimescaleConfig, config_schema, load_config
from .scenario import RunLog, ScenarioHalted, run_scenario, schedule

__all__ = ["ConfigError", "RunLog", "ScenarioConfig", "ScenarioHalted", "TimescaleConfig", "config_schema",
           "load_config", "run_scenario", "schedule"]
