"""Persistent multiagent gridworld with population-based policy-gradient training."""

from .config import Config, ConfigError, default_config, load_config, seed_rng

__all__ = ["Config", "ConfigError", "default_config", "load_config", "seed_rng"]
__version__ = "0.1.0"
