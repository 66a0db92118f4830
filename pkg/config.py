#!/usr/bin/env python3
"""
Configuration loader for the layered-VAE experiments
Loads settings from environment variables or .env file, plus per-experiment
config files (.toml or KEY=value)
"""

import logging
import os
import sys
import tomllib
from typing import Optional

from dotenv import dotenv_values, load_dotenv

from errors import ConfigError

# Load environment variables from .env file
load_dotenv()

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


class Config:
    """Configuration class for the application"""

    # Directories
    DATA_DIR: str = os.getenv('CSTVAE_DATA_DIR', 'data')
    RUNS_DIR: str = os.getenv('CSTVAE_RUNS_DIR', 'runs')
    CHARTS_DIR: str = os.getenv('CSTVAE_CHARTS_DIR', 'charts')
    MNIST_DIR: str = os.getenv('CSTVAE_MNIST_DIR', '')

    # Logging
    LOG_LEVEL: str = os.getenv('CSTVAE_LOG_LEVEL', 'INFO')
    LOG_FILE: str = os.getenv('CSTVAE_LOG_FILE', 'cstvae.log')

    # Experiments
    SEED: int = int(os.getenv('CSTVAE_SEED', '0'))

    @classmethod
    def print_config_summary(cls):
        """Print a summary of the current configuration"""
        print("📋 Configuration Summary:")
        print(f"  • MNIST Directory: {cls.MNIST_DIR or '❌ Not configured'}")
        print(f"  • Data Directory: {cls.DATA_DIR}")
        print(f"  • Runs Directory: {cls.RUNS_DIR}")
        print(f"  • Charts Directory: {cls.CHARTS_DIR}")
        print(f"  • Log Level: {cls.LOG_LEVEL}")
        print(f"  • Log File: {cls.LOG_FILE or '(stdout only)'}")
        print(f"  • Default Seed: {cls.SEED}")


def setup_logging(level: Optional[str] = None, log_file: Optional[str] = None):
    """File + stdout handlers; an empty log_file disables the file handler"""
    level = (level or Config.LOG_LEVEL).upper()
    log_file = Config.LOG_FILE if log_file is None else log_file
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigError(f"unknown log level '{level}'")

    handlers = [logging.StreamHandler(sys.stdout)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)


def load_config_file(path: str) -> dict:
    """Read an experiment file; keys are lower-cased, values left for the consumer to coerce"""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    if path.endswith('.toml'):
        try:
            with open(path, 'rb') as f:
                values = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    else:
        values = dotenv_values(path)
    return {key.lower().replace('-', '_'): value for key, value in values.items()}


def merge_overrides(base: dict, overrides: dict) -> dict:
    """Flag values that were actually given (not None) win over file values"""
    merged = dict(base)
    merged.update({key: value for key, value in overrides.items() if value is not None})
    return merged


if __name__ == "__main__":
    Config.print_config_summary()
