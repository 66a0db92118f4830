import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from config import Config  # noqa: E402


@pytest.fixture(autouse=True)
def no_log_file(monkeypatch):
    monkeypatch.setattr(Config, "LOG_FILE", "")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def binary_images(rng):
    """24 binary 6x6 images"""
    return (rng.uniform(size=(24, 6, 6)) < 0.3).astype(np.float64)
