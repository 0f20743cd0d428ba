# tests/conftest.py
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.append(str(Path(__file__).resolve().parent.parent))

from synthetic import ar1_samples, synthetic_calendar, synthetic_corpus  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def two_week_calendar():
    # Thu 2023-06-01 .. ; 10 weekdays, no holidays
    return synthetic_calendar(10)


@pytest.fixture(scope="session")
def small_corpus(two_week_calendar):
    return synthetic_corpus(2, 3, two_week_calendar, seed=7)


@pytest.fixture(scope="session")
def toy_samples():
    # short series so model-level tests stay fast
    return ar1_samples(30, length=32, seed=3)
