import logging
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(autouse=True)
def _quiet_nullity_warnings():
    logging.getLogger("nsgp_repre").setLevel(logging.ERROR)
    yield


@pytest.fixture
def gaussian_1000():
    return np.load(FIXTURES / "gaussian_1000x8.npy")
