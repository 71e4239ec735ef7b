import sys
from pathlib import Path

import numpy as np
import pytest

TESTS = Path(__file__).parent
sys.path.insert(0, str(TESTS))

FIXTURES = TESTS / "fixtures"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    from dban.tensor import precision

    with precision(np.float64):
        yield


@pytest.fixture
def face_path():
    return FIXTURES / "face96.png"
