from pathlib import Path

import numpy as np
import pytest

from rwkv_forge.numerics import make_rng

DATA = Path(__file__).parent / "data"


@pytest.fixture
def rng() -> np.random.Generator:
    return make_rng(1234)


@pytest.fixture
def tempest_path() -> Path:
    return DATA / "tempest.txt"
