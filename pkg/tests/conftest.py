import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from debiaslab import autodiff as ad  # noqa: E402


@pytest.fixture
def f64():
    with ad.precision("f64"):
        yield


@pytest.fixture(autouse=True)
def _reset_precision():
    before = ad.get_precision()
    yield
    ad.set_precision(before)
