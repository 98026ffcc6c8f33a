import pytest

from fusionmoe.tensor import reset_default_tape


@pytest.fixture(autouse=True)
def _fresh_ambient_tape():
    reset_default_tape()
    yield
    reset_default_tape()
