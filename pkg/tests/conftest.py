import pytest

from fmsim.machine import default_machine_config


@pytest.fixture(scope="session")
def cfg16():
    return default_machine_config()
