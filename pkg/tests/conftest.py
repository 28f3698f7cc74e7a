import pytest

from bolomux.config import load_config


@pytest.fixture(scope="session")
def default_config():
    return load_config()


@pytest.fixture(scope="session")
def default_chip(default_config):
    return default_config.chip


@pytest.fixture(scope="session")
def default_settings(default_config):
    return default_config.settings
