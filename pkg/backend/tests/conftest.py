from collections.abc import Generator

import pytest
from fastapi.testclient import TestClient

from app.main import app
from app.models import ProtocolId, SimConfig
from tests.utils.factories import make_config


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption(
        "--oracle-seeds",
        type=int,
        default=20,
        help="number of seeds in the acceptance serializability sweep",
    )


def pytest_generate_tests(metafunc: pytest.Metafunc) -> None:
    if "oracle_seed" in metafunc.fixturenames:
        count = metafunc.config.getoption("--oracle-seeds")
        metafunc.parametrize("oracle_seed", range(1, count + 1))


@pytest.fixture(scope="module")
def client() -> Generator[TestClient, None, None]:
    with TestClient(app) as c:
        yield c


@pytest.fixture
def small_config() -> SimConfig:
    return make_config(ProtocolId.MCD)
