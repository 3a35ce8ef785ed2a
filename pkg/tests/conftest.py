import pytest

from hebundle.geometry import build_quadrature


@pytest.fixture(scope="session")
def rule16():
    return build_quadrature(16, 16)


@pytest.fixture(scope="session")
def rule24():
    return build_quadrature(24, 24)


@pytest.fixture(scope="session")
def rule64():
    return build_quadrature(64, 64)
