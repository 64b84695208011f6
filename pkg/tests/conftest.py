import pytest

from hybrid_pomdp.domains import assembly_domain, walled_domain


@pytest.fixture(scope="session")
def walled():
    return walled_domain()


@pytest.fixture(scope="session")
def assembly():
    return assembly_domain()


@pytest.fixture(scope="session")
def walled_sticky():
    return walled_domain(contact="sticky")
