import numpy as np
import pytest

from stabilab.spectral_basis import RectDomain, build_basis
from stabilab.stabilizer_design import assemble_design


@pytest.fixture(scope="session")
def basis40():
    return build_basis(RectDomain.aspect_sqrt2(40), 40)


@pytest.fixture(scope="session")
def design40(basis40):
    return assemble_design(basis40, c=5.0, rho=2.0, alpha=0.1)


@pytest.fixture(scope="session")
def basis25():
    return build_basis(RectDomain.aspect_sqrt2(25), 25)


@pytest.fixture(scope="session")
def design25(basis25):
    return assemble_design(basis25, c=5.0, rho=2.0, alpha=0.1)


@pytest.fixture(scope="session")
def square_basis():
    return build_basis(RectDomain.for_modes(np.pi, np.pi, 30), 30)
