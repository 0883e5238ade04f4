import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from mrcqtdiff.cqt import build_multires_filterbank, paper_multires_spec
from mrcqtdiff.gradsuite import toy_spec

PAPER_LENGTH = 2**18
TOY_LENGTH = 16384


@pytest.fixture(autouse=True, scope="session")
def single_thread():
    """Pin BLAS to one thread so results are reproducible bit for bit."""
    with threadpool_limits(1):
        yield


@pytest.fixture(scope="session")
def paper_bank():
    return build_multires_filterbank(paper_multires_spec(), PAPER_LENGTH)


@pytest.fixture(scope="session")
def toy_bank():
    return build_multires_filterbank(toy_spec(), TOY_LENGTH)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
