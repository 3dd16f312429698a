import numpy as np
import pytest

from fivo.models import ConjugateIndependenceModel, LgssmParams, LinearGaussianSSM
from fivo.numerics import RngStream


@pytest.fixture
def lgssm():
    return LinearGaussianSSM(LgssmParams(a=0.9, transition_var=1.0, c=1.0, emission_var=1.0, initial_var=1.0))


@pytest.fixture
def lgssm_data(lgssm):
    x, _ = lgssm.sample(6, RngStream(11).split("data"), 1)
    return x[0]


@pytest.fixture
def conj():
    return ConjugateIndependenceModel(b=0.3, k=0.5, prior_var=1.5, emission_var=0.7)


@pytest.fixture
def conj_data(conj):
    x, _ = conj.sample(6, RngStream(12).split("data"), 1)
    return x[0]


def assert_close(a, b, tol):
    assert np.all(np.abs(np.asarray(a) - np.asarray(b)) <= tol), (a, b)
