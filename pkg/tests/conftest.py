from __future__ import annotations

import numpy as np
import pytest

from coarsekit.dgp import DgpSpec, oracle_nuisances, population_quantile_binning, sample_dataset


@pytest.fixture(scope="session")
def spec():
    return DgpSpec()


@pytest.fixture(scope="session")
def scheme2(spec):
    return population_quantile_binning(spec, 2)


@pytest.fixture(scope="session")
def scheme4(spec):
    return population_quantile_binning(spec, 4)


@pytest.fixture(scope="session")
def scheme6(spec):
    return population_quantile_binning(spec, 6)


@pytest.fixture(scope="session")
def oracle6(spec, scheme6):
    return oracle_nuisances(spec, scheme6)


@pytest.fixture(scope="session")
def oracle4(spec, scheme4):
    return oracle_nuisances(spec, scheme4)


@pytest.fixture(scope="session")
def data5000(spec):
    return sample_dataset(spec, 5000, 20240)


@pytest.fixture(scope="session")
def data50k(spec):
    return sample_dataset(spec, 50_000, 777)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
