import numpy as np
import pytest

from jumphom.environment import (
    EnvironmentSpec,
    constant_profile,
    random_profile,
)
from jumphom.kernels import DispersalKernel, periodize


@pytest.fixture(scope="session")
def gaussian_kernel():
    return DispersalKernel("gaussian", dim=1, width=0.25)


@pytest.fixture(scope="session")
def shifted_kernel():
    return DispersalKernel("shifted_gaussian", dim=1, width=0.25, center=(0.3,))


@pytest.fixture(scope="session")
def bump_kernel():
    return DispersalKernel("compact_bump", dim=1, width=0.6, center=(0.1,))


@pytest.fixture(scope="session")
def moments8(shifted_kernel):
    return periodize(shifted_kernel, 8)


@pytest.fixture(scope="session")
def symmetric_spec():
    rng = np.random.default_rng(2024)
    profiles = tuple(
        random_profile(rng, 0.7, 1.3, symmetric=True, n_terms=2) for _ in range(2)
    )
    return EnvironmentSpec(
        "markov_switching", profiles, 0.7, 1.3, seed=11, switching_rate=1.0
    )


@pytest.fixture(scope="session")
def asymmetric_spec():
    rng = np.random.default_rng(77)
    profiles = tuple(random_profile(rng, 0.7, 1.3, n_terms=3) for _ in range(2))
    return EnvironmentSpec(
        "markov_switching", profiles, 0.7, 1.3, seed=5, switching_rate=1.0
    )


@pytest.fixture(scope="session")
def constant_spec():
    return EnvironmentSpec(
        "constant_in_time", (constant_profile(0.9),), 0.5, 1.5, seed=3
    )


@pytest.fixture(scope="session")
def two_state_spec():
    # constant-in-space profiles: the drift is a plain 2-state functional
    return EnvironmentSpec(
        "markov_switching",
        (constant_profile(0.6), constant_profile(1.4)),
        0.5,
        1.5,
        seed=123,
        switching_rate=2.0,
    )


@pytest.fixture(scope="session")
def product_spec():
    return EnvironmentSpec(
        "product_scalar",
        (constant_profile(1.0),),
        0.4,
        1.9,
        seed=19,
        switching_rate=1.0,
        lambda_values=(0.5, 1.5),
    )
