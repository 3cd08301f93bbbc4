import math

import pytest

from externreg import casebook
from externreg.population import DiscreteDistribution, Instance, Population


@pytest.fixture()
def two_values() -> DiscreteDistribution:
    return DiscreteDistribution.from_atoms([(1.0, 0.5), (16.0 / 15.0, 0.5)])


@pytest.fixture()
def new_example() -> Instance:
    return casebook.new_example_instance(1e6)


@pytest.fixture()
def lower_bound_example() -> Instance:
    return casebook.lower_bound_instance(4.0)


@pytest.fixture()
def profits_max_population() -> Population:
    return casebook.profits_max_population()


@pytest.fixture()
def non_monotone_population() -> Population:
    return Population(
        DiscreteDistribution.point_mass(math.e),
        DiscreteDistribution.from_atoms([(0.0, 0.5), (2.0, 0.5)]),
    )


@pytest.fixture()
def small_population() -> Population:
    return Population(
        DiscreteDistribution.from_atoms([(1.0, 0.5), (2.0, 0.5)]),
        DiscreteDistribution.from_atoms([(0.5, 0.5), (3.0, 0.5)]),
    )


@pytest.fixture()
def small_instance(small_population) -> Instance:
    return Instance(small_population, profit_floor=0.8)
