import json
import math

import numpy as np
import pytest

from externreg.exceptions import (
    InfeasibleInstanceError,
    InvalidDistributionError,
    InvalidRangeError,
    ParseError,
    PopulationTooLargeError,
)
from externreg.population import (
    DiscreteDistribution,
    Instance,
    Population,
    discretize_uniform,
    dominates,
    product_atoms,
    unregulated_profit,
)


class TestDiscreteDistribution:
    def test_from_atoms_sorts_and_merges(self):
        dist = DiscreteDistribution.from_atoms([(2.0, 0.25), (1.0, 0.5), (2.0, 0.25)])
        assert dist.points == (1.0, 2.0)
        assert dist.probs == (0.5, 0.5)

    @pytest.mark.parametrize(
        "points,probs",
        [
            ((), ()),
            ((1.0, 2.0), (1.0,)),
            ((1.0, 2.0), (0.5, 0.4)),
            ((-1.0,), (1.0,)),
            ((math.inf,), (1.0,)),
            ((2.0, 1.0), (0.5, 0.5)),
            ((1.0, 1.0), (0.5, 0.5)),
            ((1.0, 2.0), (1.0, 0.0)),
        ],
    )
    def test_invalid_distribution_raises(self, points, probs):
        with pytest.raises(InvalidDistributionError):
            DiscreteDistribution(points=points, probs=probs)

    def test_invalid_distribution_is_value_error(self):
        with pytest.raises(ValueError):
            DiscreteDistribution.from_atoms([(1.0, 0.3)])

    @pytest.mark.parametrize(
        "text,expected",
        [
            ("point:3", DiscreteDistribution(points=(3.0,), probs=(1.0,))),
            ("atoms:1@0.5,2@0.5", DiscreteDistribution(points=(1.0, 2.0), probs=(0.5, 0.5))),
            ("atoms:2@0.5, 1@0.5", DiscreteDistribution(points=(1.0, 2.0), probs=(0.5, 0.5))),
            (
                "uniform:0,20,4",
                DiscreteDistribution(points=(2.5, 7.5, 12.5, 17.5), probs=(0.25,) * 4),
            ),
        ],
    )
    def test_from_string(self, text: str, expected: DiscreteDistribution):
        assert DiscreteDistribution.from_string(text) == expected

    @pytest.mark.parametrize("text", ["normal:0,1", "point:abc", "atoms:1@x", "atoms:1", ""])
    def test_non_parsable_raises_parse_error(self, text: str):
        with pytest.raises(ParseError):
            DiscreteDistribution.from_string(text)

    def test_from_string_keeps_range_errors(self):
        with pytest.raises(InvalidRangeError):
            DiscreteDistribution.from_string("uniform:5,1,3")

    def test_from_string_keeps_distribution_errors(self):
        with pytest.raises(InvalidDistributionError):
            DiscreteDistribution.from_string("atoms:1@0.3")

    def test_tail_probabilities(self):
        dist = DiscreteDistribution.from_atoms([(1.0, 0.25), (2.0, 0.25), (3.0, 0.5)])
        assert list(dist.tail_probabilities()) == [1.0, 0.75, 0.5]

    @pytest.mark.parametrize("x,expected", [(0.0, 1.0), (1.0, 1.0), (1.5, 0.75), (3.0, 0.5), (3.1, 0.0)])
    def test_survival(self, x: float, expected: float):
        dist = DiscreteDistribution.from_atoms([(1.0, 0.25), (2.0, 0.25), (3.0, 0.5)])
        assert dist.survival(x) == expected

    def test_dicts_round_trip(self):
        dist = DiscreteDistribution.from_atoms([(1.0, 0.25), (3.0, 0.75)])
        assert DiscreteDistribution.from_dicts(dist.to_dicts("v"), "v") == dist

    def test_from_dicts_missing_key_raises_parse_error(self):
        with pytest.raises(ParseError):
            DiscreteDistribution.from_dicts([{"value": 1.0, "prob": 1.0}], "v")


class TestDiscretizeUniform:
    def test_midpoints(self):
        dist = discretize_uniform(0, 20, 4)
        assert dist.points == (2.5, 7.5, 12.5, 17.5)
        assert dist.probs == (0.25, 0.25, 0.25, 0.25)

    def test_single_cell(self):
        assert discretize_uniform(0, 1, 1) == DiscreteDistribution.point_mass(0.5)

    def test_mean(self):
        assert discretize_uniform(0, 20, 200).mean() == pytest.approx(10.0, abs=1e-12)

    @pytest.mark.parametrize("lo,hi,n", [(1.0, 1.0, 3), (2.0, 1.0, 3), (-1.0, 1.0, 3), (0.0, 1.0, 0)])
    def test_invalid_range_raises(self, lo, hi, n):
        with pytest.raises(InvalidRangeError):
            discretize_uniform(lo, hi, n)


class TestDominates:
    def test_shifted_point_mass(self):
        assert dominates(DiscreteDistribution.point_mass(3), DiscreteDistribution.point_mass(2))
        assert not dominates(DiscreteDistribution.point_mass(2), DiscreteDistribution.point_mass(3))

    def test_reflexive(self):
        dist = DiscreteDistribution.from_atoms([(1.0, 0.5), (5.0, 0.5)])
        assert dominates(dist, dist)

    def test_direct_comparison(self):
        d = DiscreteDistribution.from_atoms([(1.0, 0.5), (5.0, 0.5)])
        d2 = DiscreteDistribution.from_atoms([(0.0, 0.5), (5.0, 0.5)])
        assert dominates(d, d2)
        assert not dominates(d2, d)

    def test_transitive_on_random_triples(self):
        rng = np.random.default_rng(7)

        def draw() -> DiscreteDistribution:
            size = int(rng.integers(1, 4))
            points = rng.integers(0, 5, size).astype(float)
            probs = rng.dirichlet(np.ones(size))
            return DiscreteDistribution.from_atoms(zip(points, probs / probs.sum()))

        for _ in range(300):
            a, b, c = draw(), draw(), draw()
            assert dominates(a, a)
            if dominates(a, b) and dominates(b, c):
                assert dominates(a, c)


class TestPopulation:
    def test_product_of_point_masses(self):
        pop = Population(DiscreteDistribution.point_mass(2), DiscreteDistribution.point_mass(3))
        assert product_atoms(pop) == [((2.0, 3.0), 1.0)]

    def test_product_order_and_probabilities(self, new_example):
        atoms = product_atoms(new_example.population)
        assert [t for t, _ in atoms] == [(1.0, 3.0), (1.0, 1e6), (16.0 / 15.0, 3.0), (16.0 / 15.0, 1e6)]
        assert [prob for _, prob in atoms] == [0.25] * 4

    def test_product_probabilities_sum_to_one(self, small_population):
        assert math.fsum(prob for _, prob in product_atoms(small_population)) == pytest.approx(1.0, abs=1e-12)

    def test_joint_arrays_match_product_atoms(self, small_population):
        values, effs, probs = small_population.joint_arrays()
        atoms = product_atoms(small_population)
        assert list(zip(values, effs)) == [t for t, _ in atoms]
        assert list(probs) == [prob for _, prob in atoms]

    def test_too_large_raises(self):
        with pytest.raises(PopulationTooLargeError):
            Population(discretize_uniform(0, 1, 101), discretize_uniform(0, 1, 100))


class TestInstance:
    def test_unregulated_profit(self, two_values):
        assert unregulated_profit(two_values) == 1.0

    def test_floor_above_optimum_is_infeasible(self, two_values):
        with pytest.raises(InfeasibleInstanceError):
            Instance(Population(two_values, DiscreteDistribution.point_mass(3)), 1.1)

    @pytest.mark.parametrize("floor", [0.0, -1.0, math.nan])
    def test_nonpositive_floor_raises(self, two_values, floor):
        with pytest.raises(InvalidRangeError):
            Instance(Population(two_values, DiscreteDistribution.point_mass(3)), floor)

    def test_json_round_trip(self, small_instance):
        assert Instance.from_json(json.dumps(small_instance.to_dict())) == small_instance

    @pytest.mark.parametrize(
        "text",
        [
            "{not json",
            "[1, 2]",
            '{"values": [{"v": 1, "prob": 1}], "efficiencies": [{"k": 1, "prob": 1}]}',
            '{"values": [{"v": 1, "prob": 1}], "efficiencies": [{"k": 1, "prob": 1}], "profit_floor": "a"}',
        ],
    )
    def test_bad_json_raises_parse_error(self, text):
        with pytest.raises(ParseError):
            Instance.from_json(text)
