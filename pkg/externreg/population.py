import json
import math
import re
from typing import *

import attr
import numpy as np
import structlog

from externreg.exceptions import (
    InfeasibleInstanceError,
    InvalidDistributionError,
    InvalidRangeError,
    ParseError,
    PopulationTooLargeError,
)

LOG = structlog.get_logger()

PROBABILITY_TOLERANCE = 1e-12
FEASIBILITY_TOLERANCE = 1e-9
MAX_JOINT_ATOMS = 10_000

uniform_pattern = re.compile(r"^uniform:([^,]+),([^,]+),(\d+)$")
point_pattern = re.compile(r"^point:([^,]+)$")
atoms_pattern = re.compile(r"^atoms:(.+)$")


def _merge_atoms(pairs: Iterable[Tuple[float, float]]) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    merged: Dict[float, float] = {}
    for point, prob in pairs:
        point = float(point)
        prob = float(prob)
        if not math.isfinite(point) or point < 0:
            raise InvalidDistributionError(
                f"Atoms must sit on finite nonnegative points. Got {point!r}"
            )
        if not math.isfinite(prob) or prob <= 0:
            raise InvalidDistributionError(
                f"Atom probabilities must be positive. Got {prob!r} at {point!r}"
            )
        merged[point] = merged.get(point, 0.0) + prob

    points = tuple(sorted(merged))
    return points, tuple(merged[point] for point in points)


def _as_float_tuple(items: Iterable[float]) -> Tuple[float, ...]:
    return tuple(float(item) for item in items)


@attr.s(auto_attribs=True, frozen=True)
class DiscreteDistribution:
    """
    A finite distribution on the nonnegative reals, kept in canonical form: points
    strictly increasing and every probability positive.

    Use `from_atoms` to build one from unsorted pairs, duplicate points are merged.
    """

    points: Tuple[float, ...] = attr.ib(converter=_as_float_tuple)
    probs: Tuple[float, ...] = attr.ib(converter=_as_float_tuple)

    def __attrs_post_init__(self):
        if not self.points:
            raise InvalidDistributionError("A distribution needs at least one atom")
        if len(self.points) != len(self.probs):
            raise InvalidDistributionError(
                f"Got {len(self.points)} points but {len(self.probs)} probabilities"
            )
        for point in self.points:
            if not math.isfinite(point) or point < 0:
                raise InvalidDistributionError(
                    f"Atoms must sit on finite nonnegative points. Got {point!r}"
                )
        for low, high in zip(self.points, self.points[1:]):
            if not low < high:
                raise InvalidDistributionError(
                    f"Points must be strictly increasing. {low!r} is followed by {high!r}"
                )
        if any(not prob > 0 for prob in self.probs):
            raise InvalidDistributionError("All atom probabilities must be positive")
        total = math.fsum(self.probs)
        if abs(total - 1.0) > PROBABILITY_TOLERANCE:
            raise InvalidDistributionError(
                f"Probabilities must sum to 1. They sum to {total!r}"
            )

    @classmethod
    def from_atoms(cls, pairs: Iterable[Tuple[float, float]]) -> "DiscreteDistribution":
        points, probs = _merge_atoms(pairs)
        return cls(points=points, probs=probs)

    @classmethod
    def point_mass(cls, point: float) -> "DiscreteDistribution":
        return cls(points=(float(point),), probs=(1.0,))

    @classmethod
    def from_string(cls, text: str) -> "DiscreteDistribution":
        """
        Parses the command line shorthand for a distribution:

            uniform:lo,hi,n     n midpoint atoms on [lo, hi]
            point:x             point mass at x
            atoms:x1@p1,x2@p2   explicit atoms
        """
        text = text.strip()
        try:
            uniform_match = re.match(uniform_pattern, text)
            if uniform_match:
                lo, hi, n = uniform_match.groups()
                return discretize_uniform(float(lo), float(hi), int(n))
            point_match = re.match(point_pattern, text)
            if point_match:
                return cls.point_mass(float(point_match.group(1)))
            atoms_match = re.match(atoms_pattern, text)
            if atoms_match:
                pairs = []
                for item in atoms_match.group(1).split(","):
                    point, prob = item.split("@")
                    pairs.append((float(point), float(prob)))
                return cls.from_atoms(pairs)
        except ValueError as e:
            if isinstance(e, (InvalidDistributionError, InvalidRangeError)):
                raise
            raise ParseError(f"Could not parse distribution {text!r}: {e}") from e

        raise ParseError(
            f"Could not parse distribution {text!r}. Expected uniform:lo,hi,n, "
            f"point:x or atoms:x1@p1,x2@p2"
        )

    @property
    def atoms(self) -> List[Tuple[float, float]]:
        return list(zip(self.points, self.probs))

    @property
    def point_array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float)

    @property
    def prob_array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=float)

    @property
    def max_point(self) -> float:
        return self.points[-1]

    def tail_probabilities(self) -> np.ndarray:
        """Pr[X >= point_i] for every atom, aligned with `points`."""
        return np.cumsum(self.prob_array[::-1])[::-1]

    def survival(self, x: float) -> float:
        """Pr[X >= x]"""
        return math.fsum(prob for point, prob in self.atoms if point >= x)

    def mean(self) -> float:
        return math.fsum(point * prob for point, prob in self.atoms)

    def to_dicts(self, key: str) -> List[Dict[str, float]]:
        return [{key: point, "prob": prob} for point, prob in self.atoms]

    @classmethod
    def from_dicts(cls, items: List[Dict[str, Any]], key: str) -> "DiscreteDistribution":
        try:
            return cls.from_atoms((item[key], item["prob"]) for item in items)
        except InvalidDistributionError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(
                f"Atoms must be objects with fields {key!r} and 'prob': {e}"
            ) from e


def discretize_uniform(lo: float, hi: float, n: int) -> DiscreteDistribution:
    """
    Midpoint discretization of the uniform distribution on [lo, hi] into n equally
    likely atoms.
    """
    if not lo < hi:
        raise InvalidRangeError(f"Need lo < hi for a uniform range. Got [{lo}, {hi}]")
    if lo < 0:
        raise InvalidRangeError(f"Uniform ranges must be nonnegative. Got lo={lo}")
    if n < 1:
        raise InvalidRangeError(f"Need at least one atom. Got n={n}")

    width = (hi - lo) / n
    points = [lo + (i + 0.5) * width for i in range(n)]
    return DiscreteDistribution(points=points, probs=[1.0 / n] * n)


def dominates(d: DiscreteDistribution, d2: DiscreteDistribution) -> bool:
    """
    First order stochastic dominance: Pr_d[X >= x] >= Pr_d2[X >= x] for every x.

    Both survival functions are constant between consecutive support points, so it
    is enough to compare them on the union of the supports.
    """
    for x in sorted(set(d.points) | set(d2.points)):
        if d.survival(x) < d2.survival(x) - PROBABILITY_TOLERANCE:
            return False
    return True


@attr.s(auto_attribs=True, frozen=True)
class Population:
    """
    The buyer population D_v x D_k. Values and efficiencies are independent so the
    joint distribution is the product of the two marginals.
    """

    values: DiscreteDistribution
    efficiencies: DiscreteDistribution

    def __attrs_post_init__(self):
        if self.size > MAX_JOINT_ATOMS:
            raise PopulationTooLargeError(
                f"The joint population has {self.size} atoms. At most "
                f"{MAX_JOINT_ATOMS} are supported"
            )

    @property
    def size(self) -> int:
        return len(self.values.points) * len(self.efficiencies.points)

    @property
    def shape(self) -> Tuple[int, int]:
        return len(self.values.points), len(self.efficiencies.points)

    def joint_arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Values, efficiencies and probabilities of the joint atoms as flat arrays in
        (value-ascending, efficiency-ascending) lexicographic order.
        """
        n_values, n_effs = self.shape
        values = np.repeat(self.values.point_array, n_effs)
        effs = np.tile(self.efficiencies.point_array, n_values)
        probs = np.outer(self.values.prob_array, self.efficiencies.prob_array).ravel()
        return values, effs, probs

    def with_efficiencies(self, efficiencies: DiscreteDistribution) -> "Population":
        return attr.evolve(self, efficiencies=efficiencies)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "values": self.values.to_dicts("v"),
            "efficiencies": self.efficiencies.to_dicts("k"),
        }


def product_atoms(pop: Population) -> List[Tuple[Tuple[float, float], float]]:
    return [
        ((value, eff), value_prob * eff_prob)
        for value, value_prob in pop.values.atoms
        for eff, eff_prob in pop.efficiencies.atoms
    ]


def unregulated_profit(values: DiscreteDistribution) -> float:
    """Best profit of an unregulated seller, max over prices of p * Pr[v >= p]."""
    return float(np.max(values.point_array * values.tail_probabilities()))


def _positive_floor(instance, attribute, value: float):
    if not (math.isfinite(value) and value > 0):
        raise InvalidRangeError(f"The profit floor must be positive. Got {value!r}")


@attr.s(auto_attribs=True, frozen=True)
class Instance:
    """A population together with the profit floor R a regulation must preserve."""

    population: Population
    profit_floor: float = attr.ib(converter=float, validator=[_positive_floor])

    def __attrs_post_init__(self):
        best = unregulated_profit(self.population.values)
        if self.profit_floor > best + FEASIBILITY_TOLERANCE:
            raise InfeasibleInstanceError(
                f"Profit floor {self.profit_floor!r} exceeds the unregulated optimum "
                f"{best!r}. No regulation can keep the seller above it."
            )

    def to_dict(self) -> Dict[str, Any]:
        data = self.population.to_dict()
        data["profit_floor"] = self.profit_floor
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Instance":
        try:
            values = DiscreteDistribution.from_dicts(data["values"], "v")
            efficiencies = DiscreteDistribution.from_dicts(data["efficiencies"], "k")
            raw_floor = data["profit_floor"]
        except (KeyError, TypeError) as e:
            raise ParseError(f"Instance is missing a field or has a bad type: {e}") from e
        try:
            floor = float(raw_floor)
        except (TypeError, ValueError) as e:
            raise ParseError(f"profit_floor must be a number. Got {raw_floor!r}") from e
        return cls(
            population=Population(values=values, efficiencies=efficiencies),
            profit_floor=floor,
        )

    @classmethod
    def from_json(cls, text: str) -> "Instance":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(f"Instance is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ParseError("Instance JSON must be an object")
        return cls.from_dict(data)
