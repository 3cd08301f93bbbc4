"""
Seeded random instances for checking the approximation guarantee.
"""
import math
from typing import *

import attr
import numpy as np
import structlog

from externreg.approx import approx_routine, guarantee_ratios
from externreg.enumerations import ApproxBranch
from externreg.model import Policy, evaluate, response_arrays
from externreg.population import DiscreteDistribution, Population

LOG = structlog.get_logger()

MAX_ATOMS_PER_AXIS = 4
PROFIT_RATIO_BOUND = 1.0 / 8.0
EXTERNALITY_RATIO_BOUND = 40.0 / 3.0
SLACK = 1e-9


def _random_distribution(rng: np.random.Generator, low: float, high: float) -> DiscreteDistribution:
    size = int(rng.integers(1, MAX_ATOMS_PER_AXIS + 1))
    points = rng.uniform(low, high, size)
    probs = rng.dirichlet(np.ones(size))
    # keep every atom clear of zero probability
    probs = np.maximum(probs, 1e-6)
    probs = probs / probs.sum()
    return DiscreteDistribution.from_atoms(zip(points, probs))


def random_population(rng: np.random.Generator) -> Population:
    """At most 4 x 4 atoms, values in [0.01, 10] and efficiencies in [0, 10]."""
    values = _random_distribution(rng, 0.01, 10.0)
    efficiencies = _random_distribution(rng, 0.0, 10.0)
    return Population(values, efficiencies)


def random_policy(rng: np.random.Generator, pop: Population, attempts: int = 100) -> Optional[Policy]:
    """
    A policy with p > c under which somebody buys: the price sits strictly between
    c and the highest post-value. Returns None when no draw leaves any margin.
    """
    values, effs, _ = pop.joint_arrays()
    for _ in range(attempts):
        fine = 0.0 if rng.random() < 0.2 else float(np.exp(rng.uniform(math.log(1e-2), math.log(1e2))))
        cost = float(rng.uniform(0.0, 4.0))
        _, _, loss = response_arrays(effs, fine, cost)
        top = float(np.max(values - loss))
        if top - cost > 1e-6:
            price = cost + float(rng.uniform(0.05, 1.0)) * (top - cost)
            return Policy(fine=fine, cost=cost, price=price)
    return None


@attr.s(auto_attribs=True, frozen=True)
class TrialResult:
    seed: int
    population: Population
    policy: Policy
    output: Policy
    branch: ApproxBranch
    profit_ratio: float
    externality_ratio: float

    @property
    def simple(self) -> bool:
        return self.output.is_simple

    @property
    def passed(self) -> bool:
        return (
            self.simple
            and self.profit_ratio >= PROFIT_RATIO_BOUND - SLACK
            and self.externality_ratio <= EXTERNALITY_RATIO_BOUND + SLACK
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "population": self.population.to_dict(),
            "policy": self.policy.to_dict(),
            "output": self.output.to_dict(),
            "branch": self.branch.value,
            "profit_ratio": self.profit_ratio,
            "externality_ratio": self.externality_ratio,
            "passed": self.passed,
        }


def run_trial(seed: int) -> Optional[TrialResult]:
    rng = np.random.default_rng(seed)
    pop = random_population(rng)
    policy = random_policy(rng, pop)
    if policy is None or evaluate(pop, policy).sale_prob <= 0:
        return None
    output, trace = approx_routine(pop, policy)
    profit_ratio, externality_ratio = guarantee_ratios(pop, policy, output)
    result = TrialResult(
        seed=seed,
        population=pop,
        policy=policy,
        output=output,
        branch=trace.branch,
        profit_ratio=profit_ratio,
        externality_ratio=externality_ratio,
    )
    if not result.passed:
        LOG.warning("Guarantee violated", trial=result.to_dict(), trace=trace.to_dict())
    return result


def run_guarantee_trials(trials: int, seed: int) -> List[TrialResult]:
    """
    Tries seeds seed, seed + 1, ... in turn until `trials` usable draws are found.
    Each result keeps the seed that replays it through `run_trial`.
    """
    results = []
    offset = 0
    while len(results) < trials:
        result = run_trial(seed + offset)
        offset += 1
        if result is not None:
            results.append(result)
    LOG.info(
        "Guarantee trials finished",
        trials=trials,
        failures=sum(not result.passed for result in results),
    )
    return results
