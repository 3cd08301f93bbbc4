"""
Worked examples and counterexamples of the regulation model, rebuilt as instances
and checked numerically. Every case returns a `CaseReport` with one `CaseCheck`
per claim.
"""
import math
from typing import *

import attr
import structlog

from externreg.exceptions import PreconditionError, UnknownCaseError
from externreg.model import Policy, evaluate
from externreg.population import DiscreteDistribution, Instance, Population
from externreg.simple_opt import (
    SolverConfig,
    best_cost_policy,
    best_fine_policy,
    best_fine_policy_for_set,
    best_general_policy,
    c_star,
    cutoff_t,
    inv_transform,
)
from externreg.stackelberg import (
    best_response_policy,
    purchase_set,
    revenue_table,
    seller_best_price,
    stackelberg_evaluate,
    y_of_k,
)

LOG = structlog.get_logger()

# Inequality claims are checked with this slack, equalities with their own tolerance.
SLACK = 1e-9


@attr.s(auto_attribs=True, frozen=True)
class CaseCheck:
    label: str
    relation: str
    computed: Any
    bound: Any
    passed: bool

    def to_dict(self) -> Dict[str, Any]:
        return attr.asdict(self)

    def describe(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.label}: {self.computed!r} {self.relation} {self.bound!r}"


@attr.s(auto_attribs=True, frozen=True)
class CaseReport:
    case_name: str
    checks: Tuple[CaseCheck, ...] = attr.ib(converter=tuple)

    @property
    def all_pass(self) -> bool:
        return all(check.passed for check in self.checks)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "case": self.case_name,
            "all_pass": self.all_pass,
            "checks": [check.to_dict() for check in self.checks],
        }


def at_least(label: str, computed: float, bound: float, slack: float = SLACK) -> CaseCheck:
    return CaseCheck(label, ">=", computed, bound, computed >= bound - slack)


def at_most(label: str, computed: float, bound: float, slack: float = SLACK) -> CaseCheck:
    return CaseCheck(label, "<=", computed, bound, computed <= bound + slack)


def strictly_above(label: str, computed: float, bound: float) -> CaseCheck:
    return CaseCheck(label, ">", computed, bound, computed > bound)


def strictly_below(label: str, computed: float, bound: float) -> CaseCheck:
    return CaseCheck(label, "<", computed, bound, computed < bound)


def close_to(label: str, computed: float, expected: float, tolerance: float) -> CaseCheck:
    return CaseCheck(
        label, f"== (tol {tolerance:g})", computed, expected, abs(computed - expected) <= tolerance
    )


def equals(label: str, computed: Any, expected: Any) -> CaseCheck:
    return CaseCheck(label, "==", computed, expected, computed == expected)


def case_non_monotone(x: float = 2.0) -> CaseReport:
    """
    Upgrading the worst buyers from k = 0 to k = 1 raises the externality, because
    the upgraded buyers start purchasing.
    """
    if not x > 1:
        raise PreconditionError(f"The non-monotone example needs x > 1. Got {x}")
    values = DiscreteDistribution.point_mass(math.e)
    s = Policy(fine=math.e, cost=0.0, price=math.e - 2.5)

    before = evaluate(Population(values, DiscreteDistribution.from_atoms([(0.0, 0.5), (x, 0.5)])), s)
    after = evaluate(Population(values, DiscreteDistribution.from_atoms([(1.0, 0.5), (x, 0.5)])), s)
    expected_before = 1.0 / (math.e * x)
    expected_after = (1.0 / math.e + 1.0 / (math.e * x)) / 2.0

    return CaseReport(
        "non-monotone",
        [
            equals("k=0 buyers stay out", before.per_atom[0].outcome.purchase_fraction, 0.0),
            close_to("externality with k=0 buyers", before.externality, expected_before, 1e-12),
            close_to("externality with k=1 buyers", after.externality, expected_after, 1e-12),
            strictly_above("upgrading efficiency raises externality", after.externality, before.externality),
        ],
    )


def new_example_instance(x: float) -> Instance:
    values = DiscreteDistribution.from_atoms([(1.0, 0.5), (16.0 / 15.0, 0.5)])
    efficiencies = DiscreteDistribution.from_atoms([(3.0, 0.5), (x, 0.5)])
    return Instance(Population(values, efficiencies), profit_floor=0.5)


def case_new_example(x: float = 1e6) -> CaseReport:
    """
    Every simple policy is beaten by a policy mixing a fine with mandated
    security, and that policy is not the seller's profit maximizing one.
    """
    if x < 100 or (math.log(x) + 1.0) / x > 1.0 / 3.0:
        raise PreconditionError(f"The example needs x >= 100 and (ln x + 1)/x <= 1/3. Got {x}")
    instance = new_example_instance(x)
    pop = instance.population
    config = SolverConfig()

    everyone = [(v, k) for v in pop.values.points for k in pop.efficiencies.points]
    all_four = best_fine_policy_for_set(instance, everyone, config)
    best_fine = best_fine_policy(instance, config)

    eps = (math.log(x) + 1.0) / x
    cost = 1.0 / 3.0 - eps
    mixed = Policy(fine=(0.4 - cost) * math.exp(cost), cost=cost, price=2.0 / 3.0 + cost)
    mixed_outcome = evaluate(pop, mixed)
    expected = 2.0 / (3.0 * mixed.fine * x) + math.exp(-1.0 / 3.0 + eps) / 3.0
    fine_floor = math.exp(-0.2) / 3.0

    cheaper = attr.evolve(mixed, price=0.6 + cost)
    cheaper_profit = evaluate(pop, cheaper).profit

    return CaseReport(
        "new-example",
        [
            close_to("largest affordable security c*", c_star(pop.values, 0.5), 0.5, 1e-12),
            close_to("cutoff 1 + 1/c*", cutoff_t(pop.values, 0.5).value, 3.0, 1e-12),
            at_least("fine policy selling to all four types", all_four.externality, 1.0 / (2.0 * math.sqrt(math.e))),
            at_least("optimal fine policy", best_fine.externality, fine_floor),
            close_to("mixed policy profit", mixed_outcome.profit, 0.5, SLACK),
            close_to("mixed policy externality", mixed_outcome.externality, expected, 1e-9),
            strictly_below("mixed policy beats every fine policy", mixed_outcome.externality, fine_floor),
            strictly_above("mixed policy externality limit", mixed_outcome.externality, math.exp(-1.0 / 3.0) / 3.0),
            close_to("price 3/5 + c profit", cheaper_profit, 0.6, SLACK),
            strictly_above("mixed policy is not profits maximizing", cheaper_profit, 0.5),
        ],
    )


def lower_bound_instance(x: float) -> Instance:
    v0 = 2.0 * math.exp(x / 2.0) * (x + math.exp(-x))
    efficiencies = DiscreteDistribution.from_atoms(
        [(0.0, math.exp(-x / 2.0)), (math.exp(x * math.exp(x / 2.0)), 1.0 - math.exp(-x / 2.0))]
    )
    return Instance(
        Population(DiscreteDistribution.point_mass(v0), efficiencies),
        profit_floor=v0 - math.exp(-x) - x,
    )


def case_lower_bound(x: float = 4.0) -> CaseReport:
    """
    A population where buyers either cannot protect themselves at all or protect
    themselves almost perfectly. Every simple policy is at least a factor x worse
    than the policy (1, x, R + x).
    """
    if not 2.0 <= x <= 8.0:
        raise PreconditionError(f"The lower bound example needs x in [2, 8]. Got {x}")
    instance = lower_bound_instance(x)
    pop = instance.population
    R = instance.profit_floor

    mixed = Policy(fine=1.0, cost=x, price=R + x)
    mixed_outcome = evaluate(pop, mixed)
    best_cost = best_cost_policy(instance)
    best_fine = best_fine_policy(instance)
    best_simple = min(best_cost.externality, best_fine.externality)

    return CaseReport(
        "lower-bound",
        [
            close_to("mixed policy profit", mixed_outcome.profit, R, SLACK),
            at_most(
                "mixed policy externality",
                mixed_outcome.externality,
                math.exp(-x / 2.0) * math.exp(-x) + math.exp(-x * math.exp(x / 2.0)),
            ),
            close_to("best cost policy externality", best_cost.externality, math.exp(-(x + math.exp(-x))), 1e-12),
            at_least("best cost policy", best_cost.externality, math.exp(-x - 1.0)),
            at_least("best fine policy", best_fine.externality, math.exp(-x / 2.0)),
            at_least("simple over mixed ratio", best_simple / mixed_outcome.externality, x),
        ],
    )


def profits_max_population() -> Population:
    return Population(
        DiscreteDistribution.from_atoms([(1.0, 0.5), (1.58, 0.5)]),
        DiscreteDistribution.from_atoms([(3.0, 0.5), (9.0, 0.5)]),
    )


def case_profits_max() -> CaseReport:
    """
    With a profit maximizing seller, lowering the fine can lower the externality,
    since the seller then prices to sell to more efficient buyers only.
    """
    pop = profits_max_population()
    low, high = y_of_k(3.0), 1.2 * y_of_k(3.0)
    t11, t12, t21, t22 = (1.0, 3.0), (1.0, 9.0), (1.58, 3.0), (1.58, 9.0)

    low_table, high_table = revenue_table(pop, low, 0.0), revenue_table(pop, high, 0.0)
    R = high_table.row_for(*t12).revenue
    low_outcome = stackelberg_evaluate(pop, low, 0.0)
    high_outcome = stackelberg_evaluate(pop, high, 0.0)

    point_k = pop.with_efficiencies(DiscreteDistribution.point_mass(3.0))
    _, point_profit = seller_best_price(point_k, low, 0.0)

    s = best_response_policy(pop, low, 0.0)
    tightened = inv_transform(s, 1.0 - 1e-3)
    tightened_price, tightened_profit = seller_best_price(pop, tightened.fine, tightened.cost)
    tightened_outcome = stackelberg_evaluate(pop, tightened.fine, tightened.cost)

    return CaseReport(
        "profits-max",
        [
            strictly_above("profit floor lower end", R, 0.51),
            strictly_below("profit floor upper end", R, 0.52),
            equals("type order at y(3)", low_table.order(), [t11, t12, t21, t22]),
            equals("type order at 1.2 y(3)", high_table.order(), [t11, t12, t21, t22]),
            strictly_above("r21 beats r12 at y(3)", low_table.row_for(*t21).revenue, low_table.row_for(*t12).revenue),
            strictly_above("r12 beats r21 at 1.2 y(3)", high_table.row_for(*t12).revenue, high_table.row_for(*t21).revenue),
            equals("buyers at y(3)", purchase_set(pop, low, 0.0), [t21, t22]),
            equals("buyers at 1.2 y(3)", purchase_set(pop, high, 0.0), [t12, t21, t22]),
            strictly_below("externality at y(3)", low_outcome.externality, 0.203),
            strictly_above("externality at 1.2 y(3)", high_outcome.externality, 0.21),
            close_to("fine y(3) profit with k=3 only", point_profit, 0.54, 1e-9),
            at_least("fine y(3) is feasible with k=3 only", point_profit, R),
            at_least("tightened policy keeps the profit floor", tightened_profit, R),
            at_least("tightened price does not drop", tightened_price, s.price),
            strictly_below("tightened policy lowers externality", tightened_outcome.externality, low_outcome.externality),
        ],
    )


def case_cutoff(config: Optional[SolverConfig] = None) -> CaseReport:
    """
    With point mass efficiencies the optimal policy is simple: mandated security
    below the cutoff, a fine above it.
    """
    config = config or SolverConfig()
    values = DiscreteDistribution.from_atoms([(1.0, 0.5), (16.0 / 15.0, 0.5)])
    cutoff = cutoff_t(values, 0.5).value
    checks = []
    for k in (2.9, 3.1):
        instance = Instance(Population(values, DiscreteDistribution.point_mass(k)), 0.5)
        cost = best_cost_policy(instance, config)
        fine = best_fine_policy(instance, config)
        general = best_general_policy(instance, config)
        expected = cost if k <= cutoff else fine
        name = "cost" if k <= cutoff else "fine"
        checks.append(close_to(f"k={k} general matches best {name}", general.externality, expected.externality, 1e-3))
        checks.append(
            at_most(f"k={k} best {name} is the better simple policy", expected.externality, min(cost.externality, fine.externality))
        )
    return CaseReport("cutoff", checks)


CASES: Dict[str, Callable[..., CaseReport]] = {
    "non-monotone": case_non_monotone,
    "new-example": case_new_example,
    "lower-bound": case_lower_bound,
    "profits-max": case_profits_max,
    "cutoff": case_cutoff,
}

# cases taking the example parameter x
PARAMETRIZED = {"non-monotone", "new-example", "lower-bound"}


def run_case(name: str, x: Optional[float] = None) -> CaseReport:
    try:
        case = CASES[name]
    except KeyError as e:
        raise UnknownCaseError(f"Unknown case {name!r}. Known cases: {', '.join(CASES)}") from e
    if x is not None and name in PARAMETRIZED:
        report = case(x)
    else:
        report = case()
    LOG.info("Case finished", case=name, all_pass=report.all_pass)
    return report


def run_all() -> List[CaseReport]:
    return [run_case(name) for name in CASES]
