"""
Turning an arbitrary policy into a simple one that keeps an eighth of the profit
and at most 40/3 times the externality.

`approx_routine` splits the purchasers of s by how they respond to the fine and
either shifts all regulation into mandated security (`cost1`) or hands s to
`fine_routine`, which chooses between an inflated fine (`blowup`), a heavy cost
policy (`heavy`) and a family of cost policies indexed by a risk level x (`cost3`).
Every decision is recorded in an `ApproxTrace`.
"""
import math
from typing import *

import attr
import numpy as np
import structlog
from scipy import optimize

from externreg.enumerations import ApproxBranch
from externreg.exceptions import (
    DegeneratePolicyError,
    PolicyDomainError,
    PreconditionError,
)
from externreg.model import (
    LOG_FLOAT_MAX,
    MAX_EXPONENT,
    TIE_TOLERANCE,
    Policy,
    evaluate,
    exp_capped,
    log_max_fine_for_budget,
    loss_of,
    response_arrays,
    thresholds,
)
from externreg.population import PROBABILITY_TOLERANCE, Population
from externreg.simple_opt import inv_transform

LOG = structlog.get_logger()

DEFAULT_BETA = 0.5
PARTITION_CUTOFF = 1.0 / 8.0
RISK_SCAN_POINTS = 512


def _effortful(effs: np.ndarray, y: float, c: float) -> np.ndarray:
    with np.errstate(over="ignore"):
        return y * effs - math.exp(min(c, MAX_EXPONENT)) > TIE_TOLERANCE


def _purchasing(pop: Population, s: Policy) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Joint arrays plus the mask of atoms buying under s, indifferent ones included."""
    values, effs, probs = pop.joint_arrays()
    _, _, loss = response_arrays(effs, s.fine, s.cost)
    buys = values - loss - s.price >= -TIE_TOLERANCE
    return values, effs, probs, buys


@attr.s(auto_attribs=True, frozen=True)
class EpsilonPartition:
    """
    Purchase weighted shares of buyers that exert no effort (eps1), exert effort but
    are no better at security than the seller (eps2) and exert effort with k > 1
    (eps3).
    """

    eps1: float
    eps2: float
    eps3: float

    def to_dict(self) -> Dict[str, float]:
        return attr.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, float]) -> "EpsilonPartition":
        return cls(**data)


def epsilon_partition(pop: Population, s: Policy) -> EpsilonPartition:
    values, effs, probs, buys = _purchasing(pop, s)
    sale = math.fsum(probs[buys])
    if sale <= 0:
        raise DegeneratePolicyError(f"Nobody buys under {s}, the partition is undefined")

    effortful = _effortful(effs, s.fine, s.cost)
    eps2 = math.fsum(probs[buys & effortful & (effs <= 1.0)]) / sale
    eps3 = math.fsum(probs[buys & effortful & (effs > 1.0)]) / sale
    return EpsilonPartition(eps1=max(0.0, 1.0 - eps2 - eps3), eps2=eps2, eps3=eps3)


@attr.s(auto_attribs=True, frozen=True)
class Cost1Result:
    """
    The cost policy (0, c + loss, p + loss). `sigma` is the efficiency whose loss
    under s equals the shift, and buyers sitting exactly at the new price purchase
    the share `tie_fraction` so that the sale probability hits its target.
    """

    policy: Policy
    sigma: float
    loss: float
    tie_fraction: float
    exact: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            "policy": self.policy.to_dict(),
            "sigma": self.sigma,
            "loss": self.loss,
            "tie_fraction": self.tie_fraction,
            "exact": self.exact,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Cost1Result":
        return cls(
            policy=Policy.from_dict(data["policy"]),
            sigma=data["sigma"],
            loss=data["loss"],
            tie_fraction=data["tie_fraction"],
            exact=data["exact"],
        )


def _invert_loss(s: Policy, target_loss: float) -> float:
    """The efficiency k >= k0 with loss_of(k, y, c) == target_loss."""
    k0, _ = thresholds(s)

    def gap(k: float) -> float:
        return loss_of(k, s.fine, s.cost) - target_loss

    hi = max(2.0 * k0, 1.0)
    while gap(hi) > 0:
        hi *= 2.0
    return optimize.brentq(gap, k0, hi, xtol=1e-14, rtol=1e-14)


def cost1(pop: Population, s: Policy, eps: float) -> Cost1Result:
    """
    Adds the loss of the efficiency sigma to both the security cost and the price.
    Sigma is chosen so the sale probability becomes eps times the one under s, so
    the profit scales by exactly eps.
    """
    if not 0.0 < eps <= 1.0:
        raise PolicyDomainError(f"eps must lie in (0, 1]. Got {eps!r}")
    _, _, probs, buys = _purchasing(pop, s)
    sale = math.fsum(probs[buys])
    if sale <= 0:
        raise DegeneratePolicyError(f"Nobody buys under {s}")
    target = eps * sale

    points = pop.values.point_array
    reachable = pop.values.tail_probabilities() >= target - PROBABILITY_TOLERANCE
    widest = float(np.max(points[reachable] - s.price))
    # The loss curve of s spans [0, y * e^-c], shifts beyond that are unreachable.
    ceiling = s.fine * math.exp(-s.cost)
    shift = min(max(widest, 0.0), ceiling)
    capped = shift < widest

    policy = Policy(fine=0.0, cost=s.cost + shift, price=s.price + shift)
    utility = points - policy.price
    above = math.fsum(pop.values.prob_array[utility > TIE_TOLERANCE])
    at = math.fsum(pop.values.prob_array[np.abs(utility) <= TIE_TOLERANCE])
    if at > 0 and not capped:
        tie_fraction = min(1.0, max(0.0, (target - above) / at))
    else:
        tie_fraction = 1.0
    achieved = above + tie_fraction * at

    if s.fine == 0 or shift >= ceiling:
        sigma = 0.0
    elif shift <= 0:
        sigma = math.inf
    else:
        sigma = _invert_loss(s, shift)

    result = Cost1Result(
        policy=policy,
        sigma=sigma,
        loss=shift,
        tie_fraction=tie_fraction,
        exact=abs(achieved - target) <= PROBABILITY_TOLERANCE,
    )
    LOG.debug("Cost1", eps=eps, target=target, achieved=achieved, result=result)
    return result


@attr.s(auto_attribs=True, frozen=True)
class BlowupResult:
    """
    `log_y_sk` is the exact log of the inflated fine. `y_sk` saturates at the
    largest float when that log is out of range, in which case `capped` is set.
    Indifferent buyers purchase the share `tie_fraction` at the returned fine.
    """

    sigma: float
    q: float
    y_sk: float
    k_bar: float
    policy: Policy
    log_y_sk: float
    tie_fraction: float = 1.0
    capped: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sigma": self.sigma,
            "q": self.q,
            "y_sk": self.y_sk,
            "log_y_sk": self.log_y_sk,
            "k_bar": self.k_bar,
            "tie_fraction": self.tie_fraction,
            "capped": self.capped,
            "policy": self.policy.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BlowupResult":
        return cls(
            sigma=data["sigma"],
            q=data["q"],
            y_sk=data["y_sk"],
            k_bar=data["k_bar"],
            policy=Policy.from_dict(data["policy"]),
            log_y_sk=data.get("log_y_sk", math.log(data["y_sk"])),
            tie_fraction=data.get("tie_fraction", 1.0),
            capped=data.get("capped", False),
        )


def blowup(pop: Population, s: Policy, beta: float = DEFAULT_BETA) -> BlowupResult:
    """
    Drops the mandated security, lowers the price by c and inflates the fine to
    q * y * e^(c(sigma - 1)), where sigma is the (1 - beta) quantile of the
    efficiency among effortful purchasers with k > 1. q >= 1 is the smallest factor
    at which the sale probability no longer exceeds the one under s.

    Under a fine policy atom i buys exactly while the fine stays below
    max_fine_for_budget(v_i - (p - c), k_i), so the sale probability is a step
    function of the factor and q is one of its jump points. Atoms whose limit sits
    exactly at q are split by `tie_fraction` so the sale matches s. The search runs
    on log fines since e^(c(sigma - 1)) easily leaves the float range.
    """
    if not 0.0 < beta < 1.0:
        raise PolicyDomainError(f"beta must lie in (0, 1). Got {beta!r}")
    if s.price < s.cost:
        raise PreconditionError(f"Blowup needs p >= c. Got {s}")
    values, effs, probs, buys = _purchasing(pop, s)
    in_b = buys & _effortful(effs, s.fine, s.cost) & (effs > 1.0)
    if not in_b.any():
        raise PreconditionError(f"No effortful purchaser with k > 1 under {s}")

    order = np.argsort(effs[in_b], kind="stable")
    ks = effs[in_b][order]
    cumulative = np.cumsum(probs[in_b][order])
    quantile = int(np.flatnonzero(cumulative >= (1.0 - beta) * cumulative[-1] - PROBABILITY_TOLERANCE)[0])
    sigma = max(1.0, float(ks[quantile]))

    log_base = math.log(s.fine) + s.cost * (sigma - 1.0)
    sale = math.fsum(probs[buys])
    margin = s.price - s.cost
    # log of each atom's largest tolerated factor, -inf for atoms priced out
    log_limits = np.array(
        [log_max_fine_for_budget(value - margin, eff) for value, eff in zip(values, effs)]
    ) - log_base

    def above(log_factor: float) -> float:
        return math.fsum(probs[log_limits > log_factor + TIE_TOLERANCE])

    def at(log_factor: float) -> float:
        return math.fsum(probs[np.abs(log_limits - log_factor) <= TIE_TOLERANCE])

    log_q = 0.0
    if above(0.0) + at(0.0) > sale + PROBABILITY_TOLERANCE:
        # the largest limit always qualifies, nobody tolerates more
        for candidate in np.unique(log_limits[log_limits >= 0.0]):
            if above(float(candidate)) <= sale + PROBABILITY_TOLERANCE:
                log_q = float(candidate)
                break

    tied = at(log_q)
    if tied > 0:
        tie_fraction = min(1.0, max(0.0, (sale - above(log_q)) / tied))
    else:
        tie_fraction = 1.0

    log_y_sk = log_base + log_q
    capped = log_y_sk >= LOG_FLOAT_MAX
    if capped:
        LOG.warning("Blowup fine exceeds the float range, capped", log_fine=log_y_sk)
    y_sk = exp_capped(log_y_sk)
    result = BlowupResult(
        sigma=sigma,
        q=exp_capped(log_q),
        y_sk=y_sk,
        k_bar=exp_capped(s.cost - log_y_sk),
        policy=Policy(fine=y_sk, cost=0.0, price=margin),
        log_y_sk=log_y_sk,
        tie_fraction=tie_fraction,
        capped=capped,
    )
    LOG.debug("Blowup", beta=beta, sale=sale, result=result)
    return result


@attr.s(auto_attribs=True, frozen=True)
class GoodnessCheck:
    good: bool
    value: float
    threshold: float

    def to_dict(self) -> Dict[str, Any]:
        return attr.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GoodnessCheck":
        return cls(**data)


def blowup_good(pop: Population, s: Policy, beta: float, br: BlowupResult) -> GoodnessCheck:
    """
    A blowup is good when purchasers with k <= k_bar, the ones the inflated fine
    does not push into effort past the seller's security, add little externality.
    """
    partition = epsilon_partition(pop, s)
    if partition.eps3 <= 0:
        raise PreconditionError(f"No effortful purchaser with k > 1 under {s}")

    outcome = evaluate(pop, br.policy)
    inefficient = math.fsum(
        atom.prob * atom.outcome.purchase_fraction * atom.outcome.risk
        for atom in outcome.per_atom
        if atom.efficiency <= br.k_bar * (1.0 + TIE_TOLERANCE)
    )
    value = inefficient / outcome.sale_prob if outcome.sale_prob > 0 else 0.0

    factor = 4.0 * s.margin / ((1.0 - beta) * (1.0 + s.cost) * partition.eps3)
    threshold = factor * evaluate(pop, s).externality
    return GoodnessCheck(good=value <= threshold, value=value, threshold=threshold)


def heavy(pop: Population, s: Policy, beta: float, br: BlowupResult) -> Policy:
    """
    The cost policy charging the loss of k_bar under the blowup and spending half
    of it on security.
    """
    heavy_price = exp_capped(math.log1p(s.cost) + br.log_y_sk - s.cost)
    return Policy(fine=0.0, cost=heavy_price / 2.0, price=heavy_price)


def loss_from_risk(x: float, y: float) -> float:
    """Loss of an effortful buyer whose risk is x under the fine y."""
    if not 0.0 < x <= 1.0:
        raise PolicyDomainError(f"Risk must lie in (0, 1]. Got {x!r}")
    return (math.log(1.0 / x) + 1.0) * x * y


def _check_risk_level(s: Policy, x: float):
    lowest = math.exp(-s.cost)
    if not lowest * (1.0 - TIE_TOLERANCE) <= x <= 1.0:
        raise PolicyDomainError(f"x must lie in [{lowest}, 1]. Got {x!r}")


def sale_curve_h(pop: Population, s: Policy, br: BlowupResult, x: float) -> float:
    """Pr[v >= loss_from_risk(x, y_sk)], the sale probability of cost3 at x."""
    price = loss_from_risk(x, br.y_sk)
    return pop.values.survival(price - TIE_TOLERANCE)


def _cost3_cost(s: Policy) -> Tuple[float, bool]:
    if s.fine <= 0:
        return 0.0, True
    cost = math.log(s.fine)
    if cost < 0:
        return 0.0, True
    return cost, False


def cost3(pop: Population, s: Policy, br: BlowupResult, x: float) -> Policy:
    """Cost policy with security ln y priced at the loss of risk level x."""
    _check_risk_level(s, x)
    cost, clamped = _cost3_cost(s)
    if clamped:
        LOG.warning("Cost3 security ln(y) is negative, clamped to 0", fine=s.fine)
    return Policy(fine=0.0, cost=cost, price=loss_from_risk(x, br.y_sk))


def _cost3_check(
    pop: Population, eps3: float, profit: float, beta: float, br: BlowupResult, x: float
) -> GoodnessCheck:
    price = loss_from_risk(x, br.y_sk)
    value = pop.values.survival(price - TIE_TOLERANCE)
    threshold = 2.0 * beta * eps3 * profit / price
    return GoodnessCheck(good=value >= threshold, value=value, threshold=threshold)


def cost3_good(pop: Population, s: Policy, beta: float, br: BlowupResult, x: float) -> GoodnessCheck:
    """Cost3 at x is good when its sale probability clears 2 beta eps3 Prof(s) / price."""
    _check_risk_level(s, x)
    partition = epsilon_partition(pop, s)
    return _cost3_check(pop, partition.eps3, evaluate(pop, s).profit, beta, br, x)


@attr.s(auto_attribs=True)
class ApproxTrace:
    partition: EpsilonPartition
    branch: ApproxBranch
    beta: float
    output: Policy
    blowup: Optional[BlowupResult] = None
    chosen_x: Optional[float] = None
    checks: Dict[str, GoodnessCheck] = attr.ib(factory=dict)
    warnings: List[str] = attr.ib(factory=list)
    cost1: Optional[Cost1Result] = None
    # goodness of the blowup of s itself, kept for comparison only
    raw_blowup_good: Optional[GoodnessCheck] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "partition": self.partition.to_dict(),
            "branch": self.branch.value,
            "beta": self.beta,
            "output": self.output.to_dict(),
            "blowup": self.blowup.to_dict() if self.blowup else None,
            "chosen_x": self.chosen_x,
            "checks": {name: check.to_dict() for name, check in self.checks.items()},
            "warnings": list(self.warnings),
            "cost1": self.cost1.to_dict() if self.cost1 else None,
            "raw_blowup_good": self.raw_blowup_good.to_dict() if self.raw_blowup_good else None,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ApproxTrace":
        return cls(
            partition=EpsilonPartition.from_dict(data["partition"]),
            branch=ApproxBranch(data["branch"]),
            beta=data["beta"],
            output=Policy.from_dict(data["output"]),
            blowup=BlowupResult.from_dict(data["blowup"]) if data.get("blowup") else None,
            chosen_x=data.get("chosen_x"),
            checks={
                name: GoodnessCheck.from_dict(check)
                for name, check in data.get("checks", {}).items()
            },
            warnings=list(data.get("warnings", [])),
            cost1=Cost1Result.from_dict(data["cost1"]) if data.get("cost1") else None,
            raw_blowup_good=(
                GoodnessCheck.from_dict(data["raw_blowup_good"])
                if data.get("raw_blowup_good")
                else None
            ),
        )


def _risk_levels(pop: Population, s: Policy, br: BlowupResult) -> np.ndarray:
    lowest = math.exp(-s.cost)
    grid = np.geomspace(lowest, 1.0, RISK_SCAN_POINTS)
    _, effs, _ = pop.joint_arrays()
    _, risk, _ = response_arrays(effs, br.y_sk, 0.0)
    inside = (effs <= br.k_bar * (1.0 + TIE_TOLERANCE)) & (risk >= lowest) & (risk <= 1.0)
    return np.unique(np.concatenate((grid, risk[inside])))


def _raw_blowup_good(pop: Population, s: Policy, beta: float) -> Optional[GoodnessCheck]:
    try:
        return blowup_good(pop, s, beta, blowup(pop, s, beta))
    except (PreconditionError, PolicyDomainError) as e:
        LOG.debug("Blowup of the untransformed policy is undefined", reason=str(e))
        return None


def fine_routine(pop: Population, s: Policy, beta: float = DEFAULT_BETA) -> Tuple[Policy, ApproxTrace]:
    """
    Handles policies whose purchasers mostly exert effort with k > 1.

    Low security (c <= 1) is moved entirely into the fine. Otherwise the blowup,
    heavy and cost3 candidates are computed on Inv(s, 1/2), which has the same
    purchasers and effort as s, and the first good one is returned.
    """
    if s.price < s.cost:
        raise PreconditionError(f"The fine routine needs p >= c. Got {s}")
    partition = epsilon_partition(pop, s)

    if s.cost <= 1.0:
        # Inv(s, p / (p - c)), also defined at p == c
        output = Policy(fine=s.fine * math.exp(-s.cost), cost=0.0, price=s.price)
        trace = ApproxTrace(partition=partition, branch=ApproxBranch.FINE_INV, beta=beta, output=output)
        LOG.debug("Fine routine", branch=trace.branch.value, output=output)
        return output, trace

    half = inv_transform(s, 0.5)
    br = blowup(pop, half, beta)
    good = blowup_good(pop, half, beta, br)
    trace = ApproxTrace(
        partition=partition,
        branch=ApproxBranch.FINE_BLOWUP_FALLBACK,
        beta=beta,
        output=br.policy,
        blowup=br,
        checks={"blowup_good": good},
        raw_blowup_good=_raw_blowup_good(pop, s, beta),
    )

    if good.good:
        trace.branch = ApproxBranch.FINE_BLOWUP_GOOD
    elif br.sigma >= 2.0:
        trace.branch = ApproxBranch.FINE_HEAVY
        trace.output = heavy(pop, half, beta, br)
    else:
        half_profit = evaluate(pop, half).profit
        cost, clamped = _cost3_cost(half)
        best_profit, best_check = -math.inf, None
        for x in _risk_levels(pop, half, br):
            check = _cost3_check(pop, partition.eps3, half_profit, beta, br, float(x))
            if not check.good:
                continue
            profit = (loss_from_risk(float(x), br.y_sk) - cost) * check.value
            if profit > best_profit + TIE_TOLERANCE:
                best_profit, best_check, trace.chosen_x = profit, check, float(x)

        if best_check is not None:
            trace.checks["cost3_good"] = best_check
            if s.fine * math.exp(-s.cost) < 2.0:
                trace.branch = ApproxBranch.FINE_COST1
                trace.cost1 = cost1(pop, s, 1.0)
                trace.output = trace.cost1.policy
            else:
                trace.branch = ApproxBranch.FINE_COST3
                if clamped:
                    trace.warnings.append(
                        f"Cost3 security ln(y) clamped to 0 for y={half.fine!r}"
                    )
                trace.output = cost3(pop, half, br, trace.chosen_x)

    LOG.debug("Fine routine", branch=trace.branch.value, output=trace.output)
    return trace.output, trace


def approx_routine(pop: Population, s: Policy) -> Tuple[Policy, ApproxTrace]:
    """
    Returns a simple policy with at least 1/8 of the profit of s and at most 40/3
    times its externality, along with the trace of how it was found.
    """
    if s.price < s.cost:
        raise PreconditionError(f"Approximation needs p >= c. Got {s}")
    partition = epsilon_partition(pop, s)

    if partition.eps1 >= PARTITION_CUTOFF:
        branch, result = ApproxBranch.COST1_FULL, cost1(pop, s, 1.0)
    elif partition.eps2 >= PARTITION_CUTOFF:
        branch, result = ApproxBranch.COST1_EPS12, cost1(pop, s, partition.eps1 + partition.eps2)
    else:
        return fine_routine(pop, s, DEFAULT_BETA)

    trace = ApproxTrace(
        partition=partition, branch=branch, beta=DEFAULT_BETA, output=result.policy, cost1=result
    )
    LOG.debug("Approximation", branch=branch.value, output=result.policy)
    return result.policy, trace


def guarantee_ratios(pop: Population, s: Policy, output: Policy) -> Tuple[float, float]:
    """(profit of output / profit of s, externality of output / externality of s)"""
    before, after = evaluate(pop, s), evaluate(pop, output)
    if before.profit > 0:
        profit_ratio = after.profit / before.profit
    else:
        profit_ratio = math.inf if after.profit >= 0 else -math.inf
    if before.externality > 0:
        externality_ratio = after.externality / before.externality
    else:
        externality_ratio = 0.0 if after.externality == 0 else math.inf
    return profit_ratio, externality_ratio
