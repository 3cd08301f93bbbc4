"""
The profits-maximizing seller: the regulator fixes (y, c) and the seller answers
with the price that maximizes its own profit. Externality is measured as the
compromised mass over the whole population.
"""
import math
from typing import *

import attr
import numpy as np
import structlog

from externreg.enumerations import ExternalityMode
from externreg.exceptions import PolicyDomainError
from externreg.model import TIE_TOLERANCE, MarketOutcome, Policy, evaluate, response_arrays
from externreg.population import Population
from externreg.pricing import best_response_prices

LOG = structlog.get_logger()


@attr.s(auto_attribs=True, frozen=True)
class RevenueRow:
    value: float
    efficiency: float
    prob: float
    post_value: float
    # post_value * Pr[post-value >= post_value]
    revenue: float
    # (post_value - c) * Pr[post-value >= post_value]
    profit: float

    @property
    def type(self) -> Tuple[float, float]:
        return self.value, self.efficiency

    def to_dict(self) -> Dict[str, float]:
        return {
            "v": self.value,
            "k": self.efficiency,
            "prob": self.prob,
            "post_value": self.post_value,
            "revenue": self.revenue,
            "profit": self.profit,
        }


@attr.s(auto_attribs=True, frozen=True)
class RevenueTable:
    """Revenue of pricing at each type's post-value, rows in the induced type order."""

    fine: float
    cost: float
    rows: Tuple[RevenueRow, ...] = attr.ib(converter=tuple)

    def order(self) -> List[Tuple[float, float]]:
        return [row.type for row in self.rows]

    def row_for(self, value: float, efficiency: float) -> RevenueRow:
        for row in self.rows:
            if row.type == (value, efficiency):
                return row
        raise KeyError(f"No type ({value}, {efficiency}) in the revenue table")

    def to_dict(self) -> Dict[str, Any]:
        return {"y": self.fine, "c": self.cost, "rows": [row.to_dict() for row in self.rows]}

    def csv_rows(self) -> List[List[float]]:
        return [
            [row.value, row.efficiency, row.prob, row.post_value, row.revenue, row.profit]
            for row in self.rows
        ]


def _post_values(
    pop: Population, y: float, c: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    values, effs, probs = pop.joint_arrays()
    _, _, loss = response_arrays(effs, y, c)
    return values, effs, probs, values - loss


def revenue_table(pop: Population, y: float, c: float) -> RevenueTable:
    values, effs, probs, post = _post_values(pop, y, c)
    sale = np.array([math.fsum(probs[post >= point - TIE_TOLERANCE]) for point in post])
    order = np.lexsort((effs, values, post))
    rows = [
        RevenueRow(
            value=float(values[i]),
            efficiency=float(effs[i]),
            prob=float(probs[i]),
            post_value=float(post[i]),
            revenue=float(post[i] * sale[i]),
            profit=float((post[i] - c) * sale[i]),
        )
        for i in order
    ]
    return RevenueTable(fine=float(y), cost=float(c), rows=rows)


def seller_best_price(pop: Population, y: float, c: float) -> Tuple[float, float]:
    """
    The seller's profit maximizing price and profit, ties toward the lower price.
    Only post-values need to be tried since any other price loses margin without
    changing who buys.
    """
    _, _, probs, post = _post_values(pop, y, c)
    price, profit = best_response_prices(post[None, :], probs, c)
    return float(price[0]), float(profit[0])


def purchase_set(pop: Population, y: float, c: float) -> List[Tuple[float, float]]:
    """Types buying at the seller's best response, in product order."""
    values, effs, _, post = _post_values(pop, y, c)
    price, _ = seller_best_price(pop, y, c)
    return [
        (float(value), float(eff))
        for value, eff, point in zip(values, effs, post)
        if point >= price - TIE_TOLERANCE
    ]


def y_of_k(k: float) -> float:
    """The fine under which an efficiency k buyer loses exactly 1 / (k - 1)."""
    if not k > 1:
        raise PolicyDomainError(f"y(k) needs k > 1. Got {k!r}")
    return math.exp(k / (k - 1.0)) / (math.e * k)


def best_response_policy(pop: Population, y: float, c: float) -> Policy:
    price, _ = seller_best_price(pop, y, c)
    return Policy(fine=y, cost=c, price=price)


def stackelberg_evaluate(pop: Population, y: float, c: float) -> MarketOutcome:
    policy = best_response_policy(pop, y, c)
    LOG.debug("Seller best response", policy=policy)
    return evaluate(pop, policy, mode=ExternalityMode.TOTAL)
