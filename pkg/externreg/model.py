"""
Buyer best response and the aggregate market functionals.

A buyer of type (v, k) facing a policy (y, c, p) chooses an effort h >= 0 to
minimise h + y * exp(-c - k * h). The closed forms below follow from that
minimisation with the risk function exp(-x).
"""
import math
import re
import sys
from typing import *

import attr
import numpy as np
import structlog

from externreg.enumerations import ExternalityMode
from externreg.exceptions import ParseError, PolicyDomainError
from externreg.population import Population

LOG = structlog.get_logger()

# Utility signs and the effort threshold y*k vs e^c are decided with this slack.
TIE_TOLERANCE = 1e-12
MAX_EXPONENT = 700.0
# Fines are finite floats, so log(y) never exceeds this.
LOG_FLOAT_MAX = math.log(sys.float_info.max)

policy_field_pattern = re.compile(r"^\s*([ycp])\s*=\s*(\S+)\s*$")


def _nonnegative_finite(instance, attribute, value: float):
    if not (math.isfinite(value) and value >= 0):
        raise PolicyDomainError(
            f"Policy field {attribute.name!r} must be finite and nonnegative. "
            f"Got {value!r}"
        )


@attr.s(auto_attribs=True, frozen=True)
class Policy:
    """
    A regulation: the fine a buyer pays when the device is compromised, the
    security cost the seller must spend on every unit, and the seller's price.
    """

    fine: float = attr.ib(converter=float, validator=[_nonnegative_finite])
    cost: float = attr.ib(converter=float, validator=[_nonnegative_finite])
    price: float = attr.ib(converter=float, validator=[_nonnegative_finite])

    @property
    def margin(self) -> float:
        return self.price - self.cost

    @property
    def is_fine_policy(self) -> bool:
        return self.cost == 0

    @property
    def is_cost_policy(self) -> bool:
        return self.fine == 0

    @property
    def is_simple(self) -> bool:
        return self.is_fine_policy or self.is_cost_policy

    def to_dict(self) -> Dict[str, float]:
        return {"y": self.fine, "c": self.cost, "p": self.price}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Policy":
        try:
            return cls(fine=data["y"], cost=data["c"], price=data["p"])
        except KeyError as e:
            raise ParseError(f"Policy is missing field {e}") from e
        except TypeError as e:
            raise ParseError(f"Policy fields must be numbers: {e}") from e

    @classmethod
    def from_string(cls, text: str) -> "Policy":
        """
        Parses "y=...,c=...,p=..." in any field order. All three fields are
        required.
        """
        fields = {}
        for part in text.split(","):
            match = re.match(policy_field_pattern, part)
            if not match:
                raise ParseError(
                    f"Could not parse policy {text!r}. Expected y=...,c=...,p=..."
                )
            name, raw = match.groups()
            if name in fields:
                raise ParseError(f"Policy field {name} is set twice in {text!r}")
            try:
                fields[name] = float(raw)
            except ValueError as e:
                raise ParseError(f"Policy field {name}={raw!r} is not a number") from e
        if set(fields) != {"y", "c", "p"}:
            raise ParseError(f"Policy {text!r} must set exactly y, c and p")
        return cls.from_dict(fields)


def _exp(x: float) -> float:
    return math.exp(min(x, MAX_EXPONENT))


def exp_capped(x: float) -> float:
    """e^x, saturating at the largest float instead of overflowing."""
    if x >= LOG_FLOAT_MAX:
        return sys.float_info.max
    return math.exp(x)


def _exerts_effort(k: float, y: float, c: float) -> bool:
    # y * k may overflow to inf, which still compares correctly
    return y * k - _exp(c) > TIE_TOLERANCE


def best_effort(k: float, y: float, c: float) -> float:
    if y == 0 or k == 0 or not _exerts_effort(k, y, c):
        return 0.0
    return max(0.0, (math.log(y) + math.log(k) - c) / k)


def risk_of(k: float, y: float, c: float) -> float:
    """Probability the device is compromised, min(e^-c, 1/(y*k))."""
    if y == 0 or k == 0 or not _exerts_effort(k, y, c):
        return math.exp(-c)
    return 1.0 / y / k


def loss_of(k: float, y: float, c: float) -> float:
    """Expected fine plus the effort spent avoiding it."""
    if y == 0:
        return 0.0
    if k == 0 or not _exerts_effort(k, y, c):
        return y * math.exp(-c)
    return (math.log(y) + math.log(k) - c + 1.0) / k


def post_value(t: Tuple[float, float], s: Policy) -> float:
    value, eff = t
    return value - loss_of(eff, s.fine, s.cost)


def utility_of(t: Tuple[float, float], s: Policy) -> float:
    return post_value(t, s) - s.price


def max_fine_for_budget(budget: float, k: float) -> float:
    """
    The largest fine y, with no mandated security, whose loss at efficiency k stays
    within `budget`. Negative budgets admit no fine and return -inf.
    """
    if budget < 0:
        return -math.inf
    log_fine = log_max_fine_for_budget(budget, k)
    if log_fine > LOG_FLOAT_MAX:
        return math.inf
    return math.exp(log_fine)


def log_max_fine_for_budget(budget: float, k: float) -> float:
    """log of `max_fine_for_budget`, finite for every positive budget."""
    if budget <= 0:
        return -math.inf
    if k == 0 or budget * k <= 1.0:
        return math.log(budget)
    return budget * k - 1.0 - math.log(k)


def thresholds(s: Policy) -> Tuple[float, float]:
    """
    k0 is the smallest efficiency that exerts effort, kh = max(1, k0) the smallest
    efficiency that is both effortful and better at security than the seller.
    """
    if s.fine == 0:
        k0 = math.inf
    else:
        k0 = _exp(s.cost) / s.fine
    return k0, max(1.0, k0)


def policy_gap(k: float, s: Policy, s2: Policy) -> float:
    return loss_of(k, s.fine, s.cost) - loss_of(k, s2.fine, s2.cost)


def response_arrays(
    effs: np.ndarray, y: Union[float, np.ndarray], c: Union[float, np.ndarray]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Vectorised (effort, risk, loss) for arrays of efficiencies, fines and costs.
    Arguments broadcast against each other.
    """
    effs, y, c = np.broadcast_arrays(
        np.asarray(effs, dtype=float), np.asarray(y, dtype=float), np.asarray(c, dtype=float)
    )
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        effortful = y * effs - np.exp(np.minimum(c, MAX_EXPONENT)) > TIE_TOLERANCE
        safe_y = np.where(effortful, y, 1.0)
        safe_effs = np.where(effortful, effs, 1.0)
        # log(y) + log(k) stays finite where y * k overflows
        log_scaled = np.log(safe_y) + np.log(safe_effs)
        effort = np.where(effortful, (log_scaled - c) / safe_effs, 0.0)
        risk = np.where(effortful, 1.0 / safe_y / safe_effs, np.exp(-c))
        loss = np.where(effortful, (log_scaled - c + 1.0) / safe_effs, y * np.exp(-c))
    return np.maximum(effort, 0.0), risk, loss


@attr.s(auto_attribs=True, frozen=True)
class BuyerOutcome:
    effort: float
    risk: float
    loss: float
    post_value: float
    utility: float
    purchase_fraction: float

    def to_dict(self) -> Dict[str, float]:
        return attr.asdict(self)


@attr.s(auto_attribs=True, frozen=True)
class AtomOutcome:
    value: float
    efficiency: float
    prob: float
    outcome: BuyerOutcome

    def to_dict(self) -> Dict[str, float]:
        data = {"v": self.value, "k": self.efficiency, "prob": self.prob}
        data.update(self.outcome.to_dict())
        return data


def _purchase_fraction(utility: float, tie_fraction: float) -> float:
    if utility > TIE_TOLERANCE:
        return 1.0
    if utility < -TIE_TOLERANCE:
        return 0.0
    return tie_fraction


def _check_tie_fraction(tie_fraction: float):
    if not 0.0 <= tie_fraction <= 1.0:
        raise PolicyDomainError(f"tie_fraction must lie in [0, 1]. Got {tie_fraction!r}")


def buyer_outcome(t: Tuple[float, float], s: Policy, tie_fraction: float = 1.0) -> BuyerOutcome:
    _check_tie_fraction(tie_fraction)
    value, eff = t
    loss = loss_of(eff, s.fine, s.cost)
    utility = value - loss - s.price
    return BuyerOutcome(
        effort=best_effort(eff, s.fine, s.cost),
        risk=risk_of(eff, s.fine, s.cost),
        loss=loss,
        post_value=value - loss,
        utility=utility,
        purchase_fraction=_purchase_fraction(utility, tie_fraction),
    )


@attr.s(auto_attribs=True, frozen=True)
class MarketOutcome:
    sale_prob: float
    profit: float
    externality: float
    mode: ExternalityMode
    per_atom: Tuple[AtomOutcome, ...] = attr.ib(converter=tuple, repr=False)

    def buyers(self) -> List[Tuple[float, float]]:
        return [
            (atom.value, atom.efficiency)
            for atom in self.per_atom
            if atom.outcome.purchase_fraction > 0
        ]

    def to_dict(self, include_atoms: bool = True) -> Dict[str, Any]:
        data = {
            "sale_prob": self.sale_prob,
            "profit": self.profit,
            "externality": self.externality,
            "mode": self.mode.value,
        }
        if include_atoms:
            data["atoms"] = [atom.to_dict() for atom in self.per_atom]
        return data


def evaluate(
    pop: Population,
    s: Policy,
    mode: ExternalityMode = ExternalityMode.CONDITIONAL,
    tie_fraction: float = 1.0,
) -> MarketOutcome:
    """
    Every buyer best-responds to the policy and buys when the utility is
    nonnegative. Indifferent buyers buy the share `tie_fraction`.

    Conditional externality is the expected risk among purchasers, total
    externality is the compromised mass over the whole population.
    """
    _check_tie_fraction(tie_fraction)
    values, effs, probs = pop.joint_arrays()
    effort, risk, loss = response_arrays(effs, s.fine, s.cost)
    post = values - loss
    utility = post - s.price
    fraction = np.where(
        utility > TIE_TOLERANCE, 1.0, np.where(utility < -TIE_TOLERANCE, 0.0, tie_fraction)
    )
    weights = probs * fraction
    sale_prob = math.fsum(weights)
    compromised = math.fsum(weights * risk)
    if mode is ExternalityMode.TOTAL:
        externality = compromised
    else:
        externality = compromised / sale_prob if sale_prob > 0 else 0.0

    per_atom = [
        AtomOutcome(
            value=float(values[i]),
            efficiency=float(effs[i]),
            prob=float(probs[i]),
            outcome=BuyerOutcome(
                effort=float(effort[i]),
                risk=float(risk[i]),
                loss=float(loss[i]),
                post_value=float(post[i]),
                utility=float(utility[i]),
                purchase_fraction=float(fraction[i]),
            ),
        )
        for i in range(len(values))
    ]
    return MarketOutcome(
        sale_prob=sale_prob,
        profit=s.margin * sale_prob,
        externality=externality,
        mode=mode,
        per_atom=per_atom,
    )
