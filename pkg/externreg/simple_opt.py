"""
Solvers for the externality minimising regulation under a profit floor.

Cost policies (no fine) and fine policies (no mandated security) are solved
exactly. General policies are searched on a (y, c) grid with local refinement,
seeded with the two simple optima.
"""
import itertools
import math
from typing import *

import attr
import numpy as np
import structlog
from scipy import optimize

from externreg.enumerations import SolveMethod
from externreg.exceptions import (
    InfeasibleInstanceError,
    InvalidRangeError,
    PolicyDomainError,
    PreconditionError,
)
from externreg.model import (
    MAX_EXPONENT,
    TIE_TOLERANCE,
    MarketOutcome,
    Policy,
    evaluate,
    loss_of,
    max_fine_for_budget,
    response_arrays,
)
from externreg.population import FEASIBILITY_TOLERANCE, DiscreteDistribution, Instance
from externreg.pricing import cheapest_feasible_prices, price_table

LOG = structlog.get_logger()

# Fines are capped here when every member of a purchase set tolerates any fine.
FINE_CAP = 1e12
REFINE_POINTS = 9
# Event fines (post-value crossings and profit floor boundaries) are added to the
# fine search up to this many joint atoms.
EVENT_ATOM_LIMIT = 16
CROSSING_OFFSET = 1e-7


def _at_least_two(instance, attribute, value: int):
    if value < 2:
        raise InvalidRangeError(f"{attribute.name} must be at least 2. Got {value}")


def _positive(instance, attribute, value: float):
    if not value > 0:
        raise InvalidRangeError(f"{attribute.name} must be positive. Got {value}")


def _nonnegative(instance, attribute, value: int):
    if value < 0:
        raise InvalidRangeError(f"{attribute.name} must be nonnegative. Got {value}")


@attr.s(auto_attribs=True, frozen=True)
class SolverConfig:
    """
    Grid and refinement settings for the policy solvers.

    The fine grid is log spaced on [y_min, y_max] with y = 0 prepended, the cost
    grid is linear on [0, c_max] where c_max defaults to the largest value.
    """

    y_min: float = attr.ib(default=1e-4, converter=float, validator=[_positive])
    y_max: float = attr.ib(default=1e4, converter=float, validator=[_positive])
    y_points: int = attr.ib(default=400, validator=[_at_least_two])
    c_points: int = attr.ib(default=400, validator=[_at_least_two])
    c_max: Optional[float] = attr.ib(default=None)
    refine_iters: int = attr.ib(default=40, validator=[_nonnegative])
    tolerance: float = attr.ib(default=FEASIBILITY_TOLERANCE, converter=float, validator=[_positive])
    # fines tried inside each purchase set's feasible bracket
    bracket_points: int = attr.ib(default=64, validator=[_at_least_two])
    exact_atom_limit: int = attr.ib(default=64, validator=[_nonnegative])

    def __attrs_post_init__(self):
        if not self.y_min < self.y_max:
            raise InvalidRangeError(
                f"Fine grid needs y_min < y_max. Got [{self.y_min}, {self.y_max}]"
            )
        if self.c_max is not None and not self.c_max > 0:
            raise InvalidRangeError(f"c_max must be positive. Got {self.c_max}")

    def fine_grid(self, ceiling: Optional[float] = None) -> np.ndarray:
        """
        With a `ceiling` above y_max the grid continues up to it at the same
        log spacing.
        """
        grid = np.geomspace(self.y_min, self.y_max, self.y_points)
        if ceiling is not None and ceiling > self.y_max:
            spans = math.log(ceiling / self.y_max) / math.log(self.y_max / self.y_min)
            extra = np.geomspace(self.y_max, ceiling, max(2, math.ceil(self.y_points * spans) + 1))
            grid = np.concatenate((grid, extra[1:]))
        return np.concatenate(([0.0], grid))

    def cost_grid(self, values: DiscreteDistribution) -> np.ndarray:
        c_max = self.c_max if self.c_max is not None else values.max_point
        return np.linspace(0.0, c_max, self.c_points)


@attr.s(auto_attribs=True, frozen=True)
class SolveResult:
    policy: Policy
    outcome: MarketOutcome
    feasible: bool
    method: SolveMethod

    @property
    def externality(self) -> float:
        return self.outcome.externality

    def to_dict(self) -> Dict[str, Any]:
        return {
            "policy": self.policy.to_dict(),
            "outcome": self.outcome.to_dict(),
            "feasible": self.feasible,
            "method": self.method.value,
        }


@attr.s(auto_attribs=True, frozen=True)
class Cutoff:
    value: float
    c_star: float
    unbounded: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            "c_star": self.c_star,
            "cutoff": None if self.unbounded else self.value,
            "unbounded": self.unbounded,
        }


@attr.s(auto_attribs=True, frozen=True)
class _Candidate:
    externality: float
    fine: float
    cost: float
    price: float

    def beats(self, other: Optional["_Candidate"]) -> bool:
        """Lower externality wins, ties go to smaller y, then c, then p."""
        if other is None:
            return True
        if self.externality < other.externality - TIE_TOLERANCE:
            return True
        if self.externality > other.externality + TIE_TOLERANCE:
            return False
        return (self.fine, self.cost, self.price) < (other.fine, other.cost, other.price)


def _pick(best: Optional[_Candidate], candidate: Optional[_Candidate]) -> Optional[_Candidate]:
    if candidate is not None and candidate.beats(best):
        return candidate
    return best


def inv_transform(s: Policy, alpha: float) -> Policy:
    """
    Moves part of the seller's margin into mandated security and raises the fine
    so that every buyer's effort, loss and purchase decision are unchanged.

    Profit scales by alpha and externality by exp(-(1 - alpha) * (p - c)).
    """
    margin = s.margin
    upper = s.price / margin if margin > 0 else 1.0
    if not (0.0 <= alpha <= upper + TIE_TOLERANCE):
        raise PolicyDomainError(f"alpha must lie in [0, {upper}]. Got {alpha!r}")
    alpha = min(alpha, upper)

    exponent = margin * (1.0 - alpha)
    if exponent > MAX_EXPONENT:
        raise PolicyDomainError(
            f"Invariant transform with alpha={alpha} overflows the fine of {s}"
        )
    fine = s.fine * math.exp(exponent)
    if margin > 0 and alpha == upper:
        cost = 0.0
    else:
        cost = max(0.0, alpha * s.cost + (1.0 - alpha) * s.price)
    return Policy(fine=fine, cost=cost, price=s.price)


def _c_star_witness(values: DiscreteDistribution, profit_floor: float) -> Tuple[float, float]:
    if not profit_floor > 0:
        raise InvalidRangeError(f"The profit floor must be positive. Got {profit_floor}")
    points = values.point_array
    candidates = points - profit_floor / values.tail_probabilities()
    best = float(candidates.max())
    if best < -FEASIBILITY_TOLERANCE:
        raise InfeasibleInstanceError(
            f"No price reaches profit {profit_floor} even without regulation"
        )
    index = int(np.flatnonzero(candidates >= best - TIE_TOLERANCE)[0])
    return max(0.0, best), float(points[index])


def c_star(values: DiscreteDistribution, profit_floor: float) -> float:
    """
    The largest security cost that still lets some price reach the profit floor.
    Only prices on the support of the values need to be tried.
    """
    return _c_star_witness(values, profit_floor)[0]


def cutoff_t(values: DiscreteDistribution, profit_floor: float) -> Cutoff:
    """
    Point mass efficiencies above 1 + 1/c* favour fines, those below favour
    mandated security.
    """
    star = c_star(values, profit_floor)
    if star <= 0:
        LOG.warning("No slack for security, the cutoff is unbounded", profit_floor=profit_floor)
        return Cutoff(value=math.inf, c_star=star, unbounded=True)
    return Cutoff(value=1.0 + 1.0 / star, c_star=star, unbounded=False)


def _result(instance: Instance, candidate: _Candidate, method: SolveMethod, config: SolverConfig) -> SolveResult:
    policy = Policy(fine=candidate.fine, cost=candidate.cost, price=candidate.price)
    outcome = evaluate(instance.population, policy)
    feasible = outcome.profit >= instance.profit_floor - config.tolerance
    if not feasible:
        LOG.warning(
            "Solver candidate fails the profit floor on re-evaluation",
            policy=policy,
            profit=outcome.profit,
            profit_floor=instance.profit_floor,
        )
    return SolveResult(policy=policy, outcome=outcome, feasible=feasible, method=method)


def best_cost_policy(instance: Instance, config: Optional[SolverConfig] = None) -> SolveResult:
    """
    Without a fine buyers lose nothing, so every buyer faces risk e^-c and the best
    cost policy simply spends the largest affordable security cost c*.
    """
    config = config or SolverConfig()
    star, price = _c_star_witness(instance.population.values, instance.profit_floor)
    LOG.debug("Solved cost policy", c_star=star, price=price)
    return _result(
        instance,
        _Candidate(externality=math.exp(-star), fine=0.0, cost=star, price=price),
        SolveMethod.EXACT,
        config,
    )


def upward_closed_sets(n_values: int, n_effs: int) -> Iterator[np.ndarray]:
    """
    Every nonempty set of joint atoms closed under raising the value or the
    efficiency, as flat masks in product order. Value row i keeps the efficiencies
    from column cut[i] upward and the cuts never increase with the value.
    """
    for combo in itertools.combinations_with_replacement(range(n_effs + 1), n_values):
        cuts = combo[::-1]
        if all(cut == n_effs for cut in cuts):
            continue
        mask = np.zeros((n_values, n_effs), dtype=bool)
        for row, cut in enumerate(cuts):
            mask[row, cut:] = True
        yield mask.ravel()


def fine_ceiling(values: np.ndarray, effs: np.ndarray) -> float:
    """Above this fine nobody buys, whatever the price."""
    top = max(max_fine_for_budget(float(v), float(k)) for v, k in zip(values, effs))
    return min(max(top, 0.0), FINE_CAP)


def _crossing_fines(values: np.ndarray, effs: np.ndarray, ceiling: float) -> List[float]:
    """
    Fines at which two atoms' post-values meet. The loss gap between a less and a
    more efficient buyer only grows with the fine, so each pair meets at most once.
    """
    fines = []
    for i, j in itertools.combinations(range(values.size), 2):
        if effs[i] == effs[j]:
            continue
        lo, hi = (i, j) if effs[i] < effs[j] else (j, i)
        gap = float(values[lo] - values[hi])
        if gap <= 0:
            continue

        def excess(y: float) -> float:
            return loss_of(float(effs[lo]), y, 0.0) - loss_of(float(effs[hi]), y, 0.0) - gap

        if excess(ceiling) <= 0:
            continue
        fines.append(optimize.brentq(excess, 0.0, ceiling, xtol=1e-14, rtol=1e-14))
    return fines


def _floor_fines(
    values: np.ndarray,
    effs: np.ndarray,
    probs: np.ndarray,
    crossings: List[float],
    profit_floor: float,
    ceiling: float,
) -> List[float]:
    """
    Between two crossings the order of post-values is fixed, so pricing at atom j
    sells a fixed mass M and stays feasible up to max_fine_for_budget(v_j - R/M, k_j).
    """
    edges = np.unique(np.concatenate(([0.0, ceiling], crossings)))
    inner = (edges[:-1] + edges[1:]) / 2.0
    _, _, loss = response_arrays(effs[None, :], inner[:, None], 0.0)
    sale, _ = price_table(values[None, :] - loss, probs)
    fines = []
    for row in range(inner.size):
        for j in range(values.size):
            fine = max_fine_for_budget(float(values[j] - profit_floor / sale[row, j]), float(effs[j]))
            if 0.0 < fine <= ceiling:
                fines.append(fine)
    return fines


def _around(crossings: List[float]) -> np.ndarray:
    # just below a crossing an atom about to join is still out
    points = np.array(crossings)
    return np.concatenate((points, points * (1.0 - CROSSING_OFFSET), points * (1.0 + CROSSING_OFFSET)))


def _fine_rows(
    values: np.ndarray,
    effs: np.ndarray,
    probs: np.ndarray,
    members: np.ndarray,
    fines: np.ndarray,
    profit_floor: float,
    tolerance: float,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Prices every fine at the lowest post-value among `members` and reports
    (externality, price, feasible, induces exactly the members) per fine.
    """
    _, risk, loss = response_arrays(effs[None, :], fines[:, None], 0.0)
    post = values[None, :] - loss
    price = np.where(members[None, :], post, np.inf).min(axis=1)
    induced = post >= price[:, None] - TIE_TOLERANCE
    sale = induced @ probs
    feasible = (price >= 0) & (sale > 0) & (price * sale >= profit_floor - tolerance)
    with np.errstate(divide="ignore", invalid="ignore"):
        externality = (induced * risk) @ probs / sale
    exact = (induced == members[None, :]).all(axis=1)
    return externality, price, feasible, exact


def _best_fine_for_members(
    values: np.ndarray,
    effs: np.ndarray,
    probs: np.ndarray,
    members: np.ndarray,
    profit_floor: float,
    config: SolverConfig,
    require_exact: bool = False,
    extra_fines: Optional[np.ndarray] = None,
) -> Optional[_Candidate]:
    mass = math.fsum(probs[members])
    budgets = values[members] - profit_floor / mass
    if budgets.min() < -config.tolerance:
        return None

    top = min(
        max_fine_for_budget(max(budget, 0.0), eff)
        for budget, eff in zip(budgets, effs[members])
    )
    top = min(top, FINE_CAP)
    fines = np.concatenate(([0.0], top * np.geomspace(1e-6, 1.0, config.bracket_points)))
    if extra_fines is not None:
        fines = np.unique(np.concatenate((fines, extra_fines[extra_fines <= top])))
    externality, price, feasible, exact = _fine_rows(
        values, effs, probs, members, fines, profit_floor, config.tolerance
    )

    best = None
    usable = feasible & exact if require_exact else feasible
    for row in np.flatnonzero(usable):
        best = _pick(
            best,
            _Candidate(float(externality[row]), float(fines[row]), 0.0, float(price[row])),
        )

    # Within one purchase set the externality falls as the fine grows, so push the
    # largest fine that still induces exactly the members up to its boundary.
    exact_rows = np.flatnonzero(feasible & exact)
    if exact_rows.size and exact_rows[-1] + 1 < fines.size:
        lo, hi = fines[exact_rows[-1]], fines[exact_rows[-1] + 1]
        for _ in range(config.refine_iters):
            mid = np.array([(lo + hi) / 2.0])
            _, _, mid_feasible, mid_exact = _fine_rows(
                values, effs, probs, members, mid, profit_floor, config.tolerance
            )
            if mid_feasible[0] and mid_exact[0]:
                lo = mid[0]
            else:
                hi = mid[0]
        edge = np.array([lo])
        edge_ext, edge_price, _, _ = _fine_rows(
            values, effs, probs, members, edge, profit_floor, config.tolerance
        )
        best = _pick(best, _Candidate(float(edge_ext[0]), float(lo), 0.0, float(edge_price[0])))
    return best


def _scan(
    values: np.ndarray,
    effs: np.ndarray,
    probs: np.ndarray,
    fines: np.ndarray,
    costs: np.ndarray,
    profit_floor: float,
    tolerance: float,
) -> Optional[_Candidate]:
    best = None
    for fine in fines:
        _, risk, loss = response_arrays(effs[None, :], fine, costs[:, None])
        post = values[None, :] - loss
        externality, price, feasible = cheapest_feasible_prices(
            post, probs, risk, costs, profit_floor, tolerance
        )
        if not feasible.any():
            continue
        lowest = externality.min()
        row = int(np.flatnonzero(externality <= lowest + TIE_TOLERANCE)[0])
        best = _pick(
            best,
            _Candidate(float(externality[row]), float(fine), float(costs[row]), float(price[row])),
        )
    return best


def _neighbours(grid: np.ndarray, x: float) -> Tuple[float, float]:
    index = int(np.searchsorted(grid, x))
    lo = grid[index - 1] if index > 0 else 0.0
    if index < grid.size and grid[index] == x:
        index += 1
    hi = grid[index] if index < grid.size else x * 1.5 + 1e-12
    return float(lo), float(hi)


def _refine(
    values: np.ndarray,
    effs: np.ndarray,
    probs: np.ndarray,
    best: _Candidate,
    fine_bracket: Tuple[float, float],
    cost_bracket: Tuple[float, float],
    profit_floor: float,
    config: SolverConfig,
) -> _Candidate:
    """Repeatedly scans a small grid around the incumbent and halves the bracket."""
    (y_lo, y_hi), (c_lo, c_hi) = fine_bracket, cost_bracket
    for _ in range(config.refine_iters):
        fines = np.linspace(y_lo, y_hi, REFINE_POINTS)
        costs = np.linspace(c_lo, c_hi, REFINE_POINTS) if c_hi > c_lo else np.array([c_lo])
        best = _pick(best, _scan(values, effs, probs, fines, costs, profit_floor, config.tolerance))
        y_half, c_half = (y_hi - y_lo) / 4.0, (c_hi - c_lo) / 4.0
        y_lo, y_hi = max(0.0, best.fine - y_half), best.fine + y_half
        c_lo, c_hi = max(0.0, best.cost - c_half), best.cost + c_half
    return best


def _exact_fine(instance: Instance, config: SolverConfig) -> Optional[_Candidate]:
    values, effs, probs = instance.population.joint_arrays()
    extra = None
    if instance.population.size <= EVENT_ATOM_LIMIT:
        extra = _around(_crossing_fines(values, effs, fine_ceiling(values, effs)))
    best = None
    for members in upward_closed_sets(*instance.population.shape):
        best = _pick(
            best,
            _best_fine_for_members(
                values, effs, probs, members, instance.profit_floor, config, extra_fines=extra
            ),
        )
    return best


def _grid_fine(instance: Instance, config: SolverConfig) -> Optional[_Candidate]:
    """
    Scans the log grid, continued up to the largest fine any buyer tolerates, and
    refines around the winner. Small populations also scan their event fines.
    """
    values, effs, probs = instance.population.joint_arrays()
    ceiling = fine_ceiling(values, effs)
    fines = config.fine_grid(ceiling)
    if instance.population.size <= EVENT_ATOM_LIMIT:
        crossings = _crossing_fines(values, effs, ceiling)
        floors = _floor_fines(values, effs, probs, crossings, instance.profit_floor, ceiling)
        fines = np.unique(np.concatenate((fines, _around(crossings), floors)))
    best = _scan(values, effs, probs, fines, np.array([0.0]), instance.profit_floor, config.tolerance)
    if best is None:
        return None
    LOG.debug("Fine grid scanned", points=fines.size, ceiling=ceiling, candidate=best)
    return _refine(
        values, effs, probs, best, _neighbours(fines, best.fine), (0.0, 0.0),
        instance.profit_floor, config,
    )


def best_fine_policy(instance: Instance, config: Optional[SolverConfig] = None) -> SolveResult:
    """
    Small populations enumerate every purchase set a fine policy can induce. Larger
    ones fall back to a fine grid with exact pricing and local refinement.
    """
    config = config or SolverConfig()
    if instance.population.size <= config.exact_atom_limit:
        candidate, method = _exact_fine(instance, config), SolveMethod.EXACT
    else:
        candidate, method = _grid_fine(instance, config), SolveMethod.GRID
    if candidate is None:
        raise InfeasibleInstanceError("No fine policy reaches the profit floor")
    LOG.debug("Solved fine policy", method=method.value, candidate=candidate)
    return _result(instance, candidate, method, config)


def best_fine_policy_for_set(
    instance: Instance,
    members: Iterable[Tuple[float, float]],
    config: Optional[SolverConfig] = None,
) -> SolveResult:
    """
    Best fine policy among those whose purchase set is exactly `members`, given as
    (v, k) types of the population.
    """
    config = config or SolverConfig()
    values, effs, probs = instance.population.joint_arrays()
    wanted = set(members)
    mask = np.array([(v, k) in wanted for v, k in zip(values, effs)], dtype=bool)
    if int(mask.sum()) != len(wanted):
        raise PreconditionError(f"Some of {sorted(wanted)} are not atoms of the population")

    candidate = _best_fine_for_members(
        values, effs, probs, mask, instance.profit_floor, config, require_exact=True
    )
    if candidate is None:
        raise InfeasibleInstanceError(
            f"No fine policy sells exactly to {sorted(wanted)} and reaches the profit floor"
        )
    return _result(instance, candidate, SolveMethod.EXACT, config)


def best_general_policy(instance: Instance, config: Optional[SolverConfig] = None) -> SolveResult:
    """
    Heuristic search over all policies. The (y, c) grid is priced exactly per cell,
    seeded with both simple optima and refined around the winner, so the result is
    never worse than the best simple policy.
    """
    config = config or SolverConfig()
    values, effs, probs = instance.population.joint_arrays()

    best = None
    for seed in (best_cost_policy(instance, config), best_fine_policy(instance, config)):
        if seed.feasible:
            best = _pick(
                best,
                _Candidate(seed.externality, seed.policy.fine, seed.policy.cost, seed.policy.price),
            )

    fines = config.fine_grid()
    costs = config.cost_grid(instance.population.values)
    best = _pick(best, _scan(values, effs, probs, fines, costs, instance.profit_floor, config.tolerance))
    if best is None:
        raise InfeasibleInstanceError("No policy on the grid reaches the profit floor")

    best = _refine(
        values, effs, probs, best,
        _neighbours(fines, best.fine), _neighbours(costs, best.cost),
        instance.profit_floor, config,
    )
    LOG.debug("Solved general policy", candidate=best)
    return _result(instance, best, SolveMethod.GRID, config)
