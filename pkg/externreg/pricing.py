"""
Price tables over the finite set of candidate prices.

For a fixed (y, c) the purchase set only changes when the price crosses some
buyer's post-value v - loss, so every price between two post-values is dominated
by the higher one. The functions here work on many (y, c) rows at once: `post` and
`risk` are (rows, atoms) arrays, `probs` holds the joint atom probabilities.
"""
from typing import *

import numpy as np

from externreg.enumerations import ExternalityMode
from externreg.model import TIE_TOLERANCE

# Upper bound on rows * atoms * atoms booleans materialised per block.
CELL_BUDGET = 2_000_000


def price_table(
    post: np.ndarray, probs: np.ndarray, risk: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """
    For every row r and candidate j returns the sale probability and the
    compromised mass when the price is post[r, j]. Indifferent buyers purchase.
    """
    post = np.atleast_2d(post)
    rows, n_atoms = post.shape
    weighted_risk = None if risk is None else np.atleast_2d(risk) * probs
    sale = np.empty((rows, n_atoms))
    compromised = np.zeros((rows, n_atoms))
    block_rows = max(1, CELL_BUDGET // max(1, n_atoms * n_atoms))

    for start in range(0, rows, block_rows):
        stop = start + block_rows
        block = post[start:stop]
        # buys[r, j, i]: atom i purchases when the price is candidate j
        buys = (block[:, None, :] >= block[:, :, None] - TIE_TOLERANCE).astype(float)
        sale[start:stop] = buys @ probs
        if weighted_risk is not None:
            compromised[start:stop] = np.einsum(
                "rji,ri->rj", buys, weighted_risk[start:stop]
            )
    return sale, compromised


def best_response_prices(
    post: np.ndarray, probs: np.ndarray, cost: Union[float, np.ndarray]
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Profit maximising price per row, ties toward the lower price. Rows where every
    post-value is negative price at 0 and sell nothing.
    """
    post = np.atleast_2d(post)
    cost = np.broadcast_to(np.asarray(cost, dtype=float), (post.shape[0],))
    sale, _ = price_table(post, probs)
    profit = np.where(post >= 0, (post - cost[:, None]) * sale, -np.inf)
    best_profit = profit.max(axis=1)
    ties = profit >= best_profit[:, None] - TIE_TOLERANCE
    price = np.where(ties, post, np.inf).min(axis=1)

    nobody = ~np.isfinite(best_profit)
    price = np.where(nobody, 0.0, price)
    best_profit = np.where(nobody, 0.0, best_profit)
    return price, best_profit


def cheapest_feasible_prices(
    post: np.ndarray,
    probs: np.ndarray,
    risk: np.ndarray,
    cost: Union[float, np.ndarray],
    floor: float,
    tolerance: float,
    mode: ExternalityMode = ExternalityMode.CONDITIONAL,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Per row, the externality minimising price among those keeping the profit at
    least `floor - tolerance`. Returns (externality, price, feasible); infeasible
    rows carry an infinite externality. Ties go to the lower price.
    """
    post = np.atleast_2d(post)
    risk = np.atleast_2d(risk)
    cost = np.broadcast_to(np.asarray(cost, dtype=float), (post.shape[0],))
    sale, compromised = price_table(post, probs, risk)
    profit = (post - cost[:, None]) * sale
    allowed = (post >= 0) & (sale > 0) & (profit >= floor - tolerance)

    with np.errstate(divide="ignore", invalid="ignore"):
        if mode is ExternalityMode.TOTAL:
            externality = compromised
        else:
            externality = compromised / sale
    externality = np.where(allowed, externality, np.inf)

    best = externality.min(axis=1)
    ties = allowed & (externality <= best[:, None] + TIE_TOLERANCE)
    price = np.where(ties, post, np.inf).min(axis=1)
    feasible = np.isfinite(best)
    return best, np.where(feasible, price, np.nan), feasible
