from enum import Enum, unique


@unique
class ExternalityMode(Enum):
    # expected risk among purchasers
    CONDITIONAL = "conditional"
    # expected compromised mass over the whole population
    TOTAL = "total"


@unique
class SolveMethod(Enum):
    EXACT = "exact-enumeration"
    GRID = "grid"


@unique
class ApproxBranch(Enum):
    COST1_FULL = "Cost1-full"
    COST1_EPS12 = "Cost1-eps12"
    FINE_INV = "Fine-Inv"
    FINE_BLOWUP_GOOD = "Fine-BlowupGood"
    FINE_HEAVY = "Fine-Heavy"
    FINE_COST1 = "Fine-Cost1"
    FINE_COST3 = "Fine-Cost3"
    FINE_BLOWUP_FALLBACK = "Fine-BlowupFallback"
